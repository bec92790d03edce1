import numpy as np
import pytest

from graphssl.graph import generate_sbm, normalize_adjacency
from graphssl.tasks import PRETEXTS, make_pretext
from graphssl.trainer import (TrainConfig, TrainingDiverged, _joint, few_label_split, gcn_dropped,
                              param_hash, preprocess_features, probe_pretext,
                              self_training_baseline, summarize, train_joint, train_task,
                              train_two_stage)

FAST = dict(epochs=30, hidden=16)
# tasks whose model input (graph and features) is the plain input
SAME_INPUT = [t for t in PRETEXTS if t not in ("edgemask", "attributemask")]


def same_trajectory(a, b):
    return (a.train_loss == b.train_loss and a.val_acc == b.val_acc and a.train_acc == b.train_acc
            and a.best_epoch == b.best_epoch and a.test_acc == b.test_acc)


def test_config_defaults():
    c = TrainConfig()
    assert (c.epochs, c.lr, c.weight_decay, c.hidden, c.dropout, c.lam) == (200, 0.01, 5e-4, 128, 0.5, 0)
    assert c.arch == "2GC" and c.two_stage_strategy == "none"
    with pytest.raises(ValueError):
        TrainConfig(lam=-1)
    with pytest.raises(ValueError):
        TrainConfig(two_stage_strategy="freeze")


@pytest.mark.parametrize("task", SAME_INPUT)
def test_lambda_zero_is_plain_gcn(sbm, task):
    g, masks = sbm
    base = train_joint(g, masks, None, TrainConfig(**FAST))
    joint = train_task(g, masks, task, TrainConfig(lam=0.0, **FAST))
    assert same_trajectory(base, joint)


def test_lambda_zero_edgemask_is_dropped_graph(sbm):
    g, masks = sbm
    a = train_task(g, masks, "edgemask", TrainConfig(lam=0.0, **FAST), m_e=8)
    b = gcn_dropped(g, masks, TrainConfig(**FAST), m_e=8)
    assert same_trajectory(a, b)


def test_dropped_graph_with_no_masked_edges_is_gcn(sbm):
    g, masks = sbm
    a = gcn_dropped(g, masks, TrainConfig(**FAST), m_e=0)
    b = train_task(g, masks, "gcn", TrainConfig(**FAST))
    assert same_trajectory(a, b)


def test_reproducible(sbm):
    g, masks = sbm
    cfg = TrainConfig(lam=2.0, **FAST)
    a = train_task(g, masks, "pairwisedistance", cfg)
    b = train_task(g, masks, "pairwisedistance", cfg)
    assert same_trajectory(a, b)


def test_seed_changes_run(sbm):
    g, masks = sbm
    a = train_task(g, masks, "gcn", TrainConfig(seed=0, **FAST))
    b = train_task(g, masks, "gcn", TrainConfig(seed=1, **FAST))
    assert a.train_loss != b.train_loss


def test_model_selection_earliest_best(sbm):
    g, masks = sbm
    r = train_task(g, masks, "gcn", TrainConfig(**FAST))
    assert r.best_val_acc == max(r.val_acc)
    assert r.best_epoch == r.val_acc.index(max(r.val_acc))
    assert len(r.train_loss) == len(r.val_acc) == 30
    assert 0.0 <= r.test_acc <= 1.0


def test_test_accuracy_uses_best_state(sbm):
    g, masks = sbm
    run = _joint(g, masks, None, TrainConfig(**FAST))
    logits, _ = run.model.predict(run.adj, run.x)
    assert np.mean(np.argmax(logits[masks.val], 1) == g.labels[masks.val]) == run.result.best_val_acc
    assert np.mean(np.argmax(logits[masks.test], 1) == g.labels[masks.test]) == run.result.test_acc


def test_patience_stops_early(sbm):
    g, masks = sbm
    r = train_task(g, masks, "gcn", TrainConfig(epochs=200, hidden=16, patience=3))
    assert len(r.val_acc) < 200
    assert len(r.val_acc) - 1 - r.best_epoch == 3


def test_evaluation_does_not_mutate(sbm):
    g, masks = sbm
    run = _joint(g, masks, None, TrainConfig(epochs=3, hidden=8))
    h = param_hash(run.model.params.arrays)
    run.model.predict(run.adj, run.x)
    run.embeddings()
    assert param_hash(run.model.params.arrays) == h


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_context(sbm):
    g, masks = sbm
    with pytest.raises(TrainingDiverged, match=r"epoch 0.*lambda=1e\+308.*nodeproperty"):
        train_task(g, masks, "nodeproperty", TrainConfig(lam=1e308, **FAST))


@pytest.mark.parametrize("task", list(PRETEXTS))
def test_joint_loss_non_increasing_first_epochs(sbm, task):
    # dropout disabled: per-epoch mask noise makes single-step comparisons meaningless
    g, masks = sbm
    r = train_task(g, masks, task, TrainConfig(epochs=30, hidden=16, dropout=0.0, lam=1.0))
    loss = np.array(r.train_loss[:10])
    assert np.all(np.diff(loss) <= 0)


class TestTwoStage:
    def test_requires_strategy(self, sbm):
        g, masks = sbm
        with pytest.raises(ValueError):
            train_two_stage(g, masks, make_pretext("nodeproperty"), TrainConfig(**FAST))

    def test_incompatible_extractors(self, sbm):
        g, masks = sbm
        cfg = TrainConfig(two_stage_strategy="fix", pretrain_arch="2GC+1Linear", **FAST)
        with pytest.raises(ValueError, match="extractor"):
            train_two_stage(g, masks, make_pretext("nodeproperty"), cfg)

    def test_fix_without_pretraining_beats_chance(self, record_property):
        g, masks = generate_sbm([30, 30], 0.3, 0.01, 8, seed=1, noise=0.5)
        cfg = TrainConfig(two_stage_strategy="fix", pretrain_epochs=0, epochs=100, hidden=32)
        r = train_two_stage(g, masks, make_pretext("nodeproperty"), cfg)
        record_property("fix_random_extractor_test_acc", r.test_acc)
        assert r.test_acc > 0.5

    def test_fix_keeps_extractor(self, sbm):
        g, masks = sbm
        from graphssl import trainer
        seen = {}
        orig = trainer._Run.finish

        def spy(self, labels):
            seen.setdefault("frozen", self.frozen)
            seen["z"] = {k: v.copy() for k, v in self.model.params.theta_z.items()}
            return orig(self, labels)

        trainer._Run.finish = spy
        try:
            cfg = TrainConfig(two_stage_strategy="fix", pretrain_epochs=5, **FAST)
            train_two_stage(g, masks, make_pretext("nodeproperty"), cfg)
        finally:
            trainer._Run.finish = orig
        assert seen["frozen"] == {"z0.weight", "z0.bias"}

    def test_tune_all_without_pretraining_is_gcn(self, sbm):
        g, masks = sbm
        cfg = TrainConfig(two_stage_strategy="tune_all", pretrain_epochs=0, **FAST)
        a = train_two_stage(g, masks, make_pretext("nodeproperty"), cfg)
        b = train_joint(g, masks, None, TrainConfig(**FAST))
        assert same_trajectory(a, b)

    def test_pretraining_changes_result(self, sbm):
        g, masks = sbm
        cfg = TrainConfig(two_stage_strategy="tune_all", pretrain_epochs=20, **FAST)
        a = train_two_stage(g, masks, make_pretext("pairwisedistance"), cfg)
        b = train_joint(g, masks, None, TrainConfig(**FAST))
        assert a.train_loss != b.train_loss
        assert len(a.extras["pretrain_loss"]) == 20
        assert a.extras["pretrain_loss"][-1] < a.extras["pretrain_loss"][0]


class TestSelfTraining:
    def test_k_zero_is_gcn(self, sbm):
        g, masks = sbm
        a = self_training_baseline(g, masks, TrainConfig(**FAST), confidence_k=0)
        b = train_joint(g, masks, None, TrainConfig(**FAST))
        assert same_trajectory(a, b)

    def test_pseudo_labels(self, sbm):
        g, masks = sbm
        r = self_training_baseline(g, masks, TrainConfig(**FAST))
        added = set(r.extras["pseudo_labeled"])
        assert not added & set(masks.train.tolist())
        assert not added & set(masks.val.tolist())
        # default k = 2 * train-per-class, per predicted class
        assert 0 < len(added) <= 2 * 5 * g.num_classes


class TestFewLabel:
    def setup_method(self):
        self.g, _ = generate_sbm([25] * 7, 0.2, 0.01, 7, seed=0)

    def test_sizes(self):
        m5 = few_label_split(self.g, 5, 0)
        assert len(m5.train) == 35 and len(m5.val) == 35
        m10 = few_label_split(self.g, 10, 0)
        assert len(m10.train) == 70 and len(m10.val) == 70
        assert not set(m10.train) & set(m10.val)
        assert len(m10.test) == 175 - 140
        for c in range(7):
            assert np.sum(self.g.labels[m10.train] == c) == 10

    def test_distinct_and_deterministic(self):
        splits = [tuple(few_label_split(self.g, 5, s).train) for s in range(10)]
        assert len(set(splits)) == 10
        assert tuple(few_label_split(self.g, 5, 3).train) == splits[3]

    def test_insufficient(self):
        with pytest.raises(ValueError):
            few_label_split(self.g, 13, 0)


class TestProbe:
    def test_untrained_embeddings_and_raw_above_chance(self, record_property):
        g, masks = generate_sbm([30, 30], 0.3, 0.02, 8, seed=0, noise=0.5)
        raw = np.mean([probe_pretext(g, masks, "edgemask", "raw_features", TrainConfig(seed=s),
                                     m_e=200) for s in range(3)])
        emb = np.mean([probe_pretext(g, masks, "edgemask", "gcn_embeddings",
                                     TrainConfig(epochs=0, hidden=32, seed=s), m_e=200)
                       for s in range(3)])
        record_property("edgemask_probe_raw", float(raw))
        record_property("edgemask_probe_untrained_gcn", float(emb))
        assert raw > 0.5 and emb > 0.5

    def test_degree_leak(self, sbm):
        g, masks = sbm
        bins = np.clip(g.degrees(), 1, 4) - 1
        leak = g.with_features(np.eye(4)[bins])
        acc = probe_pretext(leak, masks, "nodeproperty", "raw_features", TrainConfig())
        assert acc == 1.0

    def test_unsupported(self, sbm):
        g, masks = sbm
        with pytest.raises(ValueError):
            probe_pretext(g, masks, "pairwiseattrsim", "raw_features", TrainConfig())
        with pytest.raises(ValueError):
            probe_pretext(g, masks, "edgemask", "pixels", TrainConfig())


def test_summarize():
    mean, sd = summarize([1.0, 2.0, 3.0])
    assert mean == 2.0 and sd == 1.0
    assert summarize([4.0]) == (4.0, 0.0)


def test_feature_normalization():
    x = np.array([[1.0, -3.0], [0.0, 0.0]])
    assert preprocess_features(x, "l1").tolist() == [[0.25, -0.75], [0.0, 0.0]]
    assert preprocess_features(x, "none").tolist() == x.tolist()


def test_unknown_task(sbm):
    g, masks = sbm
    with pytest.raises(ValueError, match="valid ids"):
        train_task(g, masks, "nodedegree", TrainConfig(**FAST))


def test_normalized_adjacency_unchanged_by_training(sbm):
    g, masks = sbm
    before = normalize_adjacency(g).toarray()
    train_task(g, masks, "edgemask", TrainConfig(lam=1.0, **FAST))
    assert np.array_equal(normalize_adjacency(g).toarray(), before)
