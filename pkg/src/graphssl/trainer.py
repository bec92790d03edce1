"""Training loops, baselines and the representation probe.

All training is full-batch. Model selection keeps the parameters of the
epoch with the best validation accuracy (earliest on ties); test accuracy is
computed once, on those parameters, after training ends.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from graphssl import ndops as ad
from graphssl.gcn import GCN, ArchConfig, load_checkpoint, save_checkpoint
from graphssl.graph import Graph, SplitMasks, normalize_adjacency
from graphssl.pretext import Pretext
from graphssl.rng import SeedStream
from graphssl.selftask import corrected_label_schedule
from graphssl.tasks import make_pretext


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    hidden: int = 128
    dropout: float = 0.5
    lam: float = 0.0
    arch: str = "2GC"
    seed: int = 0
    patience: int | None = None
    two_stage_strategy: str = "none"
    pretrain_arch: str = "1GC+1Linear"
    pretrain_epochs: int | None = None
    feature_norm: str = "l1"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.two_stage_strategy not in ("none", "fix", "tune_all"):
            raise ValueError(f"unknown two-stage strategy {self.two_stage_strategy!r}")
        if self.feature_norm not in ("l1", "none"):
            raise ValueError(f"unknown feature normalization {self.feature_norm!r}")

    def arch_config(self, name: str | None = None) -> ArchConfig:
        return ArchConfig.preset(name or self.arch, self.hidden, self.dropout)


@dataclass
class RunResult:
    seed: int
    config: dict
    train_loss: list = field(default_factory=list)
    task_loss: list = field(default_factory=list)
    ssl_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = 0.0
    test_acc: float = float("nan")
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def preprocess_features(x: np.ndarray, norm: str) -> np.ndarray:
    if norm == "none":
        return np.asarray(x, dtype=np.float64)
    s = np.abs(x).sum(axis=1, keepdims=True)
    return np.divide(x, s, out=np.zeros_like(x, dtype=np.float64), where=s > 0)


def accuracy(logits: np.ndarray, labels: np.ndarray, rows) -> float:
    rows = np.asarray(rows)
    if rows.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[rows], axis=1) == labels[rows]))


def param_hash(params: dict) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


_PCA_CACHE: dict = {}


def cached_pca(x: np.ndarray, d: int) -> np.ndarray:
    key = (hashlib.sha256(np.ascontiguousarray(x).tobytes()).hexdigest(), x.shape, d)
    if key not in _PCA_CACHE:
        _PCA_CACHE[key] = ad.pca_reduce(x, d)
    return _PCA_CACHE[key]


class _Run:
    """Mutable state of one training run."""

    def __init__(self, model: GCN, adj, x, labels, masks: SplitMasks, cfg: TrainConfig,
                 seeds: SeedStream, result: RunResult, pretext: Pretext | None = None,
                 train_rows=None, frozen: set | None = None, select: bool = True,
                 dropout_tag: str = "dropout", ssl_only: bool = False):
        self.model, self.adj, self.x = model, adj, x
        self.labels, self.masks, self.cfg = labels, masks, cfg
        self.seeds, self.result, self.pretext = seeds, result, pretext
        self.train_rows = masks.train if train_rows is None else np.asarray(train_rows)
        self.frozen = frozen or set()
        self.select = select
        self.dropout_tag = dropout_tag
        self.ssl_only = ssl_only
        self.state = ad.AdamState()
        self.epoch = 0
        self.best = None
        self.since_best = 0
        self.stopped = False

    def _loss(self, bound):
        m, cfg = self.model, self.cfg
        rng = self.seeds.rng(self.dropout_tag, self.epoch)
        z = m.forward_extract(self.adj, self.x, bound, True, rng)
        task = ssl = None
        if not self.ssl_only:
            logits = m.forward_classify(self.adj, z, bound, True, rng)
            task = ad.softmax_cross_entropy(logits, self.labels, self.train_rows)
        if self.pretext is not None and (self.ssl_only or "s.weight" in bound):
            ssl = self.pretext.loss(m, bound, z, self.epoch)
        if task is None:
            return ssl, None, ssl
        if ssl is None:
            return task, task, None
        return ad.total([(1.0, task), (cfg.lam, ssl)]), task, ssl

    def step(self) -> None:
        bound = self.model.bind()
        name = self.pretext.name if self.pretext is not None else "none"
        try:
            loss, task, ssl = self._loss(bound)
            loss.backward()
        except ad.NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at epoch {self.epoch} "
                                   f"(lambda={self.cfg.lam}, task={name}): {exc}") from exc
        if not np.isfinite(loss.value):
            raise TrainingDiverged(f"loss is {loss.value} at epoch {self.epoch} "
                                   f"(lambda={self.cfg.lam}, task={name})")
        params = self.model.params
        trainable = {k: v for k, v in params.arrays.items() if k not in self.frozen}
        grads = {k: bound[k].grad for k in trainable}
        ad.adam_step(trainable, grads, self.state, self.cfg.lr, self.cfg.weight_decay,
                     decay_keys=params.weight_names())
        r = self.result
        r.train_loss.append(float(loss.value))
        r.task_loss.append(float(task.value) if task is not None else float("nan"))
        r.ssl_loss.append(float(ssl.value) if ssl is not None else float("nan"))
        if self.select:
            self._evaluate()
        self.epoch += 1

    def _evaluate(self) -> None:
        logits, _ = self.model.predict(self.adj, self.x)
        r, masks = self.result, self.masks
        r.train_acc.append(accuracy(logits, self.labels, self.train_rows))
        val_acc = accuracy(logits, self.labels, masks.val)
        r.val_acc.append(val_acc)
        if masks.val.size:
            r.val_loss.append(float(ad.softmax_cross_entropy(logits, self.labels, masks.val).value))
        if self.best is None or val_acc > r.best_val_acc:
            self.best = self.model.params.copy()
            r.best_val_acc, r.best_epoch = val_acc, self.epoch
            self.since_best = 0
        else:
            self.since_best += 1
            if self.cfg.patience is not None and self.since_best >= self.cfg.patience:
                self.stopped = True

    def run(self, n: int) -> None:
        for _ in range(n):
            if self.stopped:
                return
            self.step()

    def embeddings(self) -> np.ndarray:
        return self.model.predict(self.adj, self.x)[1]

    def finish(self, true_labels: np.ndarray) -> RunResult:
        if self.best is not None:
            self.model.params = self.best
        logits, _ = self.model.predict(self.adj, self.x)
        self.result.test_acc = accuracy(logits, true_labels, self.masks.test)
        return self.result


def _prepare(g: Graph, masks: SplitMasks, pretext: Pretext | None, cfg: TrainConfig,
             seeds: SeedStream):
    x = preprocess_features(g.features, cfg.feature_norm)
    if pretext is None:
        return g, x
    pretext.setup(g, masks, x, seeds.child("pretext"))
    return pretext.input_graph(g), pretext.input_features(x)


def _config_dict(cfg: TrainConfig, pretext: Pretext | None, **extra) -> dict:
    d = asdict(cfg)
    d["pretext"] = pretext.name if pretext is not None else None
    for attr in ("labeler", "alpha", "rounds", "mask_ratio", "num_clusters", "hops"):
        if pretext is not None and hasattr(pretext, attr):
            d[attr] = getattr(pretext, attr)
    d.update(extra)
    return d


def _joint(g: Graph, masks: SplitMasks, pretext: Pretext | None, cfg: TrainConfig,
           train_labels=None, train_rows=None) -> _Run:
    seeds = SeedStream(cfg.seed)
    g_in, x_in = _prepare(g, masks, pretext, cfg, seeds)
    adj = normalize_adjacency(g_in)
    ssl_dim = pretext.output_dim if pretext is not None else None
    model = GCN(cfg.arch_config(), x_in.shape[1], g.num_classes, ssl_dim, seeds.child("model"))
    labels = g.labels if train_labels is None else np.asarray(train_labels)
    result = RunResult(cfg.seed, _config_dict(cfg, pretext))
    run = _Run(model, adj, x_in, labels, masks, cfg, seeds, result, pretext, train_rows)
    rounds = getattr(pretext, "rounds", None)
    if rounds:
        changes = corrected_label_schedule(run.run, lambda: pretext.correct(run.embeddings()),
                                           rounds, cfg.epochs)
        result.extras["label_changes"] = changes
    else:
        run.run(cfg.epochs)
    run.finish(g.labels)
    return run


def train_joint(g: Graph, masks: SplitMasks, pretext: Pretext | None, cfg: TrainConfig,
                train_labels=None, train_rows=None) -> RunResult:
    """Minimize task loss + lambda * pretext loss with a shared extractor."""
    return _joint(g, masks, pretext, cfg, train_labels, train_rows).result


def train_two_stage(g: Graph, masks: SplitMasks, pretext: Pretext | None, cfg: TrainConfig) -> RunResult:
    """Pretrain extractor + SSL head on the pretext alone, then train the task model."""
    if cfg.two_stage_strategy == "none":
        raise ValueError("train_two_stage needs strategy 'fix' or 'tune_all'")
    seeds = SeedStream(cfg.seed)
    g_in, x_in = _prepare(g, masks, pretext, cfg, seeds)
    adj = normalize_adjacency(g_in)
    pre_arch, down_arch = cfg.arch_config(cfg.pretrain_arch), cfg.arch_config()
    if pre_arch.extractor_layers != down_arch.extractor_layers:
        raise ValueError(f"extractor of {cfg.pretrain_arch} does not match {cfg.arch}")
    pre_epochs = cfg.epochs if cfg.pretrain_epochs is None else cfg.pretrain_epochs
    result = RunResult(cfg.seed, _config_dict(cfg, pretext, pretrain_epochs=pre_epochs))

    ssl_dim = pretext.output_dim if pretext is not None else None
    pre = GCN(pre_arch, x_in.shape[1], g.num_classes, ssl_dim, seeds.child("model"))
    if pre_epochs:
        if pretext is None:
            raise ValueError("pretraining needs a pretext task")
        stage1 = _Run(pre, adj, x_in, g.labels, masks, cfg, seeds, RunResult(cfg.seed, {}),
                      pretext, select=False, dropout_tag="pretrain-dropout", ssl_only=True)
        stage1.run(pre_epochs)
        result.extras["pretrain_loss"] = stage1.result.train_loss
    blob = save_checkpoint(pre.params.theta_z, pre_arch.name)

    down = GCN(down_arch, x_in.shape[1], g.num_classes, None, seeds.child("model"))
    _, theta_z = load_checkpoint(blob)
    for k, v in theta_z.items():
        if down.params.arrays[k].shape != v.shape:
            raise ValueError(f"checkpoint tensor {k} has shape {v.shape}, "
                             f"model expects {down.params.arrays[k].shape}")
        down.params.arrays[k] = v
    frozen = set(theta_z) if cfg.two_stage_strategy == "fix" else set()
    run = _Run(down, adj, x_in, g.labels, masks, cfg, seeds, result, None, frozen=frozen)
    run.run(cfg.epochs)
    return run.finish(g.labels)


def train_task(g: Graph, masks: SplitMasks, task_id: str, cfg: TrainConfig, **options) -> RunResult:
    """Dispatch a task id (baseline or pretext) to the matching trainer."""
    if task_id == "gcn":
        return train_joint(g, masks, None, cfg)
    if task_id == "gcn-dropped":
        return gcn_dropped(g, masks, cfg, **options)
    if task_id == "gcn-pca":
        return gcn_pca(g, masks, cfg, d_pca=options.get("d_pca") or 256)
    if task_id == "self-training":
        return self_training_baseline(g, masks, cfg, options.get("confidence_k"))
    pretext = make_pretext(task_id, **options)
    if cfg.two_stage_strategy != "none":
        return train_two_stage(g, masks, pretext, cfg)
    return train_joint(g, masks, pretext, cfg)


def gcn_dropped(g: Graph, masks: SplitMasks, cfg: TrainConfig, mask_ratio: float = 0.1,
                m_e: int | None = None, **_) -> RunResult:
    """Plain GCN on the graph with the EdgeMask edges removed."""
    em = make_pretext("edgemask", mask_ratio=mask_ratio, m_e=m_e)
    x = preprocess_features(g.features, cfg.feature_norm)
    em.setup(g, masks, x, SeedStream(cfg.seed).child("pretext"))
    result = train_joint(em.input_graph(g), masks, None, cfg)
    result.config["model"] = "gcn-dropped"
    return result


def gcn_pca(g: Graph, masks: SplitMasks, cfg: TrainConfig, d_pca: int = 256) -> RunResult:
    """Plain GCN on PCA-reduced features."""
    x = preprocess_features(g.features, cfg.feature_norm)
    d = min(d_pca, *x.shape)
    reduced = g.with_features(cached_pca(x, d))
    result = train_joint(reduced, masks, None, replace(cfg, feature_norm="none"))
    result.config["model"] = "gcn-pca"
    return result


def self_training_baseline(g: Graph, masks: SplitMasks, cfg: TrainConfig,
                           confidence_k: int | None = None) -> RunResult:
    """Train, add the most confident predictions per class as pseudo-labels, retrain."""
    if confidence_k is None:
        confidence_k = 2 * max(1, len(masks.train) // g.num_classes)
    first_run = _joint(g, masks, None, cfg)
    first = first_run.result
    if confidence_k == 0:
        first.extras["pseudo_labeled"] = []
        return first
    logits, _ = first_run.model.predict(first_run.adj, first_run.x)
    probs = ad.softmax(logits)
    pred, conf = probs.argmax(axis=1), probs.max(axis=1)
    blocked = np.zeros(g.num_nodes, dtype=bool)
    blocked[masks.train] = True
    blocked[masks.val] = True
    added = []
    for c in range(g.num_classes):
        cand = np.flatnonzero((pred == c) & ~blocked)
        order = np.lexsort((cand, -conf[cand]))
        added.extend(cand[order[:confidence_k]].tolist())
    added = np.array(sorted(added), dtype=np.int64)
    labels = g.labels.copy()
    labels[added] = pred[added]
    rows = np.concatenate([masks.train, added])
    result = train_joint(g, masks, None, cfg, train_labels=labels, train_rows=rows)
    result.config["model"] = "self-training"
    result.extras["pseudo_labeled"] = added.tolist()
    result.extras["first_stage_test_acc"] = first.test_acc
    return result


def few_label_split(g: Graph, n_per_class: int, seed: int) -> SplitMasks:
    """n training and n validation nodes per class; every other labeled node tests."""
    rng = SeedStream(seed).rng("few-label")
    train, val = [], []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if len(members) < 2 * n_per_class:
            raise ValueError(f"class {c} has {len(members)} labeled nodes, "
                             f"needs {2 * n_per_class}")
        perm = rng.permutation(members)
        train.extend(perm[:n_per_class].tolist())
        val.extend(perm[n_per_class:2 * n_per_class].tolist())
    used = np.zeros(g.num_nodes, dtype=bool)
    used[train] = used[val] = True
    test = np.flatnonzero(~used & (g.labels >= 0))
    masks = SplitMasks(np.sort(train), np.sort(val), test)
    masks.validate(g)
    return masks


PROBE_TASKS = ("edgemask", "nodeproperty", "pairwisedistance")


def probe_pretext(g: Graph, masks: SplitMasks, task_id: str, representation: str,
                  cfg: TrainConfig, **options) -> float:
    """Accuracy of a logistic-regression probe predicting pretext labels.

    ``representation`` is ``raw_features`` or ``gcn_embeddings`` (extractor
    output of a GCN trained without any pretext).
    """
    if task_id not in PROBE_TASKS:
        raise ValueError(f"probe supports {PROBE_TASKS}, got {task_id!r}")
    seeds = SeedStream(cfg.seed)
    x = preprocess_features(g.features, cfg.feature_norm)
    if representation == "raw_features":
        rep = x
    elif representation == "gcn_embeddings":
        run = _joint(g, masks, None, cfg)
        rep = run.embeddings()
    else:
        raise ValueError(f"unknown representation {representation!r}")
    pretext = make_pretext(task_id, **options)
    pretext.setup(g, masks, x, seeds.child("pretext"))
    return probe_accuracy(rep, *pretext.classification_instances(seeds.child("probe")),
                          seeds.rng("probe-split"))


def probe_accuracy(rep: np.ndarray, instances: np.ndarray, labels: np.ndarray,
                   rng: np.random.Generator) -> float:
    """Fit on a random 80% of the instances, score on the remaining 20%."""
    instances = np.asarray(instances)
    if instances.ndim == 2:
        feats = np.abs(rep[instances[:, 0]] - rep[instances[:, 1]])
    else:
        feats = rep[instances]
    labels = np.asarray(labels, dtype=np.int64)
    perm = rng.permutation(len(labels))
    cut = int(round(0.8 * len(labels)))
    fit_rows, test_rows = perm[:cut], perm[cut:]
    clf = ad.LogisticRegression(int(labels.max()) + 1).fit(feats, labels, fit_rows)
    return float(np.mean(clf.predict(feats[test_rows]) == labels[test_rows]))


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
