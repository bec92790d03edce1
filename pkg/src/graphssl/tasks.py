"""Task identifiers used by the trainer and the command line."""

from __future__ import annotations

from graphssl import pretext as pt
from graphssl import selftask as st

PRETEXTS = {
    "nodeproperty": pt.NodeProperty,
    "edgemask": pt.EdgeMask,
    "pairwisedistance": pt.PairwiseDistance,
    "distance2clusters": pt.Distance2Clusters,
    "attributemask": pt.AttributeMask,
    "pairwiseattrsim": pt.PairwiseAttrSim,
    "distance2labeled": st.Distance2Labeled,
    "contextlabel": st.ContextLabel,
    "ensemblelabel": st.EnsembleLabel,
    "correctedlabel": st.CorrectedLabel,
}
BASELINES = ("gcn", "gcn-dropped", "gcn-pca", "self-training")

# options each task accepts (anything else in a spec is ignored for that task)
_OPTIONS = {
    "edgemask": {"mask_ratio", "m_e"},
    "pairwisedistance": {"num_pairs"},
    "distance2clusters": {"num_clusters", "partition"},
    "attributemask": {"mask_ratio", "m_a", "d_pca", "pca"},
    "pairwiseattrsim": {"k_pairs"},
    "contextlabel": {"labeler", "hops"},
    "ensemblelabel": {"hops"},
    "correctedlabel": {"labeler", "hops", "alpha", "rounds", "m", "p"},
}


def valid_ids() -> list[str]:
    ids = list(BASELINES) + list(PRETEXTS)
    ids += [f"{t}-{lab}" for t in ("contextlabel", "correctedlabel") for lab in ("lp", "ica")]
    return ids


def parse_task(task_id: str) -> tuple[str, dict]:
    """Split ``correctedlabel-lp`` style ids into (base id, implied options)."""
    tid = task_id.lower()
    for base in ("contextlabel", "correctedlabel"):
        for lab in ("lp", "ica"):
            if tid == f"{base}-{lab}":
                return base, {"labeler": lab}
    if tid in PRETEXTS or tid in BASELINES:
        return tid, {}
    raise ValueError(f"unknown task {task_id!r}; valid ids: {', '.join(valid_ids())}")


def make_pretext(task_id: str, **options) -> pt.Pretext:
    base, implied = parse_task(task_id)
    if base not in PRETEXTS:
        raise ValueError(f"{task_id!r} is a baseline, not a pretext task")
    allowed = _OPTIONS.get(base, set())
    kwargs = {k: v for k, v in {**options, **implied}.items() if k in allowed and v is not None}
    return PRETEXTS[base](**kwargs)
