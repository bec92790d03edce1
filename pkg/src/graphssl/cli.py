"""Command-line experiment runner.

Verbs::

    graphssl run <spec.json> [overrides]
    graphssl probe <spec.json> [overrides]
    graphssl convert-partition <file> [--out PATH]
    graphssl gen-sbm <params.json | inline JSON> --out PATH

Every failure exits nonzero and prints one JSON object to stderr with
``error`` and ``message`` keys.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from graphssl.graph import (Graph, GraphFormatError, SplitMasks, generate_sbm, load_dataset,
                            load_partition, save_dataset)
from graphssl.tasks import BASELINES, parse_task
from graphssl.trainer import (PROBE_TASKS, TrainConfig, few_label_split, probe_pretext, summarize,
                              train_task)

STRATEGIES = {"joint": "none", "two-stage:fix": "fix", "two-stage:tune_all": "tune_all"}
REPRESENTATIONS = ("raw_features", "gcn_embeddings")
_CONFIG_KEYS = {f.name for f in fields(TrainConfig)} - {"lam", "seed", "two_stage_strategy"}


class SpecError(ValueError):
    pass


@dataclass
class ExperimentSpec:
    dataset: str | dict
    tasks: list
    strategy: str = "joint"
    lambdas: list = field(default_factory=lambda: [1.0])
    alphas: list = field(default_factory=lambda: [1.0])
    seeds: list = field(default_factory=lambda: list(range(10)))
    few_label: int | None = None
    output: str = "results"
    name: str | None = None
    config: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)
    representations: list = field(default_factory=lambda: list(REPRESENTATIONS))

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentSpec":
        if not isinstance(obj, dict):
            raise SpecError("spec must be a JSON object")
        obj = dict(obj)
        if "task" in obj:
            if "tasks" in obj:
                raise SpecError("give either 'task' or 'tasks', not both")
            obj["tasks"] = [obj.pop("task")]
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise SpecError(f"unknown spec fields: {', '.join(unknown)}")
        if "dataset" not in obj:
            raise SpecError("spec needs a 'dataset' (path or {\"sbm\": {...}})")
        if "tasks" not in obj:
            raise SpecError("spec needs 'task' or 'tasks'")
        spec = cls(**obj)
        spec.validate()
        return spec

    def validate(self) -> None:
        if isinstance(self.tasks, str):
            self.tasks = [self.tasks]
        if not self.tasks:
            raise SpecError("tasks: empty list")
        for t in self.tasks:
            parse_task(t)
        if self.strategy not in STRATEGIES:
            raise SpecError(f"strategy: expected one of {sorted(STRATEGIES)}, got {self.strategy!r}")
        if self.strategy != "joint":
            bad = [t for t in self.tasks if parse_task(t)[0] in BASELINES]
            if bad:
                raise SpecError(f"baselines {bad} only run with strategy 'joint'")
        for name in ("lambdas", "alphas", "seeds"):
            if not getattr(self, name):
                raise SpecError(f"{name}: grid must be non-empty")
        if any(float(v) < 0 for v in self.lambdas):
            raise SpecError("lambdas: values must be >= 0")
        unknown = sorted(set(self.config) - _CONFIG_KEYS)
        if unknown:
            raise SpecError(f"config: unknown keys {unknown}")
        for r in self.representations:
            if r not in REPRESENTATIONS:
                raise SpecError(f"representations: unknown {r!r}")

    @property
    def dataset_name(self) -> str:
        if self.name:
            return self.name
        if isinstance(self.dataset, str):
            return Path(self.dataset).stem
        return "sbm"


def load_data(source: str | dict, base: Path) -> tuple[Graph, SplitMasks]:
    """Load Graph-JSON from a path, or generate from ``{"sbm": {...}}``."""
    if isinstance(source, dict):
        if set(source) != {"sbm"}:
            raise SpecError("dataset object must be {\"sbm\": {...}}")
        return sbm_from_params(source["sbm"])
    path = Path(source)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return load_dataset(path)


def sbm_from_params(params: dict) -> tuple[Graph, SplitMasks]:
    p = dict(params)
    try:
        blocks = p.pop("blocks")
        p_in, p_out = p.pop("p_in"), p.pop("p_out")
    except KeyError as exc:
        raise SpecError(f"sbm: missing field {exc.args[0]!r}") from None
    dim = p.pop("feature_dim", len(blocks))
    seed = p.pop("seed", 0)
    allowed = {"noise", "train_per_class", "val_per_class"}
    if set(p) - allowed:
        raise SpecError(f"sbm: unknown fields {sorted(set(p) - allowed)}")
    return generate_sbm(blocks, p_in, p_out, dim, seed, **p)


# --------------------------------------------------------------------------
# job expansion

@dataclass(frozen=True)
class Job:
    task: str
    lam: float
    alpha: float | None
    seed: int

    @property
    def run_id(self) -> str:
        a = "na" if self.alpha is None else _num(self.alpha)
        return f"{self.task}_lam{_num(self.lam)}_alpha{a}_seed{self.seed}"


def _num(v) -> str:
    return repr(float(v))


def _grid(spec: ExperimentSpec, task: str) -> list[tuple[float, float | None]]:
    base, _ = parse_task(task)
    lams = [0.0] if base in BASELINES or spec.strategy != "joint" else [float(v) for v in spec.lambdas]
    alphas = [float(a) for a in spec.alphas] if base == "correctedlabel" else [None]
    return [(lam, a) for lam in lams for a in alphas]


def expand_jobs(spec: ExperimentSpec) -> list[Job]:
    return [Job(t, lam, a, int(s)) for t in spec.tasks for lam, a in _grid(spec, t) for s in spec.seeds]


# state shared with worker processes, set once per pool
_STATE: dict = {}


def _init_worker(g, masks, spec, base):
    _STATE.update(g=g, masks=masks, spec=spec, base=base)


def _execute(job: Job) -> dict:
    g, masks, spec, base = _STATE["g"], _STATE["masks"], _STATE["spec"], _STATE["base"]
    if spec.few_label is not None:
        masks = few_label_split(g, int(spec.few_label), job.seed)
    cfg = TrainConfig(lam=job.lam, seed=job.seed,
                      two_stage_strategy=STRATEGIES[spec.strategy], **spec.config)
    options = dict(spec.options)
    if isinstance(options.get("partition"), str):
        options["partition"] = load_partition(base / options["partition"], g.num_nodes)
    if job.alpha is not None:
        options["alpha"] = job.alpha
    result = train_task(g, masks, job.task, cfg, **options).to_dict()
    result.update(run_id=job.run_id, task=job.task, lam=job.lam, alpha=job.alpha,
                  dataset=spec.dataset_name)
    return result


def _map(fn, items, workers: int, init_args) -> list:
    """Run ``fn`` over ``items``; results come back in input order."""
    if workers <= 1:
        _init_worker(*init_args)
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=init_args) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# reports

def _csv_text(header: list, rows: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _aggregate(results: list) -> dict:
    """(task, λ, α) -> dict of val/test lists, in first-seen order."""
    groups: dict = {}
    for r in results:
        key = (r["task"], r["lam"], r["alpha"])
        grp = groups.setdefault(key, {"val": [], "test": []})
        grp["val"].append(r["best_val_acc"])
        grp["test"].append(r["test_acc"])
    return groups


def _select(groups: dict, task: str):
    """Grid point with the best mean validation accuracy (first on ties)."""
    best = None
    for key, grp in groups.items():
        if key[0] != task:
            continue
        mean_val = float(np.mean(grp["val"]))
        if best is None or mean_val > best[1]:
            best = (key, mean_val)
    return best[0]


def write_reports(spec: ExperimentSpec, results: list, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "runs").mkdir(exist_ok=True)
    for r in results:
        text = json.dumps(r, sort_keys=True, indent=1, default=_json_default)
        (out / "runs" / f"{r['run_id']}.json").write_text(text + "\n", encoding="utf-8")

    ds = spec.dataset_name
    runs = [[ds, r["task"], _cell(r["lam"]), _cell(r["alpha"]), r["seed"],
             _cell(r["best_val_acc"]), _cell(r["test_acc"]), r["run_id"]] for r in results]
    files = {"runs.csv": _csv_text(
        ["dataset", "model", "lambda", "alpha", "seed", "val_acc", "test_acc", "run_id"], runs)}

    groups = _aggregate(results)
    summary, lam_rows, alpha_rows, few_rows = [], [], [], []
    for task in spec.tasks:
        key = _select(groups, task)
        grp = groups[key]
        mv, sv = summarize(grp["val"])
        mt, st = summarize(grp["test"])
        summary.append([ds, task, spec.strategy, _cell(key[1]), _cell(key[2]), len(grp["test"]),
                        _cell(mv), _cell(mt), _cell(st)])
        if spec.few_label is not None:
            few_rows.append([ds, task, spec.few_label, _cell(mt), _cell(st)])
        for (t, lam, alpha), g in groups.items():
            if t != task:
                continue
            m, s = summarize(g["test"])
            row = [ds, task, _cell(lam), _cell(alpha), _cell(float(np.mean(g["val"]))), _cell(m),
                   _cell(s)]
            # curves hold the other grid axis at its selected value
            if alpha == key[2]:
                lam_rows.append(row)
            if alpha is not None and lam == key[1]:
                alpha_rows.append(row)
    files["summary.csv"] = _csv_text(
        ["dataset", "model", "strategy", "lambda", "alpha", "n_seeds", "mean_val_acc",
         "mean_test_acc", "std_test_acc"], summary)
    curve_header = ["dataset", "model", "lambda", "alpha", "mean_val_acc", "mean_test_acc",
                    "std_test_acc"]
    files["plot_lambda.csv"] = _csv_text(curve_header, lam_rows)
    if alpha_rows:
        files["plot_alpha.csv"] = _csv_text(curve_header, alpha_rows)
    if few_rows:
        files["plot_few_label.csv"] = _csv_text(
            ["dataset", "model", "labels_per_class", "mean_test_acc", "std_test_acc"], few_rows)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    return files


def run_experiment(spec: ExperimentSpec, base: Path = Path("."), workers: int = 1) -> dict:
    g, masks = load_data(spec.dataset, base)
    results = _map(_execute, expand_jobs(spec), workers, (g, masks, spec, base))
    return write_reports(spec, results, _resolve(base, spec.output))


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


# --------------------------------------------------------------------------
# probe

def _probe_job(item) -> list:
    task, rep, seed = item
    g, masks, spec = _STATE["g"], _STATE["masks"], _STATE["spec"]
    cfg = TrainConfig(seed=seed, **spec.config)
    return [spec.dataset_name, task, rep, seed, _cell(probe_pretext(g, masks, task, rep, cfg,
                                                                    **spec.options))]


def run_probe(spec: ExperimentSpec, base: Path = Path("."), workers: int = 1) -> dict:
    for t in spec.tasks:
        if t not in PROBE_TASKS:
            raise SpecError(f"probe supports {list(PROBE_TASKS)}, got {t!r}")
    g, masks = load_data(spec.dataset, base)
    items = [(t, r, int(s)) for t in spec.tasks for r in spec.representations for s in spec.seeds]
    rows = _map(_probe_job, items, workers, (g, masks, spec, base))
    summary = []
    for t in spec.tasks:
        means = {}
        for r in spec.representations:
            means[r] = float(np.mean([float(row[4]) for row in rows if row[1] == t and row[2] == r]))
        gap = (means["gcn_embeddings"] - means["raw_features"]) if len(means) == 2 else None
        summary.append([spec.dataset_name, t, *[_cell(means.get(r)) for r in REPRESENTATIONS],
                        _cell(gap)])
    files = {
        "probe_runs.csv": _csv_text(["dataset", "task", "representation", "seed", "accuracy"], rows),
        "probe_summary.csv": _csv_text(["dataset", "task", "raw_features", "gcn_embeddings",
                                        "gap"], summary),
    }
    out = _resolve(base, spec.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text, encoding="utf-8")
    return files


# --------------------------------------------------------------------------
# small verbs

def convert_partition(text: str) -> list[int]:
    """Parse a partitioner output file: one cluster id per line, node order."""
    ids = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(("%", "#")):
            continue
        try:
            v = int(line)
        except ValueError:
            raise GraphFormatError(f"partition line {lineno}: not an integer: {line!r}") from None
        if v < 0:
            raise GraphFormatError(f"partition line {lineno}: negative cluster id")
        ids.append(v)
    if not ids:
        raise GraphFormatError("partition: file has no entries")
    return ids


def _parse_json_arg(value: str):
    p = Path(value)
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return json.loads(value)


def _apply_overrides(obj: dict, args) -> dict:
    obj = dict(obj)
    for name in ("output", "dataset", "strategy", "few_label"):
        v = getattr(args, name, None)
        if v is not None:
            obj[name] = v
    if args.tasks:
        obj.pop("task", None)
        obj["tasks"] = args.tasks
    for name in ("lambdas", "alphas", "seeds"):
        v = getattr(args, name)
        if v is not None:
            obj[name] = v
    if args.epochs is not None:
        obj["config"] = {**obj.get("config", {}), "epochs": args.epochs}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise SpecError(f"--set expects key=value, got {item!r}")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        target = obj
        *path, last = key.split(".")
        for part in path:
            target = target.setdefault(part, {})
        target[last] = val
    return obj


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="graphssl", description="Self-supervised GCN experiment runner")
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("run", "probe"):
        p = sub.add_parser(verb)
        p.add_argument("spec")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--output")
        p.add_argument("--dataset")
        p.add_argument("--strategy")
        p.add_argument("--few-label", dest="few_label", type=int)
        p.add_argument("--tasks", nargs="+")
        p.add_argument("--lambdas", nargs="+", type=float)
        p.add_argument("--alphas", nargs="+", type=float)
        p.add_argument("--seeds", nargs="+", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="KEY=JSON",
                       help="override any spec field, dotted keys reach into config/options")
    p = sub.add_parser("convert-partition")
    p.add_argument("file")
    p.add_argument("--out")
    p = sub.add_parser("gen-sbm")
    p.add_argument("params", help="JSON file or inline JSON with blocks, p_in, p_out, ...")
    p.add_argument("--out", required=True)
    return ap


def _fail(kind: str, message: str, code: int = 1) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line", 2)
    try:
        if args.verb in ("run", "probe"):
            spec_path = Path(args.spec)
            if not spec_path.exists():
                raise FileNotFoundError(f"spec not found: {spec_path}")
            obj = json.loads(spec_path.read_text(encoding="utf-8"))
            if not isinstance(obj, dict):
                raise SpecError("spec must be a JSON object")
            spec = ExperimentSpec.from_dict(_apply_overrides(obj, args))
            fn = run_experiment if args.verb == "run" else run_probe
            fn(spec, spec_path.parent, max(1, args.workers))
            out = _resolve(spec_path.parent, spec.output)
            print(json.dumps({"status": "ok", "output": str(out)}))
        elif args.verb == "convert-partition":
            ids = convert_partition(Path(args.file).read_text(encoding="utf-8"))
            text = json.dumps(ids)
            if args.out:
                Path(args.out).write_text(text + "\n", encoding="utf-8")
            else:
                print(text)
        elif args.verb == "gen-sbm":
            g, masks = sbm_from_params(_parse_json_arg(args.params))
            save_dataset(args.out, g, masks)
            print(json.dumps({"status": "ok", "num_nodes": g.num_nodes, "num_edges": g.num_edges}))
    except FileNotFoundError as exc:
        return _fail("not_found", str(exc))
    except json.JSONDecodeError as exc:
        return _fail("invalid_json", str(exc))
    except (SpecError, GraphFormatError) as exc:
        return _fail("invalid_spec", str(exc))
    except ValueError as exc:
        return _fail("invalid_value", str(exc))
    except Exception as exc:  # noqa: BLE001 - the contract is a JSON error, never a traceback
        return _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
