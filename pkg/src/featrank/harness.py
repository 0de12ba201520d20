"""Remove-and-retrain experiments.

Rank the features of a dataset, keep the top and bottom fraction, retrain a
fresh reduced network on each slice and compare test accuracies. Reports are
JSON (machine readable, byte-identical for a given config and seed) plus a
Markdown summary; wall-clock timings go to a separate file so they never
perturb the report bytes.
"""
from __future__ import annotations

import json
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from featrank import data as data_io
from featrank.dropin import PenaltyConfig
from featrank.nn import NetworkSpec, TrainConfig, TrainingDivergedError, accuracy, init_network, train
from featrank.selectors import (
    METHODS,
    FeatureRanking,
    SwpaConfig,
    base_network,
    keep_count,
    pfi_rank,
    random_rank,
    sbs_rank,
    swpa_rank,
    top_bottom,
    worker_count,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------------

DEFAULTS: dict = {
    "dataset.kind": "idx",
    "dataset.images": None,
    "dataset.labels": None,
    "dataset.features": None,
    "dataset.delimiter": ",",
    "dataset.one_based": True,
    "dataset.synthetic.n": 2000,
    "dataset.synthetic.d": 20,
    "dataset.synthetic.informative": [0, 1, 2, 3],
    "dataset.subsample": 0,
    "dataset.normalize": "none",
    "dataset.grid": None,
    "methods": ["swpa", "sbs", "pfi", "random"],
    "fraction": 0.1,
    "swpa.n": 4,
    "swpa.f": None,
    "penalty.lambda": 1.0,
    "penalty.gamma": 10.0,
    "penalty.l1": False,
    "penalty.wvl": False,
    "penalty.wvl_centered": False,
    "sbs.mean_of_abs": False,
    "pfi.c": 10,
    "random.runs": 10,
    "train.max_epochs": 20000,
    "train.patience": 2000,
    "train.learning_rate": 0.001,
    "train.momentum": 0.9,
    "train.batch_size": 64,
    "preset": "full",
    "seed": 0,
    "out": "runs/default",
}

PRESETS: dict = {
    "full": {"train.max_epochs": 20000, "train.patience": 2000},
    "desk": {"train.max_epochs": 500, "train.patience": 50},
}


def resolve_config(*layers: dict) -> dict:
    """Merge flat dotted-key layers over the defaults; later layers win.

    A preset's values sit between the defaults and the explicit layers.
    """
    explicit: dict = {}
    for layer in layers:
        unknown = sorted(set(layer) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        explicit.update(layer)
    preset = explicit.get("preset", DEFAULTS["preset"])
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
    return {**DEFAULTS, **PRESETS[preset], **explicit}


@dataclass
class ExperimentConfig:
    dataset: dict
    methods: list[str]
    fraction: float
    swpa: SwpaConfig
    pfi_c: int
    random_runs: int
    train: TrainConfig
    sbs_mean_of_abs: bool
    out: str
    seed: int
    flat: dict = field(default_factory=dict)

    @classmethod
    def from_flat(cls, flat: dict) -> "ExperimentConfig":
        cfg = resolve_config(flat)
        try:
            tcfg = TrainConfig(
                max_epochs=int(cfg["train.max_epochs"]),
                patience=int(cfg["train.patience"]),
                learning_rate=float(cfg["train.learning_rate"]),
                momentum=float(cfg["train.momentum"]),
                batch_size=int(cfg["train.batch_size"]),
                seed=int(cfg["seed"]),
            )
            penalty = PenaltyConfig(
                lam=float(cfg["penalty.lambda"]),
                gamma=float(cfg["penalty.gamma"]),
                enable_l1=bool(cfg["penalty.l1"]),
                enable_wvl=bool(cfg["penalty.wvl"]),
                wvl_centered=bool(cfg["penalty.wvl_centered"]),
            )
            fraction = float(cfg["fraction"])
            f_swpa = fraction if cfg["swpa.f"] is None else float(cfg["swpa.f"])
            swpa = SwpaConfig(n=int(cfg["swpa.n"]), f=f_swpa, train=tcfg, penalty=penalty)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        methods = list(cfg["methods"]) if not isinstance(cfg["methods"], str) else cfg["methods"].split(",")
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ConfigError(f"unknown methods {bad}; choose from {', '.join(METHODS)}")
        if not 0 < fraction <= 0.5:
            raise ConfigError(f"fraction must be in (0, 0.5], got {fraction}")
        if int(cfg["pfi.c"]) < 1 or int(cfg["random.runs"]) < 1:
            raise ConfigError("pfi.c and random.runs must be >= 1")
        dataset = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("dataset.")}
        return cls(
            dataset=dataset,
            methods=methods,
            fraction=fraction,
            swpa=swpa,
            pfi_c=int(cfg["pfi.c"]),
            random_runs=int(cfg["random.runs"]),
            train=tcfg,
            sbs_mean_of_abs=bool(cfg["sbs.mean_of_abs"]),
            out=str(cfg["out"]),
            seed=int(cfg["seed"]),
            # the output location is not a parameter of the result
            flat={k: v for k, v in cfg.items() if k != "out"},
        )


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed for an independent stream keyed by (seed, *keys)."""
    words = [int(seed)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return int(np.random.SeedSequence(words).generate_state(1, np.uint64)[0] >> np.uint64(1))


def _require_file(path, key):
    if path is None:
        raise ConfigError(f"{key} is not set")
    if not Path(path).is_file():
        raise ConfigError(f"{key}: file not found: {path}")
    return path


def load_dataset(ref: dict) -> data_io.Dataset:
    kind = ref.get("kind")
    if kind == "idx":
        return data_io.load_idx(
            _require_file(ref.get("images"), "dataset.images"),
            _require_file(ref.get("labels"), "dataset.labels"),
        )
    if kind == "delimited":
        labels = ref.get("labels")
        if labels is not None:
            _require_file(labels, "dataset.labels")
        return data_io.load_delimited(
            _require_file(ref.get("features"), "dataset.features"),
            labels,
            delimiter=ref.get("delimiter", ","),
            one_based=ref.get("one_based", True),
        )
    if kind == "synthetic":
        return data_io.make_signal_noise(
            int(ref["synthetic.n"]), int(ref["synthetic.d"]), ref["synthetic.informative"], ref["seed"]
        )
    raise ConfigError(f"unknown dataset.kind {kind!r} (idx, delimited or synthetic)")


def prepare_splits(cfg: ExperimentConfig) -> data_io.SplitDataset:
    ds = load_dataset({**cfg.dataset, "seed": derive_seed(cfg.seed, "synthetic")})
    ds = data_io.subsample(ds, int(cfg.dataset.get("subsample") or 0), derive_seed(cfg.seed, "subsample"))
    splits = data_io.split(ds, seed=derive_seed(cfg.seed, "split"))
    return data_io.normalize(splits, cfg.dataset.get("normalize", "none"))


# -- building blocks -----------------------------------------------------------

def build_network_spec(d_in: int, classes: int) -> NetworkSpec:
    """Three dense layers, halving the width twice before the class layer."""
    if classes < 2 or d_in < classes:
        raise ValueError(f"need d_in >= classes >= 2, got d_in={d_in}, classes={classes}")
    if d_in // 4 < 1:
        raise ValueError(f"{d_in} inputs are too few for two halvings")
    return NetworkSpec((d_in, d_in // 2, d_in // 4, classes))


def feature_similarity(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    if len(a) != len(b) or not a:
        raise ValueError(f"similarity needs equal non-empty sets, got sizes {len(a)} and {len(b)}")
    return len(a & b) / len(a)


def export_mask(selected, grid: tuple[int, int], path) -> Path:
    """Write a binary P5 PGM: selected features white (255), the rest black."""
    h, w = int(grid[0]), int(grid[1])
    if h < 1 or w < 1:
        raise ValueError(f"bad grid {grid}")
    selected = np.asarray(list(selected), dtype=np.int64)
    if selected.size and (selected.min() < 0 or selected.max() >= h * w):
        raise ValueError(f"feature index outside a {h}x{w} grid")
    pixels = np.zeros(h * w, dtype=np.uint8)
    pixels[selected] = 255
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def grid_for(cfg: ExperimentConfig, d: int):
    grid = cfg.dataset.get("grid")
    if grid is None:
        return None
    if isinstance(grid, str):
        grid = [int(v) for v in grid.lower().split("x")]
    h, w = grid
    if h * w != d:
        raise ConfigError(f"grid {h}x{w} does not cover {d} features")
    return (h, w)


def evaluate_subset(splits: data_io.SplitDataset, features, tcfg: TrainConfig, seed: int) -> dict:
    """Retrain a fresh reduced network on ``features``; a divergence becomes an error cell."""
    features = np.asarray(features, dtype=np.int64)
    cell = {"features": features.tolist()}
    sub = splits.select_features(features)
    try:
        spec = build_network_spec(len(features), splits.class_count)
        result = train(init_network(spec, seed), sub, TrainConfig(**{**tcfg.__dict__, "seed": seed}))
    except TrainingDivergedError as exc:
        cell["error"] = str(exc)
        return cell
    cell.update(
        layer_sizes=list(spec.layer_sizes),
        test_accuracy=accuracy(result.best_network, sub.test.X, sub.test.y),
        **result.to_dict(),
    )
    return cell


def _run_cells(jobs):
    """Evaluate independent (callable, args) jobs, possibly in parallel, keeping order."""
    workers = min(worker_count(), len(jobs)) or 1
    if workers == 1:
        return [fn(*args) for fn, args in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda job: job[0](*job[1]), jobs))


def _dataset_summary(splits: data_io.SplitDataset) -> dict:
    return {
        "n": splits.train.n + splits.val.n + splits.test.n,
        "d": splits.feature_count,
        "classes": splits.class_count,
        "split_sizes": [splits.train.n, splits.val.n, splits.test.n],
        "warnings": list(splits.warnings),
    }


# -- experiments ---------------------------------------------------------------

@dataclass
class ExperimentReport:
    data: dict
    timings: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return _has_error(self.data)

    def to_json(self) -> str:
        return json.dumps(self.data, indent=1, sort_keys=True) + "\n"


def _has_error(obj) -> bool:
    if isinstance(obj, dict):
        return "error" in obj or any(_has_error(v) for v in obj.values())
    if isinstance(obj, list):
        return any(_has_error(v) for v in obj)
    return False


def train_full(cfg: ExperimentConfig, splits=None) -> dict:
    """Train the plain full-feature network and report its accuracies."""
    splits = splits or prepare_splits(cfg)
    spec = build_network_spec(splits.feature_count, splits.class_count)
    seed = derive_seed(cfg.seed, "base")
    result = base_network(splits, spec, TrainConfig(**{**cfg.train.__dict__, "seed": seed}), seed)
    return {
        "config": cfg.flat,
        "dataset": _dataset_summary(splits),
        "layer_sizes": list(spec.layer_sizes),
        "test_accuracy": accuracy(result.best_network, splits.test.X, splits.test.y),
        **result.to_dict(),
    }


def rank_features(cfg: ExperimentConfig, method: str, splits=None, base=None):
    """Produce one ranking on the full feature set.

    ``base`` may carry an already trained full-feature network, shared by
    SBS and PFI. Returns ``(ranking, info)``.
    """
    splits = splits or prepare_splits(cfg)
    d, C = splits.feature_count, splits.class_count
    spec = build_network_spec(d, C)
    info: dict = {}
    if method == "swpa":
        swpa_cfg = SwpaConfig(
            n=cfg.swpa.n, f=cfg.swpa.f, penalty=cfg.swpa.penalty,
            train=TrainConfig(**{**cfg.train.__dict__, "seed": derive_seed(cfg.seed, "swpa", "train")}),
        )
        ranking, rounds = swpa_rank(splits, spec, swpa_cfg, seed=derive_seed(cfg.seed, "swpa", "init"))
        info["rounds"] = [r.to_dict(include_history=False) for r in rounds]
        return ranking, info
    if method == "random":
        return random_rank(d, derive_seed(cfg.seed, "random", 0)), info
    if base is None:
        seed = derive_seed(cfg.seed, "base")
        base = base_network(splits, spec, TrainConfig(**{**cfg.train.__dict__, "seed": seed}), seed)
    if method == "sbs":
        return sbs_rank(splits, base.best_network, mean_of_abs=cfg.sbs_mean_of_abs), info
    if method == "pfi":
        return pfi_rank(splits, base.best_network, c=cfg.pfi_c, seed=derive_seed(cfg.seed, "pfi")), info
    raise ConfigError(f"unknown method {method!r}")


def run_experiment(cfg: ExperimentConfig, splits=None) -> ExperimentReport:
    splits = splits or prepare_splits(cfg)
    d, C = splits.feature_count, splits.class_count
    k = keep_count(cfg.fraction, d)
    if k == 0:
        raise ConfigError(f"fraction {cfg.fraction} keeps no features out of {d}")
    build_network_spec(k, C)  # reject slices too small for the reduced network up front
    timings: dict = {}
    methods: dict = {}
    rankings: dict = {}

    base = None
    if {"sbs", "pfi"} & set(cfg.methods):
        t0 = time.perf_counter()
        seed = derive_seed(cfg.seed, "base")
        spec = build_network_spec(d, C)
        try:
            base = base_network(splits, spec, TrainConfig(**{**cfg.train.__dict__, "seed": seed}), seed)
            methods["base_network"] = {
                "test_accuracy": accuracy(base.best_network, splits.test.X, splits.test.y),
                **base.to_dict(),
            }
        except TrainingDivergedError as exc:
            methods["base_network"] = {"error": str(exc)}
        timings["base_network"] = time.perf_counter() - t0

    jobs, slots = [], []
    for method in cfg.methods:
        if method == "random":
            continue
        if method in ("sbs", "pfi") and base is None:
            methods[method] = {"error": "base network diverged"}
            continue
        t0 = time.perf_counter()
        try:
            ranking, info = rank_features(cfg, method, splits, base)
        except TrainingDivergedError as exc:
            methods[method] = {"error": str(exc)}
            continue
        timings[f"rank_{method}"] = time.perf_counter() - t0
        rankings[method] = ranking
        top, bottom = top_bottom(ranking, cfg.fraction)
        methods[method] = {"ranking": ranking.to_dict(), **info}
        for part, feats in (("top", top), ("bottom", bottom)):
            jobs.append((evaluate_subset, (splits, feats, cfg.train, derive_seed(cfg.seed, method, part))))
            slots.append((method, part))

    if "random" in cfg.methods:
        methods["random"] = {"runs": []}
        for run in range(cfg.random_runs):
            ranking = random_rank(d, derive_seed(cfg.seed, "random", run))
            top, _ = top_bottom(ranking, cfg.fraction)
            jobs.append((evaluate_subset, (splits, top, cfg.train, derive_seed(cfg.seed, "random", "top", run))))
            slots.append(("random", run))

    t0 = time.perf_counter()
    cells = _run_cells(jobs)
    timings["retrain"] = time.perf_counter() - t0
    for (method, part), cell in zip(slots, cells):
        if method == "random":
            methods["random"]["runs"].append(cell)
        else:
            methods[method][part] = cell
    if "random" in cfg.methods:
        accs = [c["test_accuracy"] for c in methods["random"]["runs"] if "test_accuracy" in c]
        if accs:
            methods["random"]["worst"] = min(accs)
            methods["random"]["average"] = float(np.mean(accs))

    report = {
        "kind": "experiment",
        "config": cfg.flat,
        "dataset": _dataset_summary(splits),
        "selected_count": k,
        "methods": methods,
    }
    return ExperimentReport(report, timings)


def _swpa_variant(cfg: ExperimentConfig, splits, n: int, penalty: PenaltyConfig, tag: str):
    d, C = splits.feature_count, splits.class_count
    swpa_cfg = SwpaConfig(
        n=n, f=cfg.swpa.f, penalty=penalty,
        train=TrainConfig(**{**cfg.train.__dict__, "seed": derive_seed(cfg.seed, "swpa", "train")}),
    )
    try:
        ranking, _ = swpa_rank(splits, build_network_spec(d, C), swpa_cfg,
                               seed=derive_seed(cfg.seed, "swpa", "init"))
    except TrainingDivergedError as exc:
        return None, {"error": str(exc)}
    top, _ = top_bottom(ranking, cfg.fraction)
    cell = evaluate_subset(splits, top, cfg.train, derive_seed(cfg.seed, "ablation", tag))
    return top, {"ranking": ranking.to_dict(), "top": cell}


def _similarity_matrix(tops: list) -> list:
    return [[feature_similarity(a, b) if a is not None and b is not None else None for b in tops] for a in tops]


def ablation_step_counter(cfg: ExperimentConfig, steps=(1, 4), splits=None) -> ExperimentReport:
    """SWPA with two step counters: top-slice accuracy of each and overlap of their selections."""
    splits = splits or prepare_splits(cfg)
    t0 = time.perf_counter()
    variants, tops = {}, []
    for n in steps:
        # identical inputs for identical n, so n=1 vs n=1 overlaps fully
        top, entry = _swpa_variant(cfg, splits, n, cfg.swpa.penalty, f"n={n}")
        variants[f"n={n}"] = entry
        tops.append(top)
    similarity = _similarity_matrix(tops)[0][1] if len(steps) == 2 else None
    report = {
        "kind": "ablation_step_counter",
        "config": cfg.flat,
        "dataset": _dataset_summary(splits),
        "steps": list(steps),
        "variants": variants,
        "similarity": similarity,
    }
    return ExperimentReport(report, {"total": time.perf_counter() - t0})


CONSTRAINT_VARIANTS = {
    "base": (False, False),
    "l1": (True, False),
    "wvl": (False, True),
    "l1+wvl": (True, True),
}


def ablation_constraints(cfg: ExperimentConfig, n: int = 1, splits=None) -> ExperimentReport:
    """SWPA under {base, l1, wvl, l1+wvl} penalties with a pairwise overlap matrix."""
    splits = splits or prepare_splits(cfg)
    t0 = time.perf_counter()
    variants, tops = {}, []
    for name, (l1, wvl) in CONSTRAINT_VARIANTS.items():
        penalty = PenaltyConfig(
            lam=cfg.swpa.penalty.lam, gamma=cfg.swpa.penalty.gamma,
            enable_l1=l1, enable_wvl=wvl, wvl_centered=cfg.swpa.penalty.wvl_centered,
        )
        top, entry = _swpa_variant(cfg, splits, n, penalty, name)
        variants[name] = entry
        tops.append(top)
    report = {
        "kind": "ablation_constraints",
        "config": cfg.flat,
        "dataset": _dataset_summary(splits),
        "n": n,
        "order": list(CONSTRAINT_VARIANTS),
        "variants": variants,
        "similarity": _similarity_matrix(tops),
    }
    return ExperimentReport(report, {"total": time.perf_counter() - t0})


# -- output --------------------------------------------------------------------

def _fmt(v):
    return "-" if v is None else f"{v:.3f}"


def _acc(cell):
    return None if not cell or "test_accuracy" not in cell else cell["test_accuracy"]


def render_markdown(report: dict) -> str:
    kind = report["kind"]
    ds = report["dataset"]
    lines = [f"# {kind.replace('_', ' ')}", "", f"n={ds['n']}  d={ds['d']}  classes={ds['classes']}", ""]
    if kind == "experiment":
        m = report["methods"]
        lines += ["| method | #feat | top | bottom |", "|---|---|---|---|"]
        for name in ("swpa", "sbs", "pfi"):
            if name in m:
                lines.append(f"| {name} | {report['selected_count']} | {_fmt(_acc(m[name].get('top')))} "
                             f"| {_fmt(_acc(m[name].get('bottom')))} |")
        if "random" in m:
            lines += ["", "| random worst | random average |", "|---|---|",
                      f"| {_fmt(m['random'].get('worst'))} | {_fmt(m['random'].get('average'))} |"]
    elif kind == "ablation_step_counter":
        lines += ["| variant | top accuracy |", "|---|---|"]
        for name, entry in report["variants"].items():
            lines.append(f"| {name} | {_fmt(_acc(entry.get('top')))} |")
        lines += ["", f"selection overlap: {_fmt(report['similarity'])}"]
    elif kind == "ablation_constraints":
        order = report["order"]
        lines += ["| variant | top accuracy |", "|---|---|"]
        for name in order:
            lines.append(f"| {name} | {_fmt(_acc(report['variants'][name].get('top')))} |")
        lines += ["", "| | " + " | ".join(order) + " |", "|---" * (len(order) + 1) + "|"]
        for name, row in zip(order, report["similarity"]):
            lines.append(f"| {name} | " + " | ".join(_fmt(v) for v in row) + " |")
    return "\n".join(lines) + "\n"


def write_report(report: ExperimentReport, out_dir, name: str = "report", grid=None) -> dict:
    """Write <name>.json, <name>.md, <name>.timings.json and top/bottom masks when a grid is given."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"json": out / f"{name}.json", "markdown": out / f"{name}.md", "timings": out / f"{name}.timings.json"}
    paths["json"].write_text(report.to_json())
    paths["markdown"].write_text(render_markdown(report.data))
    paths["timings"].write_text(json.dumps(report.timings, indent=1, sort_keys=True) + "\n")
    if grid is not None and report.data["kind"] == "experiment":
        for method, entry in report.data["methods"].items():
            for part in ("top", "bottom"):
                cell = entry.get(part) if isinstance(entry, dict) else None
                if cell and "features" in cell:
                    p = out / f"mask_{method}_{part}.pgm"
                    export_mask(cell["features"], grid, p)
                    paths[f"mask_{method}_{part}"] = p
    return paths
