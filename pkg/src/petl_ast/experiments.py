"""Experiment drivers: single runs, method comparisons and the three sweeps.

Every driver is a pure function of an :class:`ExperimentConfig` plus its grid
arguments. Cells are independent, so ``jobs > 1`` farms them out to worker
processes; results are always returned in grid order.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .accounting import BUDGET_KNOB, ParamReport, closed_form, count_trainable, solve_budget
from .checkpoint import load_records, save_records
from .config import ExperimentConfig
from .harness import (
    MetricsRecord,
    TrainResult,
    adapt,
    backbone_records,
    few_shot_subsample,
    gen_synthetic_task,
    pretrain_backbone,
)
from .petl import DESK_DEFAULTS, desk_method, make_method

log = logging.getLogger(__name__)

# name -> (version, columns). The first line of every CSV is "# schema: <name> v<version>".
SCHEMAS: dict[str, tuple[int, tuple[str, ...]]] = {
    "metrics": (1, ("epoch", "split", "loss", "accuracy", "lr", "trainable_params", "wall_time")),
    "compare": (1, ("method", "seed", "params", "test_accuracy", "best_val_accuracy", "best_epoch")),
    "sweep-kernel": (1, ("k", "mode", "shots", "seed", "params", "test_accuracy", "best_val_accuracy")),
    "sweep-budget": (1, ("method", "target", "hyperparam", "value", "params", "seed",
                         "test_accuracy", "best_val_accuracy")),
    "fewshot": (1, ("shots", "seed", "method", "trainable_params", "test_accuracy", "best_val_accuracy")),
    "fewshot-summary": (1, ("shots", "n_seeds", "mean_accuracy", "std_accuracy")),
    "gradcheck": (1, ("method", "n_checked", "no_gradient", "max_rel_error", "tolerance", "passed")),
}

PETL_KINDS = ("bitfit", "lora", "spt", "dpt", "prefix", "bottleneck", "conformer")
KERNELS = (1, 3, 8, 15, 31)
SHOTS = (1, 2, 4, 8)
SEEDS = (0, 1, 2)
BUDGET_METHODS = ("lora", "bottleneck", "conformer")


# ------------------------------------------------------------------- CSV

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, schema: str, rows: list[dict]) -> Path:
    version, cols = SCHEMAS[schema]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {schema} v{version}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])
    return path


def read_csv(path: str | Path, schema: str) -> list[dict[str, str]]:
    """Read a CSV written by :func:`write_csv`, checking the schema line and header."""
    version, cols = SCHEMAS[schema]
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != f"# schema: {schema} v{version}":
            raise ValueError(f"{path}: expected schema {schema} v{version}, found {first!r}")
        rows = list(csv.DictReader(fh))
    with open(path, newline="") as fh:
        fh.readline()
        header = next(csv.reader(fh))
    if tuple(header) != cols:
        raise ValueError(f"{path}: header {header} does not match schema {schema}")
    return rows


def metrics_rows(metrics: list[MetricsRecord]) -> list[dict]:
    return [vars(m) for m in metrics]


# ------------------------------------------------------------ single runs

def _backbone_key(cfg: ExperimentConfig) -> str:
    bb = replace(cfg.backbone, n_classes=0, seed=0)
    blob = repr((bb, cfg.pretrain, cfg.seed)).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def pretrained(cfg: ExperimentConfig, cache_dir: str | Path | None = None) -> dict[str, np.ndarray]:
    """Pretrained encoder weights for ``cfg.seed``, cached under ``cache_dir`` if given."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"backbone-seed{cfg.seed}-{_backbone_key(cfg)}.ckpt"
        if path.exists():
            return load_records(path)
    log.info("pretraining backbone (seed %d)", cfg.seed)
    recs = backbone_records(pretrain_backbone(cfg.backbone, cfg.pretrain, seed=cfg.seed))
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_records(path, recs)
    return recs


@dataclass
class RunResult:
    result: TrainResult
    report: ParamReport
    shots: int | None = None

    @property
    def test_accuracy(self) -> float:
        return self.result.test_accuracy


def run(cfg: ExperimentConfig, backbone: dict[str, np.ndarray], shots: int | None = None,
        out_dir: str | Path | None = None, record_wall_time: bool = False) -> RunResult:
    """Adapt a pretrained encoder to the configured task (optionally few-shot)."""
    ds = gen_synthetic_task(cfg.task)
    if shots is not None:
        ds = few_shot_subsample(ds, shots, seed=cfg.seed)
    model, plan, result = adapt(backbone, cfg.backbone, cfg.method, ds, cfg.train,
                                out_dir=out_dir, record_wall_time=record_wall_time)
    return RunResult(result, count_trainable(model, plan), shots)


def _run_cell(args) -> RunResult:
    cfg, backbone, shots = args
    return run(cfg, backbone, shots)


def _pretrain_cell(args) -> dict[str, np.ndarray]:
    cfg, cache_dir = args
    return pretrained(cfg, cache_dir)


def _map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def pretrained_for_seeds(cfg: ExperimentConfig, seeds, jobs: int = 1,
                         cache_dir: str | Path | None = None) -> dict[int, dict[str, np.ndarray]]:
    seeds = list(seeds)
    recs = _map(_pretrain_cell, [(cfg.with_seed(s), cache_dir) for s in seeds], jobs)
    return dict(zip(seeds, recs))


def run_grid(cells: list[tuple[ExperimentConfig, int | None]], backbones: dict[int, dict],
             jobs: int = 1) -> list[RunResult]:
    """Run (config, shots) cells; each config's seed picks its pretrained encoder."""
    return _map(_run_cell, [(c, backbones[c.seed], shots) for c, shots in cells], jobs)


# ----------------------------------------------------------------- drivers

def compare_methods(cfg: ExperimentConfig, kinds=("linear",) + PETL_KINDS, seeds=SEEDS,
                    jobs: int = 1, cache_dir=None) -> list[dict]:
    """Test accuracy of each method (desk defaults) on the configured task, per seed."""
    backbones = pretrained_for_seeds(cfg, seeds, jobs, cache_dir)
    cells = [(cfg.with_seed(s).with_method(desk_method(k)), None) for k in kinds for s in seeds]
    out = []
    for (c, _), res in zip(cells, run_grid(cells, backbones, jobs)):
        out.append({"method": c.method.kind, "seed": c.seed, "params": res.report.trainable_params,
                    "test_accuracy": res.result.test_accuracy,
                    "best_val_accuracy": res.result.best_val_accuracy,
                    "best_epoch": res.result.best_epoch})
    return out


def sweep_kernel(cfg: ExperimentConfig, ks=KERNELS, seeds=(0,), fewshot_shots: int = 8,
                 jobs: int = 1, cache_dir=None) -> list[dict]:
    """Conformer adapter over kernel sizes, on the full training split and few-shot."""
    own = cfg.method.kind == "conformer"
    base = cfg.method if own else desk_method("conformer")
    backbones = pretrained_for_seeds(cfg, seeds, jobs, cache_dir)
    cells, meta = [], []
    for k in ks:
        m = replace(base, k=k)
        for mode, shots in (("full", None), ("fewshot", fewshot_shots)):
            for s in seeds:
                cells.append((cfg.with_seed(s).with_method(m, lr=cfg.train.lr if own else None), shots))
                meta.append((k, mode, s, closed_form(m, cfg.backbone)))
    out = []
    for (k, mode, s, params), res in zip(meta, run_grid(cells, backbones, jobs)):
        out.append({"k": k, "mode": mode, "shots": res.shots, "seed": s, "params": params,
                    "test_accuracy": res.result.test_accuracy,
                    "best_val_accuracy": res.result.best_val_accuracy})
    return out


def desk_targets(cfg: ExperimentConfig, n: int = 6, lo: float = 50e3, hi: float = 1e6) -> list[int]:
    """Log-spaced full-scale budgets, rescaled by L*d to the configured encoder.

    Adapter, LoRA and prompt budgets all grow with L*d, so this keeps each
    target at the same bottleneck width or prompt count it has at 768/12.
    """
    scale = (cfg.backbone.L * cfg.backbone.d) / (12 * 768)
    return [int(round(t * scale)) for t in np.geomspace(lo, hi, n)]


def sweep_budget(cfg: ExperimentConfig, targets=None, methods=BUDGET_METHODS, seeds=(0,),
                 jobs: int = 1, cache_dir=None) -> tuple[list[dict], list[str]]:
    """Solve each method's knob for each target budget, then train it.

    Returns the rows and a list of skip messages for infeasible targets.
    """
    targets = list(targets) if targets is not None else desk_targets(cfg)
    cells, meta, skipped = [], [], []
    for kind in methods:
        fixed = dict(DESK_DEFAULTS.get(kind, {}))
        if kind == cfg.method.kind:
            fixed.update({k: getattr(cfg.method, k) for k in fixed if hasattr(cfg.method, k)})
        knob = BUDGET_KNOB.get(kind)
        if knob is None:
            raise ValueError(f"method {kind!r} has no budget knob")
        fixed.pop(knob, None)
        for target in targets:
            try:
                value = solve_budget(kind, target, cfg.backbone, **fixed)
            except ValueError as e:
                msg = f"skipping {kind} at target {target}: {e}"
                warnings.warn(msg, stacklevel=2)
                skipped.append(msg)
                continue
            m = make_method(kind, **fixed, **{knob: value})
            for s in seeds:
                cells.append((cfg.with_seed(s).with_method(m), None))
                meta.append((kind, target, knob, value, closed_form(m, cfg.backbone), s))
    if not cells:
        return [], skipped
    backbones = pretrained_for_seeds(cfg, seeds, jobs, cache_dir)
    out = []
    for (kind, target, knob, value, params, s), res in zip(meta, run_grid(cells, backbones, jobs)):
        out.append({"method": kind, "target": target, "hyperparam": knob, "value": value,
                    "params": params, "seed": s, "test_accuracy": res.result.test_accuracy,
                    "best_val_accuracy": res.result.best_val_accuracy})
    return out, skipped


def fewshot(cfg: ExperimentConfig, shots=SHOTS, seeds=SEEDS, jobs: int = 1,
            cache_dir=None) -> tuple[list[dict], list[dict]]:
    """Few-shot grid for the configured method; returns per-cell rows and a per-shots summary.

    The summary std is the population std over seeds (ddof=0).
    """
    backbones = pretrained_for_seeds(cfg, seeds, jobs, cache_dir)
    cells = [(cfg.with_seed(s), n) for n in shots for s in seeds]
    rows = []
    for (c, n), res in zip(cells, run_grid(cells, backbones, jobs)):
        rows.append({"shots": n, "seed": c.seed, "method": c.method.kind,
                     "trainable_params": res.result.metrics[0].trainable_params,
                     "test_accuracy": res.result.test_accuracy,
                     "best_val_accuracy": res.result.best_val_accuracy})
    return rows, summarize(rows)


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    for n in dict.fromkeys(r["shots"] for r in rows):
        acc = np.array([r["test_accuracy"] for r in rows if r["shots"] == n])
        out.append({"shots": n, "n_seeds": int(acc.size), "mean_accuracy": float(acc.mean()),
                    "std_accuracy": float(acc.std())})
    return out


def mean_by(rows: list[dict], key: str, value: str = "test_accuracy") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}
