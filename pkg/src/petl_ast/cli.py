"""``petl-ast`` command line.

Subcommands: count, train, gradcheck, sweep-kernel, sweep-budget, fewshot.
Exit codes: 0 success, 1 configuration error, 2 numerical failure (non-finite
loss or a failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments as ex
from .accounting import BUDGET_KNOB, census, report_jsonl, report_table
from .backbone import Backbone, SpectrogramBatch
from .config import (
    KEYS,
    OUTPUT_ENV,
    ExperimentConfig,
    default_output_root,
    describe_keys,
    dump_config,
    from_flat,
    load_config_file,
)
from .harness import NumericalError, gen_synthetic_task, gradcheck
from .petl import METHODS, ConfigError, build_plan, desk_method, inject, make_method

log = logging.getLogger("petl_ast")

GRADCHECK_TOL = 1e-4
GRADCHECK_PROBES = 200
GRADCHECK_BATCH = 4

# Reference line-up for ``count --all``: the full-scale default of each method.
COUNT_ALL = (
    ("lora", {}), ("spt", {}), ("dpt", {}), ("prefix", {}), ("bitfit", {}),
    ("bottleneck", {"config": "pfeiffer"}), ("bottleneck", {"config": "houlsby"}),
    ("conformer", {"config": "pfeiffer"}), ("conformer", {"config": "houlsby"}),
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _names(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment config (flags override --config)")
    g.add_argument("--config", dest="config_file", metavar="FILE", help="flat JSON config file")
    for key, (typ, help_) in KEYS.items():
        flag = "--" + key.replace("_", "-")
        if typ is bool:
            g.add_argument(flag, dest=key, action="store_true", default=None, help=help_)
        elif key == "config":
            g.add_argument("--adapter-config", dest=key, choices=("pfeiffer", "houlsby"), help=help_)
        else:
            g.add_argument(flag, dest=key, type=typ, default=None, help=help_)
    g.add_argument("--houlsby", action="store_true", help="shorthand for --adapter-config houlsby")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    top = _Parser(prog="petl-ast", description=__doc__.split("\n")[0],
                  epilog=f"Config keys:\n{describe_keys()}\n\nDefault output root: ${OUTPUT_ENV} "
                         "or ./runs", formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("count", parents=[common], help="trainable-parameter census (no training)")
    c.add_argument("--all", action="store_true", help="every method at its default budget")
    c.add_argument("--json", action="store_true", help="emit one JSON object per line")

    sub.add_parser("train", parents=[common], help="pretrain, adapt and write a run directory")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--all", action="store_true", help="every method variant")
    g.add_argument("--probes", type=int, default=GRADCHECK_PROBES)
    g.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    g.add_argument("--corrupt-grad", type=float, default=0.0, help=argparse.SUPPRESS)

    for name, help_ in (("sweep-kernel", "conformer adapter over kernel sizes"),
                        ("sweep-budget", "accuracy against trainable-parameter budget"),
                        ("fewshot", "accuracy against examples per class")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--jobs", type=int, default=1, help="parallel runs")
        if name == "sweep-kernel":
            s.add_argument("--k-list", type=_ints, default=list(ex.KERNELS))
            s.add_argument("--seeds", type=_ints, default=[0])
            s.add_argument("--shots", type=int, default=8, help="shots for the few-shot mode")
        elif name == "sweep-budget":
            s.add_argument("--targets", type=_ints, default=None,
                           help="parameter budgets (default: 50K..1M log-spaced, scaled by L*d)")
            s.add_argument("--methods", type=_names, default=list(ex.BUDGET_METHODS))
            s.add_argument("--seeds", type=_ints, default=[0])
        else:
            s.add_argument("--shots", type=_ints, default=list(ex.SHOTS))
            s.add_argument("--seeds", type=_ints, default=list(ex.SEEDS))
    tr = sub.choices["train"]
    tr.add_argument("--wall-time", action="store_true",
                    help="fill the wall_time column (makes metrics.csv non-reproducible)")
    return top


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config_file(args.config_file) if args.config_file else {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "houlsby", False):
        values["config"] = "houlsby"
    if "output_dir" not in values:
        values["output_dir"] = str(default_output_root() / args.command)
    return from_flat(values)


# ------------------------------------------------------------ commands

def cmd_count(cfg: ExperimentConfig, all_methods: bool = False):
    """Census the configured method, or the whole default line-up with ``all_methods``."""
    if not all_methods:
        return [census(cfg.method, replace(cfg.backbone, n_classes=cfg.task.n_classes))]
    make = make_method if cfg.full_scale else desk_method
    bb = replace(cfg.backbone, n_classes=cfg.task.n_classes)
    return [census(make(kind, **hyper), bb) for kind, hyper in COUNT_ALL]


def cmd_train(cfg: ExperimentConfig, record_wall_time: bool = False) -> ex.RunResult:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.json")
    backbone = ex.pretrained(cfg, cache_dir=out)
    res = ex.run(cfg, backbone, out_dir=out, record_wall_time=record_wall_time)
    ex.write_csv(out / "metrics.csv", "metrics", ex.metrics_rows(res.result.metrics))
    (out / "params.json").write_text(json.dumps(res.report.as_record(), indent=2, sort_keys=True) + "\n")
    return res


def gradcheck_variants(cfg: ExperimentConfig, all_methods: bool) -> list:
    if not all_methods:
        return [cfg.method]
    return [desk_method(kind) for kind in METHODS]


def cmd_gradcheck(cfg: ExperimentConfig, all_methods: bool = False, probes: int = GRADCHECK_PROBES,
                  tol: float = GRADCHECK_TOL, corrupt: float = 0.0) -> list[dict]:
    ds = gen_synthetic_task(cfg.task)
    # spread the batch over classes: the train split is sorted by label
    pick = slice(None, None, max(1, len(ds.train) // GRADCHECK_BATCH))
    batch = SpectrogramBatch(ds.train.x[pick][:GRADCHECK_BATCH], ds.train.labels[pick][:GRADCHECK_BATCH])
    bb = replace(cfg.backbone, n_classes=ds.n_classes, seed=cfg.seed)
    rows = []
    for method in gradcheck_variants(cfg, all_methods):
        model = Backbone(bb)
        plan = inject(model, build_plan(method, bb, seed=cfg.seed))
        res = gradcheck(model, plan, batch, n_probes=probes, seed=cfg.seed, corrupt=corrupt)
        rows.append({"method": method.kind, "n_checked": res.n_checked,
                     "no_gradient": len(res.no_gradient), "max_rel_error": res.max_rel_error,
                     "tolerance": tol, "passed": res.passed(tol)})
    return rows


# ---------------------------------------------------------------- main

def _print_rows(rows: list[dict], cols) -> None:
    print(",".join(cols))
    for r in rows:
        print(",".join(ex._fmt(r[c]) for c in cols))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if cfg.full_scale and args.command != "count":
            raise ConfigError("--full-scale is for parameter counting only")
        return _dispatch(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


def _dispatch(args, cfg: ExperimentConfig) -> int:
    out = Path(cfg.output_dir)
    if args.command == "count":
        reports = cmd_count(cfg, args.all)
        print(report_jsonl(reports) if args.json else report_table(reports))
        return 0

    if args.command == "train":
        res = cmd_train(cfg, record_wall_time=args.wall_time)
        r = res.result
        print(f"{cfg.method.kind}: trainable {res.report.trainable_params:,} (+{res.report.head_params:,} head), "
              f"best epoch {r.best_epoch}, val {r.best_val_accuracy:.3f}, test {r.test_accuracy:.3f}")
        print(f"wrote {out / 'metrics.csv'}")
        return 0

    if args.command == "gradcheck":
        rows = cmd_gradcheck(cfg, args.all, args.probes, args.tol, args.corrupt_grad)
        out.mkdir(parents=True, exist_ok=True)
        ex.write_csv(out / "gradcheck.csv", "gradcheck", rows)
        for r in rows:
            verdict = "PASS" if r["passed"] else "FAIL"
            print(f"{verdict} {r['method']:<10} max rel err {r['max_rel_error']:.2e} "
                  f"over {r['n_checked']} coordinates (tol {r['tolerance']:g})")
        return 0 if all(r["passed"] for r in rows) else 2

    if args.command == "sweep-kernel":
        rows = ex.sweep_kernel(cfg, args.k_list, args.seeds, args.shots, args.jobs, cache_dir=out)
        path = ex.write_csv(out / "sweep_kernel.csv", "sweep-kernel", rows)
        _print_rows(rows, ex.SCHEMAS["sweep-kernel"][1])
        print(f"wrote {path}")
        return 0

    if args.command == "sweep-budget":
        unknown = [m for m in args.methods if m not in BUDGET_KNOB]
        if unknown:
            raise ConfigError(f"no budget knob for {unknown}; choose from {sorted(BUDGET_KNOB)}")
        rows, skipped = ex.sweep_budget(cfg, args.targets, args.methods, args.seeds, args.jobs,
                                        cache_dir=out)
        for msg in skipped:
            print(f"warning: {msg}", file=sys.stderr)
        path = ex.write_csv(out / "sweep_budget.csv", "sweep-budget", rows)
        _print_rows(rows, ex.SCHEMAS["sweep-budget"][1])
        print(f"wrote {path}")
        return 0

    if args.command == "fewshot":
        rows, summary = ex.fewshot(cfg, args.shots, args.seeds, args.jobs, cache_dir=out)
        ex.write_csv(out / "fewshot.csv", "fewshot", rows)
        path = ex.write_csv(out / "fewshot_summary.csv", "fewshot-summary", summary)
        _print_rows(rows, ex.SCHEMAS["fewshot"][1])
        for s in summary:
            print(f"shots={s['shots']}: {s['mean_accuracy']:.3f} +/- {s['std_accuracy']:.3f} "
                  f"over {s['n_seeds']} seeds")
        print(f"wrote {path}")
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
