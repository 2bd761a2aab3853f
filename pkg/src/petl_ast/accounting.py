"""Trainable-parameter census, closed-form budgets and budget inversion.

The census (:func:`count_trainable`) walks the store's trainable mask and
never consults a formula; :func:`closed_form` never looks at a store. Tests
hold the two against each other. Head parameters are reported separately
and excluded from both sides.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .backbone import Backbone, BackboneConfig
from .petl import (
    BitFit,
    Bottleneck,
    Conformer,
    FullFineTune,
    InjectionPlan,
    LinearProbe,
    Lora,
    PetlMethod,
    Prefix,
    PromptDeep,
    PromptShallow,
    build_plan,
    inject,
    make_method,
    trainable_owner,
)

# Reference budgets for full-scale defaults (d=768, L=12), as rounded figures.
# ``exact`` marks whether the closed form is expected to round to the figure.
REFERENCE_BUDGETS: dict[tuple, tuple[int, bool]] = {
    ("lora", 6): (221_000, True),
    ("spt", 300): (230_000, True),
    ("dpt", 25): (230_000, True),
    ("prefix", 24): (221_000, True),
    ("bitfit",): (102_000, True),
    ("bottleneck", 12, "pfeiffer"): (249_000, True),
    ("bottleneck", 12, "houlsby"): (498_000, True),
    ("conformer", 8, "pfeiffer"): (271_000, False),
    ("conformer", 8, "houlsby"): (542_000, False),
}


@dataclass
class ParamReport:
    method: PetlMethod
    total_params: int
    trainable_params: int
    head_params: int
    per_module: dict[str, int]
    full_total: int
    closed_form: int
    percent_of_full: float
    notes: list[str] = field(default_factory=list)

    def as_record(self) -> dict:
        m = self.method
        hp = {k: getattr(m, k) for k in getattr(m, "__dataclass_fields__", {})}
        return {
            "method": m.kind,
            **{k: (list(v) if isinstance(v, tuple) else v) for k, v in hp.items()},
            "trainable_params": self.trainable_params,
            "closed_form": self.closed_form,
            "head_params": self.head_params,
            "total_params": self.total_params,
            "full_total": self.full_total,
            "percent_of_full": self.percent_of_full,
            "percent_of_full_str": format_percent(self.percent_of_full),
            "notes": self.notes,
        }


def backbone_total(cfg: BackboneConfig) -> int:
    """Parameter count of the encoder without the classification head."""
    d, ff, L = cfg.d, cfg.ff_dim, cfg.L
    embed = cfg.patch_h * cfg.patch_w * d + d + d + (cfg.n_patches + 1) * d
    per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d
    return embed + L * per_layer + 2 * d


def head_params(cfg: BackboneConfig) -> int:
    return cfg.d * cfg.n_classes + cfg.n_classes


def adapter_site_count(method: Bottleneck | Conformer) -> int:
    return 1 if method.config == "pfeiffer" else 2


def closed_form(method: PetlMethod, cfg: BackboneConfig) -> int:
    """Trainable parameters a method adds or unfreezes, head excluded."""
    d, L = cfg.d, cfg.L
    if isinstance(method, FullFineTune):
        return backbone_total(cfg)
    if isinstance(method, LinearProbe):
        return 0
    if isinstance(method, BitFit):
        # q,k,v,o biases + both FF biases + both LN shifts
        return L * (4 * d + cfg.ff_dim + d + 2 * d)
    if isinstance(method, Lora):
        return L * len(method.targets) * 2 * d * method.r
    if isinstance(method, PromptShallow):
        return method.p * d
    if isinstance(method, (PromptDeep, Prefix)):
        return L * method.p * d
    if isinstance(method, Bottleneck):
        r = method.r
        per = 2 * d + (d * r + r) + (r * d + d)
        return adapter_site_count(method) * L * per
    if isinstance(method, Conformer):
        r, k = method.r, method.k
        per = 2 * d + (d * 2 * r + 2 * r) + (r * k + r) + 2 * r + (r * d + d)
        return adapter_site_count(method) * L * per
    raise TypeError(f"unknown method {method!r}")


def _group(pid: str, model: Backbone, plan: InjectionPlan | None) -> str:
    if plan is not None:
        owner = trainable_owner(model, plan, pid)
        if owner != "backbone":
            return owner
    parts = pid.split(".")
    return ".".join(parts[:2]) if parts[0] == "layer" else parts[0]


def count_trainable(model: Backbone, plan: InjectionPlan | None) -> ParamReport:
    """Enumerate the trainable mask into a :class:`ParamReport`."""
    store = model.store
    per_module: dict[str, int] = {}
    head = 0
    for pid in store.trainable_ids():
        n = store[pid].size
        if pid.startswith("head."):
            head += n
            continue
        key = _group(pid, model, plan)
        per_module[key] = per_module.get(key, 0) + n
    trainable = sum(per_module.values())
    full = backbone_total(model.cfg)
    method = plan.method if plan is not None else LinearProbe()
    report = ParamReport(method, store.count_total(), trainable, head, per_module, full,
                         closed_form(method, model.cfg), percent_of_full(trainable, full))
    report.notes = reference_notes(report, model.cfg)
    return report


def census(method: PetlMethod, cfg: BackboneConfig) -> ParamReport:
    """Build a model (placeholders only, no weights allocated) and count it."""
    model = Backbone(cfg, materialize=False)
    plan = inject(model, build_plan(method, cfg))
    return count_trainable(model, plan)


def percent_of_full(trainable: int | ParamReport, full_total: int) -> float:
    if isinstance(trainable, ParamReport):
        trainable = trainable.trainable_params
    if full_total <= 0:
        raise ValueError("full model parameter count must be positive")
    return trainable / full_total


def round_sig(x: float, sig: int = 2) -> float:
    if x == 0:
        return 0.0
    return round(x, sig - 1 - int(math.floor(math.log10(abs(x)))))


def format_percent(ratio: float, sig: int = 2) -> str:
    pct = round_sig(100.0 * ratio, sig)
    decimals = max(0, sig - 1 - int(math.floor(math.log10(abs(pct))))) if pct else 0
    return f"{pct:.{decimals}f}%"


def reference_notes(report: ParamReport, cfg: BackboneConfig) -> list[str]:
    if (cfg.d, cfg.L) != (768, 12):
        return []
    m = report.method
    key = (m.kind,) + tuple(getattr(m, a) for a in ("r", "p") if hasattr(m, a))
    if hasattr(m, "config"):
        key += (m.config,)
    if isinstance(m, Conformer) and m.k != 31:
        return []
    ref = REFERENCE_BUDGETS.get(key)
    if ref is None:
        return []
    value, exact = ref
    if exact:
        return [f"reference budget {value // 1000}K"]
    return [f"reference budget {value // 1000}K is approximate: closed form gives "
            f"{report.trainable_params:,}; the gap is not reconstructed"]


# ---------------------------------------------------------------- budgets

BUDGET_KNOB = {"lora": "r", "bottleneck": "r", "conformer": "r",
               "spt": "p", "dpt": "p", "prefix": "p"}


def solve_budget(family: str, target: int, cfg: BackboneConfig, **fixed) -> int:
    """Largest r (or p) whose closed-form count does not exceed ``target``."""
    try:
        knob = BUDGET_KNOB[family]
    except KeyError:
        raise ValueError(f"no budget knob for method {family!r}") from None

    def cost(v: int) -> int:
        return closed_form(make_method(family, **{**fixed, knob: v}), cfg)

    if cost(1) > target:
        raise ValueError(f"{family}: target {target} is below the minimum budget {cost(1)}")
    lo, hi = 1, 2
    while cost(hi) <= target:
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cost(mid) <= target:
            lo = mid
        else:
            hi = mid
    return lo


# --------------------------------------------------------------- emission

def report_table(reports: list[ParamReport]) -> str:
    rows = [("method", "hyper", "trainable", "closed_form", "head", "% of full", "notes")]
    for r in reports:
        rec = r.as_record()
        hyper = " ".join(f"{k}={rec[k]}" for k in ("r", "k", "p", "config", "mode", "s") if k in rec)
        rows.append((rec["method"], hyper, f"{r.trainable_params:,}", f"{r.closed_form:,}",
                     f"{r.head_params:,}", format_percent(r.percent_of_full), "; ".join(r.notes)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_jsonl(reports: list[ParamReport]) -> str:
    return "\n".join(json.dumps(r.as_record(), sort_keys=True) for r in reports)
