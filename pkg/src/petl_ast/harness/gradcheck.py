"""Finite-difference verification of model gradients."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..backbone import Backbone, SpectrogramBatch
from ..petl import InjectionPlan
from ..tensor import Tape, backward, no_grad

STEP = 1e-6
# Central differences at h=1e-6 on an O(1) loss resolve slopes only to about
# 1e-10 absolute, so denominators are floored here; below the floor a probe
# is effectively judged on absolute error.
REL_FLOOR = 1e-5


def rel_error(analytic: float, numeric: float, floor: float = REL_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


@dataclass
class Probe:
    pid: str
    index: tuple[int, ...]
    analytic: float | None
    numeric: float
    error: float | None


@dataclass
class GradcheckResult:
    max_rel_error: float
    probes: list[Probe] = field(default_factory=list)

    @property
    def n_checked(self) -> int:
        return sum(p.analytic is not None for p in self.probes)

    @property
    def no_gradient(self) -> list[Probe]:
        return [p for p in self.probes if p.analytic is None]

    def passed(self, tol: float = 1e-4) -> bool:
        return self.n_checked > 0 and self.max_rel_error < tol


def _loss(model, plan, batch) -> "ops.Tensor":
    logits = model.forward(batch.x, plan, training=False)
    return ops.cross_entropy(logits, batch.labels)


def randomize_trainable(model: Backbone, scale: float, seed: int) -> None:
    """Add Gaussian noise to trainable params so zero-initialized paths carry gradient."""
    rng = np.random.default_rng(seed)
    for pid in model.store.trainable_ids():
        t = model.store[pid]
        t.data += rng.normal(0.0, scale, size=t.shape)


def _draw(store, ids, n, rng) -> list[tuple[str, tuple[int, ...]]]:
    """Up to ``n`` distinct coordinates, uniform over all entries of ``ids``."""
    sizes = np.array([store[p].size for p in ids], dtype=np.int64)
    bounds = np.cumsum(sizes)
    flat = rng.choice(int(bounds[-1]), size=min(n, int(bounds[-1])), replace=False)
    out = []
    for f in np.sort(flat):
        k = int(np.searchsorted(bounds, f, side="right"))
        local = int(f - (bounds[k - 1] if k else 0))
        out.append((ids[k], tuple(int(i) for i in np.unravel_index(local, store[ids[k]].shape))))
    return out


def gradcheck(model: Backbone, plan: InjectionPlan | None, batch: SpectrogramBatch,
              n_probes: int = 200, seed: int = 0, h: float = STEP, randomize: float = 0.1,
              frozen_probes: int = 0, corrupt: float = 0.0) -> GradcheckResult:
    """Compare autodiff against central differences on random trainable coordinates.

    Works on a deep copy, so the caller's model is untouched. Batch norm runs
    in eval mode to keep the loss a deterministic function of the weights.
    ``frozen_probes`` extra coordinates are drawn from frozen parameters and
    reported with ``analytic=None``. ``corrupt`` scales the autodiff gradient
    by ``1 + corrupt`` before comparison (negative control).
    """
    model, plan = copy.deepcopy((model, plan))
    if randomize:
        randomize_trainable(model, randomize, seed + 1)
    store = model.store
    store.zero_grad()
    with Tape():
        backward(_loss(model, plan, batch))

    rng = np.random.default_rng(seed)
    picks = _draw(store, store.trainable_ids(), n_probes, rng)
    frozen = [p for p in store if p not in store.trainable_mask]
    if frozen_probes and frozen:
        picks += _draw(store, frozen, frozen_probes, rng)

    probes: list[Probe] = []
    worst = 0.0
    for pid, idx in picks:
        t = store[pid]
        orig = t.data[idx]
        with no_grad():
            t.data[idx] = orig + h
            up = _loss(model, plan, batch).item()
            t.data[idx] = orig - h
            down = _loss(model, plan, batch).item()
        t.data[idx] = orig
        numeric = (up - down) / (2.0 * h)
        if t.grad is None:
            probes.append(Probe(pid, idx, None, numeric, None))
            continue
        analytic = float(t.grad[idx]) * (1.0 + corrupt)
        err = rel_error(analytic, numeric)
        worst = max(worst, err)
        probes.append(Probe(pid, idx, analytic, numeric, err))
    return GradcheckResult(worst, probes)
