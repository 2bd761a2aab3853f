"""Desk-scale pretrain -> adapt pipeline."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import ops
from ..backbone import Backbone, BackboneConfig, SpectrogramBatch
from ..checkpoint import load_into, params_digest, save_records, store_records
from ..petl import FullFineTune, InjectionPlan, PetlMethod, build_plan, inject
from ..tensor import Tape, backward, no_grad
from .data import Dataset, SyntheticTaskSpec, gen_synthetic_task
from .optim import AdamW, TrainConfig, cosine_lr

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float
    trainable_params: int
    wall_time: float | None = None


@dataclass
class TrainResult:
    metrics: list[MetricsRecord]
    best_epoch: int
    best_val_accuracy: float
    test_loss: float
    test_accuracy: float
    checkpoint: dict[str, np.ndarray] = field(repr=False)
    frozen_digest_before: str = ""
    frozen_digest_after: str = ""


def evaluate(model: Backbone, plan: InjectionPlan | None, batch: SpectrogramBatch,
             batch_size: int = 64) -> tuple[float, float]:
    """Mean loss and accuracy in eval mode (BN running stats, no tape)."""
    total_loss, correct = 0.0, 0
    with no_grad():
        for lo in range(0, len(batch), batch_size):
            x = batch.x[lo:lo + batch_size]
            y = batch.labels[lo:lo + batch_size]
            logits = model.forward(x, plan, training=False)
            total_loss += ops.cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = len(batch)
    return total_loss / n, correct / n


def frozen_ids(model: Backbone) -> list[str]:
    return [pid for pid in model.store if pid not in model.store.trainable_mask]


def _snapshot(model: Backbone, plan: InjectionPlan | None) -> dict[str, np.ndarray]:
    recs = store_records(model.store, model.store.trainable_ids())
    if plan is not None:
        recs.update(plan.buffers())
        recs = {k: np.array(v) for k, v in recs.items()}
    return recs


def _restore(model: Backbone, plan: InjectionPlan | None, recs: dict[str, np.ndarray]) -> None:
    params = {k: v for k, v in recs.items() if k in model.store}
    load_into(model.store, params)
    if plan is not None:
        plan.load_buffers({k: v for k, v in recs.items() if k not in model.store})


def train(model: Backbone, plan: InjectionPlan | None, ds: Dataset, cfg: TrainConfig,
          out_dir: str | Path | None = None, record_wall_time: bool = False,
          on_epoch=None) -> TrainResult:
    """Train the trainable parameters of ``model`` on ``ds.train``.

    Keeps the trainable parameters (plus batch-norm running stats) from the
    epoch with the best validation accuracy, restores them, and scores the
    test split with them. Writes ``petl.ckpt`` to ``out_dir`` when given.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    store = model.store
    n_train = len(ds.train)
    steps_per_epoch = -(-n_train // cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    n_trainable = store.count_trainable()
    frozen = frozen_ids(model)
    digest_before = params_digest(store, frozen)
    t0 = time.perf_counter()
    metrics: list[MetricsRecord] = []
    best = (-1.0, np.inf)
    best_epoch, best_state = 0, _snapshot(model, plan)
    grad_norm, step, lr = 0.0, 0, cfg.lr

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        ep_loss, ep_correct = 0.0, 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            x, y = ds.train.x[idx], ds.train.labels[idx]
            lr = cosine_lr(step, total, cfg.lr)
            store.zero_grad()
            with Tape():
                logits = model.forward(x, plan, training=True)
                loss = ops.cross_entropy(logits, y)
                if not np.isfinite(loss.item()):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}: lr={lr:.3g}, "
                        f"previous grad-norm={grad_norm:.3g}"
                    )
                backward(loss)
            grad_norm = float(np.sqrt(sum(float((store[p].grad ** 2).sum())
                                          for p in store.trainable_ids()
                                          if store[p].grad is not None)))
            opt.step(store, lr)
            step += 1
            ep_loss += loss.item() * len(idx)
            ep_correct += int((logits.data.argmax(axis=1) == y).sum())
        wall = time.perf_counter() - t0 if record_wall_time else None
        metrics.append(MetricsRecord(epoch, "train", ep_loss / n_train, ep_correct / n_train,
                                     lr, n_trainable, wall))
        v_loss, v_acc = evaluate(model, plan, ds.val)
        metrics.append(MetricsRecord(epoch, "val", v_loss, v_acc, lr, n_trainable, wall))
        if v_acc > best[0] or (v_acc == best[0] and v_loss < best[1]):
            best, best_epoch, best_state = (v_acc, v_loss), epoch, _snapshot(model, plan)
        if on_epoch is not None:
            on_epoch(metrics[-2:])
        log.debug("epoch %d train %.4f val %.4f/%.3f", epoch, ep_loss / n_train, v_loss, v_acc)

    _restore(model, plan, best_state)
    t_loss, t_acc = evaluate(model, plan, ds.test)
    wall = time.perf_counter() - t0 if record_wall_time else None
    metrics.append(MetricsRecord(best_epoch, "test", t_loss, t_acc, lr, n_trainable, wall))
    if out_dir is not None:
        save_records(Path(out_dir) / "petl.ckpt", best_state)
    return TrainResult(metrics, best_epoch, best[0], t_loss, t_acc, best_state,
                       digest_before, params_digest(store, frozen))


# ------------------------------------------------------------ pipeline


@dataclass(frozen=True)
class PretrainConfig:
    """Backbone pretraining on the ``bands`` family."""

    n_classes: int = 8
    samples_per_class: int = 100
    noise_std: float = 0.3
    epochs: int = 30
    lr: float = 0.0005
    weight_decay: float = 0.05


def pretrain_backbone(cfg: BackboneConfig, pre: PretrainConfig = PretrainConfig(),
                      seed: int = 0) -> Backbone:
    """Fully train a fresh encoder on the pretraining family; returns it frozen-ready."""
    cfg = replace(cfg, n_classes=pre.n_classes, seed=seed)
    task = SyntheticTaskSpec(n_classes=pre.n_classes, samples_per_class=pre.samples_per_class,
                             freq_bins=cfg.freq_bins, time_bins=cfg.time_bins, family="bands",
                             noise_std=pre.noise_std, seed=10_000 + seed)
    model = Backbone(cfg)
    plan = inject(model, build_plan(FullFineTune(), cfg))
    train(model, plan, gen_synthetic_task(task),
          TrainConfig(lr=pre.lr, weight_decay=pre.weight_decay, epochs=pre.epochs, seed=seed))
    return model


def backbone_records(model: Backbone) -> dict[str, np.ndarray]:
    return store_records(model.store, sorted(model.backbone_ids))


def adapt(backbone: dict[str, np.ndarray], cfg: BackboneConfig, method: PetlMethod,
          ds: Dataset, tcfg: TrainConfig, out_dir=None, record_wall_time: bool = False,
          head_seed: int | None = None) -> tuple[Backbone, InjectionPlan, TrainResult]:
    """Load pretrained backbone weights, attach ``method`` with a fresh head, train."""
    seed = tcfg.seed if head_seed is None else head_seed
    model = Backbone(replace(cfg, n_classes=ds.n_classes, seed=seed))
    load_into(model.store, backbone)
    plan = inject(model, build_plan(method, model.cfg, seed=seed))
    result = train(model, plan, ds, tcfg, out_dir=out_dir, record_wall_time=record_wall_time)
    return model, plan, result


def default_lr(method: PetlMethod) -> float:
    """0.01 for prompt-style methods, 0.005 for everything else."""
    return 0.01 if method.kind in ("spt", "dpt", "prefix") else 0.005
