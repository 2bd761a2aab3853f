"""Flat experiment configuration shared by the CLI and its config files.

A config file is a single JSON object whose keys are drawn from ``KEYS``;
nesting is not allowed and unknown keys are rejected. Command-line flags use
the same names and override file values. Example::

    {"method": "conformer", "r": 4, "k": 5, "epochs": 20, "seed": 1}
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .backbone import BackboneConfig
from .harness import PretrainConfig, SyntheticTaskSpec, TrainConfig, default_lr
from .petl import ConfigError, PetlMethod, desk_method, make_method

OUTPUT_ENV = "PETL_AST_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# key -> (type, help). float keys also accept ints.
KEYS: dict[str, tuple[type, str]] = {
    # encoder
    "d": (int, "hidden size"),
    "L": (int, "number of layers"),
    "heads": (int, "attention heads"),
    "ff_ratio": (int, "feed-forward expansion"),
    "freq_bins": (int, "spectrogram height"),
    "time_bins": (int, "spectrogram width"),
    "patch_h": (int, "patch height"),
    "patch_w": (int, "patch width"),
    "full_scale": (bool, "768/12/12 encoder on 128x640 inputs (count only)"),
    # method
    "method": (str, "full, linear, bitfit, lora, spt, dpt, prefix, bottleneck, conformer"),
    "r": (int, "LoRA rank or adapter bottleneck width"),
    "k": (int, "conformer depthwise kernel size"),
    "p": (int, "number of prompt or prefix vectors"),
    "s": (float, "LoRA scale"),
    "config": (str, "adapter placement: pfeiffer or houlsby"),
    "mode": (str, "adapter insertion: parallel or sequential"),
    "activation": (str, "bottleneck nonlinearity"),
    # optimisation
    "lr": (float, "initial learning rate (default depends on method)"),
    "weight_decay": (float, "decoupled weight decay"),
    "epochs": (int, "training epochs"),
    "batch_size": (int, "minibatch size"),
    "seed": (int, "seed for pretraining, task, init and batching"),
    # downstream task
    "n_classes": (int, "downstream classes"),
    "samples_per_class": (int, "downstream samples per class before the split"),
    "family": (str, "downstream pattern family: chirp or bands"),
    "noise_std": (float, "additive Gaussian noise"),
    # pretraining
    "pretrain_classes": (int, "pretraining classes"),
    "pretrain_samples_per_class": (int, "pretraining samples per class"),
    "pretrain_epochs": (int, "pretraining epochs"),
    "pretrain_lr": (float, "pretraining learning rate"),
    # output
    "output_dir": (str, "run directory"),
}

_BACKBONE = ("d", "L", "heads", "ff_ratio", "freq_bins", "time_bins", "patch_h", "patch_w")
_METHOD = ("r", "k", "p", "s", "config", "mode", "activation")
_PRETRAIN = {"pretrain_classes": "n_classes", "pretrain_samples_per_class": "samples_per_class",
             "pretrain_epochs": "epochs", "pretrain_lr": "lr"}


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    method: PetlMethod = field(default_factory=lambda: desk_method("conformer"))
    train: TrainConfig = field(default_factory=TrainConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    output_dir: Path = Path(DEFAULT_OUTPUT_ROOT)
    full_scale: bool = False

    @property
    def seed(self) -> int:
        return self.train.seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed), task=replace(self.task, seed=seed))

    def with_method(self, method: PetlMethod, lr: float | None = None) -> "ExperimentConfig":
        """Swap the method; the learning rate follows the method default unless given."""
        return replace(self, method=method,
                       train=replace(self.train, lr=lr if lr is not None else default_lr(method)))

    def to_flat(self) -> dict:
        """The flat key/value view; ``from_flat(to_flat())`` round-trips."""
        out = {k: getattr(self.backbone, k) for k in _BACKBONE}
        out["full_scale"] = self.full_scale
        out["method"] = self.method.kind
        out.update({k: getattr(self.method, k) for k in _METHOD if hasattr(self.method, k)})
        out.update({k: getattr(self.train, k) for k in ("lr", "weight_decay", "epochs", "batch_size", "seed")})
        out.update({k: getattr(self.task, k) for k in ("n_classes", "samples_per_class", "family", "noise_std")})
        out.update({k: getattr(self.pretrain, v) for k, v in _PRETRAIN.items()})
        out["output_dir"] = str(self.output_dir)
        return out


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ENV, DEFAULT_OUTPUT_ROOT))


def check_values(values: dict) -> dict:
    """Reject unknown keys and mistyped values; returns a shallow copy."""
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    out = {}
    for key, v in values.items():
        if v is None:
            continue
        typ = KEYS[key][0]
        ok = (isinstance(v, typ) and not (typ is int and isinstance(v, bool))) or (
            typ is float and isinstance(v, int) and not isinstance(v, bool))
        if not ok:
            raise ConfigError(f"config key {key!r} expects {typ.__name__}, got {v!r}")
        out[key] = float(v) if typ is float else v
    return out


def load_config_file(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a JSON object of flat key/value pairs")
    return check_values(raw)


def from_flat(values: dict) -> ExperimentConfig:
    """Validate a flat mapping and build the typed configuration."""
    v = check_values(values)
    full = v.get("full_scale", False)
    try:
        base = BackboneConfig.full_scale() if full else BackboneConfig()
        backbone = replace(base, **{k: v[k] for k in _BACKBONE if k in v})
        hyper = {k: v[k] for k in _METHOD if k in v}
        kind = v.get("method", "conformer")
        method = make_method(kind, **hyper) if full else desk_method(kind, **hyper)
        train = TrainConfig(lr=v.get("lr", default_lr(method)),
                            weight_decay=v.get("weight_decay", TrainConfig.weight_decay),
                            epochs=v.get("epochs", TrainConfig.epochs),
                            batch_size=v.get("batch_size", TrainConfig.batch_size),
                            seed=v.get("seed", 0))
        task = SyntheticTaskSpec(**{k: v[k] for k in ("n_classes", "samples_per_class", "family", "noise_std")
                                    if k in v},
                                 freq_bins=backbone.freq_bins, time_bins=backbone.time_bins,
                                 seed=train.seed)
        pre = PretrainConfig(**{dst: v[src] for src, dst in _PRETRAIN.items() if src in v})
        if pre.epochs < 1 or pre.lr <= 0 or pre.n_classes < 2:
            raise ValueError("pretraining needs epochs >= 1, lr > 0 and at least two classes")
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = Path(v["output_dir"]) if "output_dir" in v else default_output_root()
    return ExperimentConfig(backbone, method, train, task, pre, out, full)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")


def describe_keys() -> str:
    width = max(map(len, KEYS))
    return "\n".join(f"  {k.ljust(width)}  {t.__name__:5}  {h}" for k, (t, h) in KEYS.items())


__all__ = ["ExperimentConfig", "KEYS", "OUTPUT_ENV", "check_values", "default_output_root",
           "describe_keys", "dump_config", "from_flat", "load_config_file"]
