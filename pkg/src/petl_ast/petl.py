"""Parameter-efficient adaptation methods and their injection into the encoder.

Each method is a small frozen dataclass. :func:`build_plan` turns a method and
a :class:`BackboneConfig` into an :class:`InjectionPlan`: fresh trainable
tensors keyed by parameter id, plus the per-layer site assignment that
:func:`petl_ast.backbone.encode` consumes. :func:`inject` registers the plan's
tensors in a model's store and sets the trainable mask.

LoRA's B, the bottleneck up-projection and the conformer adapter's last
pointwise projection start at zero, so those plans leave the frozen model's
function unchanged at step 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import ClassVar, Union

import numpy as np

from . import ops
from .backbone import (  # noqa: F401  re-exported method ops
    Backbone,
    BackboneConfig,
    LayerSites,
    attach_prompts_deep,
    attach_prompts_shallow,
    freeze_all,
    lora_qv_forward,
    prefix_kv,
)
from .ops import BNState
from .tensor import Tensor

INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid method hyperparameters or an unsupported combination."""


# ------------------------------------------------------------------ methods

@dataclass(frozen=True)
class FullFineTune:
    kind: ClassVar[str] = "full"


@dataclass(frozen=True)
class LinearProbe:
    kind: ClassVar[str] = "linear"


@dataclass(frozen=True)
class BitFit:
    kind: ClassVar[str] = "bitfit"


@dataclass(frozen=True)
class Lora:
    r: int = 6
    alpha: float = 16.0
    s: float = 8.0
    targets: tuple[str, ...] = ("q", "v")
    kind: ClassVar[str] = "lora"


@dataclass(frozen=True)
class PromptShallow:
    p: int = 300
    kind: ClassVar[str] = "spt"


@dataclass(frozen=True)
class PromptDeep:
    p: int = 25
    kind: ClassVar[str] = "dpt"


@dataclass(frozen=True)
class Prefix:
    p: int = 24
    kind: ClassVar[str] = "prefix"


@dataclass(frozen=True)
class Bottleneck:
    r: int = 12
    config: str = "pfeiffer"
    mode: str = "parallel"
    activation: str = "relu"
    kind: ClassVar[str] = "bottleneck"


@dataclass(frozen=True)
class Conformer:
    r: int = 8
    k: int = 31
    config: str = "pfeiffer"
    mode: str = "parallel"
    kind: ClassVar[str] = "conformer"


PetlMethod = Union[FullFineTune, LinearProbe, BitFit, Lora, PromptShallow, PromptDeep,
                   Prefix, Bottleneck, Conformer]

METHODS: dict[str, type] = {
    cls.kind: cls
    for cls in (FullFineTune, LinearProbe, BitFit, Lora, PromptShallow, PromptDeep,
                Prefix, Bottleneck, Conformer)
}


def make_method(kind: str, **params) -> PetlMethod:
    """Build a method by short name, ignoring hyperparameters it does not take."""
    try:
        cls = METHODS[kind]
    except KeyError:
        raise ConfigError(f"unknown method {kind!r}; choose from {sorted(METHODS)}") from None
    names = set(cls.__dataclass_fields__)
    method = cls(**{k: v for k, v in params.items() if k in names and v is not None})
    validate(method)
    return method


def validate(method: PetlMethod) -> None:
    for name in ("r", "p", "k"):
        v = getattr(method, name, None)
        if v is not None and (int(v) != v or v < 1):
            raise ConfigError(f"{method.kind}: {name} must be a positive integer, got {v}")
    if isinstance(method, Lora):
        if method.s <= 0:
            raise ConfigError(f"lora: s must be > 0, got {method.s}")
        bad = set(method.targets) - {"q", "k", "v", "o"}
        if bad or not method.targets:
            raise ConfigError(f"lora: invalid targets {method.targets}")
    if isinstance(method, (Bottleneck, Conformer)):
        if method.config not in ("pfeiffer", "houlsby"):
            raise ConfigError(f"{method.kind}: config must be pfeiffer or houlsby, got {method.config!r}")
        if method.mode not in ("parallel", "sequential"):
            raise ConfigError(f"{method.kind}: mode must be parallel or sequential, got {method.mode!r}")
    if isinstance(method, Conformer) and method.mode != "parallel":
        raise ConfigError("conformer adapter only supports parallel insertion")
    if isinstance(method, Bottleneck) and method.activation != "relu":
        raise ConfigError(f"bottleneck: unsupported activation {method.activation!r}")


# ------------------------------------------------------------------- states

@dataclass
class LoraState:
    targets: tuple[str, ...]
    s: float
    a: dict[str, Tensor]
    b: dict[str, Tensor]

    def factors(self, name: str) -> tuple[Tensor, Tensor]:
        return self.a[name], self.b[name]


@dataclass
class BottleneckState:
    ln_gamma: Tensor
    ln_beta: Tensor
    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor

    def params(self) -> dict[str, Tensor]:
        return {"ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta,
                "down.weight": self.down_w, "down.bias": self.down_b,
                "up.weight": self.up_w, "up.bias": self.up_b}

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return bottleneck_forward(x, self)


@dataclass
class ConformerAdapterState:
    ln_gamma: Tensor
    ln_beta: Tensor
    pw1_w: Tensor
    pw1_b: Tensor
    dw_w: Tensor
    dw_b: Tensor
    bn: BNState
    pw2_w: Tensor
    pw2_b: Tensor

    def params(self) -> dict[str, Tensor]:
        return {"ln.gamma": self.ln_gamma, "ln.beta": self.ln_beta,
                "pw1.weight": self.pw1_w, "pw1.bias": self.pw1_b,
                "dw.weight": self.dw_w, "dw.bias": self.dw_b,
                "bn.gamma": self.bn.gamma, "bn.beta": self.bn.beta,
                "pw2.weight": self.pw2_w, "pw2.bias": self.pw2_b}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn.running_mean": self.bn.running_mean, "bn.running_var": self.bn.running_var}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        self.bn.running_mean = np.array(values["bn.running_mean"], dtype=np.float64)
        self.bn.running_var = np.array(values["bn.running_var"], dtype=np.float64)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return conformer_adapter_forward(x, self, training)


def _normal(rng, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _const(value, *shape) -> Tensor:
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


def new_bottleneck(d: int, r: int, rng) -> BottleneckState:
    return BottleneckState(_const(1.0, d), _const(0.0, d), _normal(rng, d, r), _const(0.0, r),
                           _const(0.0, r, d), _const(0.0, d))


def new_conformer(d: int, r: int, k: int, rng) -> ConformerAdapterState:
    bn = BNState(_const(1.0, r), _const(0.0, r))
    return ConformerAdapterState(_const(1.0, d), _const(0.0, d),
                                 _normal(rng, d, 2 * r), _const(0.0, 2 * r),
                                 _normal(rng, r, k), _const(0.0, r), bn,
                                 _const(0.0, r, d), _const(0.0, d))


# ---------------------------------------------------------------- forwards

def lora_merge(w, a, b_mat, s: float) -> np.ndarray:
    """Deployment weight W + s A B."""
    val = lambda t: t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return val(w) + s * (val(a) @ val(b_mat))


def bottleneck_forward(x: Tensor, state: BottleneckState) -> Tensor:
    """LN -> down (d->r) -> ReLU -> up (r->d)."""
    h = ops.layer_norm(x, state.ln_gamma, state.ln_beta)
    h = ops.relu(ops.linear(h, state.down_w, state.down_b))
    return ops.linear(h, state.up_w, state.up_b)


def conformer_adapter_forward(x: Tensor, state: ConformerAdapterState, training: bool) -> Tensor:
    """LN -> pointwise d->2r -> GLU -> depthwise conv (k, along tokens) -> BN -> swish -> pointwise r->d."""
    h = ops.layer_norm(x, state.ln_gamma, state.ln_beta)
    h = ops.glu(ops.linear(h, state.pw1_w, state.pw1_b))
    h = ops.depthwise_conv1d(h, state.dw_w, state.dw_b)
    h = ops.swish(ops.batch_norm_1d(h, state.bn, training))
    return ops.linear(h, state.pw2_w, state.pw2_b)


# ------------------------------------------------------------------- plans

SITES = ("mhsa_parallel", "mhsa_sequential", "ff_parallel", "ff_sequential")


def adapter_sites(config: str, mode: str) -> tuple[str, ...]:
    """Where adapters go in each layer.

    Parallel: Pfeiffer beside MHSA, Houlsby beside MHSA and FF. Sequential:
    Pfeiffer after FF, Houlsby after both sub-layers.
    """
    if mode == "parallel":
        return ("mhsa_parallel",) if config == "pfeiffer" else ("mhsa_parallel", "ff_parallel")
    return ("ff_sequential",) if config == "pfeiffer" else ("mhsa_sequential", "ff_sequential")


@dataclass
class InjectionPlan:
    method: PetlMethod
    layers: list[LayerSites]
    input_prompts: Tensor | None = None
    params: dict[str, Tensor] = field(default_factory=dict)
    owner: dict[str, str] = field(default_factory=dict)
    modules: dict[str, object] = field(default_factory=dict)

    def adapter_count(self) -> int:
        return sum(len(s.adapters()) for s in self.layers)

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, mod in self.modules.items():
            if hasattr(mod, "buffers"):
                out.update({f"{name}.{k}": v for k, v in mod.buffers().items()})
        return out

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for name, mod in self.modules.items():
            if hasattr(mod, "load_buffers"):
                mod.load_buffers({k[len(name) + 1:]: v for k, v in values.items()
                                  if k.startswith(name + ".")})


def build_plan(method: PetlMethod, cfg: BackboneConfig, seed: int = 0) -> InjectionPlan:
    validate(method)
    rng = np.random.default_rng(seed)
    d, L = cfg.d, cfg.L
    plan = InjectionPlan(method, [LayerSites() for _ in range(L)])

    def register(module_name: str, params: dict[str, Tensor], module=None):
        for key, t in params.items():
            pid = f"{module_name}.{key}" if key else module_name
            plan.params[pid] = t
            plan.owner[pid] = module_name
        if module is not None:
            plan.modules[module_name] = module

    if isinstance(method, Lora):
        for i, sites in enumerate(plan.layers):
            a = {t: _normal(rng, d, method.r) for t in method.targets}
            b = {t: _const(0.0, method.r, d) for t in method.targets}
            sites.lora = LoraState(tuple(method.targets), method.s, a, b)
            name = f"layer.{i}.mhsa.lora"
            register(name, {**{f"A_{t}": a[t] for t in method.targets},
                            **{f"B_{t}": b[t] for t in method.targets}}, sites.lora)
    elif isinstance(method, PromptShallow):
        plan.input_prompts = _normal(rng, method.p, d)
        register("prompt.shallow", {"": plan.input_prompts})
    elif isinstance(method, PromptDeep):
        for i, sites in enumerate(plan.layers):
            sites.prompts = _normal(rng, method.p, d)
            register(f"layer.{i}.prompt", {"": sites.prompts})
    elif isinstance(method, Prefix):
        for i, sites in enumerate(plan.layers):
            sites.kv_prefix = _normal(rng, method.p, d)
            register(f"layer.{i}.mhsa.prefix", {"": sites.kv_prefix})
    elif isinstance(method, (Bottleneck, Conformer)):
        for i, sites in enumerate(plan.layers):
            for site in adapter_sites(method.config, method.mode):
                if isinstance(method, Bottleneck):
                    mod = new_bottleneck(d, method.r, rng)
                else:
                    mod = new_conformer(d, method.r, method.k, rng)
                setattr(sites, site, mod)
                register(f"layer.{i}.{site}.{method.kind}", mod.params(), mod)
    return plan


def apply_bitfit_mask(model: Backbone) -> None:
    """Make every in-layer additive bias and LN shift trainable, plus the head."""
    for pid in model.backbone_ids:
        if pid.startswith("layer.") and pid.endswith((".bias", ".beta")):
            model.store.set_trainable(pid, True)
    _head_trainable(model)


def bitfit_ids(model: Backbone) -> list[str]:
    return sorted(pid for pid in model.backbone_ids
                  if pid.startswith("layer.") and pid.endswith((".bias", ".beta")))


def _head_trainable(model: Backbone) -> None:
    for pid in ("head.weight", "head.bias"):
        model.store.set_trainable(pid, True)


def inject(model: Backbone, plan: InjectionPlan) -> InjectionPlan:
    """Register the plan's tensors on ``model`` and set the trainable mask."""
    method = plan.method
    for pid, t in plan.params.items():
        model.store.add(pid, t, trainable=True)
    if isinstance(method, FullFineTune):
        for pid in model.backbone_ids:
            model.store.set_trainable(pid, True)
    else:
        freeze_all(model)
    if isinstance(method, BitFit):
        apply_bitfit_mask(model)
    _head_trainable(model)
    return plan


def trainable_owner(model: Backbone, plan: InjectionPlan, pid: str) -> str:
    """Which module a trainable id belongs to (adapter/prompt name, 'head', 'backbone')."""
    if pid.startswith("head."):
        return "head"
    if pid in plan.owner:
        return plan.owner[pid]
    if pid in model.backbone_ids:
        return "backbone"
    raise KeyError(pid)


# Desk-scale hyperparameters for d=64, L=4. LoRA and the adapters land near a
# 4-6K budget, like the full-scale defaults near 220-250K. Prompt counts are
# instead scaled to the 17-token desk sequence: budget-matched counts (16-64
# prompts) swamp the patch tokens and train to chance.
DESK_DEFAULTS: dict[str, dict] = {
    "lora": {"r": 4},
    "spt": {"p": 4},
    "dpt": {"p": 4},
    "prefix": {"p": 4},
    "bottleneck": {"r": 8},
    "conformer": {"r": 5, "k": 3},
}


def desk_method(kind: str, **overrides) -> PetlMethod:
    params = {**DESK_DEFAULTS.get(kind, {}), **{k: v for k, v in overrides.items() if v is not None}}
    return make_method(kind, **params)
