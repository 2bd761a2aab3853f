"""A small AST-style pre-LN transformer encoder over patchified spectrograms.

Parameters live in a single :class:`ParamStore` keyed by dotted ids::

    embed.patch.weight / embed.patch.bias / embed.cls / embed.pos
    layer.{i}.ln1.gamma|beta        layer.{i}.ln2.gamma|beta
    layer.{i}.mhsa.{q,k,v,o}.weight|bias
    layer.{i}.ff.fc1.weight|bias    layer.{i}.ff.fc2.weight|bias
    final_ln.gamma|beta
    head.weight / head.bias

Adaptation modules are duck-typed: anything in an injection site is called as
``module(x, training)`` and returns a tensor shaped like ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ParamStore, Tensor, no_grad

INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    L: int = 4
    heads: int = 4
    ff_ratio: int = 4
    freq_bins: int = 32
    time_bins: int = 32
    patch_h: int = 8
    patch_w: int = 8
    n_classes: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.L < 1:
            raise ValueError(f"L must be >= 1, got {self.L}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.freq_bins % self.patch_h or self.time_bins % self.patch_w:
            raise ValueError(
                f"patch {self.patch_h}x{self.patch_w} does not tile "
                f"{self.freq_bins}x{self.time_bins} spectrograms"
            )

    @property
    def grid(self) -> tuple[int, int]:
        return self.freq_bins // self.patch_h, self.time_bins // self.patch_w

    @property
    def n_patches(self) -> int:
        f, t = self.grid
        return f * t

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def ff_dim(self) -> int:
        return self.ff_ratio * self.d

    @classmethod
    def full_scale(cls, n_classes: int = 50) -> "BackboneConfig":
        """AST-sized dims: 768 hidden, 12 layers, 16x16 patches on 128x640 inputs.

        Used for parameter census only; this size is never trained here.
        """
        return cls(d=768, L=12, heads=12, ff_ratio=4, freq_bins=128, time_bins=640,
                   patch_h=16, patch_w=16, n_classes=n_classes)


@dataclass
class SpectrogramBatch:
    x: np.ndarray          # (B, F, T)
    labels: np.ndarray     # (B,) int

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class LayerSites:
    """Per-layer injection points. Empty sites are ``None``."""

    mhsa_parallel: object = None
    mhsa_sequential: object = None
    ff_parallel: object = None
    ff_sequential: object = None
    kv_prefix: Tensor | None = None
    prompts: Tensor | None = None
    lora: object = None

    def adapters(self) -> list:
        return [m for m in (self.mhsa_parallel, self.mhsa_sequential,
                            self.ff_parallel, self.ff_sequential) if m is not None]


_EMPTY = LayerSites()


def layer_ids(i: int) -> list[str]:
    p = f"layer.{i}."
    ids = [p + "ln1.gamma", p + "ln1.beta"]
    for proj in "qkvo":
        ids += [f"{p}mhsa.{proj}.weight", f"{p}mhsa.{proj}.bias"]
    ids += [p + "ln2.gamma", p + "ln2.beta",
            p + "ff.fc1.weight", p + "ff.fc1.bias", p + "ff.fc2.weight", p + "ff.fc2.bias"]
    return ids


class Backbone:
    """Frozen-able encoder plus classification head."""

    def __init__(self, cfg: BackboneConfig, materialize: bool = True):
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.seed)
        d, n = cfg.d, cfg.n_patches

        def normal(*shape):
            if not materialize:
                return Tensor.placeholder(shape)
            return rng.normal(0.0, INIT_STD, size=shape)

        def const(value, *shape):
            if not materialize:
                return Tensor.placeholder(shape)
            return np.full(shape, value, dtype=np.float64)

        add = self.store.add
        add("embed.patch.weight", normal(cfg.patch_h * cfg.patch_w, d), True)
        add("embed.patch.bias", const(0.0, d), True)
        add("embed.cls", normal(1, d), True)
        add("embed.pos", normal(n + 1, d), True)
        for i in range(cfg.L):
            p = f"layer.{i}."
            add(p + "ln1.gamma", const(1.0, d), True)
            add(p + "ln1.beta", const(0.0, d), True)
            for proj in "qkvo":
                add(f"{p}mhsa.{proj}.weight", normal(d, d), True)
                add(f"{p}mhsa.{proj}.bias", const(0.0, d), True)
            add(p + "ln2.gamma", const(1.0, d), True)
            add(p + "ln2.beta", const(0.0, d), True)
            add(p + "ff.fc1.weight", normal(d, cfg.ff_dim), True)
            add(p + "ff.fc1.bias", const(0.0, cfg.ff_dim), True)
            add(p + "ff.fc2.weight", normal(cfg.ff_dim, d), True)
            add(p + "ff.fc2.bias", const(0.0, d), True)
        add("final_ln.gamma", const(1.0, d), True)
        add("final_ln.beta", const(0.0, d), True)
        self.backbone_ids = frozenset(self.store.entries)
        self.materialized = materialize
        self._add_head(cfg.n_classes, normal, const)

    def _add_head(self, n_classes: int, normal, const) -> None:
        self.store.add("head.weight", normal(self.cfg.d, n_classes), True)
        self.store.add("head.bias", const(0.0, n_classes), True)

    def reset_head(self, n_classes: int, seed: int) -> None:
        """Replace the classifier with a fresh one for a new label set."""
        rng = np.random.default_rng(seed)
        for pid in ("head.weight", "head.bias"):
            del self.store.entries[pid]
            self.store.trainable_mask.discard(pid)
        self.cfg = _replace(self.cfg, n_classes=n_classes)
        self._add_head(n_classes, lambda *s: rng.normal(0.0, INIT_STD, size=s),
                       lambda v, *s: np.full(s, v, dtype=np.float64))

    def __getitem__(self, pid: str) -> Tensor:
        return self.store[pid]

    def backbone_param_count(self) -> int:
        return sum(self.store[pid].size for pid in self.backbone_ids)

    # ------------------------------------------------------------ forward

    def forward(self, x: np.ndarray, plan=None, training: bool = False, trace: dict | None = None) -> Tensor:
        return classify(encode(self, x, plan, training, trace), self)

    def predict(self, x: np.ndarray, plan=None) -> np.ndarray:
        with no_grad():
            return self.forward(x, plan, training=False).data


def _replace(cfg: BackboneConfig, **kw) -> BackboneConfig:
    from dataclasses import replace
    return replace(cfg, **kw)


def patchify(x: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """(B, F, T) -> (B, N, patch_h*patch_w), frequency-major token order."""
    if x.ndim != 3 or x.shape[1:] != (cfg.freq_bins, cfg.time_bins):
        raise ValueError(
            f"expected spectrograms of shape (B, {cfg.freq_bins}, {cfg.time_bins}), got {x.shape}"
        )
    b = x.shape[0]
    nf, nt = cfg.grid
    p = x.reshape(b, nf, cfg.patch_h, nt, cfg.patch_w).transpose(0, 1, 3, 2, 4)
    return p.reshape(b, nf * nt, cfg.patch_h * cfg.patch_w)


def patch_embed(model: Backbone, x: np.ndarray) -> Tensor:
    """Linear patch projection, CLS prepended at position 0, positional embeddings added."""
    cfg = model.cfg
    patches = Tensor(patchify(np.asarray(x, dtype=np.float64), cfg))
    b = patches.shape[0]
    tok = ops.linear(patches, model["embed.patch.weight"], model["embed.patch.bias"])
    cls = ops.expand(ops.reshape(model["embed.cls"], (1, 1, cfg.d)), (b, 1, cfg.d))
    return ops.add(ops.concat([cls, tok], axis=1), model["embed.pos"])


def attach_prompts_shallow(x: Tensor, prompts: Tensor) -> Tensor:
    """Insert prompt rows right after CLS: (B, 1+N, d) -> (B, 1+p+N, d)."""
    b, _, d = x.shape
    p = ops.expand(ops.reshape(prompts, (1,) + prompts.shape), (b,) + prompts.shape)
    return ops.concat([x[:, :1], p, x[:, 1:]], axis=1)


def attach_prompts_deep(x: Tensor, prompts: Tensor, layer: int) -> Tensor:
    """Layer 0 inserts prompts after CLS; later layers overwrite those p rows."""
    if layer == 0:
        return attach_prompts_shallow(x, prompts)
    b = x.shape[0]
    n_p = prompts.shape[0]
    p = ops.expand(ops.reshape(prompts, (1,) + prompts.shape), (b,) + prompts.shape)
    return ops.concat([x[:, :1], p, x[:, 1 + n_p:]], axis=1)


def lora_qv_forward(x: Tensor, w: Tensor, a: Tensor, b_mat: Tensor, s: float) -> Tensor:
    """Frozen projection plus scaled low-rank update: x W + s (x A) B."""
    return ops.add(ops.matmul(x, w), ops.scale(ops.matmul(ops.matmul(x, a), b_mat), s))


def prefix_kv(k: Tensor, v: Tensor, prefix: Tensor, w_k: Tensor, w_v: Tensor) -> tuple[Tensor, Tensor]:
    """Prepend prefix rows projected by the frozen key/value weights.

    Keys become [P W_k; K] and values [P W_v; V]; queries are untouched.
    """
    b, _, d = k.shape
    n_p = prefix.shape[0]
    pk = ops.expand(ops.reshape(ops.matmul(prefix, w_k), (1, n_p, d)), (b, n_p, d))
    pv = ops.expand(ops.reshape(ops.matmul(prefix, w_v), (1, n_p, d)), (b, n_p, d))
    return ops.concat([pk, k], axis=1), ops.concat([pv, v], axis=1)


def mhsa(model: Backbone, i: int, h: Tensor, sites: LayerSites, trace: dict | None = None) -> Tensor:
    cfg = model.cfg
    p = f"layer.{i}.mhsa."
    b, s, d = h.shape
    nh, dh = cfg.heads, cfg.head_dim

    def proj(name):
        w = model[p + name + ".weight"]
        lora = sites.lora
        if lora is not None and name in lora.targets:
            a, bm = lora.factors(name)
            y = lora_qv_forward(h, w, a, bm, lora.s)
        else:
            y = ops.matmul(h, w)
        return ops.add(y, model[p + name + ".bias"])

    q, k, v = proj("q"), proj("k"), proj("v")
    if sites.kv_prefix is not None:
        k, v = prefix_kv(k, v, sites.kv_prefix, model[p + "k.weight"], model[p + "v.weight"])
    sk = k.shape[1]

    def heads(t, n):
        return ops.transpose(ops.reshape(t, (b, n, nh, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q, s), heads(k, sk), heads(v, sk)
    scores = ops.scale(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    probs = ops.softmax_rows(scores)
    ctx = ops.reshape(ops.transpose(ops.matmul(probs, vh), (0, 2, 1, 3)), (b, s, d))
    if trace is not None:
        trace.setdefault("attn", []).append(probs.data)
        trace.setdefault("keys", []).append(k.data)
        trace.setdefault("q_len", []).append(s)
    return ops.linear(ctx, model[p + "o.weight"], model[p + "o.bias"])


def feed_forward(model: Backbone, i: int, h: Tensor) -> Tensor:
    p = f"layer.{i}.ff."
    z = ops.gelu(ops.linear(h, model[p + "fc1.weight"], model[p + "fc1.bias"]))
    return ops.linear(z, model[p + "fc2.weight"], model[p + "fc2.bias"])


def layer_forward(model: Backbone, i: int, x: Tensor, sites: LayerSites | None = None,
                  training: bool = False, trace: dict | None = None) -> Tensor:
    """One pre-LN block: x_hat = x + MHSA(LN(x)); out = x_hat + FF(LN(x_hat)).

    Parallel adapters see the same normalized input as their sub-layer and
    add into the residual sum. Sequential adapters read the sub-layer output
    and add their result on top of it.
    """
    sites = sites or _EMPTY
    p = f"layer.{i}."
    h = ops.layer_norm(x, model[p + "ln1.gamma"], model[p + "ln1.beta"])
    attn = mhsa(model, i, h, sites, trace)
    x_hat = ops.add(x, attn)
    if sites.mhsa_parallel is not None:
        x_hat = ops.add(x_hat, sites.mhsa_parallel(h, training))
    if sites.mhsa_sequential is not None:
        x_hat = ops.add(x_hat, sites.mhsa_sequential(attn, training))
    h2 = ops.layer_norm(x_hat, model[p + "ln2.gamma"], model[p + "ln2.beta"])
    ff = feed_forward(model, i, h2)
    out = ops.add(x_hat, ff)
    if sites.ff_parallel is not None:
        out = ops.add(out, sites.ff_parallel(h2, training))
    if sites.ff_sequential is not None:
        out = ops.add(out, sites.ff_sequential(ff, training))
    if trace is not None:
        trace.setdefault("seq_len", []).append(x.shape[1])
    return out


def encode(model: Backbone, x: np.ndarray, plan=None, training: bool = False,
           trace: dict | None = None) -> Tensor:
    """Embed, apply prompts per plan, run every layer, final LN; return CLS rows (B, d)."""
    cfg = model.cfg
    h = patch_embed(model, x)
    layers = plan.layers if plan is not None else None
    if plan is not None and plan.input_prompts is not None:
        h = attach_prompts_shallow(h, plan.input_prompts)
    for i in range(cfg.L):
        sites = layers[i] if layers is not None else _EMPTY
        if sites.prompts is not None:
            h = attach_prompts_deep(h, sites.prompts, i)
        h = layer_forward(model, i, h, sites, training, trace)
    h = ops.layer_norm(h, model["final_ln.gamma"], model["final_ln.beta"])
    return ops.reshape(h[:, :1], (h.shape[0], cfg.d))


def classify(cls: Tensor, model: Backbone) -> Tensor:
    return ops.linear(cls, model["head.weight"], model["head.bias"])


def freeze_all(model: Backbone) -> None:
    """Drop every backbone id from the trainable mask; the head is left alone."""
    model.store.freeze(model.backbone_ids)
