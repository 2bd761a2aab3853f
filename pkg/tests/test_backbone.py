import numpy as np
import pytest

from conftest import op_gradcheck
from petl_ast import ops
from petl_ast.backbone import (
    Backbone,
    BackboneConfig,
    LayerSites,
    SpectrogramBatch,
    encode,
    freeze_all,
    layer_forward,
    patch_embed,
    patchify,
)
from petl_ast.harness.gradcheck import gradcheck
from petl_ast.petl import BitFit, FullFineTune, LinearProbe, Lora, build_plan, inject
from petl_ast.tensor import Tape, Tensor, backward


def _x(cfg, b=2, seed=0):
    return np.random.default_rng(seed).normal(size=(b, cfg.freq_bins, cfg.time_bins))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        BackboneConfig(d=10, heads=4)
    with pytest.raises(ValueError, match="tile"):
        BackboneConfig(freq_bins=30)
    with pytest.raises(ValueError):
        BackboneConfig(L=0)


def test_patch_count_and_embedding_shape(desk_cfg):
    assert desk_cfg.n_patches == 16
    model = Backbone(desk_cfg)
    assert patch_embed(model, _x(desk_cfg, 3)).shape == (3, 17, desk_cfg.d)


def test_patchify_token_order():
    cfg = BackboneConfig(d=4, L=1, heads=1, freq_bins=4, time_bins=6, patch_h=2, patch_w=3)
    x = np.arange(24.0).reshape(1, 4, 6)
    p = patchify(x, cfg)
    assert p.shape == (1, 4, 6)
    np.testing.assert_array_equal(p[0, 1], [3, 4, 5, 9, 10, 11])   # second patch: top row, right half
    with pytest.raises(ValueError, match="shape"):
        patchify(np.zeros((1, 4, 5)), cfg)


def test_zero_embedding_rows(tiny_cfg):
    model = Backbone(tiny_cfg)
    for pid in ("embed.patch.weight", "embed.pos"):
        model[pid].data[...] = 0.0
    model["embed.patch.bias"].data[...] = 1.5
    out = patch_embed(model, np.zeros((1, 16, 16))).data[0]
    np.testing.assert_array_equal(out[0], model["embed.cls"].data.ravel())
    np.testing.assert_array_equal(out[1:], 1.5)


def test_zero_sublayers_make_layer_identity(tiny_cfg):
    model = Backbone(tiny_cfg)
    for pid in model.store:
        if pid.startswith("layer.0.") and not pid.endswith(("gamma", "beta")):
            model[pid].data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 5, tiny_cfg.d)))
    np.testing.assert_array_equal(layer_forward(model, 0, x).data, x.data)


def test_attention_rows_sum_to_one(desk_cfg):
    trace = {}
    encode(Backbone(desk_cfg), _x(desk_cfg), trace=trace)
    for probs in trace["attn"]:
        assert np.abs(probs.sum(axis=-1) - 1).max() < 1e-12


def test_encode_shape_and_determinism(tiny_cfg):
    a = encode(Backbone(tiny_cfg), _x(tiny_cfg, 3)).data
    b = encode(Backbone(tiny_cfg), _x(tiny_cfg, 3)).data
    assert a.shape == (3, tiny_cfg.d) and a.tobytes() == b.tobytes()


def test_pre_ln_perturbation_is_local(tiny_cfg):
    """Changing layer 1's LN only changes activations from layer 1 onward."""
    cfg = BackboneConfig(d=16, L=3, heads=2, freq_bins=16, time_bins=16, patch_h=4, patch_w=4)
    model = Backbone(cfg)
    x = _x(cfg)

    def per_layer():
        h, outs = patch_embed(model, x), []
        for i in range(cfg.L):
            h = layer_forward(model, i, h)
            outs.append(h.data.copy())
        return outs

    before = per_layer()
    model["layer.1.ln2.gamma"].data += 0.5
    after = per_layer()
    np.testing.assert_array_equal(before[0], after[0])
    assert not np.allclose(before[1], after[1]) and not np.allclose(before[2], after[2])


def test_head_param_counts():
    for classes, expect in ((50, 38_450), (10, 7_690)):
        m = Backbone(BackboneConfig.full_scale(n_classes=classes), materialize=False)
        assert m["head.weight"].size + m["head.bias"].size == expect


def test_zero_head_gives_zero_logits(tiny_cfg):
    model = Backbone(tiny_cfg)
    model["head.weight"].data[...] = 0.0
    np.testing.assert_array_equal(model.predict(_x(tiny_cfg)), 0.0)


def test_head_gradient_nonzero_and_gradcheck(tiny_cfg):
    model = Backbone(tiny_cfg)
    plan = inject(model, build_plan(LinearProbe(), tiny_cfg))
    with Tape():
        backward(ops.cross_entropy(model.forward(_x(tiny_cfg), plan), np.array([0, 2])))
    assert np.abs(model["head.weight"].grad).max() > 0
    cls = encode(model, _x(tiny_cfg)).data
    err = op_gradcheck(lambda c, w, b: ops.linear(c, w, b), cls,
                       model["head.weight"].data, model["head.bias"].data)
    assert err < 1e-6


def test_embedding_gradcheck(tiny_cfg):
    model = Backbone(tiny_cfg)
    plan = inject(model, build_plan(FullFineTune(), tiny_cfg))
    model.store.freeze([p for p in model.store if not p.startswith("embed.")])
    res = gradcheck(model, plan, SpectrogramBatch(_x(tiny_cfg), np.array([0, 1])), n_probes=60)
    assert {p.pid.split(".")[0] for p in res.probes} == {"embed"}
    assert res.passed(1e-4)


def test_freeze_all_then_lora_mask(tiny_cfg):
    model = Backbone(tiny_cfg)
    inject(model, build_plan(Lora(r=2), tiny_cfg))
    expect = {f"layer.{i}.mhsa.lora.{n}_{t}" for i in range(tiny_cfg.L) for n in "AB" for t in "qv"}
    assert set(model.store.trainable_ids()) == expect | {"head.weight", "head.bias"}


def test_freeze_all_then_bitfit_mask(tiny_cfg):
    model = Backbone(tiny_cfg)
    inject(model, build_plan(BitFit(), tiny_cfg))
    expect = {p for p in model.store if p.startswith("layer.") and p.endswith((".bias", ".beta"))}
    assert set(model.store.trainable_ids()) == expect | {"head.weight", "head.bias"}


def test_backward_after_freeze_all_leaves_backbone_grads_absent(tiny_cfg):
    model = Backbone(tiny_cfg)
    freeze_all(model)
    with Tape():
        backward(ops.sum(model.forward(_x(tiny_cfg))))
    assert all(model[p].grad is None for p in model.backbone_ids)
    assert model["head.weight"].grad is not None


def test_empty_sites_match_no_plan(tiny_cfg):
    model = Backbone(tiny_cfg)
    x = Tensor(np.random.default_rng(3).normal(size=(2, 17, tiny_cfg.d)))
    np.testing.assert_array_equal(layer_forward(model, 0, x, LayerSites()).data,
                                  layer_forward(model, 0, x).data)


def test_census_model_allocates_nothing():
    m = Backbone(BackboneConfig.full_scale(), materialize=False)
    assert not m.materialized
    assert m.backbone_param_count() == 85_500_672
    assert all(t.data.strides == (0,) * t.ndim for _, t in m.store.items())
