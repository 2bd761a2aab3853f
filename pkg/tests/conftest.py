import numpy as np
import pytest

from petl_ast import ops
from petl_ast.backbone import BackboneConfig
from petl_ast.harness.gradcheck import rel_error
from petl_ast.tensor import Tape, Tensor, backward, no_grad

H = 1e-6


def op_gradcheck(f, *arrays, seed=0):
    """Max relative error of autodiff vs central differences for ``f(*tensors)``.

    The output is contracted with fixed random weights so every output entry
    contributes to the scalar being differentiated.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape():
        out = f(*ts)
        w = rng.normal(size=out.shape)
        backward(ops.sum(ops.mul(out, Tensor(w))))

    def value(i, idx, delta):
        args = [a.copy() for a in arrays]
        args[i][idx] += delta
        with no_grad():
            return float((f(*[Tensor(a) for a in args]).data * w).sum())

    worst = 0.0
    for i, a in enumerate(arrays):
        for idx in np.ndindex(a.shape):
            num = (value(i, idx, H) - value(i, idx, -H)) / (2 * H)
            worst = max(worst, rel_error(float(ts[i].grad[idx]), num))
    return worst


def brute_depthwise(x, w, b):
    """Direct convolution: out[n, c] = b[c] + sum_j w[c, j] * x[n + j - left, c]."""
    n_len, c_len = x.shape
    k = w.shape[1]
    left = (k - 1) // 2
    out = np.zeros((n_len, c_len))
    for n in range(n_len):
        for c in range(c_len):
            acc = b[c]
            for j in range(k):
                src = n + j - left
                if 0 <= src < n_len:
                    acc += w[c, j] * x[src, c]
            out[n, c] = acc
    return out


@pytest.fixture
def tiny_cfg():
    return BackboneConfig(d=16, L=2, heads=2, freq_bins=16, time_bins=16, patch_h=4, patch_w=4,
                          n_classes=3, seed=0)


@pytest.fixture
def desk_cfg():
    return BackboneConfig()


@pytest.fixture(scope="session")
def backbone_cache(tmp_path_factory):
    """Shared directory for pretrained desk backbones (one pretraining per seed per session)."""
    return tmp_path_factory.mktemp("backbones")
