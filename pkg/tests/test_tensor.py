import numpy as np
import pytest

from petl_ast import ops
from petl_ast.tensor import ParamStore, Tape, Tensor, backward, no_grad


def test_product_rule_grad_is_other_factor():
    rng = np.random.default_rng(0)
    y = rng.normal(size=(3, 4))
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape():
        backward(ops.sum(ops.mul(x, Tensor(y))))
    np.testing.assert_array_equal(x.grad, y)


def test_frozen_tensor_never_gets_grad():
    w = Tensor(np.ones((2, 2)))
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        backward(ops.sum(ops.matmul(x, w)))
    assert w.grad is None
    assert x.grad is not None and x.grad.shape == x.shape


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        with pytest.raises(ValueError, match="scalar"):
            backward(ops.scale(x, 2.0))


def test_loss_without_trainable_inputs_rejected():
    with pytest.raises(ValueError, match="not recorded"):
        backward(ops.sum(Tensor(np.ones(3))))


def test_tape_is_consumed():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(ops.mul(x, x))
        assert len(tape) == 2
        backward(loss)
        assert len(tape) == 0 and tape.epoch == 1


def test_tape_order_is_topological():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    w = Tensor(np.ones((3, 3)), requires_grad=True)
    with Tape() as tape:
        h = ops.relu(ops.matmul(x, w))
        ops.sum(ops.add(h, ops.matmul(h, w)))
        pos = {id(nd.out): nd.index for nd in tape.nodes}
        for nd in tape.nodes:
            for p in nd.parents:
                if id(p) in pos:
                    assert pos[id(p)] < nd.index


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        y = ops.mul(x, x)
        backward(ops.sum(ops.add(y, y)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape, no_grad():
        out = ops.mul(x, x)
    assert len(tape) == 0 and not out.requires_grad


def test_backward_is_bit_reproducible():
    def grads():
        rng = np.random.default_rng(7)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        with Tape():
            backward(ops.sum(ops.gelu(ops.matmul(a, b))))
        return a.grad, b.grad

    (a1, b1), (a2, b2) = grads(), grads()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


def test_placeholder_has_shape_without_storage():
    t = Tensor.placeholder((768, 3072))
    assert t.shape == (768, 3072) and t.size == 768 * 3072
    assert t.data.strides == (0, 0)


def test_param_store_contract():
    s = ParamStore()
    s.add("a.weight", np.ones((2, 3)), trainable=True)
    s.add("a.bias", np.zeros(3))
    with pytest.raises(KeyError, match="duplicate"):
        s.add("a.bias", np.zeros(3))
    assert s.trainable_ids() == ["a.weight"]
    assert s.count_trainable() == 6 and s.count_total() == 9
    s["a.weight"].grad = np.ones((2, 3))
    s.set_trainable("a.weight", False)
    assert s["a.weight"].grad is None and s.count_trainable() == 0
