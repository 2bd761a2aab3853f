"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Every differentiable op in :mod:`petl_ast.ops` records a node on the active
:class:`Tape` whenever one of its inputs requires a gradient. ``backward``
walks that tape once, in reverse recording order, and deposits gradients on
leaf tensors only.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: Node | None = None

    @classmethod
    def placeholder(cls, shape) -> "Tensor":
        """Read-only zero tensor backed by a zero-stride view (no allocation).

        Lets full-scale models be censused without materializing weights.
        """
        t = cls.__new__(cls)
        t.data = np.broadcast_to(np.zeros((), dtype=DTYPE), tuple(shape))
        t.requires_grad = False
        t.grad = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; the real work lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


@dataclass(eq=False)
class Node:
    kind: str
    parents: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    tape: "Tape"
    index: int
    epoch: int


@dataclass(eq=False)
class Tape:
    """Append-only record of differentiable ops.

    Nodes are appended as ops execute, so recording order is already a
    topological order. ``backward`` consumes the tape: afterwards the nodes
    are dropped and ``epoch`` advances, which invalidates any tensor still
    pointing at the old recording.
    """

    nodes: list[Node] = field(default_factory=list)
    epoch: int = 0

    def record(self, kind, parents, out, backward_fn) -> None:
        node = Node(kind, tuple(parents), out, backward_fn, self, len(self.nodes), self.epoch)
        self.nodes.append(node)
        out._node = node

    def clear(self) -> None:
        for node in self.nodes:
            node.out._node = None
        self.nodes = []
        self.epoch += 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _local().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local().stack.pop()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []
        self.default = Tape()
        self.enabled = True


_STATE = _State()


def _local() -> _State:
    return _STATE


def active_tape() -> Tape:
    st = _local()
    return st.stack[-1] if st.stack else st.default


def grad_enabled() -> bool:
    return _local().enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    st = _local()
    prev, st.enabled = st.enabled, False
    try:
        yield
    finally:
        st.enabled = prev


def make_result(kind: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as an op output and record it if any parent needs grad."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out._node = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        active_tape().record(kind, parents, out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise ValueError("loss is not recorded on any tape (no trainable input reached it)")
    tape = node.tape
    if node.epoch != tape.epoch:
        raise RuntimeError("loss belongs to a tape that was already consumed")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for nd in reversed(tape.nodes[: node.index + 1]):
        g = pending.pop(id(nd.out), None)
        if g is None:
            continue
        for parent, pg in zip(nd.parents, nd.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    tape.clear()


class ParamStore:
    """Named parameters plus the set of ids that are currently trainable."""

    def __init__(self):
        self.entries: dict[str, Tensor] = {}
        self.trainable_mask: set[str] = set()

    def add(self, pid: str, value, trainable: bool = False) -> Tensor:
        if pid in self.entries:
            raise KeyError(f"duplicate parameter id {pid!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        self.entries[pid] = t
        self.set_trainable(pid, trainable)
        return t

    def __getitem__(self, pid: str) -> Tensor:
        return self.entries[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def set_trainable(self, pid: str, flag: bool) -> None:
        t = self.entries[pid]
        t.requires_grad = flag
        if flag:
            self.trainable_mask.add(pid)
        else:
            self.trainable_mask.discard(pid)
            t.grad = None

    def freeze(self, pids) -> None:
        for pid in list(pids):
            self.set_trainable(pid, False)

    def trainable_ids(self) -> list[str]:
        return [pid for pid in self.entries if pid in self.trainable_mask]

    def count_trainable(self) -> int:
        return sum(self.entries[pid].size for pid in self.trainable_mask)

    def count_total(self) -> int:
        return sum(t.size for t in self.entries.values())

    def zero_grad(self) -> None:
        for t in self.entries.values():
            t.grad = None
