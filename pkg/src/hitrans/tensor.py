"""Dense float64 tensors with reverse-mode differentiation.

Every op builds its output eagerly and, when any input requires a gradient,
remembers its inputs plus a closure mapping the output gradient to input
gradients. ``backward`` linearises that graph into a :class:`DiffRecord`
(topological order) and replays it in reverse.

Ops are written for the 2-D shapes the model needs (``[T, d]``) but accept
leading batch axes, so a dialog's utterances can be encoded in one pass.
Broadcasting is limited to a trailing-suffix operand, e.g. a ``[d]`` bias
over the rows of ``[T, d]``.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, DimensionError, EmptyPoolError, VocabIndexError

DTYPE = np.float64

SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in this thread inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list[np.ndarray]]:
    """Collect the branch taken by every piecewise op run in this thread.

    Max-pool winners, SELU signs and log clamps are appended in call order.
    Two evaluations with equal records lie on the same smooth piece.
    """
    prev = getattr(_state, "branches", None)
    _state.branches = out = []
    try:
        yield out
    finally:
        _state.branches = prev


def _note_branch(arr: np.ndarray) -> None:
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(arr)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out.requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return total(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=DTYPE), like.shape))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# differentiation record


class DiffRecord:
    """Topologically ordered operations reachable from a scalar output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> DiffRecord:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, record: DiffRecord | None = None) -> DiffRecord:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto existing ``.grad`` values; call :func:`zero_grads`
    between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if record is None:
        record = DiffRecord.from_output(loss)
    elif not record.nodes or record.nodes[-1] is not loss:
        raise ContractError("backward: the record was not built from this loss")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record.nodes):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if node.requires_grad:
                if g is None:
                    g = np.zeros_like(node.data)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return record


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# shape helpers


def _suffix_compatible(big: tuple[int, ...], small: tuple[int, ...]) -> bool:
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _broadcast_pair(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _suffix_compatible(a.shape, b.shape):
        return a.shape
    if _suffix_compatible(b.shape, a.shape):
        return b.shape
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_pair(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._from_op(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise DimensionError("concat of zero tensors")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw, "concat")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    src = x.shape
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs ndim >= 2, got shape {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._from_op(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either 2-D (shared across ``a``'s batch axes) or carries the
    same batch axes as ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def order_free_matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with the inner sum taken over sorted terms.

    The result does not depend on the order of the contracted axis, so
    permuting it in both operands gives bitwise-identical output. Costs an
    extra ``[.., m, k, n]`` buffer; meant for short sequences.
    """
    if a.ndim < 2 or b.ndim != a.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"order_free_matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    terms = ad[..., :, :, None] * bd[..., None, :, :]
    out = np.sort(terms, axis=-2).sum(axis=-2)

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return Tensor._from_op(out, (a, b), bw, "order_free_matmul")


# ---------------------------------------------------------------------------
# nonlinearities and normalisation


def softmax(x: Tensor, order_free: bool = False) -> Tensor:
    """Softmax over the last axis, max-shifted for stability.

    With ``order_free`` the normaliser sums sorted terms, so permuting the
    last axis permutes the output bitwise.
    """
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / (np.sort(e, axis=-1) if order_free else e).sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, (x,), bw, "softmax")


softmax_rows = softmax


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}, beta {beta.shape} vs features {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def selu(x: Tensor) -> Tensor:
    xd = x.data
    pos = xd > 0
    _note_branch(pos)
    ex = np.exp(np.minimum(xd, 0.0))
    out = SELU_LAMBDA * np.where(pos, xd, SELU_ALPHA * ex - SELU_ALPHA)
    deriv = SELU_LAMBDA * np.where(pos, 1.0, SELU_ALPHA * ex)
    return Tensor._from_op(out, (x,), lambda g: (g * deriv,), "selu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
    return Tensor._from_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where clamped."""
    xd = x.data
    clamped = np.maximum(xd, floor)
    live = xd >= floor if floor > 0 else np.ones(xd.shape, dtype=bool)
    _note_branch(live)
    return Tensor._from_op(np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),), "log")


def mask_keys(scores: Tensor, key_mask: np.ndarray) -> Tensor:
    """Set scores at masked key positions (last axis) to -inf."""
    keep = np.broadcast_to(np.asarray(key_mask, dtype=bool), scores.shape)
    out = np.where(keep, scores.data, -np.inf)
    return Tensor._from_op(out, (scores,), lambda g: (np.where(keep, g, 0.0),), "mask_keys")


# ---------------------------------------------------------------------------
# gathers and pools


def max_pool_rows(x: Tensor, row_mask=None) -> Tensor:
    """Feature-wise max over unmasked rows (axis -2).

    The gradient goes to the first row achieving each maximum.
    """
    if x.ndim < 2:
        raise DimensionError(f"max_pool_rows needs [.., T, d], got {x.shape}")
    if row_mask is None:
        row_mask = np.ones(x.shape[:-1], dtype=bool)
    row_mask = np.asarray(row_mask, dtype=bool)
    if row_mask.shape != x.shape[:-1]:
        raise DimensionError(f"max_pool_rows: mask {row_mask.shape} vs rows {x.shape[:-1]}")
    if not row_mask.any(axis=-1).all():
        raise EmptyPoolError("max_pool_rows: every row is masked")
    masked = np.where(row_mask[..., None], x.data, -np.inf)
    idx = np.argmax(masked, axis=-2)[..., None, :]
    _note_branch(idx)
    out = np.take_along_axis(masked, idx, axis=-2)[..., 0, :]
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, idx, g[..., None, :], axis=-2)
        return (gx,)

    return Tensor._from_op(out, (x,), bw, "max_pool_rows")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather; the backward pass scatter-adds into the table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise DimensionError("embedding_lookup needs at least one id")
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        raise VocabIndexError(f"id {int(ids[bad][0])} out of range for table of {vocab} rows")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return Tensor._from_op(table.data[ids], (table,), bw, "embedding")


def pick(x: Tensor, rows, cols) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=DTYPE)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return Tensor._from_op(x.data[rows, cols], (x,), bw, "pick")
