"""Dense float64 tensors with taped reverse-mode autodiff.

Every op is a plain function that returns a new :class:`Tensor` and, when any
input requires grad, records a closure mapping the upstream gradient to one
gradient per parent.  Matrix products optionally report their exact scalar
operation counts to an :class:`OpCounter`.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (used by evaluation and finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"tensors carry at most 3 axes, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, _wrap(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


@dataclass
class OpCounter:
    """Exact scalar operation tally for matrix products and gated elementwise products.

    ``paper_count`` is multiplies plus adds; elementwise nonlinearities, softmax
    and data movement contribute nothing.
    """

    multiplies: int = 0
    adds: int = 0
    enabled: bool = True

    def record_matmul(self, m: int, n: int, p: int, batch: int = 1) -> None:
        if not self.enabled or m * p == 0:
            return
        self.multiplies += batch * m * p * n
        self.adds += batch * m * p * (n - 1)

    def record_multiplies(self, count: int) -> None:
        if self.enabled:
            self.multiplies += count

    @property
    def paper_count(self) -> int:
        return self.multiplies + self.adds

    def reset(self) -> None:
        self.multiplies = 0
        self.adds = 0


class Rng:
    """Seeded PCG64 stream; the full state is serializable for checkpoints."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> Rng:
        """Independent child stream keyed by a fixed label."""
        return Rng(derive_seed(self.seed, label))

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        out = self._gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# products


def matmul(a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
    """Matrix product for 2-D @ 2-D, 3-D @ 2-D and batched 3-D @ 3-D operands."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]) or (a.ndim == 2 and b.ndim == 3):
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    if counter is not None:
        n = a.shape[-1]
        if a.ndim == 3 and b.ndim == 2:
            counter.record_matmul(a.shape[0] * a.shape[1], n, b.shape[1])
        else:
            batch = a.shape[0] if a.ndim == 3 else 1
            counter.record_matmul(a.shape[-2], n, b.shape[-1], batch)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def hadamard(a: Tensor, b: Tensor, counter: OpCounter | None = None) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    if counter is not None:
        counter.record_multiplies(a.data.size)

    def backward(g):
        return g * b.data, g * a.data

    return _make(a.data * b.data, (a, b), backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Sum with numpy broadcasting; gradients are reduced back onto each operand."""
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"cannot subtract shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def scale_rows(a: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of ``a`` (r x c) by ``w[i]`` (shape (r,)).  Uncounted."""
    if a.ndim != 2 or w.shape != (a.shape[0],):
        raise DimensionError(f"scale_rows needs (r, c) and (r,), got {a.shape} and {w.shape}")

    def backward(g):
        return g * w.data[:, None], (g * a.data).sum(axis=1)

    return _make(a.data * w.data[:, None], (a, w), backward)


# ---------------------------------------------------------------------------
# pointwise


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward(g):
        return (g * (sig * (1.0 + a.data * (1.0 - sig))),)

    return _make(out, (a,), backward)


def elementwise(kind: str, *inputs: Tensor, counter: OpCounter | None = None) -> Tensor:
    """Dispatch for the named pointwise kinds ``relu``, ``silu``, ``add`` and ``hadamard``."""
    if kind == "relu":
        return relu(*inputs)
    if kind == "silu":
        return silu(*inputs)
    if kind == "add":
        a, b = inputs
        if a.shape != b.shape:
            raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
        return add(a, b)
    if kind == "hadamard":
        return hadamard(*inputs, counter=counter)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions and normalizations


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, with the row max subtracted first."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def mean_rows(a: Tensor) -> Tensor:
    """Column means of a 2-D tensor: (r, c) -> (c,)."""
    r = a.shape[0]
    return _make(a.data.mean(axis=0), (a,), lambda g: (np.broadcast_to(g / r, a.shape).copy(),))


def normalize_rows(a: Tensor) -> Tensor:
    """Divide each row of a positive 2-D tensor by its sum."""
    tot = a.data.sum(axis=1, keepdims=True)
    out = a.data / tot

    def backward(g):
        return ((g - (g * out).sum(axis=1, keepdims=True)) / tot,)

    return _make(out, (a,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * gain`` over the last axis."""
    r = 1.0 / np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * r

    def backward(g):
        gx = gw = None
        if gain.requires_grad:
            gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gain.data
            gx = r * (dxhat - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, gw

    return _make(xhat * gain.data, (x, gain), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax(logits)."""
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    nll = logsum - z[rows, targets]

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, targets] -= 1.0
        return (p * (float(g) / len(targets)),)

    return _make(np.asarray(nll.mean()), (logits,), backward)


# ---------------------------------------------------------------------------
# data movement (never counted)


def split_last_dim(a: Tensor, h: int) -> Tensor:
    """(B, d) -> (B*h, d/h); sub-token j of token i lands on row i*h + j."""
    B, d = a.shape
    if d % h:
        raise DimensionError(f"head count {h} does not divide token dimension {d}")
    return _make(a.data.reshape(B * h, d // h), (a,), lambda g: (g.reshape(B, d),))


def merge_last_dim(a: Tensor, h: int) -> Tensor:
    """Inverse of :func:`split_last_dim`."""
    rows, q = a.shape
    if rows % h:
        raise DimensionError(f"row count {rows} is not divisible by head count {h}")
    return _make(a.data.reshape(rows // h, q * h), (a,), lambda g: (g.reshape(rows, q),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def rearrange(a: Tensor, mid_shape: tuple[int, ...], perm: tuple[int, ...],
              out_shape: tuple[int, ...]) -> Tensor:
    """Reshape to ``mid_shape`` (may exceed 3 axes), permute axes, reshape to ``out_shape``."""
    moved = np.transpose(a.data.reshape(mid_shape), perm)
    inv = np.argsort(perm)

    def backward(g):
        return (np.transpose(g.reshape(moved.shape), inv).reshape(a.shape),)

    return _make(np.ascontiguousarray(moved).reshape(out_shape), (a,), backward)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop].copy(), (a,), backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``a[idx]``; ``idx`` may be 1-D or 2-D (embedding lookup)."""
    idx = np.asarray(idx)

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, a.shape[1]))
        return (full,)

    return _make(a.data[idx], (a,), backward)


def take_along_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """``out[i, j] = a[i, idx[i, j]]`` for a 2-D ``a``."""
    rows = np.arange(a.shape[0])[:, None]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, (np.broadcast_to(rows, idx.shape), idx), g)
        return (full,)

    return _make(a.data[rows, idx], (a,), backward)


def take_elements(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """1-D gather ``a[rows[n], cols[n]]``."""

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, (rows, cols), g)
        return (full,)

    return _make(a.data[rows, cols], (a,), backward)


def scatter_add_rows(n_rows: int, parts: Sequence[tuple[np.ndarray, Tensor]]) -> Tensor:
    """Sum row blocks into an (n_rows, c) result: ``out[rows] += block`` for each part.

    Row indices must be distinct within a part.
    """
    width = parts[0][1].shape[1]
    out = np.zeros((n_rows, width))
    for rows, t in parts:
        out[rows] += t.data

    def backward(g):
        return tuple(g[rows] for rows, _ in parts)

    return _make(out, tuple(t for _, t in parts), backward)


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-8).

    ``f`` is evaluated once with the tape on for the analytic gradient and
    2 * x.size times under :func:`no_grad`.  ``x.data`` is restored afterwards.
    """
    was = x.requires_grad
    x.data = np.ascontiguousarray(x.data)
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.requires_grad = was
    numeric = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(x).item()
            flat[i] = orig - step
            down = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
    x.grad = None
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))
