"""Dense float tensors with reverse-mode differentiation.

The op set is deliberately small: exactly what convolutional encoders, MLP
projection heads, and the contrastive objectives need. Operations record
nodes on a module-global tape whenever an input requires gradients; the tape
is a per-step structure that callers reset explicitly between training steps
(see :func:`reset_tape`).

Training runs in float32. A float64 mode exists purely so the verification
oracles (:func:`grad_check`) can be run at tighter tolerances; switch it with
:func:`use_dtype` and build the whole computation inside the context.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ConformabilityError,
    DegenerateEmbeddingError,
    NoGraphError,
    ProbeFailureError,
    ShapeError,
)

NORM_FLOOR = 1e-12

_DTYPE = np.float32
_GRAD_ENABLED = True
_TAPE: list["TapeNode"] = []
_TAPE_EPOCH = 0


def default_dtype():
    return _DTYPE


@contextmanager
def use_dtype(dtype):
    """Temporarily switch the allocation dtype (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported dtype {dtype}")
    prev = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = prev


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def reset_tape() -> None:
    """Drop all recorded nodes. Call once per training step."""
    global _TAPE_EPOCH
    _TAPE.clear()
    _TAPE_EPOCH += 1


def tape_size() -> int:
    return len(_TAPE)


class Tensor:
    """Dense n-dimensional float array with an optional gradient buffer.

    ``data`` is a C-contiguous (row-major) numpy array. Tensors are treated
    as immutable after construction by all public ops; gradient buffers are
    populated only on leaves (tensors not produced by an op) that have
    ``requires_grad`` set.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype or _DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _validate_shape(arr.shape)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "epoch")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.epoch = _TAPE_EPOCH


def _validate_shape(shape: Sequence[int]) -> None:
    if len(shape) == 0:
        raise ShapeError("shape must be nonempty")
    for s in shape:
        if int(s) < 1:
            raise ShapeError(f"shape {tuple(shape)} has non-positive extent")


def record(op: str, inputs: Iterable[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording a tape node if grads flow.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    array (or None) per input, in order. Also the extension point for fused
    ops defined outside this module (the contrastive losses use it).
    """
    inputs = tuple(inputs)
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = TapeNode(op, inputs, out, backward_fn)
        out.node = node
        _TAPE.append(node)
    return out


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

def zeros(shape, requires_grad: bool = False) -> Tensor:
    _validate_shape(shape)
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    _validate_shape(shape)
    return Tensor(np.full(shape, value, dtype=_DTYPE), requires_grad)


def uniform(shape, low: float, high: float, seed: int,
            requires_grad: bool = False) -> Tensor:
    """Uniform draws on [low, high); bit-identical for a fixed seed."""
    _validate_shape(shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    data = rng.uniform(low, high, size=shape).astype(_DTYPE)
    return Tensor(data, requires_grad)


def kaiming_normal(shape, fan_in: int, seed: int,
                   requires_grad: bool = False) -> Tensor:
    """Normal draws with std sqrt(2/fan_in); bit-identical for a fixed seed."""
    _validate_shape(shape)
    if fan_in < 1:
        raise ShapeError(f"fan_in must be positive, got {fan_in}")
    rng = np.random.Generator(np.random.PCG64(seed))
    std = math.sqrt(2.0 / fan_in)
    data = (rng.standard_normal(size=shape) * std).astype(_DTYPE)
    return Tensor(data, requires_grad)


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to an operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ConformabilityError("add", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", (a, b), out, backward)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def backward(g):
        return (g * c,)

    return record("scale", (x,), out, backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return record("relu", (x,), out, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConformabilityError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad or a.node else None
        gb = a.data.T @ g if b.requires_grad or b.node else None
        return ga, gb

    return record("matmul", (a, b), out, backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        return xp[:, :, padding:padding + h, padding:padding + w]
    return xp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of [N,C,H,W] with kernel [F,C,kH,kW]."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ConformabilityError("conv2d", x.shape, weight.shape)
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConformabilityError("conv2d", x.shape, weight.shape)

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)  # [n, c*kh*kw, ho*wo]
    wmat = weight.data.reshape(f, -1)
    out = np.matmul(wmat[None], cols).reshape(n, f, ho, wo)

    def backward(g):
        gflat = g.reshape(n, f, ho * wo)
        gx = None
        if x.requires_grad or x.node:
            dcols = np.matmul(wmat.T[None], gflat)
            gx = _col2im(dcols, x.shape, kh, kw, stride, padding)
        gw = None
        if weight.requires_grad or weight.node:
            gw = np.einsum("nfp,nkp->fk", gflat, cols).reshape(weight.shape)
        return gx, gw

    return record("conv2d", (x, weight), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ConformabilityError("global_avg_pool", x.shape)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), x.shape)
        return (np.ascontiguousarray(gx),)

    return record("global_avg_pool", (x,), out, backward)


def batch_flatten(x: Tensor) -> Tensor:
    """Collapse all non-batch axes: [N, ...] -> [N, prod(...)]."""
    if x.ndim < 2:
        raise ConformabilityError("batch_flatten", x.shape)
    n = x.shape[0]
    out = x.data.reshape(n, -1)

    def backward(g):
        return (g.reshape(x.shape),)

    return record("batch_flatten", (x,), out, backward)


def dropout(x: Tensor, p: float, train_mode: bool, seed: int) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in eval mode. The mask is a pure function of the seed, so a
    repeated call reproduces the same output bit for bit.
    """
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout probability must be in [0,1), got {p}")
    if not train_mode or p == 0.0:
        return x
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = (rng.random(x.shape) >= p)
    scaled_mask = keep.astype(x.data.dtype) / (1.0 - p)
    out = x.data * scaled_mask

    def backward(g):
        return (g * scaled_mask,)

    return record("dropout", (x,), out, backward)


def l2_normalize(x: Tensor) -> Tensor:
    """Normalize each row of [N,D] to unit Euclidean norm.

    Raises DegenerateEmbeddingError when any row norm falls below the floor;
    a collapsed representation should fail loudly rather than emit NaN.
    """
    if x.ndim != 2:
        raise ConformabilityError("l2_normalize", x.shape)
    norms = np.linalg.norm(x.data.astype(np.float64), axis=1, keepdims=True)
    if np.any(norms < NORM_FLOOR):
        row = int(np.argmin(norms))
        raise DegenerateEmbeddingError(
            f"row {row} has norm {float(norms[row, 0]):.3e} < {NORM_FLOOR:g}")
    norms = norms.astype(x.data.dtype)
    out = x.data / norms

    def backward(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - out * dot) / norms,)

    return record("l2_normalize", (x,), out, backward)


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Walks the tape in reverse creation order, visiting each node once. Leaf
    gradients accumulate additively, so calling backward twice doubles them;
    intermediate gradients live only for the duration of this call.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise NoGraphError("loss tensor has no recorded computation graph")
    if loss.node.epoch != _TAPE_EPOCH:
        raise NoGraphError("loss graph belongs to a tape that has been reset")

    flowing: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(_TAPE):
        g = flowing.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, ig in zip(node.inputs, input_grads):
            if ig is None:
                continue
            if t.node is not None:
                key = id(t)
                if key in flowing:
                    flowing[key] = flowing[key] + ig
                else:
                    flowing[key] = ig
            elif t.requires_grad:
                if t.grad is None:
                    t.grad = np.array(ig, dtype=t.data.dtype, copy=True)
                else:
                    t.grad = t.grad + ig


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               eps: float | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild the scalar loss from the current parameter values on
    every call (fresh tape; internal randomness fixed by its own seeds). The
    numeric side perturbs one coordinate at a time, so it is independent of
    the reverse-mode path it checks.
    """
    if eps is None:
        eps = 1e-3 if _DTYPE == np.float32 else 1e-6

    reset_tape()
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(out)
    analytic = [np.zeros_like(p.data, dtype=np.float64) if p.grad is None
                else p.grad.astype(np.float64) for p in params]
    reset_tape()

    def probe() -> float:
        val = f().item()
        if not math.isfinite(val):
            raise ProbeFailureError(f"non-finite value {val} at finite-difference probe")
        return val

    max_err = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = probe()
                flat[i] = orig - eps
                f_minus = probe()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                denom = max(abs(aflat[i]), abs(numeric), 1e-8)
                max_err = max(max_err, abs(aflat[i] - numeric) / denom)
    return max_err
