"""Dense float64 tensors with reverse-mode differentiation.

Maps are channels-first: ``[C, H, W]`` for a single map or ``[N, C, H, W]``
for a batch. Every layer kernel accepts either form and returns the same
rank it was given. Convolution kernels are ``[out_ch, in_ch, kh, kw]``;
transposed-convolution kernels are ``[in_ch, out_ch, kh, kw]``.

``conv2d`` is a cross-correlation (no kernel flip).
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


_grad_enabled = True
_kink_log: list | None = None


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks(log: list):
    """Collect the branch pattern of every non-smooth op evaluated inside.

    ReLU contributes its active mask, max-pooling its argmax. Two evaluations
    that produce equal logs lie on the same smooth piece of the function.
    """
    global _kink_log
    prev = _kink_log
    _kink_log = log
    try:
        yield log
    finally:
        _kink_log = prev


def _log_kink(arr: np.ndarray) -> None:
    if _kink_log is not None:
        _kink_log.append(arr.tobytes())


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        backward([(self, grad)])

    # elementwise arithmetic with numpy broadcasting
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self):
        return total(self)

    def mean(self):
        return total(self) * (1.0 / self.data.size)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(seeds: Iterable[tuple[Tensor, np.ndarray]]) -> None:
    """Propagate gradients from several roots at once.

    Leaf tensors accumulate into ``.grad``; interior gradients are released
    once they have been pushed to the parents.
    """
    seeds = [(t, np.asarray(g, dtype=np.float64)) for t, g in seeds]
    order: list[Tensor] = []
    seen: set[int] = set()
    for root, _ in seeds:
        if not root.requires_grad or id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    for root, g in seeds:
        if root.requires_grad:
            if g.shape != root.shape:
                raise ShapeError(f"seed gradient {g.shape} does not match tensor {root.shape}")
            root._accumulate(g)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accumulate(-g))


def total(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        a._accumulate(full)

    return _result(a.data[idx], (a,), bw)


def stack(items: Sequence[Tensor], axis: int = 0) -> Tensor:
    items = [as_tensor(t) for t in items]
    if not items:
        raise ShapeError("stack of an empty list")
    data = np.stack([t.data for t in items], axis=axis)

    def bw(g):
        for i, t in enumerate(items):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _result(data, items, bw)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over a 1-D vector of logits."""
    z = logits.data - logits.data.max()
    e = np.exp(z)
    s = e / e.sum()

    def bw(g):
        logits._accumulate(s * (g - np.dot(g, s)))

    return _result(s, (logits,), bw)


# --------------------------------------------------------------------------
# activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_kink(mask)
    # NaN passes through so non-finite states surface downstream
    out = np.where(mask | np.isnan(x.data), x.data, 0.0)
    return _result(out, (x,), lambda g: x._accumulate(g * mask))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(s, (x,), lambda g: x._accumulate(g * s * (1.0 - s)))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: x._accumulate(g * (1.0 - t * t)))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# --------------------------------------------------------------------------
# layer kernels

def _as_batch(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def _unbatch(g: np.ndarray, squeezed: bool) -> np.ndarray:
    return g[0] if squeezed else g


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def deconv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n - 1) * stride - 2 * pad + k


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, kh: int, kw: int,
            stride: int, ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp))
    he, we = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + he:stride, j:j + we:stride] += cols[:, :, i, j]
    return out


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _crop(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, :, pad:-pad, pad:-pad]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation."""
    xb, squeezed = _as_batch(x, "conv2d")
    n, c, h, w = xb.shape
    if kernel.ndim != 4 or kernel.shape[1] != c:
        raise ShapeError(f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    co, _, kh, kw = kernel.shape
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {(ho, wo)} for input {x.shape}, kernel {kernel.shape}")
    xp = _pad(xb, pad)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = kernel.data.reshape(co, -1)
    out = np.matmul(w2, cols).reshape(n, co, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, co, 1, 1)
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gb = g[None] if squeezed else g
        g2 = gb.reshape(n, co, ho * wo)
        if kernel.requires_grad:
            kernel._accumulate(np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            dxp = _col2im(dcols, c, h + 2 * pad, w + 2 * pad, kh, kw, stride, ho, wo)
            x._accumulate(_unbatch(_crop(dxp, pad), squeezed))

    return _result(_unbatch(out, squeezed), parents, bw)


def deconv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of ``conv2d`` with the same geometry."""
    xb, squeezed = _as_batch(x, "deconv2d")
    n, c, h, w = xb.shape
    if kernel.ndim != 4 or kernel.shape[0] != c:
        raise ShapeError(f"deconv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    _, co, kh, kw = kernel.shape
    ho, wo = deconv_output_size(h, kh, stride, pad), deconv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"deconv2d: non-positive output extent {(ho, wo)} for input {x.shape}, kernel {kernel.shape}")
    w2 = kernel.data.reshape(c, co * kh * kw)
    x2 = xb.reshape(n, c, h * w)
    cols = np.matmul(w2.T, x2)
    outp = _col2im(cols, co, ho + 2 * pad, wo + 2 * pad, kh, kw, stride, h, w)
    out = _crop(outp, pad)

    def bw(g):
        gb = g[None] if squeezed else g
        gcols = _im2col(_pad(gb, pad), kh, kw, stride, h, w)
        if kernel.requires_grad:
            kernel._accumulate(np.tensordot(x2, gcols, axes=([0, 2], [0, 2])).reshape(kernel.shape))
        if x.requires_grad:
            x._accumulate(_unbatch(np.matmul(w2, gcols).reshape(n, c, h, w), squeezed))

    return _result(_unbatch(np.ascontiguousarray(out), squeezed), (x, kernel), bw)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> tuple[Tensor, np.ndarray]:
    """Windowed maximum; returns the output and flat argmax positions into H*W.

    Ties resolve to the first position in row-major window order.
    """
    xb, squeezed = _as_batch(x, "maxpool2d")
    n, c, h, w = xb.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input extent {(h, w)}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, k)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    flat = rows * w + cols
    _log_kink(flat)

    def bw(g):
        gb = (g[None] if squeezed else g).reshape(n, c, -1)
        dx = np.zeros((n, c, h * w))
        idx = flat.reshape(n, c, -1)
        if stride >= k:
            np.put_along_axis(dx, idx, gb, axis=-1)
        else:
            ni, ci = np.indices(idx.shape[:2])
            np.add.at(dx, (ni[..., None], ci[..., None], idx), gb)
        x._accumulate(_unbatch(dx.reshape(n, c, h, w), squeezed))

    return _result(_unbatch(out, squeezed), (x,), bw), _unbatch(flat, squeezed)


@dataclass
class RunningStats:
    """Per-channel running mean/variance tracked by batch normalization."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, train: bool,
              eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> Tensor:
    """Batch normalization over the batch and spatial axes.

    In training mode the batch statistics are used and ``stats`` is updated
    in place as ``momentum * old + (1 - momentum) * batch``.
    """
    xb, squeezed = _as_batch(x, "batchnorm")
    n, c, h, w = xb.shape
    m = n * h * w
    if m == 0:
        raise ShapeError(f"batchnorm: zero spatial extent in input {x.shape}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    g4 = gamma.data.reshape(1, c, 1, 1)
    if train:
        mu = xb.mean(axis=(0, 2, 3))
        var = xb.var(axis=(0, 2, 3))
        stats.mean[:] = momentum * stats.mean + (1.0 - momentum) * mu
        stats.var[:] = momentum * stats.var + (1.0 - momentum) * var
    else:
        mu, var = stats.mean.copy(), stats.var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xb - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        gb = g[None] if squeezed else g
        if gamma.requires_grad:
            gamma._accumulate((gb * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accumulate(gb.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = gb * g4
            if train:
                s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(1, c, 1, 1)
            x._accumulate(_unbatch(dx, squeezed))

    return _result(_unbatch(out, squeezed), (x, gamma, beta), bw)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis in argument order."""
    if not inputs:
        raise ShapeError("concat_channels: no inputs")
    if len(inputs) == 1:
        return inputs[0]
    axis = inputs[0].ndim - 3
    spatial = inputs[0].shape[:axis] + inputs[0].shape[axis + 1:]
    for t in inputs[1:]:
        if t.ndim != inputs[0].ndim or t.shape[:axis] + t.shape[axis + 1:] != spatial:
            raise ShapeError(f"concat_channels: shape {t.shape} does not match {inputs[0].shape} off the channel axis")
    data = np.concatenate([t.data for t in inputs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in inputs])

    def bw(g):
        for t, lo, hi in zip(inputs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=axis))

    return _result(data, inputs, bw)


# --------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: tuple[str, tuple[int, ...]] | None = None
    per_tensor: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], perturbation: float = 1e-6,
               max_coords: int | None = None, rng: np.random.Generator | None = None,
               stencil: int = 2) -> GradCheckResult:
    """Compare backpropagated gradients of a scalar ``fn()`` with central differences.

    ``stencil=2`` uses (f(x+h) - f(x-h)) / 2h; ``stencil=4`` adds the x±2h
    points for fourth-order accuracy, which allows a larger ``h`` and so less
    cancellation error on small gradients.

    ``wrt`` tensors are perturbed in place and restored. With ``max_coords``
    a random subset of coordinates per tensor is checked. Coordinates whose
    ±perturbation changes the branch pattern of a ReLU or max-pool (a kink)
    are skipped and counted.
    """
    if not 1e-7 <= perturbation <= 1e-4:
        raise ValueError(f"perturbation {perturbation} outside [1e-7, 1e-4]")
    if stencil not in (2, 4):
        raise ValueError(f"stencil must be 2 or 4, got {stencil}")
    steps = (1, 2) if stencil == 4 else (1,)
    rng = rng or np.random.default_rng(0)
    for t in wrt:
        t.requires_grad = True
        t.zero_grad()
    base_kinks: list = []
    with record_kinks(base_kinks):
        out = fn()
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value at the base point")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in wrt]

    def probe() -> tuple[float, list]:
        log: list = []
        with no_grad(), record_kinks(log):
            v = float(fn().data)
        return v, log

    result = GradCheckResult(0.0, 0, 0)
    for ti, (t, ga) in enumerate(zip(wrt, analytic)):
        label = t.name or f"tensor{ti}"
        if not np.isfinite(ga).all():
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(ga))[0])
            raise NumericError(f"grad_check: non-finite analytic gradient in {label} at {bad}")
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst_here = 0.0
        for ci in coords:
            orig = flat[ci]
            diffs, kinked = [], False
            for m in steps:
                flat[ci] = orig + m * perturbation
                fp, kp = probe()
                flat[ci] = orig - m * perturbation
                fm, km = probe()
                flat[ci] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    where = tuple(int(i) for i in np.unravel_index(ci, t.shape))
                    raise NumericError(f"grad_check: non-finite value perturbing {label} at {where}")
                kinked |= kp != base_kinks or km != base_kinks
                diffs.append(fp - fm)
            where = np.unravel_index(ci, t.shape)
            if kinked:
                result.skipped += 1
                continue
            if stencil == 4:
                numeric = (8 * diffs[0] - diffs[1]) / (12 * perturbation)
            else:
                numeric = diffs[0] / (2 * perturbation)
            err = relative_error(ga.reshape(-1)[ci], numeric)
            result.checked += 1
            worst_here = max(worst_here, err)
            if result.worst is None or err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (label, tuple(int(i) for i in where))
        result.per_tensor[label] = worst_here
    return result
