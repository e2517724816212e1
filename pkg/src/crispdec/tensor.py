"""Minimal dense-tensor engine with reverse-mode differentiation.

Arrays are plain numpy buffers in N,C,H,W layout for feature maps. Every
primitive records its parents and a closure that routes the upstream
gradient; `backward` replays the tape in reverse topological order.
Double precision is the default so analytic gradients can be checked
against central finite differences at tight tolerances.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "cat",
    "conv2d",
    "bilinear_upsample",
    "softmax",
    "log_softmax",
    "finite_diff_grad",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense array plus optional gradient accumulator.

    Only singleton-axis broadcasting is supported in binary ops; that is
    all the decoder needs (gates over class channels, per-image scalars).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- autodiff --------------------------------------------------------------

    def backward(self):
        """Populate `grad` on every reachable tracked tensor.

        The root must be scalar. Repeated calls without `zero_grad`
        accumulate, matching the optimizer contract.
        """
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)):
            # python scalars follow the tensor's dtype instead of promoting
            return Tensor(np.asarray(other, dtype=self.data.dtype))
        return Tensor(np.asarray(other))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g, b.shape))

        return Tensor._from_op(a.data + b.data, (a, b), bwd)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bwd(g):
            a._accumulate(-g)

        return Tensor._from_op(-a.data, (a,), bwd)

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other

        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return Tensor._from_op(a.data / b.data, (a, b), bwd)

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __getitem__(self, idx):
        a = self

        def bwd(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            a._accumulate(full)

        return Tensor._from_op(a.data[idx], (a,), bwd)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.shape

        def bwd(g):
            a._accumulate(g.reshape(old))

        return Tensor._from_op(a.data.reshape(shape), (a,), bwd)

    # -- pointwise nonlinearities ------------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)

        def bwd(g):
            a._accumulate(g * out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def log(self):
        if np.any(self.data <= 0):
            raise ValueError("log requires strictly positive inputs")
        a = self

        def bwd(g):
            a._accumulate(g / a.data)

        return Tensor._from_op(np.log(a.data), (a,), bwd)

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)

        def bwd(g):
            a._accumulate(g * 0.5 / out_data)

        return Tensor._from_op(out_data, (a,), bwd)

    def abs(self):
        a = self

        def bwd(g):
            a._accumulate(g * np.sign(a.data))

        return Tensor._from_op(np.abs(a.data), (a,), bwd)

    def relu(self):
        a = self
        mask = a.data > 0

        def bwd(g):
            a._accumulate(g * mask)

        return Tensor._from_op(a.data * mask, (a,), bwd)

    def sigmoid(self):
        a = self
        # split by sign so exp never overflows
        out_data = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.data))),
            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
        )

        def bwd(g):
            a._accumulate(g * out_data * (1.0 - out_data))

        return Tensor._from_op(out_data, (a,), bwd)

    def softplus(self):
        """ln(1+e^x) with a large-x branch: softplus(x) = max(x,0) + log1p(e^-|x|)."""
        a = self
        out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
        sig = np.where(
            a.data >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.data))),
            np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))),
        )

        def bwd(g):
            a._accumulate(g * sig)

        return Tensor._from_op(out_data, (a,), bwd)

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bwd(g):
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.shape).copy())
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[i] for i in axis]))
        else:
            n = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def _extreme(self, axis, keepdims, fn):
        a = self
        out_data = fn(a.data, axis=axis, keepdims=True)
        mask = a.data == out_data
        counts = mask.sum(axis=axis, keepdims=True)

        def bwd(g):
            if axis is None:
                gk = np.asarray(g).reshape((1,) * a.data.ndim)
            elif not keepdims:
                gk = np.expand_dims(g, axis)
            else:
                gk = g
            a._accumulate(mask * (gk / counts))

        out = out_data if keepdims else (
            out_data.reshape(()) if axis is None else np.squeeze(out_data, axis=axis)
        )
        return Tensor._from_op(out, (a,), bwd)

    def max(self, axis=None, keepdims: bool = False):
        return self._extreme(axis, keepdims, np.max)

    def min(self, axis=None, keepdims: bool = False):
        return self._extreme(axis, keepdims, np.min)


# -- structural ops ------------------------------------------------------------------


def cat(tensors, axis: int = 1) -> Tensor:
    """Concatenate along `axis`; backward splits the gradient."""
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd
    )


def softmax(t: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along `axis`. The shift is a detached constant,
    which leaves the analytic gradient unchanged (softmax is shift-invariant)."""
    shift = Tensor(t.data.max(axis=axis, keepdims=True))
    e = (t - shift).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(t: Tensor, axis: int) -> Tensor:
    shift = Tensor(t.data.max(axis=axis, keepdims=True))
    z = t - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def conv2d(t: Tensor, kernel: Tensor, bias: Tensor | None = None,
           padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlation of an N,Cin,H,W map with a Cout,Cin,k,k kernel.

    Odd kernels only; padding 0 for 1x1 and 1 for 3x3 preserve spatial size
    at stride 1. Differentiable w.r.t. input, kernel, and bias.
    """
    if t.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-D input and kernel")
    n, cin, h, w = t.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k:
        raise ValueError(f"channel mismatch: input has {cin}, kernel expects {cin_k}")
    if kh != kw:
        raise ValueError("square kernels only")
    k, p, s = kh, padding, stride
    hout = (h + 2 * p - k) // s + 1
    wout = (w + 2 * p - k) // s + 1
    if hout <= 0 or wout <= 0:
        raise ValueError("spatial output would be empty")

    xp = np.pad(t.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else t.data
    # patches[n, cin, ki, kj, ho, wo]
    patches = np.empty((n, cin, k, k, hout, wout), dtype=t.data.dtype)
    for ki in range(k):
        for kj in range(k):
            patches[:, :, ki, kj] = xp[:, :, ki:ki + s * hout:s, kj:kj + s * wout:s]
    out_data = np.einsum("oikl,niklhw->nohw", kernel.data, patches, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, cout, 1, 1)

    parents = (t, kernel) if bias is None else (t, kernel, bias)

    def bwd(g):
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        if kernel.requires_grad:
            kernel._accumulate(
                np.einsum("nohw,niklhw->oikl", g, patches, optimize=True)
            )
        if t.requires_grad:
            gxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    gxp[:, :, ki:ki + s * hout:s, kj:kj + s * wout:s] += np.einsum(
                        "nohw,oi->nihw", g, kernel.data[:, :, ki, kj], optimize=True
                    )
            t._accumulate(gxp[:, :, p:p + h, p:p + w] if p else gxp)

    return Tensor._from_op(out_data, parents, bwd)


def _interp_indices(src: int, dst: int, dtype):
    """Half-pixel-center bilinear source indices and blend weights."""
    coords = (np.arange(dst, dtype=dtype) + 0.5) * (src / dst) - 0.5
    coords = np.clip(coords, 0.0, src - 1.0)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    frac = coords - lo
    return lo, hi, frac


def bilinear_upsample(t: Tensor, target_h: int, target_w: int) -> Tensor:
    """Bilinear interpolation to (target_h, target_w), half-pixel centers
    (align_corners false). Mean-preserving on constant inputs."""
    if t.data.ndim != 4:
        raise ValueError("bilinear_upsample expects an N,C,H,W tensor")
    n, c, h, w = t.shape
    if h == 0 or w == 0 or target_h <= 0 or target_w <= 0:
        raise ValueError("zero-sized spatial dimensions")
    if target_h < h or target_w < w:
        raise ValueError("only upsampling is supported")
    if (target_h, target_w) == (h, w):
        return t * 1.0  # identity, but keeps a graph node

    dt = t.data.dtype
    r0, r1, fr = _interp_indices(h, target_h, dt)
    c0, c1, fc = _interp_indices(w, target_w, dt)
    fr_ = fr[None, None, :, None]
    fc_ = fc[None, None, None, :]

    rows0 = t.data[:, :, r0, :]
    rows1 = t.data[:, :, r1, :]
    v = rows0 * (1.0 - fr_) + rows1 * fr_
    out_data = v[:, :, :, c0] * (1.0 - fc_) + v[:, :, :, c1] * fc_

    def bwd(g):
        gv = np.zeros((n, c, target_h, w), dtype=g.dtype)
        np.add.at(gv, (slice(None), slice(None), slice(None), c0), g * (1.0 - fc_))
        np.add.at(gv, (slice(None), slice(None), slice(None), c1), g * fc_)
        gx = np.zeros_like(t.data)
        np.add.at(gx, (slice(None), slice(None), r0, slice(None)), gv * (1.0 - fr_))
        np.add.at(gx, (slice(None), slice(None), r1, slice(None)), gv * fr_)
        t._accumulate(gx)

    return Tensor._from_op(out_data, (t,), bwd)


def finite_diff_grad(f, t: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar-valued `f` w.r.t. `t.data`.

    `f` must be deterministic; `t` is perturbed in place and restored.
    """
    flat = t.data.ravel()
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(t).data)
        flat[i] = orig - h
        fm = float(f(t).data)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(t.shape)
