"""Dense tensors with reverse-mode differentiation.

Only the primitives the segmentation network needs are provided. Every op
takes and returns :class:`Tensor` objects; the backward rule of each op is a
closure stored on its output node.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """A non-finite value showed up where a finite one was required."""

    def __init__(self, message: str, index: Optional[tuple] = None):
        super().__init__(message)
        self.index = index


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad.

        Intermediate nodes do not keep their gradients.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list:
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitives


def _im2col(xh: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Padded NHWC input -> (N*Ho*Wo, kH*kW*C) patch rows.

    In contiguous NHWC memory the kW*C values of one kernel row are adjacent,
    so each kernel row is gathered with a single strided copy.
    """
    xh = np.ascontiguousarray(xh)
    n, h, w, c = xh.shape
    if kh == 1 and kw == 1 and stride == 1:
        return xh.reshape(n * ho * wo, c)
    # size-1 axes may carry arbitrary strides, so derive them from the shape
    sc = xh.itemsize
    sw, sh, sn = c * sc, w * c * sc, h * w * c * sc
    cols = np.empty((n, ho, wo, kh, kw * c), dtype=xh.dtype)
    for i in range(kh):
        cols[:, :, :, i, :] = as_strided(xh[:, i:], shape=(n, ho, wo, kw * c),
                                         strides=(sn, sh * stride, sw * stride, sc), writeable=False)
    return cols.reshape(n * ho * wo, kh * kw * c)


def _pad_nhwc(xh: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if not ph and not pw:
        return xh
    return np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW input.

    ``kernel`` has shape (F, C, kH, kW); output spatial size is
    ``(H + 2*padding - kH) // stride + 1``. Patches are gathered in
    channels-last order, so outputs are NCHW views over NHWC memory.
    """
    x = input.data
    w = kernel.data
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    f, kc, kh, kw = w.shape
    if c != kc:
        raise ShapeError(f"conv2d channel mismatch: input has C={c}, kernel expects C={kc} "
                         f"(input {x.shape}, kernel {w.shape})")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError(f"bias shape {bias.shape} does not match F={f}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    cols = _im2col(_pad_nhwc(x.transpose(0, 2, 3, 1), padding, padding), kh, kw, stride, ho, wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        gm = np.ascontiguousarray(gh).reshape(-1, f)
        gw = (gm.T @ cols).reshape(f, kh, kw, c).transpose(0, 3, 1, 2) if kernel.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if input.requires_grad:
            if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
                # full correlation of the output grad with the flipped, transposed kernel
                gcols = _im2col(_pad_nhwc(gh, kh - 1 - padding, kw - 1 - padding), kh, kw, 1, h, wd)
                wflip = w[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
                gx = (gcols @ wflip.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
            else:
                dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, c)
                gxp = np.zeros((n, hp, wp, c), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
                gx = gxp[:, padding:padding + h, padding:padding + wd, :].transpose(0, 3, 1, 2)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (input, kernel, bias) if bias is not None else (input, kernel)
    return _make(out, parents, backward)


def maxpool2d(input: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping 2x2 max pooling.

    Backward routes the gradient to the argmax of each window; ties go to the
    first position in row-major window order.
    """
    if window != 2 or stride != 2:
        raise ValueError("only window=2, stride=2 is supported")
    x = input.data
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (input,), backward)


def _interp_matrix(size: int, factor: int, dtype) -> np.ndarray:
    # align_corners convention: first and last samples map onto themselves
    out_size = size * factor
    m = np.zeros((out_size, size), dtype=np.float64)
    if size == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(out_size) * (size - 1) / (out_size - 1)
    lo = np.minimum(np.floor(src).astype(int), size - 2)
    frac = src - lo
    rows = np.arange(out_size)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


def upsample_bilinear(input: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor with aligned corners.

    The corner pixels of input and output coincide, so a row ``[0, 1]``
    upsampled by 2 becomes ``[0, 1/3, 2/3, 1]``. ``factor=1`` is the identity.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    x = input.data
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects NCHW input, got {x.shape}")
    if factor == 1:
        return _make(x.copy(), (input,), lambda g: (g,))
    _, _, h, w = x.shape
    ah = _interp_matrix(h, factor, x.dtype)
    aw = _interp_matrix(w, factor, x.dtype)
    # two flat GEMMs: along W, then along H
    out = np.tensordot(ah, np.tensordot(x, aw, axes=([3], [1])), axes=([1], [2])).transpose(1, 2, 0, 3)

    def backward(g):
        return (np.tensordot(np.tensordot(g, aw, axes=([3], [0])), ah, axes=([2], [0])).transpose(0, 1, 3, 2),)

    return _make(out, (input,), backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 1 of an NCHW tensor, max-subtracted for stability."""
    z = logits.data
    if z.ndim != 4 or z.shape[1] < 2:
        raise ShapeError(f"softmax_channels expects NCHW with C >= 2, got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (logits,), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along channels; ``a`` occupies the leading channels."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    sa, sb = a.shape, b.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channels: N/H/W mismatch between {sa} and {sb}")
    ca = sa[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return g[:, :ca], g[:, ca:]

    return _make(out, (a, b), backward)


def relu(input: Tensor) -> Tensor:
    """max(0, x); the derivative at exactly 0 is taken to be 0."""
    x = input.data
    mask = x > 0
    out = np.maximum(x, np.zeros((), dtype=x.dtype))

    def backward(g):
        return (g * mask,)

    return _make(out, (input,), backward)


def sum_all(input: Tensor) -> Tensor:
    out = np.asarray(input.data.sum(dtype=np.float64))
    shape, dtype = input.shape, input.dtype

    def backward(g):
        return (np.full(shape, g, dtype=dtype),)

    return _make(out, (input,), backward)


def nll_mean(probs: Tensor, target: np.ndarray, floor: float = 1e-12) -> Tensor:
    """Mean over batch and pixels of ``-log p(target)`` from an NCHW probability map.

    Probabilities are clamped below at ``floor``; clamped entries get zero
    gradient. The result is a 64-bit scalar.
    """
    p = probs.data
    t = np.asarray(target)
    if t.shape != (p.shape[0],) + p.shape[2:]:
        raise ShapeError(f"target shape {t.shape} does not match probabilities {p.shape}")
    t = t.astype(np.intp)
    if t.size and (t.min() < 0 or t.max() >= p.shape[1]):
        raise ValueError(f"target class ids must lie in [0, {p.shape[1]})")
    picked = np.take_along_axis(p, t[:, None], axis=1)[:, 0]
    clamped = np.maximum(picked, floor)
    count = picked.size
    out = np.asarray(-np.log(clamped.astype(np.float64)).sum() / count)

    def backward(g):
        local = np.where(picked > floor, -1.0 / clamped, 0.0) * (float(g) / count)
        gp = np.zeros_like(p)
        np.put_along_axis(gp, t[:, None], local[:, None].astype(p.dtype), axis=1)
        return (gp,)

    return _make(out, (probs,), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """sum_i w_i * t_i for scalar tensors, accumulated left to right in 64-bit.

    Terms with weight 0 receive no gradient at all.
    """
    if len(terms) != len(weights):
        raise ValueError("terms and weights differ in length")
    total = 0.0
    for t, w in zip(terms, weights):
        total += float(w) * float(t.data)
    out = np.asarray(total)

    def backward(g):
        return tuple(None if w == 0 else np.asarray(float(w) * g, dtype=t.dtype)
                     for t, w in zip(terms, weights))

    return _make(out, tuple(terms), backward)


def slice_channels(input: Tensor, start: int, stop: int) -> Tensor:
    x = input.data
    out = x[:, start:stop]

    def backward(g):
        gx = np.zeros_like(x)
        gx[:, start:stop] = g
        return (gx,)

    return _make(out, (input,), backward)


# ---------------------------------------------------------------------------
# verification


def grad_check(op: Callable[[Tensor], Tensor], input, eps: float = 1e-5) -> float:
    """Compare the analytic gradient of ``sum(op(x))`` with central differences.

    Returns ``max |a - n| / max(|a|, |n|, 1e-8)`` over all components of
    ``input``. Raises :class:`NonFiniteError` naming the component if any
    evaluation is not finite.
    """
    x0 = np.array(input.data if isinstance(input, Tensor) else input, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with _grad_enabled():
        y = op(xt)
        if not np.all(np.isfinite(y.data)):
            raise NonFiniteError("op output is not finite at the base point")
        s = sum_all(y)
        s.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    if not np.all(np.isfinite(analytic)):
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
        raise NonFiniteError(f"analytic gradient not finite at component {bad}", bad)

    def f(arr):
        with no_grad():
            return float(op(Tensor(arr)).data.sum(dtype=np.float64))

    numeric = np.zeros_like(x0)
    probe = x0.copy()
    for idx in np.ndindex(x0.shape):
        orig = probe[idx]
        probe[idx] = orig + eps
        fp = f(probe)
        probe[idx] = orig - eps
        fm = f(probe)
        probe[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation while perturbing component {idx}", idx)
        numeric[idx] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0


@contextlib.contextmanager
def _grad_enabled() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev
