"""A small reverse-mode autodiff core for 5D volumetric tensors.

Activations are laid out (batch, channels, nx, ny, nz). Same-size
convolutions with kernel k > 1 run through zero-padded FFTs: padding by
(k-1)/2 per side gives transform lengths n + k - 1, for which the circular
correlation equals the linear one on every retained sample. Gradients are
exact adjoints of the forward maps, not approximations.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Tensor",
    "ShapeError",
    "conv3d",
    "conv_transpose3d",
    "max_pool3d",
    "upsample_trilinear",
    "leaky_relu",
    "concat",
    "mse_loss",
]


class ShapeError(ValueError):
    """Incompatible tensor shapes; ``layer`` names where it happened."""

    def __init__(self, layer: str, message: str):
        self.layer = layer
        super().__init__(f"[{layer}] {message}")


class Tensor:
    """Array plus gradient buffer and the closure that back-propagates into its parents."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward: Callable | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check5(layer: str, x: Tensor) -> None:
    if x.data.ndim != 5:
        raise ShapeError(layer, f"expected a (batch, channels, nx, ny, nz) tensor, got shape {x.shape}")


# ----------------------------------------------------------- spectral kernels

_SPATIAL = (2, 3, 4)


def _kernel_spectrum(w: np.ndarray, lengths) -> np.ndarray:
    """rfftn of ``w`` zero-padded to ``lengths`` without materialising the padding."""
    spec = sfft.rfft(w, n=lengths[2], axis=-1)
    spec = sfft.fft(spec, n=lengths[1], axis=-2)
    return sfft.fft(spec, n=lengths[0], axis=-3)


def _leading_inverse(spec: np.ndarray, lengths, k: int) -> np.ndarray:
    """First ``k`` samples per axis of irfftn(spec), computed axis by axis."""
    out = sfft.ifft(spec, axis=-3)[..., :k, :, :]
    out = sfft.ifft(out, axis=-2)[..., :k, :]
    return sfft.irfft(out, n=lengths[2], axis=-1)[..., :k]


def _contract(a: np.ndarray, b: np.ndarray, conj_b: bool, out_channels: int, transpose_b: bool) -> np.ndarray:
    """out[n, o] = sum_c a[n, c] * B[o, c] over flattened spectra (B = b or b.T per c)."""
    batch, channels = a.shape[:2]
    out = np.zeros((batch, out_channels) + a.shape[2:], dtype=np.result_type(a, b))
    for c in range(channels):
        bc = b[c] if transpose_b else b[:, c]
        if conj_b:
            bc = np.conj(bc)
        out += a[:, c, None] * bc[None]
    return out


def _lengths(spatial, k: int) -> tuple[int, int, int]:
    return tuple(n + k - 1 for n in spatial)


def _padded_spectrum(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    return sfft.rfftn(xp, axes=_SPATIAL)


def _trailing_spectrum(g: np.ndarray, k: int) -> np.ndarray:
    return sfft.rfftn(g, s=_lengths(g.shape[2:], k), axes=_SPATIAL)


def _correlate(x_hat, w_hat, spatial, k, out_channels):
    """Valid correlation of the padded input with the kernel: same-size output."""
    lengths = _lengths(spatial, k)
    y_hat = _contract(x_hat, w_hat, conj_b=True, out_channels=out_channels, transpose_b=False)
    y = sfft.irfftn(y_hat, s=lengths, axes=_SPATIAL)
    return y[:, :, :spatial[0], :spatial[1], :spatial[2]]


def _correlate_adjoint(g_hat, w_hat, spatial, k, in_channels):
    """Adjoint of :func:`_correlate` with respect to its input."""
    lengths = _lengths(spatial, k)
    p = k // 2
    x_hat = _contract(g_hat, w_hat, conj_b=False, out_channels=in_channels, transpose_b=True)
    xp = sfft.irfftn(x_hat, s=lengths, axes=_SPATIAL)
    return xp[:, :, p:p + spatial[0], p:p + spatial[1], p:p + spatial[2]]


def _correlate_weight_grad(x_hat, g_hat, spatial, k):
    """d<correlate(x, w), g>/dw with x_hat padded and g_hat trailing-padded."""
    lengths = _lengths(spatial, k)
    cross = np.zeros((g_hat.shape[1], x_hat.shape[1]) + x_hat.shape[2:], dtype=x_hat.dtype)
    for b in range(x_hat.shape[0]):
        cross += np.conj(g_hat[b])[:, None] * x_hat[b][None]
    return _leading_inverse(cross, lengths, k)


def _check_conv(layer, x, w, b, transpose):
    _check5(layer, x)
    if w.data.ndim != 5 or len(set(w.shape[2:])) != 1:
        raise ShapeError(layer, f"kernel must be (c_a, c_b, k, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 != 1:
        raise ShapeError(layer, f"same-size convolution needs an odd kernel, got {k}")
    in_ch = w.shape[0] if transpose else w.shape[1]
    out_ch = w.shape[1] if transpose else w.shape[0]
    if x.shape[1] != in_ch:
        raise ShapeError(layer, f"input has {x.shape[1]} channels, kernel expects {in_ch}")
    if b is not None and b.shape != (out_ch,):
        raise ShapeError(layer, f"bias shape {b.shape} does not match {out_ch} output channels")
    return k, out_ch


def _bias_grad(g):
    return g.sum(axis=(0, 2, 3, 4))


def _add_bias(y, b):
    return y if b is None else y + b.data.reshape(1, -1, 1, 1, 1)


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, layer: str = "conv3d") -> Tensor:
    """Stride-1, same-size 3D convolution (cross-correlation). ``w``: (out, in, k, k, k)."""
    x, w = _as_tensor(x), _as_tensor(w)
    k, out_ch = _check_conv(layer, x, w, b, transpose=False)
    spatial = x.shape[2:]
    if k == 1:
        W = w.data[:, :, 0, 0, 0]
        y = np.einsum("oc,bcxyz->boxyz", W, x.data)

        def backward(g):
            gx = np.einsum("oc,boxyz->bcxyz", W, g)
            gw = np.einsum("boxyz,bcxyz->oc", g, x.data).reshape(w.shape)
            return gx, gw, (_bias_grad(g) if b is not None else None)
    else:
        lengths = _lengths(spatial, k)
        x_hat = _padded_spectrum(x.data, k)
        w_hat = _kernel_spectrum(w.data, lengths)
        y = _correlate(x_hat, w_hat, spatial, k, out_ch)

        def backward(g):
            g_hat = _trailing_spectrum(g, k)
            gx = _correlate_adjoint(g_hat, w_hat, spatial, k, x.shape[1]) if x.requires_grad else None
            gw = _correlate_weight_grad(x_hat, g_hat, spatial, k) if w.requires_grad else None
            return gx, gw, (_bias_grad(g) if b is not None else None)

    y = _add_bias(y.astype(x.dtype, copy=False), b)
    parents = (x, w) + ((b,) if b is not None else ())
    return Tensor(y, parents=parents, backward=backward)


def conv_transpose3d(x: Tensor, w: Tensor, b: Tensor | None = None, layer: str = "conv_transpose3d") -> Tensor:
    """Stride-1, same-size transposed convolution. ``w``: (in, out, k, k, k).

    Equals the input-gradient of :func:`conv3d` with the same kernel and padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    k, out_ch = _check_conv(layer, x, w, b, transpose=True)
    spatial = x.shape[2:]
    lengths = _lengths(spatial, k)
    x_hat = _trailing_spectrum(x.data, k)
    w_hat = _kernel_spectrum(w.data, lengths)
    y = _correlate_adjoint(x_hat, w_hat, spatial, k, out_ch)

    def backward(g):
        g_hat = _padded_spectrum(g, k)
        gx = _correlate(g_hat, w_hat, spatial, k, x.shape[1]) if x.requires_grad else None
        gw = _correlate_weight_grad(g_hat, x_hat, spatial, k) if w.requires_grad else None
        return gx, gw, (_bias_grad(g) if b is not None else None)

    y = _add_bias(y.astype(x.dtype, copy=False), b)
    parents = (x, w) + ((b,) if b is not None else ())
    return Tensor(y, parents=parents, backward=backward)


def max_pool3d(x: Tensor, layer: str = "max_pool3d") -> Tensor:
    """2x2x2 max pooling, stride 2. Ties route the gradient to the first voxel in scan order."""
    x = _as_tensor(x)
    _check5(layer, x)
    B, C, X, Y, Z = x.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ShapeError(layer, f"spatial dims {x.shape[2:]} must be even")
    win = x.data.reshape(B, C, X // 2, 2, Y // 2, 2, Z // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(B, C, X // 2, Y // 2, Z // 2, 8)
    arg = np.argmax(win, axis=-1)  # first occurrence on ties
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, X // 2, Y // 2, Z // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gw.reshape(B, C, X, Y, Z),)

    return Tensor(y, parents=(x,), backward=backward)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """Linear x2 interpolation along one axis, half-pixel centres, edge-clamped."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def _along(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)


def upsample_trilinear(x: Tensor, layer: str = "upsample_trilinear") -> Tensor:
    """Trilinear x2 upsampling (voxel-centre aligned, edges clamped)."""
    x = _as_tensor(x)
    _check5(layer, x)
    mats = [_upsample_matrix(n, x.dtype) for n in x.shape[2:]]
    y = x.data
    for axis, m in zip(_SPATIAL, mats):
        y = _along(y, m, axis)

    def backward(g):
        for axis, m in zip(_SPATIAL, mats):
            g = _along(g, m.T, axis)
        return (g,)

    return Tensor(y, parents=(x,), backward=backward)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    pos = x.data > 0
    y = np.where(pos, x.data, slope * x.data)

    def backward(g):
        return (np.where(pos, g, slope * g),)

    return Tensor(y, parents=(x,), backward=backward)


def concat(tensors: Sequence[Tensor], layer: str = "concat") -> Tensor:
    """Concatenate along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    for t in tensors:
        _check5(layer, t)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(layer, f"cannot concatenate {t.shape} with {ref}")
    sizes = np.cumsum([t.shape[1] for t in tensors])[:-1]
    y = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        return tuple(np.split(g, sizes, axis=1))

    return Tensor(y, parents=tuple(tensors), backward=backward)


def add(a: Tensor, b: Tensor, layer: str = "add") -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(layer, f"cannot add {a.shape} and {b.shape}")
    return Tensor(a.data + b.data, parents=(a, b), backward=lambda g: (g, g))


def slice_channels(x: Tensor, start: int, stop: int, layer: str = "slice") -> Tensor:
    """Channels ``start:stop`` of a 5D tensor."""
    x = _as_tensor(x)
    _check5(layer, x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(layer, f"channel range {start}:{stop} outside {x.shape[1]} channels")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor(x.data[:, start:stop], parents=(x,), backward=backward)


def mse_loss(pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error; with ``weight`` the mean is weighted (e.g. a mask)."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError("mse_loss", f"prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    if weight is None:
        w = None
        norm = diff.size
    else:
        w = np.broadcast_to(np.asarray(weight, dtype=pred.dtype), pred.shape)
        norm = float(w.sum())
        if norm <= 0:
            raise ValueError("loss weight is zero everywhere")
    sq = diff * diff if w is None else w * diff * diff
    loss = np.asarray(sq.sum() / norm, dtype=pred.dtype)

    def backward(g):
        scale = 2.0 * g / norm
        return ((scale * diff if w is None else scale * w * diff).astype(pred.dtype, copy=False),)

    return Tensor(loss, parents=(pred,), backward=backward)
