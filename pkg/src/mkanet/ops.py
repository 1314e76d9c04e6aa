"""Differentiable primitive operations on rank-4 tensors (B, C, H, W).

Convolution is evaluated as one batched float64 GEMM per kernel tap, which
keeps memory bounded (no full im2col buffer) while accumulation stays in
64-bit with a fixed tap order.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .engine import (
    ConfigError,
    DataError,
    IGNORE,
    ShapeError,
    Tensor,
    as_f64,
    check_finite,
    kink_watch_active,
    note_kink_margin,
    result,
    to_storage,
)


@dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry. `padding=None` selects the "same" rule
    (output size equals input size at stride 1)."""

    stride: int = 1
    dilation: int = 1
    groups: int = 1
    padding: int | None = None

    def __post_init__(self):
        if self.stride < 1:
            raise ConfigError(f"stride must be positive, got {self.stride}")
        if self.dilation < 1:
            raise ConfigError(f"dilation must be positive, got {self.dilation}")
        if self.groups < 1:
            raise ConfigError(f"groups must be positive, got {self.groups}")
        if self.padding is not None and self.padding < 0:
            raise ConfigError(f"padding must be non-negative, got {self.padding}")

    def pad_for(self, k: int) -> int:
        if self.padding is not None:
            return self.padding
        return self.dilation * (k - 1) // 2


def _require_4d(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 (B,C,H,W), got shape {t.data.shape}")


def conv_output_size(n: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _conv_checks(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec):
    batch, cin, h, w = x.shape
    cout, cper, kh, kw = kernel.shape
    if kh != kw:
        raise ShapeError(f"only square kernels supported, got {kh}x{kw}")
    if cin % spec.groups or cout % spec.groups:
        raise ShapeError(
            f"channels in={cin} out={cout} not divisible by groups={spec.groups}"
        )
    if cper != cin // spec.groups:
        raise ShapeError(
            f"kernel expects {cper} channels per group, input provides {cin // spec.groups}"
        )
    pad = spec.pad_for(kh)
    ho = conv_output_size(h, kh, spec.stride, spec.dilation, pad)
    wo = conv_output_size(w, kw, spec.stride, spec.dilation, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv output {ho}x{wo} is empty for input {h}x{w}, k={kh}")
    return pad, ho, wo


def _tap_view(xp: np.ndarray, u: int, v: int, stride: int, dilation: int, ho: int, wo: int):
    r0, c0 = u * dilation, v * dilation
    return xp[:, :, r0 : r0 + (ho - 1) * stride + 1 : stride,
              c0 : c0 + (wo - 1) * stride + 1 : stride]


def _conv2d_forward(x64, k64, spec: ConvSpec, pad: int, ho: int, wo: int) -> np.ndarray:
    batch, cin = x64.shape[:2]
    cout, cper, k, _ = k64.shape
    xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x64
    out = np.zeros((batch, cout, ho, wo), dtype=np.float64)
    depthwise = spec.groups == cin and cout == cin
    if depthwise:
        for u in range(k):
            for v in range(k):
                view = _tap_view(xp, u, v, spec.stride, spec.dilation, ho, wo)
                out += k64[:, 0, u, v].reshape(1, cin, 1, 1) * view
        return out
    of = out.reshape(batch, cout, ho * wo)
    cg_in, cg_out = cin // spec.groups, cout // spec.groups
    for g in range(spec.groups):
        xg = xp[:, g * cg_in : (g + 1) * cg_in]
        kg = k64[g * cg_out : (g + 1) * cg_out]
        for u in range(k):
            for v in range(k):
                view = _tap_view(xg, u, v, spec.stride, spec.dilation, ho, wo)
                flat = np.ascontiguousarray(view).reshape(batch, cg_in, ho * wo)
                of[:, g * cg_out : (g + 1) * cg_out] += np.matmul(kg[:, :, u, v], flat)
    return out


def _conv2d_backward(x64, k64, spec: ConvSpec, pad: int, up: np.ndarray):
    """Adjoints of `_conv2d_forward`: returns (grad wrt input, grad wrt kernel)."""
    batch, cin, h, w = x64.shape
    cout, cper, k, _ = k64.shape
    ho, wo = up.shape[2], up.shape[3]
    xp = np.pad(x64, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x64
    gxp = np.zeros_like(xp)
    gk = np.zeros_like(k64)
    depthwise = spec.groups == cin and cout == cin
    if depthwise:
        for u in range(k):
            for v in range(k):
                view = _tap_view(xp, u, v, spec.stride, spec.dilation, ho, wo)
                gk[:, 0, u, v] = np.einsum("bcij,bcij->c", up, view)
                gview = _tap_view(gxp, u, v, spec.stride, spec.dilation, ho, wo)
                gview += k64[:, 0, u, v].reshape(1, cin, 1, 1) * up
    else:
        cg_in, cg_out = cin // spec.groups, cout // spec.groups
        uf = up.reshape(batch, cout, ho * wo)
        for g in range(spec.groups):
            xg = xp[:, g * cg_in : (g + 1) * cg_in]
            gxg = gxp[:, g * cg_in : (g + 1) * cg_in]
            kg = k64[g * cg_out : (g + 1) * cg_out]
            ug = uf[:, g * cg_out : (g + 1) * cg_out]
            for u in range(k):
                for v in range(k):
                    view = _tap_view(xg, u, v, spec.stride, spec.dilation, ho, wo)
                    flat = np.ascontiguousarray(view).reshape(batch, cg_in, ho * wo)
                    gk[g * cg_out : (g + 1) * cg_out, :, u, v] = np.matmul(
                        ug, flat.transpose(0, 2, 1)
                    ).sum(axis=0)
                    gview = _tap_view(gxg, u, v, spec.stride, spec.dilation, ho, wo)
                    gview += np.matmul(kg[:, :, u, v].T, ug).reshape(batch, cg_in, ho, wo)
    gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
    return gx, gk


def conv2d(x: Tensor, kernel: Tensor, spec: ConvSpec) -> Tensor:
    """2-D cross-correlation with zero padding, stride, dilation and groups."""
    _require_4d(x, "conv input")
    if kernel.data.ndim != 4:
        raise ShapeError(f"kernel must be rank-4, got {kernel.data.shape}")
    pad, ho, wo = _conv_checks(x.data, kernel.data, spec)
    x64, k64 = as_f64(x.data), as_f64(kernel.data)
    out = _conv2d_forward(x64, k64, spec, pad, ho, wo)

    def backprop(up):
        return _conv2d_backward(x64, k64, spec, pad, up)

    return result(out, (x, kernel), backprop, "conv2d output")


def conv2d_grad(x: Tensor, kernel: Tensor, spec: ConvSpec, upstream: Tensor):
    """Analytic adjoints of conv2d for a given upstream gradient."""
    pad, ho, wo = _conv_checks(x.data, kernel.data, spec)
    if upstream.data.shape != (x.data.shape[0], kernel.data.shape[0], ho, wo):
        raise ShapeError(
            f"upstream shape {upstream.data.shape} does not match conv output "
            f"({x.data.shape[0]}, {kernel.data.shape[0]}, {ho}, {wo})"
        )
    gx, gk = _conv2d_backward(as_f64(x.data), as_f64(kernel.data), spec, pad, as_f64(upstream.data))
    return Tensor(gx), Tensor(gk)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean,
    running_var,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (batch, H, W).

    Train mode uses batch statistics and folds them into the running
    estimates in place; eval mode reads the running estimates. Running
    variance is the biased (1/N) estimate.
    """
    _require_4d(x, "batch_norm input")
    c = x.data.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.data.shape != (c,):
            raise ShapeError(f"{name} must have shape ({c},), got {t.data.shape}")
    x64 = as_f64(x.data)
    n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if train:
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        running_mean.data = (
            (1.0 - momentum) * as_f64(running_mean.data) + momentum * mean
        ).astype(np.float32)
        running_var.data = (
            (1.0 - momentum) * as_f64(running_var.data) + momentum * var
        ).astype(np.float32)
    else:
        mean = as_f64(running_mean.data)
        var = as_f64(running_var.data)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = as_f64(gamma.data).reshape(1, c, 1, 1) * xhat + as_f64(beta.data).reshape(1, c, 1, 1)
    g64 = as_f64(gamma.data)

    def backprop(up):
        dgamma = np.einsum("bchw,bchw->c", up, xhat)
        dbeta = up.sum(axis=(0, 2, 3))
        scaled = up * g64.reshape(1, c, 1, 1)
        if train:
            mean_s = scaled.mean(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            mean_sx = np.einsum("bchw,bchw->c", scaled, xhat).reshape(1, c, 1, 1) / n
            dx = inv.reshape(1, c, 1, 1) * (scaled - mean_s - xhat * mean_sx)
        else:
            dx = scaled * inv.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return result(out, (x, gamma, beta), backprop)


def relu(x: Tensor) -> Tensor:
    if kink_watch_active() and x.data.size:
        note_kink_margin(np.abs(as_f64(x.data)).min())
    mask = x.data > 0

    def backprop(up):
        return (up * mask,)

    return result(np.maximum(x.data, 0), (x,), backprop)


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-as_f64(x.data)))

    def backprop(up):
        return (up * s * (1.0 - s),)

    return result(s, (x,), backprop)


@functools.lru_cache(maxsize=128)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic 1-D linear interpolation matrix (half-pixel convention,
    clamped borders). `out = M @ in` resamples a length-n_in signal."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    lo = np.floor(src)
    frac = src - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(int)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(int)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def _resample_bilinear(x64: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    b, c, h, w = x64.shape
    mh = interp_matrix(h, h_out)
    mw = interp_matrix(w, w_out)
    flat = x64.reshape(b * c, h, w)
    t = np.matmul(mh, flat)
    out = np.matmul(t, mw.T)
    return out.reshape(b, c, h_out, w_out)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor, half-pixel convention."""
    _require_4d(x, "upsample input")
    if int(factor) != factor or factor < 1:
        raise ConfigError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    b, c, h, w = x.data.shape
    ho, wo = h * factor, w * factor
    out = _resample_bilinear(as_f64(x.data), ho, wo)

    def backprop(up):
        mh = interp_matrix(h, ho)
        mw = interp_matrix(w, wo)
        flat = up.reshape(b * c, ho, wo)
        g = np.matmul(np.matmul(mh.T, flat), mw)
        return (g.reshape(b, c, h, w),)

    return result(out, (x,), backprop)


def concat_channels(parts) -> Tensor:
    return _concat(parts, axis=1)


def concat_rows(parts) -> Tensor:
    """Concatenate along the H axis (used by the attention pooling path)."""
    return _concat(parts, axis=2)


def _concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    for p in parts:
        _require_4d(p, "concat input")
    ref = parts[0].data.shape
    for p in parts[1:]:
        other = p.data.shape
        if any(other[a] != ref[a] for a in range(4) if a != axis):
            raise ShapeError(f"concat extents differ off axis {axis}: {ref} vs {other}")
    sizes = [p.data.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def backprop(up):
        index = [slice(None)] * 4
        grads = []
        for i in range(len(sizes)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(up[tuple(index)])
        return tuple(grads)

    return result(out, tuple(parts), backprop)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Take rows [start, stop) along the H axis."""
    _require_4d(x, "slice input")
    h = x.data.shape[2]
    if not (0 <= start < stop <= h):
        raise ShapeError(f"row slice [{start},{stop}) out of range for H={h}")
    out = x.data[:, :, start:stop, :]

    def backprop(up):
        g = np.zeros(x.data.shape, dtype=np.float64)
        g[:, :, start:stop, :] = up
        return (g,)

    return result(out.copy(), (x,), backprop)


def transpose_hw(x: Tensor) -> Tensor:
    _require_4d(x, "transpose input")

    def backprop(up):
        return (up.transpose(0, 1, 3, 2),)

    return result(np.ascontiguousarray(x.data.transpose(0, 1, 3, 2)), (x,), backprop)


def directional_avg_pool(x: Tensor, axis: str) -> Tensor:
    """Mean over one spatial direction: 'horizontal' pools W to (B,C,H,1),
    'vertical' pools H to (B,C,1,W)."""
    _require_4d(x, "pool input")
    if axis == "horizontal":
        np_axis, extent = 3, x.data.shape[3]
    elif axis == "vertical":
        np_axis, extent = 2, x.data.shape[2]
    else:
        raise ConfigError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    out = as_f64(x.data).mean(axis=np_axis, keepdims=True)

    def backprop(up):
        reps = [1, 1, 1, 1]
        reps[np_axis] = extent
        return (np.tile(up / extent, reps),)

    return result(out, (x,), backprop)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = as_f64(a.data) + as_f64(b.data)

    def backprop(up):
        return _unbroadcast(up, a.data.shape), _unbroadcast(up, b.data.shape)

    return result(out, (a, b), backprop)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a64, b64 = as_f64(a.data), as_f64(b.data)
    out = a64 * b64

    def backprop(up):
        return _unbroadcast(up * b64, a.data.shape), _unbroadcast(up * a64, b.data.shape)

    return result(out, (a, b), backprop)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backprop(up):
        return (up * s,)

    return result(as_f64(x.data) * s, (x,), backprop)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    _require_4d(x, "bias input")
    c = x.data.shape[1]
    if bias.data.shape != (c,):
        raise ShapeError(f"bias must have shape ({c},), got {bias.data.shape}")
    out = as_f64(x.data) + as_f64(bias.data).reshape(1, c, 1, 1)

    def backprop(up):
        return up, up.sum(axis=(0, 2, 3))

    return result(out, (x, bias), backprop)


def _validate_targets(target: np.ndarray, k: int) -> np.ndarray:
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    if target.ndim != 3:
        raise ShapeError(f"target mask must be (H,W) or (B,H,W), got {target.shape}")
    bad = (target != IGNORE) & ((target < 0) | (target >= k))
    if bad.any():
        raise DataError(
            f"target contains class {int(target[bad][0])} outside 0..{k - 1}"
        )
    return target


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over non-ignore pixels (0 if none)."""
    _require_4d(logits, "logits")
    b, k, h, w = logits.data.shape
    target = _validate_targets(target, k)
    if target.shape != (b, h, w):
        raise ShapeError(f"target shape {target.shape} != logits spatial ({b},{h},{w})")
    z = as_f64(logits.data)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    logp = z - lse
    valid = target != IGNORE
    n_valid = int(valid.sum())
    if n_valid == 0:
        return result(np.float64(0.0), (logits,), lambda up: (np.zeros_like(z),))
    bi, hi, wi = np.nonzero(valid)
    ci = target[bi, hi, wi]
    loss = -logp[bi, ci, hi, wi].sum() / n_valid

    def backprop(up):
        g = np.exp(logp) * valid[:, None, :, :]
        g[bi, ci, hi, wi] -= 1.0
        return (g * (float(up) / n_valid),)

    return result(np.float64(loss), (logits,), backprop)
