"""Layer primitives with forward and reverse passes.

Every op accepts a single sample or a batch with a leading batch axis:
``conv2d`` takes ``[C,H,W]`` or ``[N,C,H,W]``, ``dense`` takes ``[F]`` or
``[N,F]`` and so on. Storage is float32; sums (matrix products, softmax
normalisers, losses) accumulate in float64 and are rounded once on output.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, UnsupportedConfigError, ValidationError
from .tensor import Tensor, as_tensor, make_result

CLAMP_EPS = 1e-7


def _f64(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float64, copy=False)


# --- convolution -------------------------------------------------------------


def conv2d(x, kernels, bias, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation with square odd kernels (3x3, or 1x1).

    ``padding="valid"`` shrinks each spatial dim by ``k-1``; ``"same"``
    zero-pads so the output keeps the input size.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError("conv2d input", "[C,H,W] or [N,C,H,W]", x.shape)
    if kernels.ndim != 4:
        raise ShapeError("conv2d kernels", "[C_out,C_in,k,k]", kernels.shape)
    c_out, c_in, kh, kw = kernels.shape
    if kh != kw or kh not in (1, 3):
        raise UnsupportedConfigError(f"conv2d supports 3x3 and 1x1 kernels, got {kh}x{kw}")
    if xd.shape[1] != c_in:
        raise ShapeError("conv2d input channels", c_in, xd.shape[1])
    if bias.shape != (c_out,):
        raise ShapeError("conv2d bias", (c_out,), bias.shape)
    if padding not in ("valid", "same"):
        raise UnsupportedConfigError(f"unknown padding {padding!r}")

    k = kh
    pad = (k - 1) // 2 if padding == "same" else 0
    n, _, h, w = xd.shape
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError("conv2d spatial size", f">= {k}x{k}", (h, w))
    xp = _f64(xd)
    if pad:
        xp = np.pad(xp, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    wk = _f64(kernels.data)

    # Sum of k*k shifted channel contractions; fixed order keeps results bit-stable.
    acc = np.zeros((n, ho, wo, c_out))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + ho, j : j + wo]
            acc += np.tensordot(patch, wk[:, :, i, j], axes=([1], [1]))
    out = acc.transpose(0, 3, 1, 2) + _f64(bias.data)[None, :, None, None]
    out32 = out.astype(np.float32)
    if single:
        out32 = out32[0]

    def backward(g):
        g4 = g[None] if single else g
        g_nhwc = np.ascontiguousarray(g4.transpose(0, 2, 3, 1))
        dk = np.zeros_like(wk)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                patch = xp[:, :, i : i + ho, j : j + wo]
                if kernels.requires_grad:
                    dk[:, :, i, j] = np.tensordot(g_nhwc, patch, axes=([0, 1, 2], [0, 2, 3]))
                if dxp is not None:
                    contrib = np.tensordot(g_nhwc, wk[:, :, i, j], axes=([3], [0]))
                    dxp[:, :, i : i + ho, j : j + wo] += contrib.transpose(0, 3, 1, 2)
        dx = None
        if dxp is not None:
            dx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
            if single:
                dx = dx[0]
        db = g4.sum(axis=(0, 2, 3))
        return dx, dk, db

    return make_result(out32, (x, kernels, bias), backward)


def conv_output_size(size: int, kernel: int = 3, padding: str = "valid") -> int:
    return size if padding == "same" else size - kernel + 1


# --- pooling / resampling ----------------------------------------------------


def maxpool2d(x, window: int = 2, stride: int = 2) -> Tensor:
    """2x2/stride-2 max pooling; trailing odd row/col dropped.

    Gradient goes to the first maximal element of each window in row-major
    order.
    """
    if window != 2 or stride != 2:
        raise UnsupportedConfigError(f"maxpool2d supports window=2, stride=2 only, got {window}/{stride}")
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError("maxpool2d input", "[C,H,W] or [N,C,H,W]", x.shape)
    n, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise ShapeError("maxpool2d spatial size", ">= 2x2", (h, w))
    h2, w2 = h // 2, w // 2
    win = (
        xd[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        scat = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(scat, arg[..., None], g4[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, : 2 * h2, : 2 * w2] = (
            scat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
        )
        return (dx[0] if single else dx,)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return make_result(out, (x,), backward)


# --- dense / activations -----------------------------------------------------


def dense(x, weights, bias) -> Tensor:
    """``out[m] = sum_n w[m, n] * x[n] + b[m]``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if weights.ndim != 2:
        raise ShapeError("dense weights", "[M,N]", weights.shape)
    m, nin = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != nin:
        raise ShapeError("dense input length", nin, x.shape[-1] if x.ndim else x.shape)
    if bias.shape != (m,):
        raise ShapeError("dense bias", (m,), bias.shape)
    xd, wd = _f64(x.data), _f64(weights.data)
    out = (xd @ wd.T + _f64(bias.data)).astype(np.float32)

    def backward(g):
        dx = g @ wd if x.requires_grad else None
        dw = np.outer(g, xd) if g.ndim == 1 else g.T @ xd
        db = g if g.ndim == 1 else g.sum(axis=0)
        return dx, dw, db

    return make_result(out, (x, weights, bias), backward)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, np.float32(0))
    return make_result(out, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    xd = _f64(x.data)
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = s.astype(np.float32)
    return make_result(out, (x,), lambda g: (g * s * (1.0 - s),))


def softmax(x) -> Tensor:
    """Softmax over the last axis, max-shifted for overflow safety."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax input", "[K] or [N,K] with K >= 1", x.shape)
    xd = _f64(x.data)
    e = np.exp(xd - xd.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_result(s.astype(np.float32), (x,), backward)


# --- losses ------------------------------------------------------------------


def _check_one_hot(target: np.ndarray) -> None:
    ok = np.isin(target, (0.0, 1.0)).all() and np.all(target.sum(axis=-1) == 1)
    if not ok:
        raise ValidationError("target must be one-hot along its last axis")


def categorical_cross_entropy(predicted, target, eps: float = CLAMP_EPS) -> Tensor:
    """Per-class binary cross-entropy averaged over the K classes.

    ``L = -1/K * sum_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`` with ``p``
    clamped to ``[eps, 1 - eps]``; batches are averaged over their rows.
    """
    predicted = as_tensor(predicted)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != predicted.shape:
        raise ShapeError("cross-entropy target", predicted.shape, t.shape)
    _check_one_hot(t)
    k = predicted.shape[-1]
    nrows = 1 if predicted.ndim == 1 else predicted.shape[0]
    p_raw = _f64(predicted.data)
    p = np.clip(p_raw, eps, 1.0 - eps)
    terms = t * np.log(p) + (1.0 - t) * np.log(1.0 - p)
    loss = -terms.sum() / (k * nrows)

    def backward(g):
        inside = (p_raw >= eps) & (p_raw <= 1.0 - eps)
        d = -(t / p - (1.0 - t) / (1.0 - p)) / (k * nrows)
        return (g * d * inside,)

    return make_result(np.float32(loss), (predicted,), backward)


def binary_cross_entropy(predicted, target, eps: float = CLAMP_EPS) -> Tensor:
    """Mean pixel-wise BCE for probability maps."""
    predicted = as_tensor(predicted)
    t = _f64(np.asarray(target.data if isinstance(target, Tensor) else target))
    if t.shape != predicted.shape:
        raise ShapeError("bce target", predicted.shape, t.shape)
    p_raw = _f64(predicted.data)
    p = np.clip(p_raw, eps, 1.0 - eps)
    count = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).sum() / count

    def backward(g):
        inside = (p_raw >= eps) & (p_raw <= 1.0 - eps)
        return (g * inside * -(t / p - (1.0 - t) / (1.0 - p)) / count,)

    return make_result(np.float32(loss), (predicted,), backward)


def dice_loss(predicted, target, smooth: float = 1.0) -> Tensor:
    """``1 - soft Dice`` per sample (leading axis), averaged over the batch."""
    predicted = as_tensor(predicted)
    t = _f64(np.asarray(target.data if isinstance(target, Tensor) else target))
    if t.shape != predicted.shape:
        raise ShapeError("dice target", predicted.shape, t.shape)
    p = _f64(predicted.data)
    nb = p.shape[0]
    pf, tf = p.reshape(nb, -1), t.reshape(nb, -1)
    inter = (pf * tf).sum(axis=1)
    denom = pf.sum(axis=1) + tf.sum(axis=1) + smooth
    dice = (2.0 * inter + smooth) / denom
    loss = float(np.mean(1.0 - dice))

    def backward(g):
        # d dice / d p = (2 t * denom - (2 inter + smooth)) / denom^2
        dd = (2.0 * tf * denom[:, None] - (2.0 * inter + smooth)[:, None]) / denom[:, None] ** 2
        return ((-g / nb) * dd.reshape(p.shape),)

    return make_result(np.float32(loss), (predicted,), backward)


def add(a, b) -> Tensor:
    """Elementwise sum of equal-shape tensors (used to combine losses)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add operands", a.shape, b.shape)
    out = (_f64(a.data) + _f64(b.data)).astype(np.float32)
    return make_result(out, (a, b), lambda g: (g, g))


# --- reshaping ---------------------------------------------------------------


def flatten(x) -> Tensor:
    """Row-major flatten of ``[C,H,W]`` (or ``[N,C,H,W]`` per sample)."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(-1) if x.ndim == 3 else x.data.reshape(shape[0], -1)
    return make_result(out, (x,), lambda g: (g.reshape(shape),))


def concat(a, b, axis: int = -1) -> Tensor:
    """Join ``a`` then ``b`` along ``axis`` (feature axis by default)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeError("concat rank", a.ndim, b.ndim)
    ax = axis % a.ndim
    sa, sb = list(a.shape), list(b.shape)
    sa.pop(ax)
    sb.pop(ax)
    if sa != sb:
        raise ShapeError("concat non-joined dims", tuple(sa), tuple(sb))
    split = a.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        return ga, gb

    return make_result(out, (a, b), backward)


def channel_concat(a, b) -> Tensor:
    """Concatenate feature maps on the channel axis (``-3``)."""
    return concat(a, b, axis=-3)


# --- initialisation ----------------------------------------------------------


def xavier_uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Glorot uniform on ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``."""
    if fan_in < 1 or fan_out < 1:
        raise ValidationError(f"fan_in and fan_out must be >= 1, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)).astype(np.float32))
