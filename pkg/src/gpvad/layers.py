"""Forward/backward primitives for the CRNN, in numpy.

Activations are channels-last: conv stages use (B, T, F, C), the recurrent
stage (B, T, D).  Every primitive takes a time mask (B, T) so zero-padded
frames never leak into statistics, pooling windows or recurrences; a padded
batch item therefore behaves exactly like the same item run alone.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import InvalidArgumentError


def leaky_relu(x, slope=0.1):
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dy, x, slope=0.1):
    return np.where(x > 0, dy, slope * dy)


def sigmoid(x):
    return expit(x)


# -- batch norm ------------------------------------------------------------


def batchnorm_forward(x, mask, gamma, beta, running_mean, running_var, training,
                      momentum=0.1, eps=1e-5):
    """Per-channel normalisation over valid (batch, time, freq) positions.

    In training mode the running statistics are updated in place
    (unbiased variance, as is customary).  Padded positions come out as 0.
    """
    m = mask[:, :, None, None].astype(x.dtype)
    if training:
        n = float(mask.sum()) * x.shape[2]
        mean = (x * m).sum(axis=(0, 1, 2)) / n
        xc = (x - mean) * m
        var = (xc * xc).sum(axis=(0, 1, 2)) / n
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1.0, 1.0))
    else:
        n = None
        xc = (x - running_mean) * m
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = (gamma * xhat + beta) * m
    return y, (xhat, inv, m, n, gamma, training)


def batchnorm_backward(dy, cache, need_dx=True):
    xhat, inv, m, n, gamma, training = cache
    dy = dy * m
    dgamma = (dy * xhat).sum(axis=(0, 1, 2))
    dbeta = dy.sum(axis=(0, 1, 2))
    if not need_dx:
        return None, dgamma, dbeta
    dxhat = dy * gamma
    if training:
        dx = (inv / n) * (
            n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2))
        )
        dx *= m
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


# -- 3x3 convolution ---------------------------------------------------------


def conv3x3_forward(x, w, b):
    """Zero-padded 3x3 convolution. x (B,T,F,Ci), w (3,3,Ci,Co), b (Co,)."""
    B, T, F, Ci = x.shape
    if w.shape[:3] != (3, 3, Ci):
        raise InvalidArgumentError(f"kernel {w.shape} does not match {Ci} input channels")
    Co = w.shape[3]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    if Ci == 1:
        cols = np.lib.stride_tricks.sliding_window_view(xp[..., 0], (3, 3), axis=(1, 2))
        out = cols.reshape(-1, 9) @ w.reshape(9, Co)
        out = out.reshape(B, T, F, Co)
        out += b
    else:
        out = np.empty((B * T * F, Co), dtype=np.result_type(x, w))
        out[...] = b
        for i in range(3):
            for j in range(3):
                tap = np.ascontiguousarray(xp[:, i:i + T, j:j + F, :]).reshape(-1, Ci)
                out += tap @ w[i, j]
        out = out.reshape(B, T, F, Co)
    return out, (xp, w)


def conv3x3_backward(dout, cache, need_dx=True):
    """Returns (dx, dw, db); dx is None when ``need_dx`` is false."""
    xp, w = cache
    B, Tp, Fp, Ci = xp.shape
    T, F = Tp - 2, Fp - 2
    Co = w.shape[3]
    d2 = dout.reshape(-1, Co)
    db = d2.sum(axis=0)
    dw = np.empty_like(w)
    if Ci == 1:
        cols = np.lib.stride_tricks.sliding_window_view(xp[..., 0], (3, 3), axis=(1, 2))
        cols = cols.reshape(-1, 9)
        dw[...] = (cols.T @ d2).reshape(3, 3, 1, Co)
        if not need_dx:
            return None, dw, db
        dcols = (d2 @ w.reshape(9, Co).T).reshape(B, T, F, 3, 3)
        dxp = np.zeros(xp.shape[:3], dtype=dout.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + T, j:j + F] += dcols[..., i, j]
        return dxp[:, 1:-1, 1:-1, None], dw, db
    dxp = np.zeros_like(xp, dtype=np.result_type(xp, dout)) if need_dx else None
    for i in range(3):
        for j in range(3):
            tap = np.ascontiguousarray(xp[:, i:i + T, j:j + F, :]).reshape(-1, Ci)
            dw[i, j] = tap.T @ d2
            if need_dx:
                dxp[:, i:i + T, j:j + F, :] += (d2 @ w[i, j].T).reshape(B, T, F, Ci)
    return (dxp[:, 1:-1, 1:-1, :] if need_dx else None), dw, db


# -- L^p pooling -------------------------------------------------------------


def lp_pool_forward(x, mask, stride_t, stride_f, p=4.0):
    """Non-overlapping ``(mean |v|^p)^(1/p)`` windows with ceil-division sizes.

    Edge windows average only over the elements (and valid frames) they
    actually contain.  Returns the pooled tensor, the new time mask and a cache.
    """
    if p < 1:
        raise InvalidArgumentError("L^p pooling needs p >= 1")
    B, T, F, C = x.shape
    To, Fo = -(-T // stride_t), -(-F // stride_f)
    pt, pf = To * stride_t - T, Fo * stride_f - F
    a = np.abs(x)
    if pt or pf:
        a = np.pad(a, ((0, 0), (0, pt), (0, pf), (0, 0)))
    mpad = np.pad(mask.astype(x.dtype), ((0, 0), (0, pt)))
    ap = a ** p * mpad[:, :, None, None]
    S = ap.reshape(B, To, stride_t, Fo, stride_f, C).sum(axis=(2, 4))
    cnt_t = mpad.reshape(B, To, stride_t).sum(axis=2)
    cnt_f = np.minimum(stride_f, F - stride_f * np.arange(Fo)).astype(x.dtype)
    cnt = cnt_t[:, :, None, None] * cnt_f[None, None, :, None]
    safe = np.maximum(cnt, 1.0)
    out = (S / safe) ** (1.0 / p)
    new_mask = cnt_t > 0
    return out, new_mask, (x, mpad, out, safe, stride_t, stride_f, p)


def lp_pool_backward(dout, cache):
    x, mpad, out, cnt, st, sf, p = cache
    B, T, F, C = x.shape
    To, Fo = out.shape[1], out.shape[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(out > 0, dout * out ** (1.0 - p) / cnt, 0.0)
    big = np.broadcast_to(
        coef[:, :, None, :, None, :], (B, To, st, Fo, sf, C)
    ).reshape(B, To * st, Fo * sf, C)[:, :T, :F, :]
    a = np.abs(x)
    dx = big * a ** (p - 1.0) * np.sign(x) * mpad[:, :T, None, None]
    return dx.astype(x.dtype, copy=False)


def lp_pool(x, stride_t, stride_f, p=4.0):
    """Convenience wrapper for a single unmasked (T, F) or (T, F, C) tensor."""
    arr = np.asarray(x, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    out, _, _ = lp_pool_forward(arr[None], np.ones((1, arr.shape[0]), bool), stride_t, stride_f, p)
    out = out[0]
    return out[..., 0] if squeeze else out


def _pow_abs(a, p):
    """|a|^p; ``a`` must be non-negative unless p = 4."""
    if p == 4.0:
        out = np.multiply(a, a)
        np.multiply(out, out, out=out)
        return out
    return a ** p


def leaky_lp_pool_forward(z, mask, stride_t, stride_f, p=4.0, slope=0.1):
    """``lp_pool_forward(leaky_relu(z))`` computed in one sweep.

    Only the activation is cached (it determines the leaky branch by sign),
    which halves the memory traffic of the largest tensors.
    """
    y = np.maximum(z, slope * z) if 0 <= slope <= 1 else leaky_relu(z, slope)
    B, T, F, C = y.shape
    To, Fo = -(-T // stride_t), -(-F // stride_f)
    pt, pf = To * stride_t - T, Fo * stride_f - F
    ap = _pow_abs(y if p == 4.0 else np.abs(y), p)
    full = bool(mask.all())
    mpad = np.pad(mask.astype(y.dtype), ((0, 0), (0, pt)))
    if pt or pf:
        ap = np.pad(ap, ((0, 0), (0, pt), (0, pf), (0, 0)))
    if not full:
        ap *= mpad[:, :, None, None]
    S = ap.reshape(B, To, stride_t, Fo, stride_f, C).sum(axis=(2, 4))
    cnt_t = mpad.reshape(B, To, stride_t).sum(axis=2)
    cnt_f = np.minimum(stride_f, F - stride_f * np.arange(Fo)).astype(y.dtype)
    cnt = np.maximum(cnt_t[:, :, None, None] * cnt_f[None, None, :, None], 1.0)
    out = (S / cnt) ** (1.0 / p)
    return out, cnt_t > 0, (y, mpad, full, out, cnt, stride_t, stride_f, p, slope)


def leaky_lp_pool_backward(dout, cache):
    """Gradient wrt the pre-activation ``z``."""
    y, mpad, full, out, cnt, st, sf, p, slope = cache
    B, T, F, C = y.shape
    To, Fo = out.shape[1], out.shape[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        coef = np.where(out > 0, dout * out ** (1.0 - p) / cnt, 0.0).astype(y.dtype, copy=False)
    padded = To * st != T or Fo * sf != F
    yy = np.pad(y, ((0, 0), (0, To * st - T), (0, Fo * sf - F), (0, 0))) if padded else y
    # d|leaky(z)|^p / dz = |y|^(p-1) sign(y) * (1 or slope): for p = 4 that is
    # y^2 * max(y, slope*y) whenever 0 <= slope <= 1
    if p == 4.0 and 0 <= slope <= 1:
        dz = np.multiply(yy, slope)
        np.maximum(dz, yy, out=dz)
        dz *= yy
        dz *= yy
    else:
        dz = np.abs(yy) ** (p - 1.0) * np.sign(yy) * np.where(yy > 0, 1.0, slope)
        dz = dz.astype(y.dtype, copy=False)
    view = dz.reshape(B, To, st, Fo, sf, C)
    view *= coef[:, :, None, :, None, :]
    if padded:
        dz = dz[:, :T, :F, :]
    if not full:
        dz = dz * mpad[:, :T, None, None]
    return dz


# -- upsampling --------------------------------------------------------------


def upsample_matrix(rows, target, factor=4, mode="nearest"):
    """(target, rows) matrix mapping sub-sampled frames back to full rate."""
    if target < rows:
        raise InvalidArgumentError(f"target length {target} < input rows {rows}")
    if rows < 1:
        raise InvalidArgumentError("need at least one row to upsample")
    M = np.zeros((target, rows))
    t = np.arange(target)
    if mode == "nearest":
        M[t, np.minimum(t // factor, rows - 1)] = 1.0
    elif mode == "linear":
        pos = np.clip((t + 0.5) / factor - 0.5, 0.0, rows - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, rows - 1)
        frac = pos - lo
        np.add.at(M, (t, lo), 1.0 - frac)
        np.add.at(M, (t, hi), frac)
    else:
        raise InvalidArgumentError(f"unknown upsampling mode {mode!r}")
    return M


def upsample_time(x, target_T, factor=4, mode="nearest"):
    """Repeat rows of ``x`` (rows, D) by ``factor`` and fit to ``target_T`` rows."""
    x = np.asarray(x)
    return upsample_matrix(x.shape[0], target_T, factor, mode).astype(x.dtype) @ x


# -- GRU ---------------------------------------------------------------------


def gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh, reverse=False):
    """Single-direction GRU (gate order r, z, n) over (B, T, D).

    At padded steps the hidden state is carried unchanged, so the reverse
    direction starts from zero at each item's own last valid frame.
    """
    B, T, _ = x.shape
    H = w_hh.shape[1]
    xi = x @ w_ih.T + b_ih
    h = np.zeros((B, H), dtype=x.dtype)
    hs = np.empty((B, T, H), dtype=x.dtype)
    steps = range(T - 1, -1, -1) if reverse else range(T)
    cache = {"h_prev": np.empty_like(hs), "r": np.empty_like(hs), "z": np.empty_like(hs),
             "n": np.empty_like(hs), "hh_n": np.empty_like(hs)}
    mf = mask.astype(x.dtype)
    w_hh_t = w_hh.T
    for t in steps:
        hh = h @ w_hh_t + b_hh
        gi = xi[:, t]
        r = expit(gi[:, :H] + hh[:, :H])
        z = expit(gi[:, H:2 * H] + hh[:, H:2 * H])
        n = np.tanh(gi[:, 2 * H:] + r * hh[:, 2 * H:])
        m = mf[:, t, None]
        h_new = (1.0 - z) * n + z * h
        h_new = m * h_new + (1.0 - m) * h
        cache["h_prev"][:, t] = h
        cache["r"][:, t] = r
        cache["z"][:, t] = z
        cache["n"][:, t] = n
        cache["hh_n"][:, t] = hh[:, 2 * H:]
        hs[:, t] = h_new
        h = h_new
    cache.update(x=x, mask=mf, w_ih=w_ih, w_hh=w_hh, reverse=reverse)
    return hs, cache


def gru_backward(dhs, cache):
    x, mf, w_ih, w_hh = cache["x"], cache["mask"], cache["w_ih"], cache["w_hh"]
    B, T, D = x.shape
    H = w_hh.shape[1]
    dxi = np.zeros((B, T, 3 * H), dtype=dhs.dtype)
    dw_hh = np.zeros_like(w_hh)
    db_hh = np.zeros(3 * H, dtype=dhs.dtype)
    dh = np.zeros((B, H), dtype=dhs.dtype)
    steps = range(T) if cache["reverse"] else range(T - 1, -1, -1)
    for t in steps:
        dh = dh + dhs[:, t]
        m = mf[:, t, None]
        dcell = dh * m
        h_prev = cache["h_prev"][:, t]
        r, z, n = cache["r"][:, t], cache["z"][:, t], cache["n"][:, t]
        dn_pre = dcell * (1.0 - z) * (1.0 - n * n)
        dz_pre = dcell * (h_prev - n) * z * (1.0 - z)
        dr_pre = dn_pre * cache["hh_n"][:, t] * r * (1.0 - r)
        dxi[:, t, :H] = dr_pre
        dxi[:, t, H:2 * H] = dz_pre
        dxi[:, t, 2 * H:] = dn_pre
        dhh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=1)
        dw_hh += dhh.T @ h_prev
        db_hh += dhh.sum(axis=0)
        dh = dcell * z + dhh @ w_hh + dh * (1.0 - m)
    dw_ih = dxi.reshape(-1, 3 * H).T @ x.reshape(-1, D)
    db_ih = dxi.sum(axis=(0, 1))
    dx = dxi @ w_ih
    return dx, dw_ih, dw_hh, db_ih, db_hh


# -- linear softmax pooling --------------------------------------------------

POOL_EPS = 1e-7


def linear_softmax_forward(y, mask):
    """Clip probability ``sum y^2 / sum y`` over valid frames; y (B, T, E)."""
    m = mask[:, :, None].astype(y.dtype)
    S = (y * m).sum(axis=1)
    Q = (y * y * m).sum(axis=1)
    ok = S >= POOL_EPS
    out = np.where(ok, Q / np.where(ok, S, 1.0), 0.0).astype(y.dtype)
    return out, (y, m, S, Q, ok)


def linear_softmax_backward(dout, cache):
    y, m, S, Q, ok = cache
    Ssafe = np.where(ok, S, 1.0)
    coef = np.where(ok, dout, 0.0)
    dy = coef[:, None, :] * (2.0 * y * Ssafe[:, None, :] - Q[:, None, :]) / (Ssafe[:, None, :] ** 2)
    return (dy * m).astype(y.dtype, copy=False)
