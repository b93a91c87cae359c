"""Fused differentiable blocks with hand-written backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeMismatch, Tensor, _sigmoid

__all__ = [
    "linear",
    "lstm_layer",
    "conv2d",
    "upsample_nearest2x",
    "layer_norm",
    "dropout",
]


def linear(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` for a batch of row vectors (a single vector is fine too)."""
    xd, Wd = x.data, W.data
    if xd.shape[-1] != Wd.shape[1]:
        raise ShapeMismatch(f"linear: input width {xd.shape[-1]} vs weight {Wd.shape}")
    y = xd @ Wd.T
    if b is not None:
        if b.data.shape != (Wd.shape[0],):
            raise ShapeMismatch(f"linear: bias {b.data.shape} vs weight {Wd.shape}")
        y = y + b.data
    x2 = xd.reshape(-1, xd.shape[-1])

    def back(g):
        g2 = g.reshape(-1, Wd.shape[0])
        gx = (g2 @ Wd).reshape(xd.shape)
        gW = g2.T @ x2
        return (gx, gW) if b is None else (gx, gW, g2.sum(axis=0))
    parents = (x, W) if b is None else (x, W, b)
    return Tensor._op(y, parents, back)


def lstm_layer(x: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor) -> Tensor:
    """One LSTM layer over ``x`` of shape (B, T, F); returns all hidden states (B, T, H).

    Gate order along the 4H axis is (input, forget, cell, output); zero initial state.
    """
    xd = x.data
    if xd.ndim != 3 or xd.shape[1] < 1:
        raise ShapeMismatch(f"lstm expects (batch, time>=1, features), got {xd.shape}")
    B, T, F = xd.shape
    H = Wh.data.shape[1]
    if Wx.data.shape != (4 * H, F) or Wh.data.shape != (4 * H, H) or b.data.shape != (4 * H,):
        raise ShapeMismatch("lstm weight shapes do not match input/hidden sizes")
    wx, wh = Wx.data, Wh.data
    dt = xd.dtype
    xp = (xd.reshape(B * T, F) @ wx.T + b.data).reshape(B, T, 4 * H)
    hs = np.zeros((B, T + 1, H), dtype=dt)    # hs[:, 0] is the initial state
    cs = np.zeros((B, T + 1, H), dtype=dt)
    gates = np.empty((B, T, 4 * H), dtype=dt)
    for t in range(T):
        z = xp[:, t] + hs[:, t] @ wh.T
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sigmoid(z[:, 3 * H:])
        cs[:, t + 1] = f * cs[:, t] + i * g
        hs[:, t + 1] = o * np.tanh(cs[:, t + 1])
        gates[:, t, :H], gates[:, t, H:2 * H] = i, f
        gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:] = g, o

    def back(gout):
        dxp = np.empty_like(gates)
        dwh = np.zeros_like(wh)
        dh_next = np.zeros((B, H), dtype=dt)
        dc_next = np.zeros((B, H), dtype=dt)
        for t in range(T - 1, -1, -1):
            i, f = gates[:, t, :H], gates[:, t, H:2 * H]
            g, o = gates[:, t, 2 * H:3 * H], gates[:, t, 3 * H:]
            tc = np.tanh(cs[:, t + 1])
            dh = gout[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i),
                                 dc * cs[:, t] * f * (1.0 - f),
                                 dc * i * (1.0 - g * g),
                                 dh * tc * o * (1.0 - o)], axis=1)
            dxp[:, t] = dz
            dwh += dz.T @ hs[:, t]
            dh_next = dz @ wh
            dc_next = dc * f
        d2 = dxp.reshape(B * T, 4 * H)
        return ((d2 @ wx).reshape(B, T, F), d2.T @ xd.reshape(B * T, F), dwh, d2.sum(axis=0))
    return Tensor._op(np.ascontiguousarray(hs[:, 1:]), (x, Wx, Wh, b), back)


def _pads(k: int, padding: str):
    if padding == "valid":
        return 0, 0
    if padding == "same":
        # extra row/column goes after, as in TensorFlow
        total = k - 1
        return total // 2, total - total // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 2D cross-correlation; ``x`` (B, C, H, W), ``w`` (O, C, kh, kw)."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ShapeMismatch(f"conv2d: input {xd.shape} vs kernel {wd.shape}")
    B, C, H, W = xd.shape
    O, _, kh, kw = wd.shape
    (pt, pb), (pl, pr) = _pads(kh, padding), _pads(kw, padding)
    xpad = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else xd
    Hp, Wp = xpad.shape[2:]
    if Hp < kh or Wp < kw:
        raise ShapeMismatch(f"conv2d: spatial size {(H, W)} smaller than kernel {(kh, kw)}")
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    # (B, C, Ho, Wo, kh, kw) -> rows (B*Ho*Wo, C*kh*kw)
    cols = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = wd.reshape(O, C * kh * kw)
    y = cols @ wmat.T
    if b is not None:
        y = y + b.data
    y = np.ascontiguousarray(y.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (g2.T @ cols).reshape(wd.shape)
        dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xpad)
        for a in range(kh):
            for c in range(kw):
                dxp[:, :, a:a + Ho, c:c + Wo] += dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
        gx = dxp[:, :, pt:pt + H, pl:pl + W]
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._op(y, parents, back)


def upsample_nearest2x(x: Tensor) -> Tensor:
    xd = x.data
    B, C, H, W = xd.shape
    y = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)
    return Tensor._op(y, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gh = g * gamma.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xd.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)
    return Tensor._op(xhat * gamma.data + beta.data, (x, gamma, beta), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a generator")
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return Tensor._op(x.data * keep, (x,), lambda g: (g * keep,))
