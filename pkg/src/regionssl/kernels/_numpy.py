"""Pure-numpy kernel backend (vectorized; no JIT)."""

from __future__ import annotations

import numpy as np


def im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    cin, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]                   # (C, Ho, Wo, k, k)
    cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, ho * wo)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, cin: int, k: int, stride: int,
           hp: int, wp: int) -> np.ndarray:
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dxp = np.zeros((cin, hp, wp), dtype=cols.dtype)
    c4 = cols.reshape(cin, k, k, ho, wo)
    # For a fixed (dy, dx) offset the strided targets are disjoint, so each
    # slice-add is a plain vectorized accumulate.
    for dy in range(k):
        for dx in range(k):
            dxp[:, dy:dy + stride * (ho - 1) + 1:stride,
                dx:dx + stride * (wo - 1) + 1:stride] += c4[:, dy, dx]
    return dxp


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    sy = h / out_h
    sx = w / out_w
    fy = (np.arange(out_h, dtype=np.float64) + 0.5) * sy - 0.5
    fx = (np.arange(out_w, dtype=np.float64) + 0.5) * sx - 0.5
    fy = np.clip(fy, 0.0, h - 1.0)
    fx = np.clip(fx, 0.0, w - 1.0)
    y0 = np.minimum(fy.astype(np.int64), h - 2) if h > 1 else np.zeros(out_h, np.int64)
    x0 = np.minimum(fx.astype(np.int64), w - 2) if w > 1 else np.zeros(out_w, np.int64)
    wy = (fy - y0).astype(img.dtype)[:, None, None]
    wx = (fx - x0).astype(img.dtype)[None, :, None]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(img.dtype)


def _sample_grid(x1: float, y1: float, x2: float, y2: float,
                 out_size: int, ratio: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened sample coordinates ordered (bin_i, bin_j, si, sj)."""
    bh = (y2 - y1) / out_size
    bw = (x2 - x1) / out_size
    ii, jj, si, sj = np.meshgrid(np.arange(out_size), np.arange(out_size),
                                 np.arange(ratio), np.arange(ratio), indexing="ij")
    fy = y1 + (ii + (si + 0.5) / ratio) * bh
    fx = x1 + (jj + (sj + 0.5) / ratio) * bw
    return fx.ravel(), fy.ravel()


def _bilinear_gather(feat: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Half-pixel bilinear read of (C, H, W) at featmap coords; 0 outside."""
    _, h, w = feat.shape
    gx = fx - 0.5
    gy = fy - 0.5
    valid = (gx > -1.0) & (gx < w) & (gy > -1.0) & (gy < h)
    gx = np.clip(gx, 0.0, None)
    gy = np.clip(gy, 0.0, None)
    x0 = np.minimum(gx.astype(np.int64), w - 1)
    y0 = np.minimum(gy.astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    lx = (gx - x0).astype(feat.dtype)
    ly = (gy - y0).astype(feat.dtype)
    v = (feat[:, y0, x0] * (1 - ly) * (1 - lx)
         + feat[:, y0, x1] * (1 - ly) * lx
         + feat[:, y1, x0] * ly * (1 - lx)
         + feat[:, y1, x1] * ly * lx)
    v[:, ~valid] = 0
    return v


def roi_align_forward(feat: np.ndarray, x1: float, y1: float, x2: float, y2: float,
                      out_size: int, ratio: int) -> np.ndarray:
    c = feat.shape[0]
    fx, fy = _sample_grid(x1, y1, x2, y2, out_size, ratio)
    v = _bilinear_gather(feat, fx, fy)
    v = v.reshape(c, out_size, out_size, ratio * ratio)
    out = v.sum(axis=-1, dtype=feat.dtype) / np.asarray(ratio * ratio, feat.dtype)
    return np.ascontiguousarray(out)


def roi_align_backward(dout: np.ndarray, dfeat: np.ndarray,
                       x1: float, y1: float, x2: float, y2: float,
                       out_size: int, ratio: int) -> None:
    _, h, w = dfeat.shape
    fx, fy = _sample_grid(x1, y1, x2, y2, out_size, ratio)
    gx = fx - 0.5
    gy = fy - 0.5
    valid = (gx > -1.0) & (gx < w) & (gy > -1.0) & (gy < h)
    gx = np.clip(gx, 0.0, None)
    gy = np.clip(gy, 0.0, None)
    x0 = np.minimum(gx.astype(np.int64), w - 1)
    y0 = np.minimum(gy.astype(np.int64), h - 1)
    x1i = np.minimum(x0 + 1, w - 1)
    y1i = np.minimum(y0 + 1, h - 1)
    lx = (gx - x0).astype(dfeat.dtype)
    ly = (gy - y0).astype(dfeat.dtype)
    g = np.repeat(dout.reshape(dout.shape[0], -1), ratio * ratio, axis=1)
    g = g / np.asarray(ratio * ratio, dfeat.dtype)
    g = g * valid.astype(dfeat.dtype)
    np.add.at(dfeat, (slice(None), y0, x0), g * (1 - ly) * (1 - lx))
    np.add.at(dfeat, (slice(None), y0, x1i), g * (1 - ly) * lx)
    np.add.at(dfeat, (slice(None), y1i, x0), g * ly * (1 - lx))
    np.add.at(dfeat, (slice(None), y1i, x1i), g * ly * lx)
