"""Numba kernel backend: @njit twins of the numpy fallback loops."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, k, stride):
    cin, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((cin * k * k, ho * wo), dtype=xp.dtype)
    r = 0
    for c in range(cin):
        for dy in range(k):
            for dx in range(k):
                idx = 0
                for i in range(ho):
                    base = i * stride + dy
                    for j in range(wo):
                        cols[r, idx] = xp[c, base, j * stride + dx]
                        idx += 1
                r += 1
    return cols


@njit(cache=True)
def col2im(cols, cin, k, stride, hp, wp):
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    dxp = np.zeros((cin, hp, wp), dtype=cols.dtype)
    r = 0
    for c in range(cin):
        for dy in range(k):
            for dx in range(k):
                idx = 0
                for i in range(ho):
                    base = i * stride + dy
                    for j in range(wo):
                        dxp[c, base, j * stride + dx] += cols[r, idx]
                        idx += 1
                r += 1
    return dxp


@njit(cache=True)
def bilinear_resize(img, out_h, out_w):
    h, w, nc = img.shape
    out = np.empty((out_h, out_w, nc), dtype=img.dtype)
    sy = h / out_h
    sx = w / out_w
    for i in range(out_h):
        fy = (i + 0.5) * sy - 0.5
        if fy < 0.0:
            fy = 0.0
        if fy > h - 1.0:
            fy = h - 1.0
        y0 = int(fy)
        if y0 > h - 2:
            y0 = h - 2 if h > 1 else 0
        y1 = y0 + 1 if y0 + 1 < h else h - 1
        wy = fy - y0
        for j in range(out_w):
            fx = (j + 0.5) * sx - 0.5
            if fx < 0.0:
                fx = 0.0
            if fx > w - 1.0:
                fx = w - 1.0
            x0 = int(fx)
            if x0 > w - 2:
                x0 = w - 2 if w > 1 else 0
            x1 = x0 + 1 if x0 + 1 < w else w - 1
            wx = fx - x0
            for c in range(nc):
                top = img[y0, x0, c] * (1 - wx) + img[y0, x1, c] * wx
                bot = img[y1, x0, c] * (1 - wx) + img[y1, x1, c] * wx
                out[i, j, c] = top * (1 - wy) + bot * wy
    return out


@njit(cache=True)
def roi_align_forward(feat, x1, y1, x2, y2, out_size, ratio):
    nc, h, w = feat.shape
    bh = (y2 - y1) / out_size
    bw = (x2 - x1) / out_size
    out = np.zeros((nc, out_size, out_size), dtype=feat.dtype)
    inv = 1.0 / (ratio * ratio)
    for bi in range(out_size):
        for bj in range(out_size):
            for si in range(ratio):
                fy = y1 + (bi + (si + 0.5) / ratio) * bh
                gy = fy - 0.5
                for sj in range(ratio):
                    fx = x1 + (bj + (sj + 0.5) / ratio) * bw
                    gx = fx - 0.5
                    if gx <= -1.0 or gx >= w or gy <= -1.0 or gy >= h:
                        continue
                    cgx = gx if gx > 0.0 else 0.0
                    cgy = gy if gy > 0.0 else 0.0
                    x0 = int(cgx)
                    if x0 > w - 1:
                        x0 = w - 1
                    y0 = int(cgy)
                    if y0 > h - 1:
                        y0 = h - 1
                    x1i = x0 + 1 if x0 + 1 < w else w - 1
                    y1i = y0 + 1 if y0 + 1 < h else h - 1
                    lx = cgx - x0
                    ly = cgy - y0
                    for c in range(nc):
                        v = (feat[c, y0, x0] * (1 - ly) * (1 - lx)
                             + feat[c, y0, x1i] * (1 - ly) * lx
                             + feat[c, y1i, x0] * ly * (1 - lx)
                             + feat[c, y1i, x1i] * ly * lx)
                        out[c, bi, bj] += v
    for c in range(nc):
        for bi in range(out_size):
            for bj in range(out_size):
                out[c, bi, bj] *= inv
    return out


@njit(cache=True)
def roi_align_backward(dout, dfeat, x1, y1, x2, y2, out_size, ratio):
    nc, h, w = dfeat.shape
    bh = (y2 - y1) / out_size
    bw = (x2 - x1) / out_size
    inv = 1.0 / (ratio * ratio)
    for bi in range(out_size):
        for bj in range(out_size):
            for si in range(ratio):
                fy = y1 + (bi + (si + 0.5) / ratio) * bh
                gy = fy - 0.5
                for sj in range(ratio):
                    fx = x1 + (bj + (sj + 0.5) / ratio) * bw
                    gx = fx - 0.5
                    if gx <= -1.0 or gx >= w or gy <= -1.0 or gy >= h:
                        continue
                    cgx = gx if gx > 0.0 else 0.0
                    cgy = gy if gy > 0.0 else 0.0
                    x0 = int(cgx)
                    if x0 > w - 1:
                        x0 = w - 1
                    y0 = int(cgy)
                    if y0 > h - 1:
                        y0 = h - 1
                    x1i = x0 + 1 if x0 + 1 < w else w - 1
                    y1i = y0 + 1 if y0 + 1 < h else h - 1
                    lx = cgx - x0
                    ly = cgy - y0
                    for c in range(nc):
                        g = dout[c, bi, bj] * inv
                        dfeat[c, y0, x0] += g * (1 - ly) * (1 - lx)
                        dfeat[c, y0, x1i] += g * (1 - ly) * lx
                        dfeat[c, y1i, x0] += g * ly * (1 - lx)
                        dfeat[c, y1i, x1i] += g * ly * lx
