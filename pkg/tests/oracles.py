"""Independent reference implementations used as test oracles.

Everything here is built on scipy / plain loops, deliberately avoiding the
package's own kernels so each check runs along two independent paths.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage, signal

from regionssl.geometry import BBox


def subpixel_iou(a: BBox, b: BBox, step: float = 0.02) -> float:
    """IoU by counting sub-pixel grid samples inside each box."""
    x_lo = min(a.x1, b.x1) - 1
    x_hi = max(a.x2, b.x2) + 1
    y_lo = min(a.y1, b.y1) - 1
    y_hi = max(a.y2, b.y2) + 1
    xs = np.arange(x_lo + step / 2, x_hi, step)
    ys = np.arange(y_lo + step / 2, y_hi, step)
    gx, gy = np.meshgrid(xs, ys)

    def inside(box):
        return ((gx >= box.x1) & (gx < box.x2)
                & (gy >= box.y1) & (gy < box.y2))

    in_a = inside(a)
    in_b = inside(b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def bilinear_at(feat: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Half-pixel-aligned bilinear read of a (C, H, W) map via scipy.

    Sample coordinates are continuous feature-map coordinates (cell (r, c)
    has its center at (c + 0.5, r + 0.5)); out-of-map reads clamp to the
    border, matching the implementation for in-box sample points.
    """
    gx = np.clip(np.asarray(fx, dtype=np.float64) - 0.5, 0, feat.shape[2] - 1)
    gy = np.clip(np.asarray(fy, dtype=np.float64) - 0.5, 0, feat.shape[1] - 1)
    out = np.empty((feat.shape[0], gx.size), dtype=np.float64)
    coords = np.stack([gy.ravel(), gx.ravel()])
    for c in range(feat.shape[0]):
        out[c] = ndimage.map_coordinates(feat[c].astype(np.float64), coords,
                                         order=1, mode="nearest")
    return out.reshape(feat.shape[0], *np.shape(fx))


def roi_align_reference(feat: np.ndarray, box: BBox, out_size: int,
                        stride: int, ratio: int) -> np.ndarray:
    """RoIAlign recomputed with scipy bilinear reads at the quadrature points."""
    x1, y1, x2, y2 = (v / stride for v in box.as_tuple())
    bw = (x2 - x1) / out_size
    bh = (y2 - y1) / out_size
    out = np.zeros((feat.shape[0], out_size, out_size), dtype=np.float64)
    for bi in range(out_size):
        for bj in range(out_size):
            fy = y1 + (bi + (np.arange(ratio) + 0.5) / ratio) * bh
            fx = x1 + (bj + (np.arange(ratio) + 0.5) / ratio) * bw
            gx, gy = np.meshgrid(fx, fy)
            out[:, bi, bj] = bilinear_at(feat, gx, gy).mean(axis=(1, 2))
    return out


def conv_stage_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                         stride: int, pad: int, mode: str = "zero",
                         nonlinearity: bool = False) -> np.ndarray:
    """Strided conv via scipy.signal.correlate, optionally followed by the
    backbone's leaky activation and per-position channel standardization."""
    np_mode = "wrap" if mode == "circular" else "constant"
    xp = np.pad(x.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)),
                mode=np_mode)
    cout = w.shape[0]
    full = np.stack([
        signal.correlate(xp, w[o].astype(np.float64), mode="valid")[0]
        for o in range(cout)
    ])
    out = full[:, ::stride, ::stride] + b.astype(np.float64)[:, None, None]
    if nonlinearity:
        from regionssl.encoder import LEAKY_SLOPE, LN_EPS
        out = np.where(out > 0, out, LEAKY_SLOPE * out)
        mu = out.mean(axis=0)
        var = ((out - mu) ** 2).mean(axis=0)
        out = (out - mu) / np.sqrt(var + LN_EPS)
    return out


def pixels_in_box(box: BBox, w: int, h: int):
    """Set of (row, col) pixels whose centers fall inside the box (loop form)."""
    pts = set()
    for r in range(h):
        for c in range(w):
            if box.x1 <= c + 0.5 < box.x2 and box.y1 <= r + 0.5 < box.y2:
                pts.add((r, c))
    return pts
