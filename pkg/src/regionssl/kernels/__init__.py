"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The numba backend is used when importable; setting ``REGIONSSL_NO_NUMBA=1``
in the environment forces the numpy fallback.  Both backends implement the
same contracts (same accumulation order where it matters), so results agree
to float rounding and the choice only affects speed.  ``benchmarks/
bench_kernels.py`` compares the two.

Kernel surface:
    im2col / col2im          patch gather / scatter-add for strided 3x3 convs
    bilinear_resize          half-pixel-aligned image resize, HWC layout
    roi_align_forward/_backward   bin-sampled bilinear region pooling, CHW
"""

from __future__ import annotations

import os

import numpy as np

from . import _numpy as _np_backend

_FORCE_NUMPY = os.environ.get("REGIONSSL_NO_NUMBA", "").strip() not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from . import _numba as _active
        _BACKEND_NAME = "numba"
    except ImportError:  # pragma: no cover - depends on environment
        _active = _np_backend
        _BACKEND_NAME = "numpy"
else:
    _active = _np_backend
    _BACKEND_NAME = "numpy"


def backend_name() -> str:
    """Name of the kernel backend in use ('numba' or 'numpy')."""
    return _BACKEND_NAME


def get_backend(name: str):
    """Fetch a backend module by name (used by the benchmark and tests)."""
    if name == "numpy":
        return _np_backend
    if name == "numba":
        from . import _numba
        return _numba
    raise ValueError(f"unknown kernel backend: {name!r}")


def im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """Gather k x k patches of a padded (C, Hp, Wp) map into a GEMM operand.

    Returns (C*k*k, Ho*Wo) with rows ordered (channel, dy, dx) and columns in
    row-major output order.
    """
    return _active.im2col(xp, k, stride)


def col2im(cols: np.ndarray, cin: int, k: int, stride: int,
           hp: int, wp: int) -> np.ndarray:
    """Scatter-add the transpose of :func:`im2col`: patch grads -> padded map."""
    return _active.col2im(cols, cin, k, stride, hp, wp)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an (H, W, C) image with half-pixel-aligned bilinear sampling."""
    if img.ndim != 3:
        raise ValueError("bilinear_resize expects an (H, W, C) array")
    if img.shape[0] == out_h and img.shape[1] == out_w:
        return img.copy()
    return _active.bilinear_resize(img, out_h, out_w)


def roi_align_forward(feat: np.ndarray, box_xyxy: tuple[float, float, float, float],
                      out_size: int, spatial_scale: float,
                      sampling_ratio: int = 2) -> np.ndarray:
    """Pool a (C, H, W) feature map over a box into (C, out, out) bins.

    The box is given in input-image coordinates and divided by
    ``1/spatial_scale`` (the cumulative stride); each bin averages
    ``sampling_ratio**2`` bilinear samples taken at half-pixel-aligned
    coordinates, with out-of-map samples contributing zero.
    """
    x1, y1, x2, y2 = (c * spatial_scale for c in box_xyxy)
    return _active.roi_align_forward(feat, x1, y1, x2, y2, out_size, sampling_ratio)


def roi_align_backward(dout: np.ndarray, box_xyxy: tuple[float, float, float, float],
                       feat_shape: tuple[int, int, int], spatial_scale: float,
                       sampling_ratio: int = 2) -> np.ndarray:
    """Adjoint of :func:`roi_align_forward`: bin grads -> feature-map grads."""
    x1, y1, x2, y2 = (c * spatial_scale for c in box_xyxy)
    dfeat = np.zeros(feat_shape, dtype=dout.dtype)
    _active.roi_align_backward(dout, dfeat, x1, y1, x2, y2, dout.shape[-1],
                               sampling_ratio)
    return dfeat


def mean_downsample2(img: np.ndarray) -> np.ndarray:
    """Exact 2x box-average downsample of an (H, W, C) image (H, W even)."""
    h, w = img.shape[:2]
    if h % 2 or w % 2:
        raise ValueError("mean_downsample2 needs even spatial dimensions")
    v = img.reshape(h // 2, 2, w // 2, 2, -1)
    out = v.mean(axis=(1, 3), dtype=np.float64).astype(img.dtype)
    return out.reshape(h // 2, w // 2, *img.shape[2:])
