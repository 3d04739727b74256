"""Backbone, RoI-aligned region pooling, projection head, and teacher pair.

The encoder is a small strided CNN plus a region head, implemented directly
on numpy with explicit forward caches and hand-written backward passes (the
hot gather/scatter loops live in :mod:`regionssl.kernels`).  A full forward
pass through an image yields stage maps C1..C5; region features are pooled
from C4 with RoIAlign, pushed through the fifth (head) stage, average-pooled,
projected by a 2-layer MLP, and unit-normalized.

Parameters are plain ``{name: ndarray}`` dicts, which keeps the momentum
(teacher) update, the optimizer, and checkpoint serialization trivial.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels
from .errors import ConfigError, DegenerateBox, ShapeError, ShapeMismatch
from .geometry import BBox

N_STAGES = 5
STAGE_NAMES = ("C1", "C2", "C3", "C4", "C5")

# Plain conv+ReLU stacks collapse under contrastive training at this scale:
# pooled features share one large common-mode component, cosines start near 1,
# and the objective's repulsion term has nothing to work with.  Each stage
# therefore centers and scales its channels per position (a pointwise
# LayerNorm: translation-exact, identical between full-map and RoI use), and
# activations are leaky so gradients never die.  The projector itself stays
# normalization-free.
LEAKY_SLOPE = 0.1
# Zero-filled inputs (black fixtures, cutout fills) create zero-variance
# positions; the epsilon bounds the normalization gain there (and in the
# backward pass) to 100x.
LN_EPS = 1e-4


def _leaky(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, x * np.asarray(LEAKY_SLOPE, x.dtype))


def _leaky_grad(pre: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, d, d * np.asarray(LEAKY_SLOPE, d.dtype))


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture of the toy backbone and its region head."""

    channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    kernel_size: int = 3
    padding: str = "zero"        # "zero" (the bias under study) or "circular"
    variant: str = "toy"
    in_channels: int = 3
    embed_dim: int = 128
    roi_size: int = 7
    sampling_ratio: int = 2

    def __post_init__(self):
        if self.variant != "toy":
            raise ConfigError(
                f"backbone variant {self.variant!r} is not buildable here; "
                "only 'toy' is provided")
        if self.padding not in ("zero", "circular"):
            raise ConfigError(f"unknown padding mode {self.padding!r}")
        if len(self.channels) != N_STAGES or len(self.strides) != N_STAGES:
            raise ConfigError("backbone needs exactly five stages")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel size must be odd")

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2

    def stage_stride(self, stage: int) -> int:
        """Cumulative stride of stage map C<stage> relative to the input."""
        s = 1
        for v in self.strides[:stage]:
            s *= v
        return s

    def stage_channels(self, stage: int) -> int:
        return self.channels[stage - 1]


@dataclass
class EncoderParams:
    """A backbone spec together with one set of weights."""

    spec: BackboneSpec
    weights: dict[str, np.ndarray]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.spec, {k: v.copy() for k, v in self.weights.items()})


@dataclass
class EncoderPair:
    """Online (student) and momentum (teacher) parameter sets."""

    student: EncoderParams
    teacher: EncoderParams
    momentum_coefficient: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.momentum_coefficient <= 1.0:
            raise ConfigError("momentum coefficient must lie in [0, 1]")


def init_encoder(spec: BackboneSpec, rng: np.random.Generator,
                 dtype=np.float32) -> EncoderParams:
    """He-normal initialization of every stage and the projector."""
    w: dict[str, np.ndarray] = {}
    cin = spec.in_channels
    k = spec.kernel_size
    for i, cout in enumerate(spec.channels, start=1):
        scale = np.sqrt(2.0 / (cin * k * k))
        w[f"conv{i}.w"] = (rng.standard_normal((cout, cin, k, k)) * scale).astype(dtype)
        w[f"conv{i}.b"] = np.zeros(cout, dtype=dtype)
        cin = cout
    c5 = spec.channels[-1]
    hidden = c5
    w["proj.w1"] = (rng.standard_normal((hidden, c5)) * np.sqrt(2.0 / c5)).astype(dtype)
    w["proj.b1"] = np.zeros(hidden, dtype=dtype)
    w["proj.w2"] = (rng.standard_normal((spec.embed_dim, hidden))
                    * np.sqrt(2.0 / hidden)).astype(dtype)
    w["proj.b2"] = np.zeros(spec.embed_dim, dtype=dtype)
    return EncoderParams(spec, w)


def init_pair(spec: BackboneSpec, rng: np.random.Generator,
              momentum_coefficient: float = 0.99, dtype=np.float32) -> EncoderPair:
    student = init_encoder(spec, rng, dtype)
    return EncoderPair(student, student.copy(), momentum_coefficient)


def momentum_update(pair: EncoderPair) -> EncoderPair:
    """teacher <- m * teacher + (1 - m) * student, elementwise.

    Written in difference form so that an already-converged teacher
    (teacher == student) is an exact fixed point in float arithmetic.
    """
    m = pair.momentum_coefficient
    new = {}
    for key, tk in pair.teacher.weights.items():
        sq = pair.student.weights.get(key)
        if sq is None or sq.shape != tk.shape:
            raise ShapeMismatch(f"student/teacher mismatch on {key!r}")
        if m == 1.0:
            new[key] = tk.copy()
        elif m == 0.0:
            new[key] = sq.copy()
        else:
            new[key] = tk + (sq - tk) * np.asarray(1.0 - m, tk.dtype)
    return EncoderPair(pair.student, EncoderParams(pair.teacher.spec, new),
                       pair.momentum_coefficient)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _to_chw(image: np.ndarray, spec: BackboneSpec, dtype) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != spec.in_channels:
        raise ShapeError(f"expected (H, W, {spec.in_channels}) image, "
                         f"got shape {image.shape}")
    return np.ascontiguousarray(image.transpose(2, 0, 1).astype(dtype, copy=False))


def _pad_input(x: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return x
    np_mode = "wrap" if mode == "circular" else "constant"
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)), mode=np_mode)


def _unpad_grad(dxp: np.ndarray, pad: int, mode: str) -> np.ndarray:
    if pad == 0:
        return dxp
    p = pad
    h = dxp.shape[1] - 2 * p
    w = dxp.shape[2] - 2 * p
    dx = dxp[:, p:p + h, p:p + w].copy()
    if mode == "circular":
        # Fold the wrapped borders (and corners) back onto their sources.
        dx[:, h - p:, :] += dxp[:, :p, p:p + w]
        dx[:, :p, :] += dxp[:, p + h:, p:p + w]
        dx[:, :, w - p:] += dxp[:, p:p + h, :p]
        dx[:, :, :p] += dxp[:, p:p + h, p + w:]
        dx[:, h - p:, w - p:] += dxp[:, :p, :p]
        dx[:, h - p:, :p] += dxp[:, :p, p + w:]
        dx[:, :p, w - p:] += dxp[:, p + h:, :p]
        dx[:, :p, :p] += dxp[:, p + h:, p + w:]
    return dx


@dataclass
class _ConvCache:
    cols: np.ndarray
    padded_shape: tuple[int, int, int]
    pre: np.ndarray          # pre-activation (sign gives the leaky mask)
    normed: np.ndarray       # post-norm output
    scale: np.ndarray        # per-position 1 / sqrt(var + eps)


def _channel_layernorm(act: np.ndarray):
    mu = act.mean(axis=0, dtype=act.dtype)
    centered = act - mu
    var = (centered * centered).mean(axis=0, dtype=act.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(LN_EPS, act.dtype))
    return centered * inv, inv.astype(act.dtype)


def _stage_forward(params: EncoderParams, stage: int, x: np.ndarray,
                   want_cache: bool) -> tuple[np.ndarray, _ConvCache | None]:
    spec = params.spec
    w = params.weights[f"conv{stage}.w"]
    b = params.weights[f"conv{stage}.b"]
    k = spec.kernel_size
    xp = _pad_input(x, spec.pad, spec.padding)
    cols = kernels.im2col(xp, k, spec.strides[stage - 1])
    cout = w.shape[0]
    hp, wp = xp.shape[1], xp.shape[2]
    ho = (hp - k) // spec.strides[stage - 1] + 1
    wo = (wp - k) // spec.strides[stage - 1] + 1
    pre = (w.reshape(cout, -1) @ cols + b[:, None]).reshape(cout, ho, wo)
    act = _leaky(pre)
    out, inv = _channel_layernorm(act)
    cache = _ConvCache(cols, xp.shape, pre, out, inv) if want_cache else None
    return out, cache


def _stage_backward(params: EncoderParams, stage: int, cache: _ConvCache,
                    dy: np.ndarray, grads: dict[str, np.ndarray]) -> np.ndarray:
    spec = params.spec
    w = params.weights[f"conv{stage}.w"]
    cout = w.shape[0]
    y, inv = cache.normed, cache.scale
    d_act = (dy - dy.mean(axis=0, dtype=dy.dtype)
             - y * (dy * y).mean(axis=0, dtype=dy.dtype)) * inv
    da = _leaky_grad(cache.pre, d_act)
    dy2 = da.reshape(cout, -1)
    grads[f"conv{stage}.w"] += (dy2 @ cache.cols.T).reshape(w.shape)
    grads[f"conv{stage}.b"] += dy2.sum(axis=1)
    dcols = w.reshape(cout, -1).T @ dy2
    cin = cache.padded_shape[0]
    dxp = kernels.col2im(np.ascontiguousarray(dcols), cin, spec.kernel_size,
                         spec.strides[stage - 1], cache.padded_shape[1],
                         cache.padded_shape[2])
    return _unpad_grad(dxp, spec.pad, spec.padding)


def trunk_forward(params: EncoderParams, image: np.ndarray, n_stages: int = 4,
                  want_cache: bool = False):
    """Run the first ``n_stages`` stages; returns (stage outputs, caches)."""
    dtype = params.weights["conv1.w"].dtype
    x = _to_chw(image, params.spec, dtype)
    outs, caches = [], []
    for stage in range(1, n_stages + 1):
        x, cache = _stage_forward(params, stage, x, want_cache)
        outs.append(x)
        caches.append(cache)
    return outs, caches


def trunk_backward(params: EncoderParams, caches, d_last: np.ndarray,
                   grads: dict[str, np.ndarray]) -> None:
    dy = d_last
    for stage in range(len(caches), 0, -1):
        dy = _stage_backward(params, stage, caches[stage - 1], dy, grads)


@dataclass
class _HeadCache:
    pooled: np.ndarray
    conv: _ConvCache
    g: np.ndarray
    u: np.ndarray
    v: np.ndarray
    raw: np.ndarray
    norm: float
    z: np.ndarray


def head_forward(params: EncoderParams, pooled: np.ndarray,
                 want_cache: bool = False):
    """C5 stage on a pooled C4 patch, average pool, projector, normalize."""
    w = params.weights
    h5, conv_cache = _stage_forward(params, N_STAGES, pooled, want_cache)
    g = h5.mean(axis=(1, 2), dtype=h5.dtype)
    u = w["proj.w1"] @ g + w["proj.b1"]
    v = _leaky(u)
    raw = w["proj.w2"] @ v + w["proj.b2"]
    norm = max(float(np.linalg.norm(raw.astype(np.float64))), 1e-12)
    z = (raw / np.asarray(norm, raw.dtype))
    cache = None
    if want_cache:
        cache = _HeadCache(pooled, conv_cache, g, u, v, raw, norm, z)
    return z, cache


def head_backward(params: EncoderParams, cache: _HeadCache, dz: np.ndarray,
                  grads: dict[str, np.ndarray]) -> np.ndarray:
    """Backprop dz through the head; returns the gradient on the pooled patch."""
    w = params.weights
    z = cache.z
    draw = (dz - z * float(np.dot(z, dz))) / np.asarray(cache.norm, dz.dtype)
    grads["proj.w2"] += np.outer(draw, cache.v)
    grads["proj.b2"] += draw
    dv = w["proj.w2"].T @ draw
    du = _leaky_grad(cache.u, dv)
    grads["proj.w1"] += np.outer(du, cache.g)
    grads["proj.b1"] += du
    dg = w["proj.w1"].T @ du
    h5 = cache.conv.normed
    n_spatial = h5.shape[1] * h5.shape[2]
    dh5 = np.broadcast_to((dg / np.asarray(n_spatial, dg.dtype))[:, None, None],
                          h5.shape).astype(dg.dtype)
    return _stage_backward(params, N_STAGES, cache.conv, dh5, grads)


def zero_grads(params: EncoderParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.weights.items()}


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def forward_backbone(params: EncoderParams, image: np.ndarray) -> dict[str, np.ndarray]:
    """Stage maps C1..C5 of an (H, W, C) image, keyed by stage name."""
    outs, _ = trunk_forward(params, image, n_stages=N_STAGES)
    return dict(zip(STAGE_NAMES, outs))


def roi_align(featmap: np.ndarray, box: BBox, out_size: int, stride: int,
              sampling_ratio: int = 2) -> np.ndarray:
    """Bilinear region pooling of a (C, H, W) map over an image-space box."""
    if featmap.ndim != 3:
        raise ShapeError("roi_align expects a (C, H, W) feature map")
    if box.width <= 0 or box.height <= 0:
        raise DegenerateBox(f"cannot pool over {box}")
    return kernels.roi_align_forward(featmap, box.as_tuple(), out_size,
                                     1.0 / stride, sampling_ratio)


def extract_region_feature(params: EncoderParams, image: np.ndarray,
                           box: BBox) -> np.ndarray:
    """Unit-norm embedding of one box: trunk -> RoIAlign(C4) -> head."""
    spec = params.spec
    outs, _ = trunk_forward(params, image, n_stages=4)
    pooled = roi_align(outs[-1], box, spec.roi_size, spec.stage_stride(4),
                       spec.sampling_ratio)
    z, _ = head_forward(params, pooled)
    return z


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _config_digest(obj) -> str:
    import hashlib
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, pair: EncoderPair, step: int = 0,
                    config_hash: str = "", extra_arrays: dict | None = None,
                    extra_manifest: dict | None = None) -> str:
    """Write a parameter archive (.npz) plus a sibling JSON manifest."""
    from dataclasses import asdict
    from pathlib import Path

    path = Path(path)
    arrays = {}
    for k, v in pair.student.weights.items():
        arrays[f"student/{k}"] = v
    for k, v in pair.teacher.weights.items():
        arrays[f"teacher/{k}"] = v
    for k, v in (extra_arrays or {}).items():
        arrays[f"extra/{k}"] = v
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    manifest = {
        "backbone": asdict(pair.student.spec),
        "embed_dim": pair.student.spec.embed_dim,
        "momentum_coefficient": pair.momentum_coefficient,
        "step": step,
        "config_hash": config_hash,
    }
    manifest.update(extra_manifest or {})
    manifest_path = path.with_suffix(".manifest.json")
    manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return str(path)


def load_checkpoint(path):
    """Read a checkpoint; returns (pair, manifest dict, extra arrays dict)."""
    from pathlib import Path

    path = Path(path)
    manifest = json.loads(path.with_suffix(".manifest.json").read_text())
    spec_kw = dict(manifest["backbone"])
    for key in ("channels", "strides"):
        spec_kw[key] = tuple(spec_kw[key])
    spec = BackboneSpec(**spec_kw)
    with np.load(path) as data:
        student, teacher, extras = {}, {}, {}
        for key in data.files:
            scope, _, name = key.partition("/")
            if scope == "student":
                student[name] = data[key]
            elif scope == "teacher":
                teacher[name] = data[key]
            else:
                extras[name] = data[key]
    pair = EncoderPair(EncoderParams(spec, student), EncoderParams(spec, teacher),
                       float(manifest["momentum_coefficient"]))
    return pair, manifest, extras
