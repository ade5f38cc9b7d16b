"""Appearance decoding: the small feature-to-RGB network and SH color evaluation.

The decoder maps a blended feature vector plus a degree-3 spherical-harmonic
encoding of the view direction through two 64-unit ReLU layers to a sigmoid
RGB.  Forward and backward are hand-rolled; the direction encoding receives
no gradient since view directions are never optimized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .geometry import Surfel

DIR_ENCODING_DIM = 16   # real SH basis up to degree 3
HIDDEN = 64

# real spherical harmonics constants (Condon-Shortley phase), degrees 0..3
_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)


def sh_basis(dirs, degree: int = 3):
    """Real SH basis values for unit directions, ordered (l, m) with m = -l..l.

    dirs: (..., 3); returns (..., (degree+1)^2).
    """
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + ((degree + 1) ** 2,))
    out[..., 0] = _C0
    if degree >= 1:
        out[..., 1] = -_C1 * y
        out[..., 2] = _C1 * z
        out[..., 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[..., 4] = _C2[0] * x * y
        out[..., 5] = _C2[1] * y * z
        out[..., 6] = _C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = _C2[3] * x * z
        out[..., 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = _C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = _C3[1] * x * y * z
        out[..., 11] = _C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = _C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = _C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = _C3[5] * z * (xx - yy)
        out[..., 15] = _C3[6] * x * (xx - 3.0 * yy)
    return out


@dataclass
class DirEncoding:
    basis: np.ndarray  # (16,)


def encode_dir(d) -> DirEncoding:
    """Degree-3 SH encoding of a unit view direction."""
    d = np.asarray(d, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    return DirEncoding(basis=sh_basis(d, 3))


@dataclass(eq=False)
class Decoder:
    """2x64 ReLU + sigmoid head over concat(blended features, dir encoding)."""

    weights: list  # [(64, in), (64, 64), (3, 64)]
    biases: list   # [(64,), (64,), (3,)]
    feat_dim: int

    @property
    def in_dim(self) -> int:
        return self.feat_dim + DIR_ENCODING_DIM

    @classmethod
    def create(cls, feat_dim: int, rng: Optional[np.random.Generator] = None) -> "Decoder":
        rng = rng or np.random.default_rng(0)
        dims = [feat_dim + DIR_ENCODING_DIM, HIDDEN, HIDDEN, 3]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / fan_in)  # Kaiming-style uniform fan-in
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, feat_dim=feat_dim)

    def param_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def copy(self) -> "Decoder":
        return Decoder([w.copy() for w in self.weights],
                       [b.copy() for b in self.biases], self.feat_dim)


def decode_batch(features, dirs, net: Decoder, want_cache: bool = False):
    """RGB for batched features (B, feat_dim) and unit directions (B, 3)."""
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if not np.all(np.isfinite(feats)):
        raise ValueError("non-finite feature input to decoder")
    enc = sh_basis(np.atleast_2d(dirs), 3)
    x = np.concatenate([feats, enc], axis=1)
    h1 = x @ net.weights[0].T + net.biases[0]
    a1 = np.maximum(h1, 0.0)
    h2 = a1 @ net.weights[1].T + net.biases[1]
    a2 = np.maximum(h2, 0.0)
    h3 = a2 @ net.weights[2].T + net.biases[2]
    rgb = expit(h3)
    if want_cache:
        return rgb, (x, a1, a2, rgb)
    return rgb


def decode_backward_batch(cache, upstream, net: Decoder):
    """Reverse pass for a cached ``decode_batch`` call.

    upstream: (B, 3) gradient on the RGB output.  Returns (w_grads, b_grads,
    feature_grad (B, feat_dim)); the direction-encoding slice of the input
    gradient is dropped.
    """
    x, a1, a2, rgb = cache
    up = np.asarray(upstream, dtype=np.float64).reshape(rgb.shape)
    d3 = up * rgb * (1.0 - rgb)
    w3g = d3.T @ a2
    b3g = d3.sum(axis=0)
    d2 = (d3 @ net.weights[2]) * (a2 > 0)
    w2g = d2.T @ a1
    b2g = d2.sum(axis=0)
    d1 = (d2 @ net.weights[1]) * (a1 > 0)
    w1g = d1.T @ x
    b1g = d1.sum(axis=0)
    dx = d1 @ net.weights[0]
    return [w1g, w2g, w3g], [b1g, b2g, b3g], dx[:, :net.feat_dim]


def decode(feature, d, net: Decoder):
    """RGB in (0, 1)^3 for a single feature vector and unit view direction."""
    encode_dir(d)  # unit-direction check
    return decode_batch(feature, np.asarray(d, dtype=np.float64).reshape(1, 3), net)[0]


def decode_backward(feature, d, net: Decoder, upstream_rgb):
    """Per-parameter and per-feature gradients for a single decode call."""
    rgb, cache = decode_batch(feature, np.asarray(d, dtype=np.float64).reshape(1, 3),
                              net, want_cache=True)
    w_grads, b_grads, feat_grad = decode_backward_batch(
        cache, np.asarray(upstream_rgb, dtype=np.float64).reshape(1, 3), net
    )
    return w_grads, b_grads, feat_grad[0]


def sh_eval(surfel: Surfel, d, degree: int) -> np.ndarray:
    """Stage-1 splat color: per-channel SH dot product, +0.5 offset, clamped to [0, 1]."""
    if surfel.sh is None:
        raise ValueError("surfel carries no SH coefficients")
    want = (degree + 1) ** 2
    if surfel.sh.shape != (3, want):
        raise ValueError(f"expected SH coefficients of shape (3, {want}), got {surfel.sh.shape}")
    basis = sh_basis(np.asarray(d, dtype=np.float64).reshape(3), degree)
    return np.clip(surfel.sh @ basis + 0.5, 0.0, 1.0)
