"""2D Gaussian surfel geometry: primitives, cameras and exact ray-splat intersection.

A surfel is a flat Gaussian disk.  Its rotation matrix columns (r0, r1, r2)
span the tangent plane (r0, r1) and the normal (r2); the two tangent extents
live in ``log_scale`` and are exponentiated on read.  Rays are intersected by
transforming into the splat-local frame and solving z_local = 0, which is
simpler to differentiate than the two-plane homogeneous formulation and
numerically equivalent.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

NEAR_CLIP = 0.01          # world units; keeps depth away from 0
GAUSSIAN_CUTOFF = 9.0     # discard hits with u^2 + v^2 beyond 3 sigma
PARALLEL_EPS = 1e-9       # |<dir, normal>| below this counts as parallel
NEEDLE_RATIO = 0.1        # scale ratio below this flags a needle-like surfel


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q):
    """Rotation matrices for quaternions ``q`` with layout (w, x, y, z).

    q: (..., 4), not required to be unit norm (normalized internally).
    Returns (..., 3, 3); columns are the frame axes (r0, r1, r2).
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q / n, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_grad_to_quat(q, dR):
    """Pull a gradient w.r.t. the rotation matrix back to the raw quaternion.

    Differentiates R(q / |q|), so finite differences on the stored (possibly
    renormalized) quaternion agree with the result.

    q: (..., 4) raw quaternions, dR: (..., 3, 3).  Returns (..., 4).
    """
    q = np.asarray(q, dtype=np.float64)
    dR = np.asarray(dR, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    qn = q / norm
    w, x, y, z = np.moveaxis(qn, -1, 0)
    zeros = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dRdw = mat([[zeros, -2 * z, 2 * y], [2 * z, zeros, -2 * x], [-2 * y, 2 * x, zeros]])
    dRdx = mat([[zeros, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dRdy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zeros, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dRdz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zeros]])
    dqn = np.stack(
        [np.sum(dR * d, axis=(-2, -1)) for d in (dRdw, dRdx, dRdy, dRdz)], axis=-1
    )
    # through the normalization: d(q/|q|) = (I - qn qn^T) / |q|
    proj = dqn - qn * np.sum(dqn * qn, axis=-1, keepdims=True)
    return proj / norm


@dataclass
class Surfel:
    """One 2D Gaussian primitive: 10 scalars of geometry plus optional SH color."""

    position: np.ndarray            # (3,)
    rotation: np.ndarray            # (4,) quaternion (w, x, y, z)
    log_scale: np.ndarray           # (2,) log of tangent-plane extents
    opacity_logit: float
    sh: Optional[np.ndarray] = None  # (3, (deg+1)^2) stage-1 color coefficients

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(2)
        if self.sh is not None:
            self.sh = np.asarray(self.sh, dtype=np.float64)

    @property
    def scale(self):
        return np.exp(self.log_scale)

    @property
    def opacity(self):
        return float(sigmoid(self.opacity_logit))

    def rotmat(self):
        return quat_to_rotmat(self.rotation)


@dataclass
class Intersection:
    """A ray-splat hit; (u, v) are splat-local, weight is exp(-(u^2+v^2)/2)."""

    surfel_index: int
    u: float
    v: float
    depth: float
    weight: float
    world_point: np.ndarray


@dataclass(eq=False)
class SurfelSet:
    """Struct-of-arrays surfel storage used by the renderer and the optimizer."""

    positions: np.ndarray       # (N, 3)
    quats: np.ndarray           # (N, 4)
    log_scales: np.ndarray      # (N, 2)
    opacity_logits: np.ndarray  # (N,)
    sh: Optional[np.ndarray] = None  # (N, 3, K)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=np.float64))
        self.quats = np.atleast_2d(np.asarray(self.quats, dtype=np.float64))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales, dtype=np.float64))
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(-1)
        if self.sh is not None:
            self.sh = np.asarray(self.sh, dtype=np.float64)

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def from_surfels(cls, surfels: Sequence[Surfel]) -> "SurfelSet":
        sh = None
        if surfels and surfels[0].sh is not None:
            sh = np.stack([s.sh for s in surfels])
        return cls(
            positions=np.stack([s.position for s in surfels]),
            quats=np.stack([s.rotation for s in surfels]),
            log_scales=np.stack([s.log_scale for s in surfels]),
            opacity_logits=np.array([s.opacity_logit for s in surfels]),
            sh=sh,
        )

    def get(self, i: int) -> Surfel:
        return Surfel(
            position=self.positions[i].copy(),
            rotation=self.quats[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=None if self.sh is None else self.sh[i].copy(),
        )

    def rotations(self):
        return quat_to_rotmat(self.quats)

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return sigmoid(self.opacity_logits)

    def normalize_quats(self):
        self.quats /= np.linalg.norm(self.quats, axis=1, keepdims=True)

    def copy(self) -> "SurfelSet":
        return SurfelSet(
            self.positions.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            None if self.sh is None else self.sh.copy(),
        )


@dataclass(eq=False)
class Camera:
    """Pinhole camera, OpenGL frame: +x right, +y up, looking along -z."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_camera: np.ndarray  # (4, 4) rigid transform

    def __post_init__(self):
        self.world_from_camera = np.asarray(self.world_from_camera, dtype=np.float64).reshape(4, 4)

    @classmethod
    def from_fov_x(cls, width, height, fov_x_rad, world_from_camera) -> "Camera":
        fx = 0.5 * width / np.tan(0.5 * fov_x_rad)
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=int(width), height=int(height),
                   world_from_camera=world_from_camera)

    def validate(self, tol=1e-6):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("camera focal lengths must be positive")
        R = self.rotation
        if not np.allclose(R.T @ R, np.eye(3), atol=tol):
            raise ValueError("non-rigid rotation in camera pose")
        if np.linalg.det(R) < 0:
            raise ValueError("non-rigid rotation in camera pose (reflection)")

    @property
    def rotation(self):
        return self.world_from_camera[:3, :3]

    @property
    def origin(self):
        return self.world_from_camera[:3, 3]

    @cached_property
    def ray_dirs(self):
        """Unit world-space ray directions through pixel centers, (H, W, 3)."""
        j = np.arange(self.width, dtype=np.float64) + 0.5
        i = np.arange(self.height, dtype=np.float64) + 0.5
        xs = (j - self.cx) / self.fx
        ys = -(i - self.cy) / self.fy
        d_cam = np.stack(
            [np.broadcast_to(xs, (self.height, self.width)),
             np.broadcast_to(ys[:, None], (self.height, self.width)),
             -np.ones((self.height, self.width))],
            axis=-1,
        )
        d = d_cam @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_camera(self, points):
        """World points (N, 3) to camera frame; depth along the view is -z."""
        return (np.atleast_2d(points) - self.origin) @ self.rotation

    def project(self, points):
        """Project world points to continuous pixel coords.

        Returns (pix (N, 2) as (col, row), depth (N,)); depth <= 0 means
        behind the camera and the pixel coords there are meaningless.
        """
        cam = self.to_camera(points)
        depth = -cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            col = self.cx + self.fx * cam[:, 0] / depth
            row = self.cy - self.fy * cam[:, 1] / depth
        return np.stack([col, row], axis=1), depth


def splat_to_world(surfel: Surfel) -> np.ndarray:
    """4x4 frame transform H with columns (s0*r0, s1*r1, r2, p).

    The splat plane is z_local = 0, so a tangent point (u, v) maps through the
    homogeneous vector (u, v, 0, 1): H @ (u, v, 0, 1) = p + u*s0*r0 + v*s1*r1.
    """
    R = surfel.rotmat()
    s = surfel.scale
    H = np.eye(4)
    H[:3, 0] = s[0] * R[:, 0]
    H[:3, 1] = s[1] * R[:, 1]
    H[:3, 2] = R[:, 2]
    H[:3, 3] = surfel.position
    return H


def intersect_pairs(origins, dirs, positions, rotmats, scales,
                    near_clip=NEAR_CLIP, cutoff=GAUSSIAN_CUTOFF):
    """Vectorized ray-splat intersection over paired rays and surfels.

    origins: (3,) or (M, 3); dirs: (M, 3) unit; positions: (M, 3);
    rotmats: (M, 3, 3); scales: (M, 2).
    Returns dict of (M,) arrays: valid, u, v, t, g, denom, x (M, 3).
    ``valid`` applies the parallel / near-clip / 3-sigma cutoff tests; the
    remaining arrays are well-defined wherever valid is True.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), dirs.shape)
    r0 = rotmats[..., :, 0]
    r1 = rotmats[..., :, 1]
    r2 = rotmats[..., :, 2]
    denom = np.einsum("md,md->m", dirs, r2)
    safe = np.where(np.abs(denom) < PARALLEL_EPS, 1.0, denom)
    tnum = np.einsum("md,md->m", positions - origins, r2)
    t = tnum / safe
    x = origins + t[:, None] * dirs - positions
    u = np.einsum("md,md->m", x, r0) / scales[:, 0]
    v = np.einsum("md,md->m", x, r1) / scales[:, 1]
    r2sum = u * u + v * v
    g = np.exp(-0.5 * r2sum)
    valid = (np.abs(denom) >= PARALLEL_EPS) & (t > near_clip) & (r2sum <= cutoff)
    return {"valid": valid, "u": u, "v": v, "t": t, "g": g, "denom": denom, "x": x}


def intersect(ray_origin, ray_dir, surfel: Surfel, index: int = 0) -> Optional[Intersection]:
    """Exact ray-splat intersection; None when parallel, clipped or beyond 3 sigma."""
    out = intersect_pairs(
        np.asarray(ray_origin, dtype=np.float64),
        np.asarray(ray_dir, dtype=np.float64).reshape(1, 3),
        surfel.position.reshape(1, 3),
        surfel.rotmat().reshape(1, 3, 3),
        surfel.scale.reshape(1, 2),
    )
    if not out["valid"][0]:
        return None
    u, v = float(out["u"][0]), float(out["v"][0])
    s = surfel.scale
    R = surfel.rotmat()
    p_u = surfel.position + u * s[0] * R[:, 0] + v * s[1] * R[:, 1]
    return Intersection(surfel_index=index, u=u, v=v, depth=float(out["t"][0]),
                        weight=float(out["g"][0]), world_point=p_u)


def anisotropy_stats(surfels) -> tuple[float, float]:
    """Mean tangent-scale ratio min(s)/max(s) and the needle-like fraction (< 0.1)."""
    if isinstance(surfels, SurfelSet):
        scales = surfels.scales()
    else:
        surfels = list(surfels)
        if not surfels:
            raise ValueError("anisotropy_stats needs at least one surfel")
        scales = np.stack([s.scale for s in surfels])
    if scales.shape[0] == 0:
        raise ValueError("anisotropy_stats needs at least one surfel")
    ratio = scales.min(axis=1) / scales.max(axis=1)
    return float(ratio.mean()), float(np.mean(ratio < NEEDLE_RATIO))
