"""Procedural multi-view datasets with an analytic ray-tracing oracle.

Ground-truth images come from direct ray tracing of textured planes and
spheres, never from the splatting renderer, so trained scenes are checked
against an independent source.  Everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .geometry import Camera


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix, OpenGL convention (camera looks along -z)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    upv = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = upv
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = eye
    return c2w


@dataclass
class CheckerTexture:
    color_a: tuple = (0.92, 0.92, 0.92)
    color_b: tuple = (0.08, 0.08, 0.08)
    tiles: int = 6

    def sample(self, su, sv):
        par = (np.floor(su * self.tiles) + np.floor(sv * self.tiles)) % 2
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        return np.where(par[..., None] == 0, a, b)


@dataclass
class NoiseTexture:
    """Smooth value noise: trilinear lookup into a seeded random lattice."""

    color_a: tuple = (0.85, 0.35, 0.2)
    color_b: tuple = (0.15, 0.5, 0.85)
    scale: float = 6.0
    seed: int = 0
    _grid: Optional[np.ndarray] = dataclass_field(default=None, repr=False)

    def _lattice(self):
        if self._grid is None:
            self._grid = np.random.default_rng(self.seed).uniform(0, 1, (17, 17, 17))
        return self._grid

    def value(self, pts):
        g = self._lattice()
        t = (pts * self.scale) % 16.0
        c = np.floor(t).astype(np.int64)
        w = t - c
        out = np.zeros(pts.shape[:-1])
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wgt = (np.where(dx, w[..., 0], 1 - w[..., 0])
                           * np.where(dy, w[..., 1], 1 - w[..., 1])
                           * np.where(dz, w[..., 2], 1 - w[..., 2]))
                    out += wgt * g[c[..., 0] + dx, c[..., 1] + dy, c[..., 2] + dz]
        return out

    def sample_points(self, pts):
        val = self.value(pts)[..., None]
        a = np.asarray(self.color_a)
        b = np.asarray(self.color_b)
        return a + (b - a) * val


@dataclass
class ConstTexture:
    color: tuple = (0.6, 0.6, 0.6)

    def sample(self, su, sv):
        return np.broadcast_to(np.asarray(self.color), su.shape + (3,)).copy()


@dataclass
class PlanePrim:
    """Finite textured rectangle: center plus two orthogonal half-extent axes."""

    origin: tuple
    u_axis: tuple   # half extent along the texture u direction
    v_axis: tuple
    texture: object = dataclass_field(default_factory=CheckerTexture)

    def normal(self):
        n = np.cross(np.asarray(self.u_axis, float), np.asarray(self.v_axis, float))
        return n / np.linalg.norm(n)

    def trace(self, origins, dirs):
        o = np.asarray(self.origin, dtype=np.float64)
        ua = np.asarray(self.u_axis, dtype=np.float64)
        va = np.asarray(self.v_axis, dtype=np.float64)
        n = self.normal()
        denom = dirs @ n
        safe = np.where(np.abs(denom) < 1e-12, 1.0, denom)
        t = ((o - origins) @ n) / safe
        pts = origins + t[..., None] * dirs
        rel = pts - o
        lu = (rel @ ua) / (ua @ ua)
        lv = (rel @ va) / (va @ va)
        hit = (np.abs(denom) >= 1e-12) & (t > 1e-6) & (np.abs(lu) <= 1) & (np.abs(lv) <= 1)
        su = (lu + 1) / 2
        sv = (lv + 1) / 2
        if hasattr(self.texture, "sample"):
            color = self.texture.sample(su, sv)
        else:
            color = self.texture.sample_points(pts)
        return hit, t, color


@dataclass
class SpherePrim:
    center: tuple
    radius: float
    texture: object = dataclass_field(default_factory=NoiseTexture)

    def trace(self, origins, dirs):
        c = np.asarray(self.center, dtype=np.float64)
        oc = origins - c
        b = np.einsum("...d,...d->...", oc, dirs)
        cc = np.einsum("...d,...d->...", oc, oc) - self.radius ** 2
        disc = b * b - cc
        root = np.sqrt(np.maximum(disc, 0.0))
        t = -b - root
        hit = (disc > 0) & (t > 1e-6)
        pts = origins + t[..., None] * dirs
        if hasattr(self.texture, "sample_points"):
            color = self.texture.sample_points(pts)
        else:
            rel = (pts - c) / self.radius
            theta = np.arccos(np.clip(rel[..., 2], -1, 1)) / np.pi
            phi = (np.arctan2(rel[..., 1], rel[..., 0]) + np.pi) / (2 * np.pi)
            color = self.texture.sample(phi, theta)
        return hit, t, color


@dataclass
class SceneSpec:
    primitives: list
    n_train: int = 20
    n_test: int = 4
    width: int = 64
    height: int = 64
    fov_deg: float = 55.0
    ring_radius: float = 1.45
    elevations_deg: tuple = (22.0, 52.0)
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def validate(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("need at least one train and one test view")
        if self.width < 4 or self.height < 4:
            raise ValueError("resolution too small")
        if not 5.0 <= self.fov_deg <= 170.0:
            raise ValueError("field of view out of range")


@dataclass(eq=False)
class AnalyticScene:
    """The oracle: traces the primitive set directly."""

    spec: SceneSpec

    def trace(self, camera: Camera):
        dirs = camera.ray_dirs
        origins = np.broadcast_to(camera.origin, dirs.shape)
        best_t = np.full(dirs.shape[:2], np.inf)
        rgb = np.broadcast_to(np.asarray(self.spec.background), dirs.shape).copy()
        mask = np.zeros(dirs.shape[:2], dtype=bool)
        for prim in self.spec.primitives:
            hit, t, color = prim.trace(origins, dirs)
            closer = hit & (t < best_t)
            best_t = np.where(closer, t, best_t)
            rgb = np.where(closer[..., None], color, rgb)
            mask |= closer
        return rgb, mask, best_t


def _ring_cameras(spec: SceneSpec, count: int, phase: float):
    cams = []
    lo, hi = np.deg2rad(spec.elevations_deg[0]), np.deg2rad(spec.elevations_deg[1])
    for k in range(count):
        az = 2 * np.pi * (k + phase) / count
        elev = lo + (hi - lo) * ((k * 7) % count) / max(count - 1, 1)
        eye = spec.ring_radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        cams.append(Camera.from_fov_x(spec.width, spec.height,
                                      np.deg2rad(spec.fov_deg),
                                      look_at(eye, (0.0, 0.0, 0.0))))
    return cams


def generate_scene(spec: SceneSpec):
    """Render the spec with the analytic oracle into a posed dataset.

    Returns (Dataset, AnalyticScene).  Imported lazily to avoid an io cycle.
    """
    from .sceneio import Dataset

    spec.validate()
    analytic = AnalyticScene(spec)
    cameras = _ring_cameras(spec, spec.n_train, 0.0) \
        + _ring_cameras(spec, spec.n_test, 0.37)
    split = ["train"] * spec.n_train + ["test"] * spec.n_test
    images = []
    for cam in cameras:
        rgb, _, _ = analytic.trace(cam)
        images.append(np.clip(rgb, 0.0, 1.0))
    ds = Dataset(cameras=cameras, images=images, split=split,
                 scene_kind="bounded")
    return ds, analytic


def checker_plane_spec(tiles: int = 6, **kw) -> SceneSpec:
    """A single checkerboard rectangle tilted toward the camera ring."""
    plane = PlanePrim(origin=(0.0, 0.0, 0.05),
                      u_axis=(0.42, 0.0, 0.0), v_axis=(0.0, 0.42, 0.0),
                      texture=CheckerTexture(tiles=tiles))
    return SceneSpec(primitives=[plane], **kw)


def plane_sphere_spec(tiles: int = 6, **kw) -> SceneSpec:
    """Checkerboard ground plane plus a noise-textured sphere resting on it."""
    plane = PlanePrim(origin=(0.0, 0.0, 0.0),
                      u_axis=(0.42, 0.0, 0.0), v_axis=(0.0, 0.42, 0.0),
                      texture=CheckerTexture(tiles=tiles))
    sphere = SpherePrim(center=(0.1, -0.08, 0.16), radius=0.16,
                        texture=NoiseTexture(scale=7.0, seed=5))
    return SceneSpec(primitives=[plane, sphere], **kw)


SYNTHETIC_SPECS = {
    "checker-plane": checker_plane_spec,
    "plane-sphere": plane_sphere_spec,
}


def synthetic_dataset(name: str, **kw):
    """Resolve a ``synthetic:<name>`` dataset scheme."""
    if name not in SYNTHETIC_SPECS:
        known = ", ".join(sorted(SYNTHETIC_SPECS))
        raise ValueError(f"unknown synthetic scene {name!r} (known: {known})")
    return generate_scene(SYNTHETIC_SPECS[name](**kw))
