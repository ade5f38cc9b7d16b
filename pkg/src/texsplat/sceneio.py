"""Dataset loading, checkpoint serialization, UV meshes and texture baking.

The camera manifest follows the widely used transforms-JSON shape
(camera_angle_x, frames with file_path and transform_matrix).  Checkpoints
are a custom little-endian binary with an explicit version; every trainable
block is stored as 32-bit floats, so a surfel record is exactly 40 bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .decoder import Decoder, decode_batch
from .geometry import Camera, SurfelSet
from .hashfield import AnnealState, HashField, contract
from .metrics import psnr, ssim  # re-exported io-level metrics
from .scene import Scene

__all__ = [
    "Dataset", "DatasetError", "CheckpointError", "UvMesh", "load_dataset",
    "save_checkpoint", "load_checkpoint", "load_obj", "bake_texture",
    "rasterize_uv", "render_uv_mesh", "load_image", "save_image", "psnr", "ssim",
]

MAGIC = b"TXSPLAT\x00"
VERSION = 1


class DatasetError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Dataset:
    cameras: list
    images: list                 # (H, W, 3|4) float arrays in [0, 1]
    split: list                  # "train" / "test" per frame
    scene_kind: str = "bounded"  # bounded | unbounded
    norm_scale: float = 1.0      # world-normalization applied at load time
    norm_offset: np.ndarray = None

    def __post_init__(self):
        if self.norm_offset is None:
            self.norm_offset = np.zeros(3)
        if len(self.cameras) != len(self.images) or len(self.cameras) != len(self.split):
            raise DatasetError("cameras, images and split tags must align")
        for cam, img in zip(self.cameras, self.images):
            if img.shape[0] != cam.height or img.shape[1] != cam.width:
                raise DatasetError(
                    f"image dimensions {img.shape[:2]} do not match camera "
                    f"{(cam.height, cam.width)}")
        if "train" not in self.split or "test" not in self.split:
            raise DatasetError("dataset needs at least one train and one test view")

    def view_ids(self, split: str):
        return [i for i, s in enumerate(self.split) if s == split]


def load_image(path) -> np.ndarray:
    """PNG to float [0, 1]; 8- and 16-bit inputs; alpha retained when present."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if arr.dtype.kind == "f":
        return arr.astype(np.float64)
    raise DatasetError(f"unsupported image dtype {arr.dtype} in {path}")


def save_image(path, arr):
    """Float [0, 1] array to an 8-bit PNG."""
    a = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray((a * 255.0 + 0.5).astype(np.uint8)).save(path)


def _parse_manifest(path: Path):
    with open(path) as fh:
        data = json.load(fh)
    if "frames" not in data:
        raise DatasetError(f"{path.name}: manifest has no frames")
    return data


def _frames_to_views(root: Path, manifest, split_tag: str):
    fov = manifest.get("camera_angle_x")
    if fov is None:
        raise DatasetError("manifest is missing camera_angle_x")
    views = []
    for frame in manifest["frames"]:
        rel = frame["file_path"]
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"missing image file: {img_path}")
        mat = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if mat.shape != (4, 4):
            raise DatasetError(f"{rel}: transform_matrix must be 4x4")
        R = mat[:3, :3]
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-4) or np.linalg.det(R) < 0:
            raise DatasetError(f"{rel}: non-rigid rotation in transform_matrix")
        img = load_image(img_path)
        views.append((mat, img, float(fov), split_tag))
    return views


def load_dataset(path) -> Dataset:
    """Load a transforms-JSON dataset directory.

    Accepts either transforms_train.json + transforms_test.json or a single
    transforms.json (every 8th frame becomes a test view).  Bounded scenes are
    rescaled so the mean train-camera distance from the camera centroid is 1.
    """
    root = Path(path)
    if not root.exists():
        raise DatasetError(f"dataset path does not exist: {root}")
    views = []
    scene_kind = "bounded"
    tr, te, single = (root / "transforms_train.json", root / "transforms_test.json",
                      root / "transforms.json")
    if tr.exists():
        man = _parse_manifest(tr)
        scene_kind = man.get("scene_kind", scene_kind)
        views += _frames_to_views(root, man, "train")
        if te.exists():
            views += _frames_to_views(root, _parse_manifest(te), "test")
    elif single.exists():
        man = _parse_manifest(single)
        scene_kind = man.get("scene_kind", scene_kind)
        all_views = _frames_to_views(root, man, "train")
        views = [(m, i, f, "test" if k % 8 == 0 else "train")
                 for k, (m, i, f, _) in enumerate(all_views)]
    else:
        raise DatasetError(f"no transforms manifest found under {root}")
    if not views:
        raise DatasetError("manifest contains no frames")

    shapes = {v[1].shape[:2] for v in views}
    if len(shapes) > 1:
        raise DatasetError(f"image dimension mismatch across frames: {sorted(shapes)}")
    if not any(v[3] == "test" for v in views):  # tiny single-manifest sets
        views[-1] = views[-1][:3] + ("test",)

    centers = np.stack([v[0][:3, 3] for v in views if v[3] == "train"])
    offset = centers.mean(axis=0)
    scale = 1.0
    if scene_kind == "bounded":
        d = np.linalg.norm(centers - offset, axis=1).mean()
        if d > 0:
            scale = 1.0 / d

    cameras, images, split = [], [], []
    for mat, img, fov, tag in views:
        m = mat.copy()
        m[:3, 3] = (m[:3, 3] - offset) * scale
        h, w = img.shape[:2]
        cameras.append(Camera.from_fov_x(w, h, fov, m))
        images.append(img)
        split.append(tag)
    return Dataset(cameras=cameras, images=images, split=split,
                   scene_kind=scene_kind, norm_scale=scale, norm_offset=offset)


# ---------------------------------------------------------------------------
# checkpoint binary


def _pack_f32(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_checkpoint(scene: Scene, path) -> None:
    """Write the scene to the versioned little-endian binary format."""
    s = scene.surfels
    n = len(s)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    config = {
        "background": [float(x) for x in scene.background],
        "contract_points": bool(scene.contract_points),
        "anneal_lam": None if scene.anneal is None else int(scene.anneal.lam),
    }
    cfg_bytes = json.dumps(config, sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_bytes)) + cfg_bytes

    has_sh = s.sh is not None
    degree = 0 if not has_sh else int(np.sqrt(s.sh.shape[2])) - 1
    blob += struct.pack("<QBB", n, int(has_sh), degree)
    geom = np.concatenate([s.positions, s.quats, s.log_scales,
                           s.opacity_logits[:, None]], axis=1)  # (n, 10)
    blob += _pack_f32(geom)
    if has_sh:
        blob += _pack_f32(s.sh)

    if scene.field is None:
        blob += struct.pack("<B", 0)
    else:
        f = scene.field
        blob += struct.pack("<B", 1)
        blob += struct.pack("<IQI", f.levels, f.table_size, f.feat_dim)
        blob += struct.pack("<f", f.bound)
        blob += np.ascontiguousarray(f.resolutions, dtype="<i4").tobytes()
        blob += _pack_f32(f.tables)

    if scene.decoder is None:
        blob += struct.pack("<B", 0)
    else:
        d = scene.decoder
        blob += struct.pack("<B", 1)
        blob += struct.pack("<II", d.feat_dim, len(d.weights))
        for w, b in zip(d.weights, d.biases):
            blob += struct.pack("<II", w.shape[0], w.shape[1])
            blob += _pack_f32(w) + _pack_f32(b)

    with open(path, "wb") as fh:
        fh.write(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape):
        count = int(np.prod(shape))
        arr = np.frombuffer(self.take(4 * count), dtype="<f4")
        return arr.astype(np.float64).reshape(shape)


def load_checkpoint(path) -> Scene:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = json.loads(r.take(cfg_len).decode())

    n, has_sh, degree = r.unpack("<QBB")
    geom = r.f32((n, 10))
    sh = r.f32((n, 3, (degree + 1) ** 2)) if has_sh else None
    surfels = SurfelSet(geom[:, 0:3], geom[:, 3:7], geom[:, 7:9], geom[:, 9], sh)

    field = None
    (has_field,) = r.unpack("<B")
    if has_field:
        levels, table_size, feat_dim = r.unpack("<IQI")
        (bound,) = r.unpack("<f")
        res = np.frombuffer(r.take(4 * levels), dtype="<i4").astype(np.int64)
        tables = r.f32((levels, table_size, feat_dim))
        field = HashField(levels=levels, table_size=table_size, feat_dim=feat_dim,
                          resolutions=res, tables=tables, bound=float(bound))

    decoder = None
    (has_dec,) = r.unpack("<B")
    if has_dec:
        feat_dim, n_layers = r.unpack("<II")
        weights, biases = [], []
        for _ in range(n_layers):
            rows, cols = r.unpack("<II")
            weights.append(r.f32((rows, cols)))
            biases.append(r.f32((rows,)))
        decoder = Decoder(weights=weights, biases=biases, feat_dim=feat_dim)

    lam = config.get("anneal_lam")
    return Scene(surfels=surfels, field=field, decoder=decoder,
                 anneal=None if lam is None else AnnealState(lam),
                 background=np.asarray(config.get("background", [0, 0, 0])),
                 contract_points=bool(config.get("contract_points", False)))


def checkpoint_sizes(scene: Scene) -> dict:
    """Byte sizes of the geometry and appearance parameter blocks."""
    geometry = 40 * len(scene.surfels)
    sh = 0 if scene.surfels.sh is None else 4 * scene.surfels.sh.size
    appearance = 0
    if scene.field is not None:
        appearance += 4 * scene.field.tables.size
    if scene.decoder is not None:
        appearance += 4 * scene.decoder.param_count()
    return {"geometry_bytes": geometry, "sh_bytes": sh,
            "appearance_bytes": appearance}


# ---------------------------------------------------------------------------
# UV meshes and texture baking


@dataclass(eq=False)
class UvMesh:
    vertices: np.ndarray     # (V, 3)
    triangles: np.ndarray    # (F, 3) vertex indices
    corner_uvs: np.ndarray   # (F, 3, 2) uv per triangle corner

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.corner_uvs = np.asarray(self.corner_uvs, dtype=np.float64).reshape(-1, 3, 2)

    def validate(self):
        if self.triangles.shape[0] == 0:
            raise ValueError("mesh has no triangles")
        if self.triangles.min(initial=0) < 0 or \
                self.triangles.max(initial=-1) >= len(self.vertices):
            raise ValueError("triangle indices reference missing vertices")
        if np.any(self.corner_uvs < -1e-9) or np.any(self.corner_uvs > 1 + 1e-9):
            raise ValueError("uv coordinates must lie in [0, 1]^2")


def load_obj(path) -> UvMesh:
    """OBJ with v / vt / f v/vt records; faces are fan-triangulated."""
    verts, uvs, tris, tri_uv = [], [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                refs = []
                for tok in parts[1:]:
                    fields = tok.split("/")
                    vi = int(fields[0])
                    ti = int(fields[1]) if len(fields) > 1 and fields[1] else vi
                    refs.append((vi - 1, ti - 1))
                for k in range(1, len(refs) - 1):
                    corner = [refs[0], refs[k], refs[k + 1]]
                    tris.append([c[0] for c in corner])
                    tri_uv.append([uvs[c[1]] for c in corner])
    if not tris:
        raise ValueError(f"no faces with uv records found in {path}")
    mesh = UvMesh(np.asarray(verts), np.asarray(tris), np.asarray(tri_uv))
    mesh.validate()
    return mesh


def rasterize_uv(mesh: UvMesh, resolution: int):
    """Texel-space rasterization of the UV atlas.

    Returns (positions (R, R, 3), normals (R, R, 3), mask (R, R), skipped);
    texel [ty, tx] covers uv ([tx+.5]/R, [ty+.5]/R).  Degenerate UV triangles
    are skipped and counted.
    """
    R = int(resolution)
    pos = np.zeros((R, R, 3))
    nrm = np.zeros((R, R, 3))
    mask = np.zeros((R, R), dtype=bool)
    skipped = 0
    for f in range(mesh.triangles.shape[0]):
        uv = mesh.corner_uvs[f] * R            # (3, 2) in texel units
        v_world = mesh.vertices[mesh.triangles[f]]
        area2 = np.cross(uv[1] - uv[0], uv[2] - uv[0])
        if abs(area2) < 1e-12:
            skipped += 1
            continue
        face_n = np.cross(v_world[1] - v_world[0], v_world[2] - v_world[0])
        norm = np.linalg.norm(face_n)
        if norm < 1e-15:
            skipped += 1
            continue
        face_n /= norm
        x0 = max(int(np.floor(uv[:, 0].min())), 0)
        x1 = min(int(np.ceil(uv[:, 0].max())), R)
        y0 = max(int(np.floor(uv[:, 1].min())), 0)
        y1 = min(int(np.ceil(uv[:, 1].max())), R)
        if x0 >= x1 or y0 >= y1:
            continue
        tx, ty = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
        px = np.stack([tx, ty], axis=-1)
        w0 = np.cross(uv[2] - uv[1], px - uv[1]) / area2
        w1 = np.cross(uv[0] - uv[2], px - uv[2]) / area2
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not np.any(inside):
            continue
        pts = (w0[..., None] * v_world[0] + w1[..., None] * v_world[1]
               + w2[..., None] * v_world[2])
        sl = (slice(y0, y1), slice(x0, x1))
        write = inside
        pos[sl][write] = pts[write]
        nrm[sl][write] = face_n
        mask[sl] |= inside
    return pos, nrm, mask, skipped


def _dilate(texture, mask, passes=2):
    tex = texture.copy()
    cov = mask.copy()
    for _ in range(passes):
        if cov.all():
            break
        acc = np.zeros_like(tex)
        cnt = np.zeros(cov.shape)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == 0 and dy == 0:
                    continue
                src_c = np.roll(np.roll(cov, dy, axis=0), dx, axis=1)
                src_t = np.roll(np.roll(tex, dy, axis=0), dx, axis=1)
                # roll wraps; mask out wrapped rows/cols
                if dy == 1:
                    src_c[0] = False
                elif dy == -1:
                    src_c[-1] = False
                if dx == 1:
                    src_c[:, 0] = False
                elif dx == -1:
                    src_c[:, -1] = False
                acc += src_t * src_c[..., None]
                cnt += src_c
        fill = ~cov & (cnt > 0)
        tex[fill] = acc[fill] / cnt[fill][:, None]
        cov |= fill
    return tex


def bake_texture(scene: Scene, mesh: UvMesh, resolution: int):
    """Sample the trained field over the UV-mapped surface into a texture image.

    The surface is treated as fully opaque: each covered texel's color is the
    decoded field feature at its world position, viewed along the outward
    surface normal.  Uncovered texels are filled by a 2-pixel dilation.
    Returns (texture (R, R, 3), coverage mask, skipped-triangle count).
    """
    if scene.field is None or scene.decoder is None:
        raise ValueError("baking needs a trained shell-mode scene")
    mesh.validate()
    pos, nrm, mask, skipped = rasterize_uv(mesh, resolution)
    flat_idx = np.flatnonzero(mask.ravel())
    if flat_idx.size == 0:
        raise ValueError("mesh covers no texels at this resolution")
    pts = pos.reshape(-1, 3)[flat_idx]
    q = contract(pts) if scene.contract_points else pts
    if np.any(np.abs(q) > scene.field.bound + 1e-9):
        raise ValueError("mesh lies outside the texture field bound")
    from .hashfield import encode
    feats = encode(q, scene.field, scene.anneal)
    dirs = nrm.reshape(-1, 3)[flat_idx]
    rgb = decode_batch(feats, dirs, scene.decoder)
    tex = np.zeros((int(resolution), int(resolution), 3))
    tex.reshape(-1, 3)[flat_idx] = rgb
    tex = _dilate(tex, mask, passes=2)
    return tex, mask, skipped


def sample_texture(texture, su, sv):
    """Bilinear texture lookup at uv in [0, 1]; texel centers at (i+0.5)/R."""
    R = texture.shape[0]
    x = np.clip(su * R - 0.5, 0.0, R - 1.0)
    y = np.clip(sv * R - 0.5, 0.0, R - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, R - 1)
    y1 = np.minimum(y0 + 1, R - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    c00 = texture[y0, x0]
    c01 = texture[y0, x1]
    c10 = texture[y1, x0]
    c11 = texture[y1, x1]
    return (c00 * (1 - fx) * (1 - fy) + c01 * fx * (1 - fy)
            + c10 * (1 - fx) * fy + c11 * fx * fy)


def render_uv_mesh(mesh: UvMesh, texture, camera: Camera, background=(0, 0, 0)):
    """Analytic ray-traced render of the textured mesh (baking fidelity check)."""
    dirs = camera.ray_dirs.reshape(-1, 3)
    origin = camera.origin
    best_t = np.full(dirs.shape[0], np.inf)
    best_uv = np.zeros((dirs.shape[0], 2))
    hit_any = np.zeros(dirs.shape[0], dtype=bool)
    for f in range(mesh.triangles.shape[0]):
        v0, v1, v2 = mesh.vertices[mesh.triangles[f]]
        e1 = v1 - v0
        e2 = v2 - v0
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > 1e-12
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        qvec = np.cross(tvec, e1)
        bu = (pvec @ tvec) * inv
        bv = (dirs @ qvec) * inv
        t = (e2 @ qvec) * inv
        inside = ok & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (t > 1e-6)
        closer = inside & (t < best_t)
        if not np.any(closer):
            continue
        uv = (mesh.corner_uvs[f, 0] * (1 - bu - bv)[:, None]
              + mesh.corner_uvs[f, 1] * bu[:, None]
              + mesh.corner_uvs[f, 2] * bv[:, None])
        best_t = np.where(closer, t, best_t)
        best_uv[closer] = uv[closer]
        hit_any |= closer
    rgb = np.broadcast_to(np.asarray(background, dtype=np.float64),
                          (dirs.shape[0], 3)).copy()
    if np.any(hit_any):
        rgb[hit_any] = sample_texture(texture, best_uv[hit_any, 0],
                                      best_uv[hit_any, 1])
    return rgb.reshape(camera.height, camera.width, 3)
