"""Multi-resolution hash-grid texture field with hand-derived gradients.

Each level is a voxel grid over the cube [-bound, bound]^3.  Levels whose
vertex count fits in the table are indexed densely (row-major); finer levels
fall back to the prime-XOR hash.  Queries trilinearly interpolate the eight
surrounding vertex features and concatenate levels; a level-annealing mask
switches whole levels on or off during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

HASH_PRIMES = (1, 2654435761, 805459861)
_U32 = 0xFFFFFFFF

# corner offsets of a grid cell, (8, 3) in {0, 1}
_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


@dataclass(eq=False)
class HashField:
    levels: int
    table_size: int                # power of two
    feat_dim: int
    resolutions: np.ndarray        # (L,) cells per axis, strictly increasing
    tables: np.ndarray             # (L, T, F) trainable features
    bound: float = 1.0             # half-extent of the encoded cube

    def __post_init__(self):
        self.resolutions = np.asarray(self.resolutions, dtype=np.int64).reshape(-1)
        self.tables = np.asarray(self.tables, dtype=np.float64)
        if self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if len(self.resolutions) != self.levels:
            raise ValueError("resolutions length must equal levels")
        if np.any(np.diff(self.resolutions) <= 0):
            raise ValueError("resolutions must be strictly increasing")
        if self.tables.shape != (self.levels, self.table_size, self.feat_dim):
            raise ValueError("tables must have shape (L, T, F)")

    @property
    def out_dim(self) -> int:
        return self.levels * self.feat_dim

    @classmethod
    def create(cls, levels=6, table_size=2 ** 19, feat_dim=4, n_min=16, n_max=512,
               bound=1.0, rng: Optional[np.random.Generator] = None) -> "HashField":
        """Geometric resolution schedule from n_min to n_max, tables ~ U(-1e-4, 1e-4)."""
        rng = rng or np.random.default_rng(0)
        if levels == 1:
            res = np.array([n_min], dtype=np.int64)
        else:
            b = (n_max / n_min) ** (1.0 / (levels - 1))
            res = np.floor(n_min * b ** np.arange(levels)).astype(np.int64)
            for i in range(1, levels):  # guard against duplicate floors
                res[i] = max(res[i], res[i - 1] + 1)
        tables = rng.uniform(-1e-4, 1e-4, size=(levels, table_size, feat_dim))
        return cls(levels=levels, table_size=table_size, feat_dim=feat_dim,
                   resolutions=res, tables=tables, bound=float(bound))

    def is_dense(self, level: int) -> bool:
        n_verts = int(self.resolutions[level]) + 1
        return n_verts ** 3 <= self.table_size


@dataclass
class AnnealState:
    """Coarse-to-fine level mask: levels with index i > lam output zero."""

    lam: int

    def mask(self, levels: int) -> np.ndarray:
        return (np.arange(levels) <= self.lam).astype(np.float64)


def hash_index(grid_vertex, level: int, field: HashField):
    """Table row for integer grid vertices at a level.

    grid_vertex: (3,) or (N, 3) integer coordinates in [0, N_l].
    Dense levels use row-major indexing with stride N_l + 1; hashed levels use
    the XOR-of-primes mixing modulo the table size.
    """
    v = np.atleast_2d(np.asarray(grid_vertex, dtype=np.int64))
    squeeze = np.asarray(grid_vertex).ndim == 1
    if field.is_dense(level):
        stride = int(field.resolutions[level]) + 1
        idx = v[:, 0] * stride * stride + v[:, 1] * stride + v[:, 2]
    else:
        h = (v[:, 0] * HASH_PRIMES[0]) & _U32
        h ^= (v[:, 1] * HASH_PRIMES[1]) & _U32
        h ^= (v[:, 2] * HASH_PRIMES[2]) & _U32
        idx = h % field.table_size
    return int(idx[0]) if squeeze else idx


def _check_inside(x, bound):
    if np.any(np.abs(x) > bound + 1e-9):
        raise ValueError(
            f"point outside the encoding cube [-{bound}, {bound}]^3; contract first"
        )


def _cell_coords(x, res, bound):
    """Cell index, fractional offsets and their slope for one level.

    x: (N, 3) in the cube.  Returns (cell (N, 3) int, w (N, 3) in [0, 1],
    dscale scalar d(w)/d(x)).
    """
    t = (x + bound) * (res / (2.0 * bound))
    cell = np.clip(np.floor(t).astype(np.int64), 0, res - 1)
    w = t - cell
    return cell, w, res / (2.0 * bound)


def _axis_terms(w):
    x1, y1, z1 = w[:, 0], w[:, 1], w[:, 2]
    return (1.0 - x1, x1), (1.0 - y1, y1), (1.0 - z1, z1)


def _corner_weights(w):
    """Trilinear weights for the 8 corners; (N, 8) from offsets (N, 3).

    Corner c = 4*i + 2*j + k matches the _CORNERS ordering.
    """
    (x0, x1), (y0, y1), (z0, z1) = _axis_terms(w)
    out = np.empty((w.shape[0], 8))
    for c, (i, j, k) in enumerate(_CORNERS):
        out[:, c] = (x1 if i else x0) * (y1 if j else y0) * (z1 if k else z0)
    return out


def _corner_weight_grads(w):
    """d(weight)/d(w_axis): (N, 8, 3)."""
    (x0, x1), (y0, y1), (z0, z1) = _axis_terms(w)
    grads = np.empty((w.shape[0], 8, 3))
    for c, (i, j, k) in enumerate(_CORNERS):
        xv = x1 if i else x0
        yv = y1 if j else y0
        zv = z1 if k else z0
        grads[:, c, 0] = (1.0 if i else -1.0) * yv * zv
        grads[:, c, 1] = (1.0 if j else -1.0) * xv * zv
        grads[:, c, 2] = (1.0 if k else -1.0) * xv * yv
    return grads


def _x_grad_from_corners(per_corner, w):
    """Sum of per-corner values times trilinear weight slopes, (N, 3).

    Equivalent to einsum over _corner_weight_grads but groups the eight
    corners into axis-difference pairs, avoiding the (N, 8, 3) temporary.
    """
    (x0, x1), (y0, y1), (z0, z1) = _axis_terms(w)
    pc = per_corner
    out = np.empty((w.shape[0], 3))
    # axis 0: pairs (c, c+4) share the (y, z) factor
    out[:, 0] = (y0 * z0 * (pc[:, 4] - pc[:, 0]) + y0 * z1 * (pc[:, 5] - pc[:, 1])
                 + y1 * z0 * (pc[:, 6] - pc[:, 2]) + y1 * z1 * (pc[:, 7] - pc[:, 3]))
    out[:, 1] = (x0 * z0 * (pc[:, 2] - pc[:, 0]) + x0 * z1 * (pc[:, 3] - pc[:, 1])
                 + x1 * z0 * (pc[:, 6] - pc[:, 4]) + x1 * z1 * (pc[:, 7] - pc[:, 5]))
    out[:, 2] = (x0 * y0 * (pc[:, 1] - pc[:, 0]) + x0 * y1 * (pc[:, 3] - pc[:, 2])
                 + x1 * y0 * (pc[:, 5] - pc[:, 4]) + x1 * y1 * (pc[:, 7] - pc[:, 6]))
    return out


def interp_cache(x, field: HashField, anneal: Optional[AnnealState] = None):
    """Per-level interpolation data reused between forward and backward.

    Returns a list of (level, idx (N, 8), weights (N, 8), w (N, 3), dscale)
    for the active levels of points x (N, 3).
    """
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_inside(xa, field.bound)
    mask = anneal.mask(field.levels) if anneal is not None else np.ones(field.levels)
    cache = []
    for lvl in range(field.levels):
        if mask[lvl] == 0.0:
            continue
        cell, w, dscale = _cell_coords(xa, int(field.resolutions[lvl]), field.bound)
        verts = cell[:, None, :] + _CORNERS[None, :, :]
        idx = hash_index(verts.reshape(-1, 3), lvl, field).reshape(xa.shape[0], 8)
        cache.append((lvl, idx, _corner_weights(w), w, dscale))
    return cache


def encode_cached(cache, field: HashField, n: int):
    out = np.zeros((n, field.out_dim))
    F = field.feat_dim
    for lvl, idx, wts, _, _ in cache:
        feats = field.tables[lvl][idx]                       # (N, 8, F)
        out[:, lvl * F:(lvl + 1) * F] = np.einsum("nc,ncf->nf", wts, feats)
    return out


def encode_backward_cached(cache, field: HashField, upstream,
                           need_x_grad: bool = True,
                           table_grad_out: Optional[np.ndarray] = None):
    up = np.asarray(upstream, dtype=np.float64)
    if table_grad_out is None:
        table_grad_out = np.zeros_like(field.tables)
    x_grad = np.zeros((up.shape[0], 3))
    T = field.table_size
    F = field.feat_dim
    for lvl, idx, wts, w, dscale in cache:
        up_l = up[:, lvl * F:(lvl + 1) * F]                   # (N, F)
        contrib = wts[:, :, None] * up_l[:, None, :]          # (N, 8, F)
        flat_idx = idx.ravel()
        for f in range(F):
            table_grad_out[lvl, :, f] += np.bincount(
                flat_idx, weights=contrib[:, :, f].ravel(), minlength=T
            )
        if need_x_grad:
            feats = field.tables[lvl][idx]                    # (N, 8, F)
            per_corner = np.einsum("ncf,nf->nc", feats, up_l)  # (N, 8)
            x_grad += _x_grad_from_corners(per_corner, w) * dscale
    return table_grad_out, x_grad


def encode(x, field: HashField, anneal: Optional[AnnealState] = None):
    """Concatenated per-level trilinear features for points in the cube.

    x: (3,) or (N, 3); returns (L*F,) or (N, L*F).  Points outside the cube
    raise ValueError (run them through contract first).
    """
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    squeeze = np.asarray(x).ndim == 1
    out = encode_cached(interp_cache(xa, field, anneal), field, xa.shape[0])
    return out[0] if squeeze else out


def encode_backward(x, field: HashField, anneal: Optional[AnnealState],
                    upstream, need_x_grad: bool = True,
                    table_grad_out: Optional[np.ndarray] = None):
    """Gradients of ``encode`` w.r.t. table entries and the input position.

    upstream: (L*F,) or (N, L*F) matching x.  Returns (table_grad (L, T, F),
    x_grad matching x); table gradients accumulate into ``table_grad_out``
    when given.  Masked levels contribute zero to both.
    """
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    squeeze = np.asarray(x).ndim == 1
    up = np.asarray(upstream, dtype=np.float64).reshape(xa.shape[0], field.out_dim)
    table_grad_out, x_grad = encode_backward_cached(
        interp_cache(xa, field, anneal), field, up,
        need_x_grad=need_x_grad, table_grad_out=table_grad_out)
    if squeeze:
        x_grad = x_grad[0]
    return table_grad_out, x_grad


def contract(x):
    """Radial contraction mapping all of space into the ball of radius 2.

    Identity inside the unit ball, (2 - 1/|x|) * x/|x| outside; continuous
    (and the Jacobian stays continuous) across |x| = 1.
    """
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    squeeze = np.asarray(x).ndim == 1
    r = np.linalg.norm(xa, axis=-1, keepdims=True)
    safe = np.maximum(r, 1e-15)
    out = np.where(r <= 1.0, xa, (2.0 - 1.0 / safe) * (xa / safe))
    return out[0] if squeeze else out


def contract_backward(x, upstream):
    """Jacobian-transpose product of ``contract`` at x applied to upstream."""
    xa = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ua = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    squeeze = np.asarray(x).ndim == 1
    r = np.linalg.norm(xa, axis=-1, keepdims=True)
    safe = np.maximum(r, 1e-15)
    # outside: y = phi(r) x with phi = 2/r - 1/r^2; J = phi I + (phi'/r) x x^T
    phi = 2.0 / safe - 1.0 / safe ** 2
    dphi_over_r = (-2.0 / safe ** 2 + 2.0 / safe ** 3) / safe
    radial = np.sum(xa * ua, axis=-1, keepdims=True)
    outside = phi * ua + dphi_over_r * radial * xa
    out = np.where(r <= 1.0, ua, outside)
    return out[0] if squeeze else out
