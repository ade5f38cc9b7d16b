"""Per-pixel front-to-back compositing of surfels into color or feature images.

Forward pass: every surfel gets a conservative screen-space bounding box of
its 3-sigma tangent rectangle, candidate (surfel, pixel) pairs are intersected
in one batch, and hits are composited front to back per pixel.  In shell mode
the blended quantity is the hash-field feature vector, decoded once per pixel;
in sh mode it is the per-splat SH color.

Backward pass: the ordered hit lists retained from the forward pass drive the
full hand-derived chain from per-pixel image gradients to every surfel
parameter, the hash tables and the decoder, without re-intersecting.

Determinism: surfels are globally sorted by center depth (ties by index), hits
by pixel with a stable sort, and all parallel work uses fixed-size chunks
reduced in chunk order, so results are bit-identical for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .decoder import decode_backward_batch, decode_batch, sh_basis
from .geometry import (GAUSSIAN_CUTOFF, NEAR_CLIP, PARALLEL_EPS, SurfelSet,
                       intersect_pairs, rotmat_grad_to_quat, sigmoid)
from .hashfield import (contract, contract_backward, encode_backward_cached,
                        encode_cached, interp_cache)
from .scene import Scene

CHUNK = 32768  # fixed work-chunk size; never derived from the thread count


@dataclass
class RenderOptions:
    early_stop: float = 1e-4        # drop hits once transmittance falls below
    cutoff: float = GAUSSIAN_CUTOFF
    near_clip: float = NEAR_CLIP
    lowpass_sigma: float = 0.3      # screen-space safeguard sigma, pixels
    feature_pos_grad: bool = True   # route feature gradients into positions
    threads: int = 1


@dataclass(eq=False)
class HitBuffer:
    """Ordered ray-splat hits and everything the backward pass needs."""

    width: int
    height: int
    pix: np.ndarray          # (M,) pixel index = row * W + col, sorted
    sid: np.ndarray          # (M,) surfel index
    u: np.ndarray
    v: np.ndarray
    t: np.ndarray            # depth along the unit ray
    g: np.ndarray            # Gaussian weight exp(-(u^2+v^2)/2)
    ghat: np.ndarray         # max(g, screen-space low-pass)
    lowpass: np.ndarray      # bool, low-pass branch selected
    alpha: np.ndarray        # per-hit opacity
    trans: np.ndarray        # transmittance before this hit
    omega: np.ndarray        # blending weight trans * alpha * ghat
    dirs: np.ndarray         # (M, 3) ray directions
    x: np.ndarray            # (M, 3) hit point relative to the surfel center
    denom: np.ndarray        # <dir, normal>
    point: np.ndarray        # (M, 3) world hit point from the tangent map
    normal_sign: np.ndarray  # +-1 flip making the splat normal face the camera
    # filled by the compositors
    qpoint: Optional[np.ndarray] = None    # field query points (contracted/clipped)
    clipped: Optional[np.ndarray] = None   # (M, 3) bool, cube clamp active
    feat: Optional[np.ndarray] = None      # (M, L*F) annealed features
    enc_cache: Optional[list] = None       # chunked interp caches for backward
    colors: Optional[np.ndarray] = None    # (M, 3) sh colors after clamp
    clamp_pass: Optional[np.ndarray] = None  # (M, 3) bool, inside the clamp
    basis: Optional[np.ndarray] = None     # (M, K) sh basis at hit ray dirs

    def __len__(self):
        return self.pix.shape[0]


@dataclass(eq=False)
class FeatureImage:
    features: np.ndarray   # (H, W, L*F)
    alpha: np.ndarray      # (H, W)
    depth: np.ndarray      # (H, W) omega-weighted mean ray depth
    normal: np.ndarray     # (H, W, 3)
    aux: HitBuffer


@dataclass(eq=False)
class RenderedImage:
    rgb: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    normal: np.ndarray


@dataclass(eq=False)
class RenderOutput:
    image: RenderedImage
    features: Optional[FeatureImage]
    hits: HitBuffer
    mode: str
    dec_cache: Optional[tuple] = None      # (covered flat indices, activations)
    rgb_outside: Optional[np.ndarray] = None  # bool mask where [0,1] clip engaged


@dataclass
class PixelGrads:
    rgb: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None


@dataclass
class HitGrads:
    """Extra per-hit upstream gradients (the distortion loss produces these)."""

    omega: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None


@dataclass(eq=False)
class SceneGrads:
    positions: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: Optional[np.ndarray]
    tables: Optional[np.ndarray]
    dec_w: Optional[list]
    dec_b: Optional[list]
    view_grad: np.ndarray    # per-surfel screen-space positional gradient norm
    visible: np.ndarray      # per-surfel bool, contributed at least one hit


def _map_chunks(fn, n, threads):
    """Run fn(lo, hi) over fixed-size chunks; results returned in chunk order."""
    chunks = [(lo, min(lo + CHUNK, n)) for lo in range(0, n, CHUNK)]
    if not chunks:
        return []
    if threads <= 1 or len(chunks) == 1:
        return [fn(lo, hi) for lo, hi in chunks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda c: fn(*c), chunks))


def _seg_starts(pix):
    first = np.empty(pix.shape[0], dtype=bool)
    first[0] = True
    first[1:] = pix[1:] != pix[:-1]
    return first


def _seg_cumsum_exclusive(values, first):
    cs = np.cumsum(values)
    seg_id = np.cumsum(first) - 1
    base = (cs - values)[first]
    return cs - values - base[seg_id]


def screen_bounds(surfels: SurfelSet, camera, opts: RenderOptions):
    """Conservative pixel AABB of each surfel's 3-sigma tangent rectangle.

    Returns (x0, x1, y0, y1) half-open pixel bounds, the projected centers
    (N, 2) and the camera-space center depths (N,).  Surfels entirely behind
    the near plane get empty bounds; partially-behind ones cover the frame.
    """
    R = surfels.rotations()
    s = surfels.scales()
    p = surfels.positions
    e0 = 3.0 * s[:, :1] * R[:, :, 0]
    e1 = 3.0 * s[:, 1:2] * R[:, :, 1]
    corners = p[:, None, :] + np.stack([e0 + e1, e0 - e1, -e0 + e1, -e0 - e1], axis=1)
    n = len(surfels)
    flat = corners.reshape(-1, 3)
    pix, depth = camera.project(flat)
    pix = pix.reshape(n, 4, 2)
    depth = depth.reshape(n, 4)
    front = depth > opts.near_clip

    ctr_pix, ctr_depth = camera.project(p)

    x0 = np.zeros(n, dtype=np.int64)
    x1 = np.full(n, camera.width, dtype=np.int64)
    y0 = np.zeros(n, dtype=np.int64)
    y1 = np.full(n, camera.height, dtype=np.int64)

    all_front = front.all(axis=1)
    none_front = ~front.any(axis=1)
    pad = 1  # keeps the low-pass footprint (3 * 0.3 px) inside the box
    if np.any(all_front):
        q = pix[all_front]
        x0[all_front] = np.floor(q[:, :, 0].min(axis=1)).astype(np.int64) - pad
        x1[all_front] = np.ceil(q[:, :, 0].max(axis=1)).astype(np.int64) + pad
        y0[all_front] = np.floor(q[:, :, 1].min(axis=1)).astype(np.int64) - pad
        y1[all_front] = np.ceil(q[:, :, 1].max(axis=1)).astype(np.int64) + pad
    x0 = np.clip(x0, 0, camera.width)
    x1 = np.clip(x1, 0, camera.width)
    y0 = np.clip(y0, 0, camera.height)
    y1 = np.clip(y1, 0, camera.height)
    x1[none_front] = x0[none_front]
    y1[none_front] = y0[none_front]
    return x0, x1, y0, y1, ctr_pix, ctr_depth


def gather_hits(scene: Scene, camera, opts: Optional[RenderOptions] = None) -> HitBuffer:
    """Intersect every candidate (surfel, pixel) pair and composite weights."""
    opts = opts or RenderOptions()
    surfels = scene.surfels
    W, H = camera.width, camera.height
    empty = lambda *shape: np.zeros(shape)
    if len(surfels) == 0:
        z = np.zeros(0, dtype=np.int64)
        return HitBuffer(W, H, z, z, *(empty(0) for _ in range(4)),
                         ghat=empty(0), lowpass=np.zeros(0, bool), alpha=empty(0),
                         trans=empty(0), omega=empty(0), dirs=empty(0, 3),
                         x=empty(0, 3), denom=empty(0), point=empty(0, 3),
                         normal_sign=empty(0))

    x0, x1, y0, y1, ctr_pix, ctr_depth = screen_bounds(surfels, camera, opts)
    order = np.lexsort((np.arange(len(surfels)), ctr_depth))
    bw = (x1 - x0)[order]
    bh = (y1 - y0)[order]
    sizes = bw * bh
    keep = sizes > 0
    order, bw, bh, sizes = order[keep], bw[keep], bh[keep], sizes[keep]
    total = int(sizes.sum())
    if total == 0:
        return gather_hits(Scene(SurfelSet(np.zeros((0, 3)), np.zeros((0, 4)),
                                           np.zeros((0, 2)), np.zeros(0))), camera, opts)

    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    local = np.arange(total, dtype=np.int64) - np.repeat(starts, sizes)
    wrep = np.repeat(bw, sizes)
    row = np.repeat(y0[order], sizes) + local // wrep
    col = np.repeat(x0[order], sizes) + local % wrep
    sid = np.repeat(order, sizes)

    rot = surfels.rotations()
    scl = surfels.scales()
    pos = surfels.positions
    origin = camera.origin
    dirs_img = camera.ray_dirs
    sig2 = opts.lowpass_sigma ** 2
    lp_cut = 9.0 * sig2  # 3-sigma acceptance radius of the screen Gaussian

    def piece(lo, hi):
        s_c = sid[lo:hi]
        r_c = row[lo:hi]
        c_c = col[lo:hi]
        d_c = dirs_img[r_c, c_c]
        out = intersect_pairs(origin, d_c, pos[s_c], rot[s_c], scl[s_c],
                              near_clip=opts.near_clip, cutoff=np.inf)
        dcol = c_c + 0.5 - ctr_pix[s_c, 0]
        drow = r_c + 0.5 - ctr_pix[s_c, 1]
        d2 = dcol * dcol + drow * drow
        gscr = np.where(ctr_depth[s_c] > opts.near_clip,
                        np.exp(-0.5 * d2 / sig2), 0.0)
        r2 = out["u"] ** 2 + out["v"] ** 2
        geom_ok = (np.abs(out["denom"]) >= PARALLEL_EPS) & (out["t"] > opts.near_clip)
        accept = geom_ok & ((r2 <= opts.cutoff) | (d2 <= lp_cut))
        ghat = np.maximum(out["g"], gscr)
        lowpass = gscr > out["g"]
        data = np.column_stack([out["u"], out["v"], out["t"], out["g"], ghat,
                                out["denom"]])
        return ((r_c * W + c_c)[accept], s_c[accept], data[accept],
                out["x"][accept], d_c[accept], lowpass[accept])

    pieces = _map_chunks(piece, total, opts.threads)
    pixid = np.concatenate([p[0] for p in pieces])
    sid = np.concatenate([p[1] for p in pieces])
    data = np.concatenate([p[2] for p in pieces])
    xrel = np.concatenate([p[3] for p in pieces])
    dirs = np.concatenate([p[4] for p in pieces])
    lowpass = np.concatenate([p[5] for p in pieces])

    # pixel-major, depth order within each pixel preserved by the stable sort
    perm = np.argsort(pixid, kind="stable")
    pixid, sid, data, xrel, dirs, lowpass = (a[perm] for a in
        (pixid, sid, data, xrel, dirs, lowpass))

    alpha = sigmoid(surfels.opacity_logits[sid])
    a = alpha * data[:, 4]
    one_minus = np.clip(1.0 - a, 1e-12, 1.0)
    if len(pixid):
        first = _seg_starts(pixid)
        log_t = _seg_cumsum_exclusive(np.log(one_minus), first)
        trans = np.exp(log_t)
    else:
        trans = np.zeros(0)
    keep = trans > opts.early_stop
    pixid, sid, data, xrel, dirs, lowpass, alpha, trans = (a[keep] for a in
        (pixid, sid, data, xrel, dirs, lowpass, alpha, trans))
    u, v, t, g, ghat, denom = (data[:, k] for k in range(6))
    omega = trans * alpha * ghat

    se = scl[sid]
    re = rot[sid]
    point = (pos[sid] + u[:, None] * se[:, :1] * re[:, :, 0]
             + v[:, None] * se[:, 1:2] * re[:, :, 1])
    normal_sign = np.where(denom > 0, -1.0, 1.0)
    return HitBuffer(W, H, pixid, sid, u, v, t, g, ghat, lowpass, alpha, trans,
                     omega, dirs, xrel, denom, point, normal_sign)


def render(scene: Scene, camera, mode: str = "shell",
           options: Optional[RenderOptions] = None) -> RenderOutput:
    """Render a camera view in ``sh`` (stage 1) or ``shell`` (stage 2) mode."""
    opts = options or RenderOptions()
    if mode not in ("sh", "shell"):
        raise ValueError(f"unknown render mode {mode!r}")
    if mode == "sh" and scene.surfels.sh is None:
        raise ValueError("sh mode requires surfels with SH coefficients")
    if mode == "shell" and (scene.field is None or scene.decoder is None):
        raise ValueError("shell mode requires a hash field and a decoder")

    hits = gather_hits(scene, camera, opts)
    H, W = camera.height, camera.width
    rot = scene.surfels.rotations()
    hits_normals = hits.normal_sign[:, None] * rot[hits.sid][:, :, 2] if len(hits) \
        else np.zeros((0, 3))

    if mode == "shell":
        feat_img, alpha, depth, normal = composite_features(
            hits, scene, opts, hits_normals)
        covered = alpha > 0.0
        rgb = np.zeros((H * W, 3))
        dec_cache = None
        if np.any(covered):
            cov_idx = np.flatnonzero(covered)
            dirs_flat = camera.ray_dirs.reshape(-1, 3)
            rgb_cov, cache = decode_batch(feat_img[cov_idx], dirs_flat[cov_idx],
                                          scene.decoder, want_cache=True)
            rgb[cov_idx] = rgb_cov
            dec_cache = (cov_idx, cache)
        rgb = rgb + (1.0 - alpha)[:, None] * scene.background
        outside = (rgb < 0.0) | (rgb > 1.0)
        rgb = np.clip(rgb, 0.0, 1.0)
        image = RenderedImage(rgb.reshape(H, W, 3), alpha.reshape(H, W),
                              depth.reshape(H, W), normal.reshape(H, W, 3))
        fi = FeatureImage(feat_img.reshape(H, W, -1), image.alpha, image.depth,
                          image.normal, hits)
        return RenderOutput(image, fi, hits, "shell", dec_cache,
                            outside.reshape(H, W, 3))

    rgb, alpha, depth, normal = composite_sh(hits, scene, hits_normals)
    rgb = rgb + (1.0 - alpha)[:, None] * scene.background
    outside = (rgb < 0.0) | (rgb > 1.0)
    rgb = np.clip(rgb, 0.0, 1.0)
    image = RenderedImage(rgb.reshape(H, W, 3), alpha.reshape(H, W),
                          depth.reshape(H, W), normal.reshape(H, W, 3))
    return RenderOutput(image, None, hits, "sh", None, outside.reshape(H, W, 3))


def composite_features(hits: HitBuffer, scene: Scene, opts: RenderOptions,
                       hits_normals: np.ndarray):
    """Blend hash-field features along each pixel: F = sum T_i a_i ghat_i f_i."""
    field = scene.field
    bound = field.bound
    if len(hits):
        q = contract(hits.point) if scene.contract_points else hits.point.copy()
        qc = np.clip(q, -bound, bound)
        clipped = qc != q

        feat = np.empty((len(hits), field.out_dim))
        def enc(lo, hi):
            cache = interp_cache(qc[lo:hi], field, scene.anneal)
            feat[lo:hi] = encode_cached(cache, field, hi - lo)
            return (lo, hi, cache)
        hits.enc_cache = _map_chunks(enc, len(hits), opts.threads)
        hits.qpoint, hits.clipped, hits.feat = qc, clipped, feat
    else:
        hits.qpoint = np.zeros((0, 3))
        hits.clipped = np.zeros((0, 3), dtype=bool)
        hits.feat = np.zeros((0, field.out_dim))
        hits.enc_cache = []
    alpha, depth, normal, img, _ = _weighted_images_impl(hits, hits.feat, hits_normals)
    return img, alpha, depth, normal


def composite_sh(hits: HitBuffer, scene: Scene, hits_normals: np.ndarray):
    """Blend clamped SH colors along each pixel (stage-1 path)."""
    deg = scene.sh_degree
    if len(hits):
        basis = sh_basis(hits.dirs, deg)
        raw = np.einsum("nck,nk->nc", scene.surfels.sh[hits.sid], basis) + 0.5
        colors = np.clip(raw, 0.0, 1.0)
        hits.basis = basis
        hits.colors = colors
        hits.clamp_pass = (raw > 0.0) & (raw < 1.0)
    else:
        hits.basis = np.zeros((0, (deg + 1) ** 2))
        hits.colors = np.zeros((0, 3))
        hits.clamp_pass = np.zeros((0, 3), dtype=bool)
    alpha, depth, normal, img, _ = _weighted_images_impl(hits, hits.colors, hits_normals)
    return img, alpha, depth, normal


def _weighted_images_impl(hits: HitBuffer, payload, hits_normals):
    P = hits.width * hits.height
    alpha = np.bincount(hits.pix, weights=hits.omega, minlength=P)
    depth_raw = np.bincount(hits.pix, weights=hits.omega * hits.t, minlength=P)
    normal = np.zeros((P, 3))
    img = np.zeros((P, payload.shape[1])) if payload is not None else None
    if len(hits):
        for k in range(3):
            normal[:, k] = np.bincount(hits.pix, weights=hits.omega * hits_normals[:, k],
                                       minlength=P)
        if payload is not None:
            for k in range(payload.shape[1]):
                img[:, k] = np.bincount(hits.pix, weights=hits.omega * payload[:, k],
                                        minlength=P)
    depth = depth_raw / np.maximum(alpha, 1e-8)
    return alpha, depth, normal, img, None


@dataclass
class Hit:
    surfel_index: int
    u: float
    v: float
    depth: float
    weight: float
    weight_eff: float
    trans: float


def visible_hits(camera, pixel_rc, surfels: SurfelSet,
                 options: Optional[RenderOptions] = None) -> list:
    """Ordered hit list for one pixel ray (reference path for the rasterizer).

    pixel_rc: (row, col).  Surfels are filtered by their projected 3-sigma
    bound, ordered by camera-space center depth (ties by index) and the list
    is truncated once transmittance drops below the early-stop threshold.
    """
    opts = options or RenderOptions()
    row, col = pixel_rc
    scene = Scene(surfels)
    x0, x1, y0, y1, ctr_pix, ctr_depth = screen_bounds(surfels, camera, opts)
    cand = np.flatnonzero((x0 <= col) & (col < x1) & (y0 <= row) & (row < y1))
    if cand.size == 0:
        return []
    cand = cand[np.lexsort((cand, ctr_depth[cand]))]
    d = camera.ray_dirs[row, col]
    rot = surfels.rotations()
    out = intersect_pairs(camera.origin, np.broadcast_to(d, (cand.size, 3)),
                          surfels.positions[cand], rot[cand],
                          surfels.scales()[cand],
                          near_clip=opts.near_clip, cutoff=np.inf)
    sig2 = opts.lowpass_sigma ** 2
    dcol = col + 0.5 - ctr_pix[cand, 0]
    drow = row + 0.5 - ctr_pix[cand, 1]
    d2 = dcol * dcol + drow * drow
    gscr = np.where(ctr_depth[cand] > opts.near_clip, np.exp(-0.5 * d2 / sig2), 0.0)
    r2 = out["u"] ** 2 + out["v"] ** 2
    ok = ((np.abs(out["denom"]) >= PARALLEL_EPS) & (out["t"] > opts.near_clip)
          & ((r2 <= opts.cutoff) | (d2 <= 9.0 * sig2)))
    ghat = np.maximum(out["g"], gscr)
    alpha = sigmoid(surfels.opacity_logits[cand])
    hits = []
    trans = 1.0
    for i in range(cand.size):
        if not ok[i]:
            continue
        if trans <= opts.early_stop:
            break
        hits.append(Hit(int(cand[i]), float(out["u"][i]), float(out["v"][i]),
                        float(out["t"][i]), float(out["g"][i]), float(ghat[i]),
                        trans))
        trans *= 1.0 - float(alpha[i]) * float(ghat[i])
    return hits


def render_backward(scene: Scene, camera, out: RenderOutput,
                    pixel_grads: PixelGrads, hit_grads: Optional[HitGrads] = None,
                    options: Optional[RenderOptions] = None) -> SceneGrads:
    """Full reverse pass from image-space gradients to all scene parameters."""
    opts = options or RenderOptions()
    hits = out.hits
    if hits.feat is None and hits.colors is None and len(hits):
        raise RuntimeError("render_backward needs the aux hit data from render()")
    n = len(scene.surfels)
    H, W = hits.height, hits.width
    P = H * W
    LF = scene.field.out_dim if scene.field is not None else 0

    grads = SceneGrads(
        positions=np.zeros((n, 3)), quats=np.zeros((n, 4)),
        log_scales=np.zeros((n, 2)), opacity_logits=np.zeros(n),
        sh=None if scene.surfels.sh is None else np.zeros_like(scene.surfels.sh),
        tables=None if scene.field is None else np.zeros_like(scene.field.tables),
        dec_w=None, dec_b=None,
        view_grad=np.zeros(n), visible=np.zeros(n, dtype=bool),
    )
    if scene.decoder is not None:
        grads.dec_w = [np.zeros_like(w) for w in scene.decoder.weights]
        grads.dec_b = [np.zeros_like(b) for b in scene.decoder.biases]

    rgb_bar = np.zeros((P, 3))
    if pixel_grads.rgb is not None:
        rgb_bar = pixel_grads.rgb.reshape(P, 3).copy()
        if out.rgb_outside is not None:
            rgb_bar[out.rgb_outside.reshape(P, 3)] = 0.0
    alpha_bar = (np.zeros(P) if pixel_grads.alpha is None
                 else pixel_grads.alpha.reshape(P).copy())
    depth_bar = (np.zeros(P) if pixel_grads.depth is None
                 else pixel_grads.depth.reshape(P).copy())
    normal_bar = (np.zeros((P, 3)) if pixel_grads.normal is None
                  else pixel_grads.normal.reshape(P, 3).copy())

    # background composite: out = base + (1 - alpha) * bg
    alpha_bar = alpha_bar - rgb_bar @ scene.background

    feat_bar = None
    if out.mode == "shell":
        feat_bar = np.zeros((P, LF))
        if out.dec_cache is not None:
            cov_idx, cache = out.dec_cache
            w_g, b_g, f_g = decode_backward_batch(cache, rgb_bar[cov_idx],
                                                  scene.decoder)
            for k in range(3):
                grads.dec_w[k] += w_g[k]
                grads.dec_b[k] += b_g[k]
            feat_bar[cov_idx] = f_g

    if len(hits) == 0:
        return grads

    pix = hits.pix
    sid = hits.sid
    omega = hits.omega
    alpha_img = out.image.alpha.reshape(P)
    depth_img = out.image.depth.reshape(P)
    a_safe = np.maximum(alpha_img, 1e-8)
    a_flag = (alpha_img > 1e-8).astype(np.float64)

    rot = scene.surfels.rotations()
    r0 = rot[sid][:, :, 0]
    r1 = rot[sid][:, :, 1]
    r2 = rot[sid][:, :, 2]
    scl = scene.surfels.scales()[sid]
    hits_normals = hits.normal_sign[:, None] * r2

    # dL/d(omega_i): every per-pixel output is an omega-weighted sum
    rho = alpha_bar[pix].copy()
    rho += np.einsum("md,md->m", normal_bar[pix], hits_normals)
    rho += depth_bar[pix] * (hits.t - depth_img[pix] * a_flag[pix]) / a_safe[pix]
    d_bar = depth_bar[pix] * omega / a_safe[pix]
    if out.mode == "shell":
        fbar_h = feat_bar[pix]
        rho += np.einsum("mf,mf->m", fbar_h, hits.feat)
    else:
        cbar = rgb_bar[pix]
        rho += np.einsum("mc,mc->m", cbar, hits.colors)
    if hit_grads is not None:
        if hit_grads.omega is not None:
            rho += hit_grads.omega
        if hit_grads.depth is not None:
            d_bar = d_bar + hit_grads.depth

    # blending chain: a_i = alpha_i * ghat_i, omega_i = T_i a_i
    a = hits.alpha * hits.ghat
    one_minus = np.clip(1.0 - a, 1e-12, 1.0)
    psi = rho * omega
    first = _seg_starts(pix)
    incl = _seg_cumsum_exclusive(psi, first) + psi
    seg_id = np.cumsum(first) - 1
    totals = np.bincount(seg_id, weights=psi)
    suffix = totals[seg_id] - incl
    a_bar = hits.trans * rho - suffix / one_minus

    alpha_i_bar = a_bar * hits.ghat
    g_bar = np.where(hits.lowpass, 0.0, a_bar * hits.alpha)

    # per-hit payload gradients
    n_hit_bar = omega[:, None] * normal_bar[pix]

    if out.mode == "shell":
        f_hit_bar = omega[:, None] * fbar_h
        q_bar = np.zeros((len(hits), 3))
        chunked = hits.enc_cache
        if chunked is None:
            chunked = [(lo, min(lo + CHUNK, len(hits)),
                        interp_cache(hits.qpoint[lo:min(lo + CHUNK, len(hits))],
                                     scene.field, scene.anneal))
                       for lo in range(0, len(hits), CHUNK)]
        def enc_bwd(piece):
            lo, hi, cache = piece
            tg = np.zeros_like(scene.field.tables)
            _, xg = encode_backward_cached(cache, scene.field, f_hit_bar[lo:hi],
                                           need_x_grad=opts.feature_pos_grad,
                                           table_grad_out=tg)
            q_bar[lo:hi] = xg
            return tg
        if opts.threads <= 1 or len(chunked) <= 1:
            tgs = [enc_bwd(p) for p in chunked]
        else:
            with ThreadPoolExecutor(max_workers=opts.threads) as ex:
                tgs = list(ex.map(enc_bwd, chunked))
        for tg in tgs:
            grads.tables += tg
        q_bar[hits.clipped] = 0.0
        if scene.contract_points:
            pu_bar = contract_backward(hits.point, q_bar)
        else:
            pu_bar = q_bar
        if not opts.feature_pos_grad:
            pu_bar = np.zeros_like(pu_bar)
    else:
        c_hit_bar = omega[:, None] * rgb_bar[pix] * hits.clamp_pass
        contrib = c_hit_bar[:, :, None] * hits.basis[:, None, :]  # (M, 3, K)
        K = hits.basis.shape[1]
        flat = contrib.reshape(len(hits), 3 * K)
        sh_flat = grads.sh.reshape(n, -1)
        for k in range(3 * K):
            sh_flat[:, k] += np.bincount(sid, weights=flat[:, k], minlength=n)
        pu_bar = np.zeros((len(hits), 3))

    # geometry chain through the local-frame plane solve
    u, v, t, g = hits.u, hits.v, hits.t, hits.g
    s0 = scl[:, 0]
    s1 = scl[:, 1]
    u_bar = g_bar * (-u * g)
    v_bar = g_bar * (-v * g)
    p_bar = np.zeros((len(hits), 3))
    s0_bar = np.zeros(len(hits))
    s1_bar = np.zeros(len(hits))
    r0_bar = np.zeros((len(hits), 3))
    r1_bar = np.zeros((len(hits), 3))
    r2_bar = hits.normal_sign[:, None] * n_hit_bar

    if out.mode == "shell" and opts.feature_pos_grad:
        pr0 = np.einsum("md,md->m", pu_bar, r0)
        pr1 = np.einsum("md,md->m", pu_bar, r1)
        u_bar = u_bar + s0 * pr0
        v_bar = v_bar + s1 * pr1
        p_bar += pu_bar
        s0_bar += u * pr0
        s1_bar += v * pr1
        r0_bar += (u * s0)[:, None] * pu_bar
        r1_bar += (v * s1)[:, None] * pu_bar

    t_bar = d_bar.copy()
    x_bar = (u_bar / s0)[:, None] * r0 + (v_bar / s1)[:, None] * r1
    r0_bar += (u_bar / s0)[:, None] * hits.x
    r1_bar += (v_bar / s1)[:, None] * hits.x
    s0_bar += u_bar * (-u / s0)
    s1_bar += v_bar * (-v / s1)
    t_bar += np.einsum("md,md->m", x_bar, hits.dirs)
    p_bar -= x_bar
    p_bar += (t_bar / hits.denom)[:, None] * r2
    r2_bar += (-t_bar / hits.denom)[:, None] * hits.x

    # reduce per-hit gradients onto surfels
    def reduce_cols(values, out_arr):
        for k in range(values.shape[1]):
            out_arr[:, k] += np.bincount(sid, weights=values[:, k], minlength=n)

    reduce_cols(p_bar, grads.positions)
    rot_bar = np.zeros((n, 3, 3))
    reduce_cols(r0_bar, rot_bar[:, :, 0])
    reduce_cols(r1_bar, rot_bar[:, :, 1])
    reduce_cols(r2_bar, rot_bar[:, :, 2])
    grads.quats += rotmat_grad_to_quat(scene.surfels.quats, rot_bar)
    s_bar = np.zeros((n, 2))
    s_bar[:, 0] = np.bincount(sid, weights=s0_bar, minlength=n)
    s_bar[:, 1] = np.bincount(sid, weights=s1_bar, minlength=n)
    grads.log_scales += s_bar * scene.surfels.scales()
    logit_hit = alpha_i_bar * hits.alpha * (1.0 - hits.alpha)
    grads.opacity_logits += np.bincount(sid, weights=logit_hit, minlength=n)

    grads.visible = np.bincount(sid, minlength=n) > 0
    # screen-space positional gradient magnitude (resolution-independent units)
    v_cam = grads.positions @ camera.rotation
    z = -camera.to_camera(scene.surfels.positions)[:, 2]
    gx = v_cam[:, 0] * z * W / (2.0 * camera.fx)
    gy = v_cam[:, 1] * z * H / (2.0 * camera.fy)
    grads.view_grad = np.hypot(gx, gy)
    return grads
