"""Losses, Adam optimization, densification and the two-stage train loop.

Stage 1 optimizes surfels with per-splat SH colors; at the boundary the SH
coefficients are dropped, alpha targets are rendered for object scenes, and
the hash field plus decoder take over appearance for the joint stage 2.
Every loss returns analytic gradients so the whole pipeline is finite-
difference checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Optional

import numpy as np

from .decoder import Decoder
from .geometry import SurfelSet, inverse_sigmoid, quat_to_rotmat, sigmoid
from .hashfield import AnnealState, HashField
from .metrics import psnr, ssim_with_grad
from .renderer import (HitBuffer, HitGrads, PixelGrads, RenderOptions,
                       render, render_backward)
from .scene import Scene, random_surfels


@dataclass
class TrainConfig:
    # loss mix
    distortion_weight: float = 1000.0          # bounded scenes
    distortion_weight_unbounded: float = 100.0
    normal_weight: float = 0.05
    alpha_weight: float = 0.1
    ssim_weight: float = 0.2
    distortion_from: int = 500                 # per-stage warm-up before enabling
    normal_from: int = 500
    # densification / pruning
    densify_grad_threshold: float = 4e-4
    densify_every: int = 100
    densify_from: int = 500
    densify_until: int = 20000
    opacity_reset_every: int = 3000
    prune_freeze_after_reset: int = 1000
    prune_opacity: float = 0.005
    split_scale_frac: float = 0.01             # of scene extent
    opacity_reset_value: float = 0.05
    max_surfels: int = 500_000
    # schedule
    stage1_iters: int = 10000
    stage2_iters: int = 20000
    anneal_every: int = 3000
    anneal_start: int = 1
    # learning rates
    lr_position: float = 1.6e-4
    lr_position_final_scale: float = 0.01      # exp decay target over stage 2
    lr_quat: float = 1e-3
    lr_log_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    lr_tables: float = 1e-2
    lr_decoder: float = 1e-3
    # model
    sh_degree: int = 3
    levels: int = 6
    table_size: int = 2 ** 19
    feat_dim: int = 4
    grid_min_res: int = 16
    grid_max_res: int = 512
    init_surfels: int = 10000
    init_radius: float = 0.6
    init_scale: Optional[float] = None
    init_opacity: float = 0.1
    background: tuple = (0.0, 0.0, 0.0)
    # bookkeeping
    seed: int = 0
    threads: int = 1
    feature_pos_grad: bool = True              # off reproduces the ablated model
    eval_every: int = 0                        # 0 = only at stage ends
    log_every: int = 50

    @classmethod
    def desk_profile(cls, **overrides) -> "TrainConfig":
        """Small-scene settings: 1000 + 2000 iterations, tiny hash field."""
        base = dict(
            stage1_iters=1000, stage2_iters=2000,
            densify_every=100, densify_from=200, densify_until=2400,
            distortion_from=300, normal_from=300,
            levels=2, table_size=2 ** 10, feat_dim=2,
            grid_min_res=16, grid_max_res=64,
            init_surfels=300, max_surfels=500,
            init_scale=0.05, init_opacity=0.25,
            eval_every=500,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def like(cls, param) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(params, grads, state: AdamState, lr: float):
    """Bias-corrected Adam update, in place; returns the updated array."""
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    params -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def loss_rgb(pred, gt, ssim_weight: float = 0.2):
    """(1 - w) L1 + w (1 - SSIM)/2 with analytic per-pixel gradients."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    value = (1.0 - ssim_weight) * l1
    if ssim_weight > 0.0:
        s, s_grad = ssim_with_grad(pred, gt)
        value += ssim_weight * (1.0 - s) / 2.0
        grad = grad - 0.5 * ssim_weight * s_grad
    return value, grad


def loss_distortion(hits: HitBuffer):
    """Pairwise blend-weight depth spread per ray, averaged over all pixels.

    Returns (value, omega_grad (M,), depth_grad (M,)) in the hit order of the
    buffer.  Zero for pixels with at most one effective hit.
    """
    m = len(hits)
    P = hits.width * hits.height
    if m == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    order = np.lexsort((hits.t, hits.pix))
    pix = hits.pix[order]
    w = hits.omega[order]
    d = hits.t[order]
    first = np.empty(m, dtype=bool)
    first[0] = True
    first[1:] = pix[1:] != pix[:-1]
    seg_id = np.cumsum(first) - 1

    def excl(x):
        cs = np.cumsum(x)
        base = (cs - x)[first]
        return cs - x - base[seg_id]

    w_before = excl(w)
    wd_before = excl(w * d)
    w_tot = np.bincount(seg_id, weights=w)[seg_id]
    wd_tot = np.bincount(seg_id, weights=w * d)[seg_id]
    w_after = w_tot - w_before - w
    wd_after = wd_tot - wd_before - w * d

    value = float(np.sum(w * (d * w_before - wd_before))) / P
    w_grad = (d * w_before - wd_before + wd_after - d * w_after) / P
    d_grad = w * (w_before - w_after) / P

    inv = np.empty(m, dtype=np.int64)
    inv[order] = np.arange(m)
    return value, w_grad[inv], d_grad[inv]


def _normalize_floor(vec, floor=1e-8):
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    c = np.maximum(n, floor)
    return vec / c, n, c


def loss_normal(normal_map, depth_map, alpha_map, camera):
    """Consistency between blended splat normals and depth-derived normals.

    Depth is back-projected along the pixel rays, central differences give a
    surface normal, and the loss is the mean of (1 - <n_blend, n_depth>) over
    covered interior pixels (alpha above 1e-3 on the full 5-point stencil).
    Returns (value, normal_map_grad, depth_map_grad).
    """
    H, W = depth_map.shape
    nm_grad = np.zeros((H, W, 3))
    d_grad = np.zeros((H, W))
    if H < 3 or W < 3:
        return 0.0, nm_grad, d_grad
    rays = camera.ray_dirs
    pts = camera.origin + depth_map[:, :, None] * rays

    cov = alpha_map > 1e-3
    mask = np.zeros((H, W), dtype=bool)
    mask[1:-1, 1:-1] = (cov[1:-1, 1:-1] & cov[1:-1, :-2] & cov[1:-1, 2:]
                        & cov[:-2, 1:-1] & cov[2:, 1:-1])
    idx = np.flatnonzero(mask.ravel())
    if idx.size == 0:
        return 0.0, nm_grad, d_grad
    ii, jj = np.unravel_index(idx, (H, W))

    dpdx = 0.5 * (pts[ii, jj + 1] - pts[ii, jj - 1])
    dpdy = 0.5 * (pts[ii + 1, jj] - pts[ii - 1, jj])
    n_raw = np.cross(dpdx, dpdy)
    n_hat, _, n_c = _normalize_floor(n_raw)
    flip = np.where(np.einsum("kd,kd->k", n_hat, rays[ii, jj]) > 0, -1.0, 1.0)
    n_dep = flip[:, None] * n_hat

    m_raw = normal_map[ii, jj]
    m_hat, _, m_c = _normalize_floor(m_raw)
    dots = np.einsum("kd,kd->k", m_hat, n_dep)
    k = idx.size
    value = float(np.mean(1.0 - dots))

    # d value / d m_hat = -n_dep / k; through the floored normalization
    mh_bar = -n_dep / k
    m_bar = (mh_bar - m_hat * np.einsum("kd,kd->k", mh_bar, m_hat)[:, None]
             * (np.linalg.norm(m_raw, axis=-1, keepdims=True) >= 1e-8)) / m_c
    nm_grad[ii, jj] = m_bar

    nh_bar = flip[:, None] * (-m_hat / k)
    n_bar = (nh_bar - n_hat * np.einsum("kd,kd->k", nh_bar, n_hat)[:, None]
             * (np.linalg.norm(n_raw, axis=-1, keepdims=True) >= 1e-8)) / n_c
    dx_bar = np.cross(dpdy, n_bar)
    dy_bar = np.cross(n_bar, dpdx)

    p_bar = np.zeros((H, W, 3))
    np.add.at(p_bar, (ii, jj + 1), 0.5 * dx_bar)
    np.add.at(p_bar, (ii, jj - 1), -0.5 * dx_bar)
    np.add.at(p_bar, (ii + 1, jj), 0.5 * dy_bar)
    np.add.at(p_bar, (ii - 1, jj), -0.5 * dy_bar)
    d_grad = np.einsum("ijd,ijd->ij", p_bar, rays)
    return value, nm_grad, d_grad


def loss_alpha(pred_alpha, target_alpha):
    """Mean absolute difference between rendered and target alpha maps."""
    pred = np.asarray(pred_alpha, dtype=np.float64)
    tgt = np.asarray(target_alpha, dtype=np.float64)
    if pred.shape != tgt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {tgt.shape}")
    diff = pred - tgt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def total_loss(l_c, l_d, l_n, l_a, config: TrainConfig, bounded: bool = True) -> float:
    """Weighted sum of the color, distortion, normal and alpha terms."""
    w_d = config.distortion_weight if bounded else config.distortion_weight_unbounded
    return float(l_c + w_d * l_d + config.normal_weight * l_n
                 + config.alpha_weight * l_a)


def compute_step_grads(scene: Scene, camera, gt_image, mode: str,
                       config: TrainConfig, opts: RenderOptions,
                       alpha_target=None, use_distortion=True, use_normal=True,
                       bounded=True):
    """Render one view, evaluate the full loss and its upstream gradients.

    Returns (render output, loss component dict, PixelGrads, HitGrads).
    """
    out = render(scene, camera, mode, opts)
    l_c, rgb_grad = loss_rgb(out.image.rgb, gt_image, config.ssim_weight)
    w_d = config.distortion_weight if bounded else config.distortion_weight_unbounded

    l_d, w_grad, d_hit_grad = 0.0, None, None
    if use_distortion and w_d > 0.0:
        l_d, w_grad, d_hit_grad = loss_distortion(out.hits)
        w_grad = w_d * w_grad
        d_hit_grad = w_d * d_hit_grad

    l_n, n_grad, d_pix_grad = 0.0, None, None
    if use_normal and config.normal_weight > 0.0:
        l_n, n_grad, d_pix_grad = loss_normal(out.image.normal, out.image.depth,
                                              out.image.alpha, camera)
        n_grad = config.normal_weight * n_grad
        d_pix_grad = config.normal_weight * d_pix_grad

    l_a, a_grad = 0.0, None
    if alpha_target is not None and config.alpha_weight > 0.0:
        l_a, a_grad = loss_alpha(out.image.alpha, alpha_target)
        a_grad = config.alpha_weight * a_grad

    comps = {
        "l_c": l_c, "l_d": l_d, "l_n": l_n, "l_a": l_a,
        "total": total_loss(l_c, l_d, l_n, l_a, config, bounded),
    }
    pixel_grads = PixelGrads(rgb=rgb_grad, alpha=a_grad, depth=d_pix_grad,
                             normal=n_grad)
    hit_grads = HitGrads(omega=w_grad, depth=d_hit_grad)
    return out, comps, pixel_grads, hit_grads


def densify_and_prune(surfels: SurfelSet, grad_accum, grad_denom, iteration: int,
                      config: TrainConfig, extent: float,
                      rng: np.random.Generator):
    """Clone/split over-stressed surfels, prune transparent ones, reset opacity.

    grad_accum / grad_denom: per-surfel summed view-space positional gradient
    magnitudes and visibility counts since the previous call.  Returns
    (new SurfelSet, parent index per new entry with -1 for fresh rows, stats).
    """
    n = len(surfels)
    mean_grad = grad_accum / np.maximum(grad_denom, 1.0)
    scales = surfels.scales()
    stressed = mean_grad > config.densify_grad_threshold
    split_thr = config.split_scale_frac * extent
    big = scales.max(axis=1) > split_thr

    budget = max(config.max_surfels - n, 0)
    clone_mask = stressed & ~big
    split_mask = stressed & big
    # splits add a net +1, clones +1; trim deterministically by gradient rank
    want = int(clone_mask.sum() + split_mask.sum())
    if want > budget:
        cand = np.flatnonzero(stressed)
        order = cand[np.lexsort((cand, -mean_grad[cand]))][:budget]
        sel = np.zeros(n, dtype=bool)
        sel[order] = True
        clone_mask &= sel
        split_mask &= sel

    rot = quat_to_rotmat(surfels.quats)
    parts_pos = [surfels.positions]
    parts_quat = [surfels.quats]
    parts_ls = [surfels.log_scales]
    parts_op = [surfels.opacity_logits]
    parts_sh = [surfels.sh] if surfels.sh is not None else None
    parents = [np.arange(n)]
    drop = np.zeros(n, dtype=bool)

    def tangent_offsets(idx, sigma):
        z = rng.normal(size=(idx.size, 2)) * sigma
        return (z[:, :1] * scales[idx, :1] * rot[idx, :, 0]
                + z[:, 1:] * scales[idx, 1:] * rot[idx, :, 1])

    ci = np.flatnonzero(clone_mask)
    if ci.size:
        parts_pos.append(surfels.positions[ci] + tangent_offsets(ci, 0.5))
        parts_quat.append(surfels.quats[ci])
        parts_ls.append(surfels.log_scales[ci])
        parts_op.append(surfels.opacity_logits[ci])
        if parts_sh is not None:
            parts_sh.append(surfels.sh[ci])
        parents.append(np.full(ci.size, -1))

    si = np.flatnonzero(split_mask)
    if si.size:
        drop[si] = True
        for _ in range(2):
            parts_pos.append(surfels.positions[si] + tangent_offsets(si, 1.0))
            parts_quat.append(surfels.quats[si])
            parts_ls.append(surfels.log_scales[si] - np.log(1.6))
            parts_op.append(surfels.opacity_logits[si])
            if parts_sh is not None:
                parts_sh.append(surfels.sh[si])
            parents.append(np.full(si.size, -1))

    pos = np.concatenate(parts_pos)
    quat = np.concatenate(parts_quat)
    ls = np.concatenate(parts_ls)
    op = np.concatenate(parts_op)
    sh = np.concatenate(parts_sh) if parts_sh is not None else None
    parent_idx = np.concatenate(parents)
    keep = np.ones(pos.shape[0], dtype=bool)
    keep[:n] = ~drop

    # prune, unless inside the freeze window after an opacity reset; the reset
    # iteration itself still prunes (with pre-reset opacities)
    re = config.opacity_reset_every
    frozen = re > 0 and iteration >= re and 0 < iteration % re < config.prune_freeze_after_reset
    did_reset = re > 0 and iteration > 0 and iteration % re == 0
    if not frozen:
        keep &= sigmoid(op) >= config.prune_opacity

    pos, quat, ls, op = pos[keep], quat[keep], ls[keep], op[keep]
    parent_idx = parent_idx[keep]
    if sh is not None:
        sh = sh[keep]
    if did_reset:
        op = np.full(op.shape, inverse_sigmoid(config.opacity_reset_value))

    stats = {"cloned": int(ci.size), "split": int(si.size),
             "pruned": int(np.sum(~keep)), "reset": did_reset}
    return SurfelSet(pos, quat, ls, op, sh), parent_idx, stats


@dataclass(eq=False)
class TrainResult:
    scene: Scene
    log: list
    alpha_targets: Optional[list] = None


class _Optimizer:
    """Named Adam states; surfel groups get remapped across densification."""

    def __init__(self):
        self.states = {}

    def ensure(self, name, param):
        if name not in self.states or self.states[name].m.shape != param.shape:
            self.states[name] = AdamState.like(param)
        return self.states[name]

    def step(self, name, param, grad, lr):
        return adam_step(param, grad, self.ensure(name, param), lr)

    def remap_rows(self, names, parent_idx):
        """After densification: survivors keep moments, fresh rows start at zero."""
        fresh = parent_idx < 0
        src = np.where(fresh, 0, parent_idx)
        for name in names:
            st = self.states.get(name)
            if st is None:
                continue
            for buf_name in ("m", "v"):
                buf = getattr(st, buf_name)
                out = buf[src].copy()
                out[fresh] = 0.0
                setattr(st, buf_name, out)

    def drop(self, name):
        self.states.pop(name, None)


_SURFEL_GROUPS = ("positions", "quats", "log_scales", "opacity_logits", "sh")


def _scene_extent(dataset) -> float:
    centers = np.stack([c.origin for c in dataset.cameras])
    centroid = centers.mean(axis=0)
    return float(np.linalg.norm(centers - centroid, axis=1).max() * 1.1)


def train(dataset, config: TrainConfig, log_path: Optional[str] = None,
          scene: Optional[Scene] = None, progress: bool = False) -> TrainResult:
    """Two-stage optimization of a scene against a posed image dataset."""
    rng = np.random.default_rng(config.seed)
    bounded = dataset.scene_kind == "bounded"
    opts = RenderOptions(threads=config.threads,
                         feature_pos_grad=config.feature_pos_grad)
    train_ids = [i for i, s in enumerate(dataset.split) if s == "train"]
    test_ids = [i for i, s in enumerate(dataset.split) if s == "test"]
    if not train_ids:
        raise ValueError("dataset has no training views")
    extent = _scene_extent(dataset)

    if scene is None:
        surfels = random_surfels(
            min(config.init_surfels, config.max_surfels), rng,
            radius=config.init_radius, scale=config.init_scale,
            opacity=config.init_opacity, sh_degree=config.sh_degree)
        scene = Scene(surfels, background=np.asarray(config.background))

    opt = _Optimizer()
    log: list = []
    log_file = open(log_path, "w") if log_path else None
    grad_accum = np.zeros(len(scene.surfels))
    grad_denom = np.zeros(len(scene.surfels))
    view_order: list = []

    def next_view():
        nonlocal view_order
        if not view_order:
            view_order = list(rng.permutation(train_ids))
        return view_order.pop()

    def eval_psnr(mode):
        vals = []
        for i in test_ids:
            out = render(scene, dataset.cameras[i], mode, opts)
            vals.append(psnr(out.image.rgb, dataset.images[i][:, :, :3]))
        return float(np.mean(vals)) if vals else None

    def emit(record):
        log.append(record)
        if log_file:
            log_file.write(json.dumps(record) + "\n")
            log_file.flush()
        if progress:
            print(json.dumps(record))

    def surfel_step(grads, lr_pos):
        s = scene.surfels
        opt.step("positions", s.positions, grads.positions, lr_pos)
        opt.step("quats", s.quats, grads.quats, config.lr_quat)
        opt.step("log_scales", s.log_scales, grads.log_scales, config.lr_log_scale)
        opt.step("opacity_logits", s.opacity_logits, grads.opacity_logits,
                 config.lr_opacity)
        if s.sh is not None and grads.sh is not None:
            opt.step("sh", s.sh, grads.sh, config.lr_sh)
        s.normalize_quats()

    def run_stage(stage, mode, n_iters, start_iter):
        nonlocal grad_accum, grad_denom
        lam0 = config.anneal_start
        for j in range(1, n_iters + 1):
            it = start_iter + j
            if mode == "shell":
                scene.anneal.lam = lam0 + (j // config.anneal_every
                                           if config.anneal_every > 0 else 0)
            vi = next_view()
            cam = dataset.cameras[vi]
            gt = dataset.images[vi][:, :, :3]
            tgt = None
            if mode == "shell" and alpha_targets is not None:
                tgt = alpha_targets[train_ids.index(vi)]
            out, comps, pgrads, hgrads = compute_step_grads(
                scene, cam, gt, mode, config, opts, alpha_target=tgt,
                use_distortion=j > config.distortion_from,
                use_normal=j > config.normal_from, bounded=bounded)
            grads = render_backward(scene, cam, out, pgrads, hgrads, opts)

            if mode == "shell":
                lr_pos = config.lr_position * config.lr_position_final_scale ** (
                    j / max(n_iters, 1))
                opt.step("tables", scene.field.tables, grads.tables,
                         config.lr_tables)
                for k in range(3):
                    opt.step(f"dec_w{k}", scene.decoder.weights[k],
                             grads.dec_w[k], config.lr_decoder)
                    opt.step(f"dec_b{k}", scene.decoder.biases[k],
                             grads.dec_b[k], config.lr_decoder)
            else:
                lr_pos = config.lr_position
            surfel_step(grads, lr_pos)

            grad_accum += grads.view_grad
            grad_denom += grads.visible

            if (config.densify_every > 0 and it % config.densify_every == 0
                    and config.densify_from <= it <= config.densify_until):
                new_set, parent_idx, _ = densify_and_prune(
                    scene.surfels, grad_accum, grad_denom, it, config, extent, rng)
                opt.remap_rows(_SURFEL_GROUPS, parent_idx)
                scene.surfels = new_set
                grad_accum = np.zeros(len(new_set))
                grad_denom = np.zeros(len(new_set))

            if it % config.log_every == 0 or j == n_iters:
                rec = {"iter": it, "stage": stage, "surfels": len(scene.surfels),
                       "lambda": int(scene.anneal.lam) if scene.anneal else None}
                rec.update({k: round(v, 6) for k, v in comps.items()})
                if config.eval_every and (it % config.eval_every == 0 or j == n_iters):
                    rec["psnr"] = eval_psnr(mode)
                emit(rec)

    alpha_targets = None
    try:
        if config.stage1_iters > 0:
            if scene.surfels.sh is None:
                raise ValueError("stage 1 needs SH-colored surfels")
            run_stage(1, "sh", config.stage1_iters, 0)

        if config.stage2_iters > 0:
            if bounded and config.alpha_weight > 0 and scene.surfels.sh is not None:
                alpha_targets = []
                for i in train_ids:
                    out = render(scene, dataset.cameras[i], "sh", opts)
                    alpha_targets.append(out.image.alpha.copy())
            scene.surfels.sh = None
            opt.drop("sh")
            if scene.field is None:
                scene.field = HashField.create(
                    levels=config.levels, table_size=config.table_size,
                    feat_dim=config.feat_dim, n_min=config.grid_min_res,
                    n_max=config.grid_max_res,
                    bound=1.0 if bounded else 2.0, rng=rng)
                scene.contract_points = not bounded
            if scene.decoder is None:
                scene.decoder = Decoder.create(scene.field.out_dim, rng)
            scene.anneal = AnnealState(config.anneal_start)
            run_stage(2, "shell", config.stage2_iters, config.stage1_iters)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(scene=scene, log=log, alpha_targets=alpha_targets)
