"""Scratch FD audit of the full backward chain (shell mode)."""
import numpy as np

import texsplat as ts
from texsplat.geometry import SurfelSet, Camera
from texsplat.hashfield import HashField, AnnealState
from texsplat.decoder import Decoder
from texsplat.scene import Scene
from texsplat.renderer import RenderOptions, render, render_backward
from texsplat.training import TrainConfig, compute_step_grads

rng = np.random.default_rng(7)
n = 6

pos = np.stack([
    rng.uniform(-0.25, 0.25, n),
    rng.uniform(-0.25, 0.25, n),
    np.linspace(0.0, 0.45, n),
], axis=1)
quats = np.array([1.0, 0, 0, 0]) + 0.25 * rng.normal(size=(n, 4))
quats /= np.linalg.norm(quats, axis=1, keepdims=True)
log_scales = np.log(rng.uniform(0.35, 0.6, size=(n, 2)))
logits = rng.uniform(-0.5, 1.0, n)
surfels = SurfelSet(pos, quats, log_scales, logits)

c2w = np.eye(4)
c2w[:3, 3] = [0.05, -0.03, 2.2]  # looking down -z at the stack
cam = Camera.from_fov_x(8, 8, np.deg2rad(55), c2w)

field = HashField.create(levels=2, table_size=2**10, feat_dim=2, n_min=4, n_max=8,
                         bound=1.0, rng=rng)
field.tables = rng.uniform(-0.5, 0.5, field.tables.shape)
dec = Decoder.create(field.out_dim, rng)
scene = Scene(surfels, field=field, decoder=dec, anneal=AnnealState(1),
              background=np.array([0.0, 0.0, 0.0]))

cfg = TrainConfig()
opts = RenderOptions(threads=1)
gt = rng.uniform(0, 1, (8, 8, 3))
tgt = rng.uniform(0, 1, (8, 8))

def loss_fn():
    _, comps, _, _ = compute_step_grads(scene, cam, gt, "shell", cfg, opts,
                                        alpha_target=tgt, bounded=True)
    return comps["total"]

out, comps, pg, hg = compute_step_grads(scene, cam, gt, "shell", cfg, opts,
                                        alpha_target=tgt, bounded=True)
print("components:", comps)
print("hits:", len(out.hits), "alpha range", out.image.alpha.min(), out.image.alpha.max())
grads = render_backward(scene, cam, out, pg, hg, opts)

h = 1e-6
def fd(arr, idx):
    old = arr[idx]
    arr[idx] = old + h
    lp = loss_fn()
    arr[idx] = old - h
    lm = loss_fn()
    arr[idx] = old
    return (lp - lm) / (2 * h)

worst = 0.0
def check(name, arr, g, samples):
    global worst
    flat_idx = [np.unravel_index(k, arr.shape) for k in samples]
    for idx in flat_idx:
        est = fd(arr, idx)
        an = g[idx]
        rel = abs(an - est) / max(abs(an), abs(est), 1e-6)
        worst = max(worst, rel)
        flag = "  <<<" if rel > 1e-4 else ""
        print(f"{name}{idx}: analytic={an: .8e} fd={est: .8e} rel={rel:.2e}{flag}")

rs = np.random.default_rng(3)
check("pos", surfels.positions, grads.positions, rs.choice(n*3, 8, replace=False))
check("quat", surfels.quats, grads.quats, rs.choice(n*4, 8, replace=False))
check("logs", surfels.log_scales, grads.log_scales, rs.choice(n*2, 6, replace=False))
check("logit", surfels.opacity_logits, grads.opacity_logits, range(n))
touched = np.flatnonzero(np.abs(grads.tables) > 1e-12)
check("table", field.tables, grads.tables, rs.choice(touched, 10, replace=False))
for k in range(3):
    wg = grads.dec_w[k]
    samples = rs.choice(wg.size, 5, replace=False)
    check(f"W{k}", dec.weights[k], wg, samples)
    check(f"b{k}", dec.biases[k], grads.dec_b[k], rs.choice(grads.dec_b[k].size, 3, replace=False))
print("WORST:", worst)
