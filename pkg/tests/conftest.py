import numpy as np
import pytest

from texsplat.decoder import Decoder
from texsplat.geometry import Camera, SurfelSet
from texsplat.hashfield import AnnealState, HashField
from texsplat.scene import Scene


def micro_scene(seed=7, n=6, with_field=True, with_sh=False, table_range=0.5):
    """Small stacked-surfel scene with comfortable margins for FD checks.

    Surfels are large relative to the 8x8 frame and depth-separated, so no
    hit sits near the 3-sigma cutoff, the transmittance early-stop or the
    low-pass branch switch, keeping finite differences clean.
    """
    rng = np.random.default_rng(seed)
    pos = np.stack([
        rng.uniform(-0.25, 0.25, n),
        rng.uniform(-0.25, 0.25, n),
        np.linspace(0.0, 0.45, n),
    ], axis=1)
    quats = np.array([1.0, 0, 0, 0]) + 0.25 * rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    log_scales = np.log(rng.uniform(0.35, 0.6, size=(n, 2)))
    logits = rng.uniform(-0.5, 1.0, n)
    sh = 0.15 * rng.normal(size=(n, 3, 16)) if with_sh else None
    surfels = SurfelSet(pos, quats, log_scales, logits, sh)

    c2w = np.eye(4)
    c2w[:3, 3] = [0.05, -0.03, 2.2]
    cam = Camera.from_fov_x(8, 8, np.deg2rad(55), c2w)

    field = None
    dec = None
    anneal = None
    if with_field:
        field = HashField.create(levels=2, table_size=2 ** 10, feat_dim=2,
                                 n_min=4, n_max=8, bound=1.0, rng=rng)
        field.tables = rng.uniform(-table_range, table_range, field.tables.shape)
        dec = Decoder.create(field.out_dim, rng)
        anneal = AnnealState(1)
    scene = Scene(surfels, field=field, decoder=dec, anneal=anneal,
                  background=np.zeros(3))
    return scene, cam, rng


@pytest.fixture
def rng():
    return np.random.default_rng(0)
