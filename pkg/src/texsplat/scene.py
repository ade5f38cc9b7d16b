"""Scene container shared by the renderer, the trainer and the io layer."""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from typing import Optional

import numpy as np

from .decoder import Decoder
from .geometry import SurfelSet, inverse_sigmoid
from .hashfield import AnnealState, HashField


@dataclass(eq=False)
class Scene:
    surfels: SurfelSet
    field: Optional[HashField] = None
    decoder: Optional[Decoder] = None
    anneal: Optional[AnnealState] = None        # None means all levels active
    background: np.ndarray = dataclass_field(default_factory=lambda: np.zeros(3))
    contract_points: bool = False               # unbounded scenes contract hit points

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    @property
    def sh_degree(self) -> Optional[int]:
        if self.surfels.sh is None:
            return None
        return int(np.sqrt(self.surfels.sh.shape[2])) - 1


def random_surfels(count: int, rng: np.random.Generator, radius: float = 0.5,
                   scale: Optional[float] = None, opacity: float = 0.1,
                   sh_degree: Optional[int] = None) -> SurfelSet:
    """Seeded random initialization inside a ball, roughly space-filling scales."""
    pts = rng.normal(size=(count, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    pts *= radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / 3.0)
    quats = rng.normal(size=(count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    if scale is None:
        scale = 1.2 * radius / max(count, 1) ** (1.0 / 3.0)
    log_scales = np.full((count, 2), np.log(scale))
    logits = np.full(count, inverse_sigmoid(opacity))
    sh = None
    if sh_degree is not None:
        sh = np.zeros((count, 3, (sh_degree + 1) ** 2))
    return SurfelSet(pts, quats, log_scales, logits, sh)
