"""texsplat: CPU splatting with 2D Gaussian surfels and a hash-grid texture field."""

from .decoder import Decoder, DirEncoding, decode, decode_backward, encode_dir, sh_eval
from .geometry import (Camera, Intersection, Surfel, SurfelSet, anisotropy_stats,
                       intersect, splat_to_world)
from .hashfield import (AnnealState, HashField, contract, contract_backward,
                        encode, encode_backward, hash_index)
from .renderer import (FeatureImage, HitGrads, PixelGrads, RenderOptions,
                       RenderOutput, RenderedImage, SceneGrads, composite_features,
                       composite_sh, render, render_backward, visible_hits)
from .scene import Scene, random_surfels

__version__ = "0.1.0"

__all__ = [
    "AnnealState", "Camera", "Decoder", "DirEncoding", "FeatureImage",
    "HashField", "HitGrads", "Intersection", "PixelGrads", "RenderOptions",
    "RenderOutput", "RenderedImage", "Scene", "SceneGrads", "Surfel",
    "SurfelSet", "anisotropy_stats", "composite_features", "composite_sh",
    "contract", "contract_backward", "decode", "decode_backward", "encode",
    "encode_backward", "encode_dir", "hash_index", "intersect", "random_surfels",
    "render", "render_backward", "sh_eval", "splat_to_world", "visible_hits",
]
