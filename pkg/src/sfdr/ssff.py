"""Semantic-spatial feature fusion.

A joint image-text embedding is tiled across the grid rows and convex-
combined with the grid features:

    fused = alpha * tile(P(concat(visual, text))) + (1 - alpha) * grid

followed by a learned projection to the model dimension when the grid width
differs from it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class SsffParams:
    embed_proj: Tensor              # (d_v + d_t) x d_g
    out_proj: Tensor | None         # d_g x d when d_g != d
    text_const: Tensor              # 1 x d_t, stands in for text at inference

    @classmethod
    def init(cls, rng: np.random.Generator, d_v: int, d_t: int,
             d_g: int, d: int) -> "SsffParams":
        return cls(
            embed_proj=glorot(rng, d_v + d_t, d_g),
            out_proj=None if d_g == d else glorot(rng, d_g, d),
            text_const=Tensor(rng.normal(0.0, 0.1, (1, d_t)), requires_grad=True),
        )

    def tensors(self) -> dict[str, Tensor]:
        named = {"ssff.embed_proj": self.embed_proj,
                 "ssff.text_const": self.text_const}
        if self.out_proj is not None:
            named["ssff.out_proj"] = self.out_proj
        return named


def glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    scale = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-scale, scale, (rows, cols)), requires_grad=True)


@dataclass
class FusedFeatures:
    matrix: Tensor   # H x d
    alpha: float


def embed_semantic(clip_visual: Tensor, clip_text: Tensor) -> Tensor:
    """Concatenate visual then text features into one joint row vector."""
    if clip_visual.data.ndim != 2 or clip_visual.shape[0] != 1 \
            or clip_text.data.ndim != 2 or clip_text.shape[0] != 1:
        raise ad.DimensionError(
            f"semantic inputs must be row vectors, got "
            f"{clip_visual.shape} and {clip_text.shape}")
    return ad.concat_cols([clip_visual, clip_text])


def fuse(embedded: Tensor, grid: Tensor, alpha: float,
         params: SsffParams) -> FusedFeatures:
    """Tile the projected embedding over the grid rows and mix by alpha."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    big_h = grid.shape[0]
    projected = ad.matmul(embedded, params.embed_proj)      # 1 x d_g
    tiled = ad.gather_rows(projected, [0] * big_h)          # H x d_g
    mixed = ad.add(ad.smul(tiled, alpha), ad.smul(grid, 1.0 - alpha))
    if params.out_proj is not None:
        mixed = ad.matmul(mixed, params.out_proj)
    return FusedFeatures(matrix=mixed, alpha=alpha)
