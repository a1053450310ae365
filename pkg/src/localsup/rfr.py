"""Random feature reconstruction: sample aligned patch pairs from consecutive
feature maps, reconstruct the earlier features from the later ones, and score
the result with an L1 loss.

Coordinates correspond across the stage's spatial stride s: a patch at
(r, c) with side p on the later map covers (r*s, c*s) with side p*s on the
earlier one.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from localsup import tensor as T
from localsup.tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = ["SamplerConfig", "PatchPair", "sample_locations", "rfr_loss"]


@dataclass(frozen=True)
class SamplerConfig:
    """How many aligned patches to draw per step and how big they are.

    ``patch_size_on_input`` is measured in input-image pixels; the size on a
    given feature map is that divided by the cumulative spatial stride up to
    it (floored, minimum 1), so every stage reconstructs the same physical
    image area.
    """

    num_patches: int = 10
    patch_size_on_input: int = 128
    rng_seed: int = 0
    sample_without_replacement: bool = True

    def __post_init__(self):
        if self.num_patches < 1:
            raise ValueError(f"num_patches must be >= 1, got {self.num_patches}")
        if self.patch_size_on_input < 1:
            raise ValueError(f"patch_size_on_input must be >= 1, got {self.patch_size_on_input}")

    def patch_size_on(self, cumulative_stride: int) -> int:
        return max(1, self.patch_size_on_input // cumulative_stride)


@dataclass(frozen=True)
class PatchPair:
    """Aligned crop locations on the later (hi) and earlier (lo) feature maps."""

    loc_hi: tuple[int, int]
    loc_lo: tuple[int, int]
    size_hi: int
    size_lo: int

    def __post_init__(self):
        s, rem = divmod(self.size_lo, self.size_hi)
        if rem or self.loc_lo != (self.loc_hi[0] * s, self.loc_hi[1] * s):
            raise ValueError(
                f"pair breaks coordinate correspondence: hi {self.loc_hi}/{self.size_hi}, "
                f"lo {self.loc_lo}/{self.size_lo}")


def sample_locations(cfg: SamplerConfig, shape_hi: tuple[int, int], stride: int,
                     cumulative_stride: int, rng: np.random.Generator) -> list[PatchPair]:
    """Draw aligned patch pairs uniformly over valid top-left positions.

    Returns min(num_patches, number of distinct valid positions) pairs when
    sampling without replacement. A patch larger than the map falls back to a
    single full-map pair and logs a warning record.
    """
    h, w = shape_hi
    p = cfg.patch_size_on(cumulative_stride)
    if p > h or p > w:
        p = min(h, w)
        logger.warning(
            "sampler fallback: patch %d exceeds %dx%d map, using single full-map pair",
            cfg.patch_size_on(cumulative_stride), h, w)
        return [PatchPair((0, 0), (0, 0), p, p * stride)]
    rows = h - p + 1
    cols = w - p + 1
    v = rows * cols
    if cfg.sample_without_replacement:
        count = min(cfg.num_patches, v)
        flat = rng.choice(v, size=count, replace=False)
    else:
        flat = rng.integers(0, v, size=cfg.num_patches)
    pairs = []
    for f in np.asarray(flat, dtype=int):
        r, c = divmod(int(f), cols)
        pairs.append(PatchPair((r, c), (r * stride, c * stride), p, p * stride))
    return pairs


def rfr_loss(unit, x_i: Tensor, x_prev_detached: Tensor,
             pairs: Sequence[PatchPair]) -> Tensor:
    """Mean L1 reconstruction loss over aligned patch pairs.

    ``unit`` carries the reconstructor (``unit.recon``) and the stage stride
    (``unit.stage_stride``). ``x_prev_detached`` must be gradient-free: it is
    the frozen previous stage's output and only the reconstructor and the
    current stage may receive gradients.
    """
    if x_prev_detached.requires_grad:
        raise ValueError("rfr_loss: x_prev must be detached (frozen previous stage output)")
    if not pairs:
        raise ValueError("rfr_loss: empty pair list")
    stride = unit.stage_stride
    size_hi = pairs[0].size_hi
    for pair in pairs:
        if pair.size_hi != size_hi or pair.size_lo != pair.size_hi * stride:
            raise ValueError(
                f"rfr_loss: pair sizes {pair.size_hi}->{pair.size_lo} do not match stage stride {stride}")
    hi = T.crop_batch(x_i, [p.loc_hi for p in pairs], size_hi)
    lo = T.crop_batch(x_prev_detached, [p.loc_lo for p in pairs], size_hi * stride)
    return T.l1_loss(unit.recon(hi), lo)
