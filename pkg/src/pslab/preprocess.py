"""Observation normalization: divide each pixel's per-image value by the
L2 norm of that pixel across the whole image set, independently per RGB
channel. Removes spatially varying albedo before the data reaches the
network or the solver.
"""

from __future__ import annotations

import numpy as np

from .dataio import ImageSet


def normalize_observations(imageset: ImageSet, eps: float = 1e-8) -> ImageSet:
    """Per pixel-channel: i'_j = i_j / sqrt(sum_k i_k^2 + eps^2).

    eps guards the all-dark pixel (output is zero there); unmasked pixels
    are zeroed. Returns a new ImageSet sharing lights and mask.
    """
    if imageset.n_images < 1:
        raise ValueError("normalize_observations: empty image set")
    stack = np.stack(imageset.images)  # [n,3,H,W]
    denom = np.sqrt((stack**2).sum(axis=0) + eps**2)
    out = stack / denom[None]
    out[:, :, ~imageset.mask] = 0.0
    return ImageSet(
        images=[out[i] for i in range(out.shape[0])],
        lights=list(imageset.lights),
        mask=imageset.mask.copy(),
        name=imageset.name,
    )
