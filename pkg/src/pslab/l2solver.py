"""Classical least-squares photometric stereo (Woodham baseline).

Per pixel, solve min ||L g - b||_2 for the scaled normal g from the
gray-converted intensities b, then split g into unit normal and albedo.
Geometry uses the gray channel; albedo is refit per RGB channel against
the recovered shading.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .dataio import ImageSet, NormalMap
from .errors import DataError, NumericalError

COND_LIMIT = 1e8
NORM_FLOOR = 1e-12


@dataclass
class L2Solution:
    normals: NormalMap
    albedo: np.ndarray  # [3,H,W], >= 0
    residual: np.ndarray  # [H,W] RMS of the gray fit


def solve_l2(imageset: ImageSet, trim: bool = False) -> L2Solution:
    """Recover normals and albedo under the Lambertian assumption.

    Needs at least 3 images and a rank-3 light matrix. With trim=True the
    darkest floor(n/4) observations of each pixel are dropped before
    solving, a cheap guard against attached/cast shadows.
    """
    n = imageset.n_images
    if n < 3:
        raise DataError(f"solve_l2: need >= 3 images, got {n}")
    L = imageset.light_matrix()  # [n,3]
    svals = np.linalg.svd(L, compute_uv=False)
    if svals[-1] < 1e-12 * svals[0]:
        cond = np.inf if svals[-1] == 0 else svals[0] / svals[-1]
        raise NumericalError(f"solve_l2: light matrix is rank deficient (cond={cond:.3e})")
    cond = svals[0] / svals[-1]

    h, w = imageset.height, imageset.width
    mask = imageset.mask
    gray = np.stack([img.mean(axis=0) for img in imageset.images])  # [n,H,W]
    b = gray[:, mask]  # [n,P]

    if trim and n >= 4:
        g = _solve_trimmed(L, b, n // 4)
    else:
        g = _solve_full(L, b, cond)  # [3,P]

    gnorm = np.linalg.norm(g, axis=0)
    valid = gnorm >= NORM_FLOOR
    nhat = np.zeros_like(g)
    nhat[:, valid] = g[:, valid] / gnorm[valid]

    # per-channel albedo refit against the recovered shading
    shading = np.maximum(L @ nhat, 0.0)  # [n,P]
    denom = np.maximum((shading**2).sum(axis=0), NORM_FLOOR)
    albedo = np.zeros((3, h, w))
    for c in range(3):
        bc = np.stack([img[c] for img in imageset.images])[:, mask]
        albedo[c, mask] = np.maximum((shading * bc).sum(axis=0) / denom, 0.0)

    residual_map = np.zeros((h, w))
    residual_map[mask] = np.sqrt(((L @ g - b) ** 2).mean(axis=0))

    out_mask = mask.copy()
    inv_idx = np.nonzero(mask)
    out_mask[inv_idx[0][~valid], inv_idx[1][~valid]] = False
    normals = np.zeros((3, h, w))
    normals[:, mask] = nhat
    normals[:, ~out_mask] = 0.0
    return L2Solution(
        normals=NormalMap(normals=normals, mask=out_mask),
        albedo=albedo,
        residual=residual_map,
    )


def _solve_full(L: np.ndarray, b: np.ndarray, cond: float) -> np.ndarray:
    if cond > COND_LIMIT:
        return np.linalg.pinv(L) @ b
    factor = cho_factor(L.T @ L)
    return cho_solve(factor, L.T @ b)


def _solve_trimmed(L: np.ndarray, b: np.ndarray, drop: int) -> np.ndarray:
    """Drop the `drop` darkest observations per pixel, then solve weighted."""
    order = np.argsort(b, axis=0)
    weights = np.ones_like(b)
    np.put_along_axis(weights, order[:drop], 0.0, axis=0)
    # batched 3x3 normal equations: (L^T W L) g = L^T W b
    ata = np.einsum("np,ni,nj->pij", weights, L, L)
    atb = np.einsum("np,ni,np->pi", weights, L, b)
    try:
        return np.linalg.solve(ata, atb).T
    except np.linalg.LinAlgError:
        g = np.zeros((3, b.shape[1]))
        for i in range(b.shape[1]):
            g[:, i] = np.linalg.lstsq(ata[i], atb[i], rcond=None)[0]
        return g
