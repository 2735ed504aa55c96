"""Angular-error metrics and error-map rendering.

MAE is the mean over masked pixels of arccos(pred . gt) in degrees;
err15/err30 are the fractions of masked pixels strictly below those
thresholds. Error maps use a linear blue-to-red colormap clipped at a
configurable maximum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import NormalMap


@dataclass
class EvalReport:
    mae_deg: float
    err15: float
    err30: float
    per_pixel_error: np.ndarray  # [H,W] degrees, zero off mask
    n_valid: int

    def row(self, name: str, n_images: int) -> str:
        return "%s\t%d\t%.4f\t%.4f\t%.4f" % (name, n_images, self.mae_deg, self.err15, self.err30)


def angular_error_map(pred: NormalMap, gt: NormalMap) -> np.ndarray:
    """Per-pixel angle between prediction and ground truth, in degrees.

    Evaluated on the shared mask; off-mask entries are zero.
    """
    if pred.normals.shape != gt.normals.shape:
        raise ValueError(
            f"angular_error_map: shape mismatch {pred.normals.shape} vs {gt.normals.shape}"
        )
    mask = pred.mask & gt.mask
    if not mask.any():
        raise ValueError("angular_error_map: empty shared mask")
    dots = np.einsum("chw,chw->hw", pred.normals, gt.normals)
    errors = np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))
    errors[~mask] = 0.0
    return errors


def summarize(error_map: np.ndarray, mask: np.ndarray) -> EvalReport:
    """MAE and sub-threshold fractions over the masked pixels."""
    mask = np.asarray(mask, dtype=bool)
    vals = error_map[mask]
    if vals.size == 0:
        return EvalReport(0.0, 0.0, 0.0, np.zeros_like(error_map), 0)
    return EvalReport(
        mae_deg=float(vals.mean()),
        err15=float((vals < 15.0).mean()),
        err30=float((vals < 30.0).mean()),
        per_pixel_error=np.where(mask, error_map, 0.0),
        n_valid=int(vals.size),
    )


def evaluate(pred: NormalMap, gt: NormalMap) -> EvalReport:
    """angular_error_map + summarize on the shared mask."""
    errors = angular_error_map(pred, gt)
    return summarize(errors, pred.mask & gt.mask)


def render_error_map(error_map: np.ndarray, mask: np.ndarray, scale_max: float = 90.0) -> np.ndarray:
    """Linear blue (0 deg) to red (>= scale_max) map as [H,W,3] uint8; black off mask."""
    if scale_max <= 0:
        raise ValueError(f"render_error_map: scale_max must be positive, got {scale_max}")
    mask = np.asarray(mask, dtype=bool)
    t = np.clip(error_map / scale_max, 0.0, 1.0)
    img = np.zeros(error_map.shape + (3,), dtype=np.uint8)
    img[..., 0] = np.round(255.0 * t)
    img[..., 2] = np.round(255.0 * (1.0 - t))
    img[~mask] = 0
    return img


REPORT_HEADER = "name\tn_images\tmae_deg\terr15\terr30"


def format_report(rows) -> str:
    """Tab-separated table: one row per object plus a header."""
    return "\n".join([REPORT_HEADER] + list(rows)) + "\n"
