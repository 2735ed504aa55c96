"""Multi-light capture I/O in a DiLiGenT-style directory layout.

A capture directory holds:

    filenames.txt            one image filename per line, defines the order
    light_directions.txt     one "lx ly lz" row per image
    light_intensities.txt    one "r g b" row per image (optional, default 1 1 1)
    mask.png                 8-bit, nonzero = valid pixel
    normal_gt.png            16-bit RGB ground-truth normals (optional)
    <image files>            16-bit RGB PNGs in linear radiance

Text files are ASCII, whitespace separated, with '#' comments. Images are
divided by the per-light intensity channel-wise at load time (calibrated
photometric stereo), so downstream code sees intensity-free radiance.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import DataError

U16_MAX = 65535


@dataclass
class Light:
    """Directional light: unit direction in camera coordinates, z toward camera."""

    direction: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        norm = np.linalg.norm(self.direction)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"Light direction must be unit length, |d|={norm}")
        if self.direction[2] <= 0:
            raise ValueError("Light direction must point out of the surface (z > 0)")
        if np.any(self.intensity <= 0):
            raise ValueError("Light intensity must be positive per channel")


@dataclass
class ImageSet:
    """A set of [3,H,W] observations with per-image lights and a shared mask."""

    images: list  # of np.ndarray [3,H,W] float64
    lights: list  # of Light
    mask: np.ndarray  # [H,W] bool
    name: str = "capture"

    def __post_init__(self):
        if len(self.images) < 1:
            raise ValueError("ImageSet needs at least one image")
        if len(self.images) != len(self.lights):
            raise ValueError(
                f"ImageSet: {len(self.images)} images but {len(self.lights)} lights"
            )
        shape = self.images[0].shape
        for img in self.images:
            if img.shape != shape:
                raise ValueError("ImageSet: images must share one shape")
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != shape[1:]:
            raise ValueError("ImageSet: mask shape must match image H x W")

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def height(self) -> int:
        return self.images[0].shape[1]

    @property
    def width(self) -> int:
        return self.images[0].shape[2]

    def light_matrix(self) -> np.ndarray:
        """Directions stacked to [n,3]."""
        return np.stack([l.direction for l in self.lights])

    def subset(self, indices) -> "ImageSet":
        """Select (image, light) pairs jointly by index list."""
        indices = list(indices)
        if not indices:
            raise ValueError("subset: empty index list")
        return ImageSet(
            images=[self.images[i] for i in indices],
            lights=[self.lights[i] for i in indices],
            mask=self.mask.copy(),
            name=self.name,
        )


@dataclass
class NormalMap:
    """[3,H,W] field of unit normals; zero outside the mask."""

    normals: np.ndarray
    mask: np.ndarray
    degenerate: np.ndarray | None = None  # pixels that hit the unit-fallback path
    tensor: object = None  # autodiff handle when produced by the network

    def __post_init__(self):
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.normals.ndim != 3 or self.normals.shape[0] != 3:
            raise ValueError(f"NormalMap: expected [3,H,W], got {self.normals.shape}")
        if self.mask.shape != self.normals.shape[1:]:
            raise ValueError("NormalMap: mask shape must match H x W")

    def validate_units(self, tol: float = 1e-6):
        norms = np.linalg.norm(self.normals, axis=0)
        bad = np.abs(norms[self.mask] - 1.0) > tol
        if np.any(bad):
            raise ValueError(f"NormalMap: {int(bad.sum())} masked pixels are not unit length")


# ---------------------------------------------------------------------------
# PNG primitives (OpenCV; the only codec that handles 16-bit RGB here)


def _write_png(path: str, array: np.ndarray):
    # cv2 wants BGR ordering for color images
    out = array[..., ::-1] if array.ndim == 3 else array
    if not cv2.imwrite(str(path), out):
        raise DataError(f"failed to write PNG: {path}")


def _read_png(path: str) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise DataError(f"unreadable image: {path}")
    if img.ndim == 3:
        img = img[..., ::-1]  # BGR -> RGB
    return img


def image_to_u16(img: np.ndarray) -> np.ndarray:
    """[3,H,W] float in [0,1] -> [H,W,3] uint16."""
    arr = np.clip(img, 0.0, 1.0)
    return np.round(arr.transpose(1, 2, 0) * U16_MAX).astype(np.uint16)


def u16_to_image(raw: np.ndarray) -> np.ndarray:
    """[H,W,3] uint16 -> [3,H,W] float in [0,1]."""
    return raw.astype(np.float64).transpose(2, 0, 1) / U16_MAX


# ---------------------------------------------------------------------------
# normal-map codec


def encode_normal_png(nmap: NormalMap) -> np.ndarray:
    """Pack unit normals into a 16-bit RGB image: c -> (n_c+1)/2 * 65535.

    Unmasked pixels encode as (0,0,0).
    """
    scaled = np.round((nmap.normals + 1.0) / 2.0 * U16_MAX)
    raw = np.clip(scaled, 0, U16_MAX).astype(np.uint16)
    raw[:, ~nmap.mask] = 0
    return raw.transpose(1, 2, 0)


def decode_normal_png(raw: np.ndarray, mask: np.ndarray | None = None) -> NormalMap:
    """Invert encode_normal_png and re-normalize to unit length.

    When no mask is given, pixels encoded as exactly (0,0,0) are unmasked.
    """
    arr = raw.astype(np.float64).transpose(2, 0, 1)
    if mask is None:
        mask = ~np.all(raw == 0, axis=2)
    mask = np.asarray(mask, dtype=bool)
    normals = arr / U16_MAX * 2.0 - 1.0
    norms = np.linalg.norm(normals, axis=0)
    safe = np.where(norms < 1e-12, 1.0, norms)
    normals = normals / safe
    normals[:, ~mask] = 0.0
    return NormalMap(normals=normals, mask=mask)


# ---------------------------------------------------------------------------
# capture-directory load / save


def _parse_rows(path: str, n_cols: int) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != n_cols:
                raise DataError(f"{path}:{lineno}: expected {n_cols} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.asarray(rows, dtype=np.float64)


def save_capture(dirpath: str, imageset: ImageSet, gt: NormalMap | None = None):
    """Write an ImageSet (and optional ground truth) as a capture directory."""
    os.makedirs(dirpath, exist_ok=True)
    if not imageset.mask.any():
        warnings.warn(f"save_capture: {imageset.name} has an empty mask")
    names = [f"{i:03d}.png" for i in range(imageset.n_images)]
    with open(os.path.join(dirpath, "filenames.txt"), "w", encoding="ascii") as fh:
        fh.write("\n".join(names) + "\n")
    with open(os.path.join(dirpath, "light_directions.txt"), "w", encoding="ascii") as fh:
        for light in imageset.lights:
            fh.write("%.6f %.6f %.6f\n" % tuple(light.direction))
    with open(os.path.join(dirpath, "light_intensities.txt"), "w", encoding="ascii") as fh:
        for light in imageset.lights:
            fh.write("%.6f %.6f %.6f\n" % tuple(light.intensity))
    _write_png(
        os.path.join(dirpath, "mask.png"),
        (imageset.mask * 255).astype(np.uint8),
    )
    for name, img in zip(names, imageset.images):
        _write_png(os.path.join(dirpath, name), image_to_u16(img))
    if gt is not None:
        _write_png(os.path.join(dirpath, "normal_gt.png"), encode_normal_png(gt))


def load_capture(dirpath: str, subset=None):
    """Load a capture directory.

    Returns (ImageSet, NormalMap or None). Image order follows
    filenames.txt exactly; subset (an index list) filters images and
    lights jointly. Image values are divided by the per-light intensity.
    """
    fn_path = os.path.join(dirpath, "filenames.txt")
    if not os.path.isfile(fn_path):
        raise DataError(f"missing filenames.txt in {dirpath}")
    with open(fn_path, "r", encoding="ascii") as fh:
        names = [ln.split("#", 1)[0].strip() for ln in fh]
    names = [n for n in names if n]
    if not names:
        raise DataError(f"{fn_path}: no image filenames listed")

    dir_path = os.path.join(dirpath, "light_directions.txt")
    if not os.path.isfile(dir_path):
        raise DataError(f"missing light_directions.txt in {dirpath}")
    directions = _parse_rows(dir_path, 3)
    if directions.shape[0] != len(names):
        raise DataError(
            f"{dirpath}: {directions.shape[0]} light directions for {len(names)} images"
        )
    int_path = os.path.join(dirpath, "light_intensities.txt")
    if os.path.isfile(int_path):
        intensities = _parse_rows(int_path, 3)
        if intensities.shape[0] != len(names):
            raise DataError(
                f"{dirpath}: {intensities.shape[0]} light intensities for {len(names)} images"
            )
    else:
        intensities = np.ones((len(names), 3))

    mask_path = os.path.join(dirpath, "mask.png")
    if not os.path.isfile(mask_path):
        raise DataError(f"missing mask.png in {dirpath}")
    mask_raw = _read_png(mask_path)
    if mask_raw.ndim == 3:
        mask_raw = mask_raw[..., 0]
    mask = mask_raw > 0
    if not mask.any():
        warnings.warn(f"load_capture: {dirpath} has an empty mask")

    if subset is not None:
        subset = list(subset)
        if not subset:
            raise DataError("subset: empty index list")
        bad = [i for i in subset if not 0 <= i < len(names)]
        if bad:
            raise DataError(f"subset indices out of range: {bad}")
        names = [names[i] for i in subset]
        directions = directions[subset]
        intensities = intensities[subset]

    images, lights = [], []
    for name, d, it in zip(names, directions, intensities):
        raw = _read_png(os.path.join(dirpath, name))
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise DataError(f"{name}: expected an RGB image")
        img = u16_to_image(raw.astype(np.uint16))
        images.append(img / it[:, None, None])
        lights.append(Light(direction=d / np.linalg.norm(d), intensity=it))

    imageset = ImageSet(images=images, lights=lights, mask=mask, name=os.path.basename(dirpath))

    gt = None
    gt_path = os.path.join(dirpath, "normal_gt.png")
    if os.path.isfile(gt_path):
        raw = _read_png(gt_path)
        if raw.dtype != np.uint16:
            raise DataError(f"{gt_path}: ground truth must be 16-bit")
        gt = decode_normal_png(raw, mask=mask)
    return imageset, gt
