"""Synthetic multi-light rendering with ground-truth normals.

Pixel model: i = rho(n,l,v) * max(n.l, 0) + eps, per RGB channel, with an
orthographic camera fixed at v = (0,0,1) and linear radiance throughout.
rho is either the plain albedo (lambertian) or albedo plus a Blinn-Phong
lobe. Cast shadows, when enabled, are computed by marching the height
field toward each light and zeroing the reflectance term of occluded
pixels; Gaussian noise is added last and the result is clamped to [0,1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import ImageSet, Light, NormalMap

VIEW_DIR = np.array([0.0, 0.0, 1.0])


@dataclass
class Material:
    """Reflectance parameters; albedo may be overridden per pixel by the scene."""

    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.7))
    specular_strength: float = 0.0
    shininess: float = 16.0
    model: str = "lambertian"  # or "blinn_phong"

    def __post_init__(self):
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise ValueError("Material albedo must lie in [0,1]")
        if self.specular_strength < 0:
            raise ValueError("Material specular_strength must be >= 0")
        if self.shininess < 1:
            raise ValueError("Material shininess must be >= 1")
        if self.model not in ("lambertian", "blinn_phong"):
            raise ValueError(f"unknown reflectance model {self.model!r}")


@dataclass
class NoiseModel:
    """Realization of the imaging-model error term."""

    sigma: float = 0.0
    shadow_casting: bool = False
    seed: int = 0


@dataclass
class Scene:
    """Height field over an H x W grid with per-pixel albedo and a mask."""

    height: np.ndarray  # [H,W] in pixel units of elevation
    normals: np.ndarray  # [3,H,W] unit on mask
    mask: np.ndarray  # [H,W] bool
    albedo: np.ndarray  # [3,H,W]
    material: Material
    name: str = "scene"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        norms = np.linalg.norm(self.normals, axis=0)
        if np.any(np.abs(norms[self.mask] - 1.0) > 1e-9):
            raise ValueError("Scene: normals must be unit length on masked pixels")

    def ground_truth(self) -> NormalMap:
        normals = self.normals.copy()
        normals[:, ~self.mask] = 0.0
        return NormalMap(normals=normals, mask=self.mask.copy())


def _grid(h: int, w: int):
    """World coordinates per pixel: x right, y up, origin at the grid center."""
    ys, xs = np.mgrid[0:h, 0:w]
    x = xs - (w - 1) / 2.0
    y = (h - 1) / 2.0 - ys
    return x, y


def normals_from_height(height: np.ndarray) -> np.ndarray:
    """Unit normals from central differences of a height field (y axis up)."""
    zx = np.gradient(height, axis=1)
    zy = -np.gradient(height, axis=0)  # row index runs opposite to +y
    n = np.stack([-zx, -zy, np.ones_like(height)])
    return n / np.linalg.norm(n, axis=0)


def scene_from_height(height, albedo=0.7, material=None, mask=None, name="height") -> Scene:
    """Build a Scene from an arbitrary height field, normals by differences."""
    height = np.asarray(height, dtype=np.float64)
    h, w = height.shape
    if mask is None:
        mask = np.ones((h, w), dtype=bool)
    return Scene(
        height=height,
        normals=normals_from_height(height),
        mask=mask,
        albedo=_albedo_map(albedo, h, w),
        material=material or Material(),
        name=name,
    )


def _albedo_map(albedo, h: int, w: int) -> np.ndarray:
    arr = np.asarray(albedo, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape == (3,):
        return np.broadcast_to(arr[:, None, None], (3, h, w)).copy()
    if arr.shape == (3, h, w):
        return arr.copy()
    raise ValueError(f"albedo must be scalar, RGB, or [3,H,W]; got {arr.shape}")


def make_sphere(size: int, radius=None, albedo=0.7, material=None, name="sphere") -> Scene:
    """Front hemisphere of a sphere; analytic (exact) normals."""
    radius = radius if radius is not None else 0.45 * size
    x, y = _grid(size, size)
    r2 = x**2 + y**2
    inside = r2 <= radius**2 * (1.0 - 1e-9)
    z = np.sqrt(np.maximum(radius**2 - r2, 0.0))
    normals = np.stack([x, y, z]) / radius
    normals[:, ~inside] = 0.0
    normals[2, ~inside] = 1.0  # placeholder off-mask
    return Scene(
        height=z,
        normals=normals,
        mask=inside,
        albedo=_albedo_map(albedo, size, size),
        material=material or Material(),
        name=name,
    )


def make_paraboloid(size: int, peak=None, albedo=0.7, material=None, name="paraboloid") -> Scene:
    """Elliptic dome z = peak * (1 - (x/a)^2 - (y/a)^2); analytic normals."""
    peak = peak if peak is not None else 0.35 * size
    a = 0.5 * (size - 1)
    x, y = _grid(size, size)
    z = peak * (1.0 - (x / a) ** 2 - (y / a) ** 2)
    zx = -2.0 * peak * x / a**2
    zy = -2.0 * peak * y / a**2
    n = np.stack([-zx, -zy, np.ones_like(z)])
    n /= np.linalg.norm(n, axis=0)
    return Scene(
        height=z,
        normals=n,
        mask=np.ones((size, size), dtype=bool),
        albedo=_albedo_map(albedo, size, size),
        material=material or Material(),
        name=name,
    )


def make_wave(
    size: int,
    amplitude=None,
    fx: float = 1.5,
    fy: float = 1.0,
    phase: float = 0.0,
    albedo=0.7,
    material=None,
    name="wave",
) -> Scene:
    """Sinusoidal relief; analytic normals."""
    amplitude = amplitude if amplitude is not None else 0.08 * size
    x, y = _grid(size, size)
    wx = 2.0 * np.pi * fx / size
    wy = 2.0 * np.pi * fy / size
    z = amplitude * np.sin(wx * x + phase) * np.cos(wy * y)
    zx = amplitude * wx * np.cos(wx * x + phase) * np.cos(wy * y)
    zy = -amplitude * wy * np.sin(wx * x + phase) * np.sin(wy * y)
    n = np.stack([-zx, -zy, np.ones_like(z)])
    n /= np.linalg.norm(n, axis=0)
    return Scene(
        height=z,
        normals=n,
        mask=np.ones((size, size), dtype=bool),
        albedo=_albedo_map(albedo, size, size),
        material=material or Material(),
        name=name,
    )


# ---------------------------------------------------------------------------
# shading


def shade_pixel(n, light: Light, material: Material, v=VIEW_DIR, noise: float = 0.0) -> np.ndarray:
    """Shade one pixel: rho(n,l,v) * max(n.l, 0) + noise, clamped at 0."""
    n = np.asarray(n, dtype=np.float64)
    ndotl = max(float(n @ light.direction), 0.0)
    rho = material.albedo.copy()
    if material.model == "blinn_phong":
        half = light.direction + v
        half = half / np.linalg.norm(half)
        ndoth = max(float(n @ half), 0.0)
        rho = rho + material.specular_strength * ndoth**material.shininess
    return np.maximum(light.intensity * rho * ndotl + noise, 0.0)


def _shade_image(scene: Scene, light: Light, lit: np.ndarray) -> np.ndarray:
    """Vectorized shade of every pixel; `lit` zeroes the reflectance term."""
    n = scene.normals
    ndotl = np.maximum(np.einsum("chw,c->hw", n, light.direction), 0.0)
    rho = scene.albedo.copy()
    mat = scene.material
    if mat.model == "blinn_phong":
        half = light.direction + VIEW_DIR
        half = half / np.linalg.norm(half)
        ndoth = np.maximum(np.einsum("chw,c->hw", n, half), 0.0)
        rho = rho + mat.specular_strength * ndoth**mat.shininess
    img = light.intensity[:, None, None] * rho * (ndotl * lit)
    img[:, ~scene.mask] = 0.0
    return img


def _cast_shadow_mask(scene: Scene, light: Light, step: float = 0.5) -> np.ndarray:
    """True where the light is occluded by the height field (ray march)."""
    h, w = scene.height.shape
    d = light.direction
    planar = np.hypot(d[0], d[1])
    if planar < 1e-12:
        return np.zeros((h, w), dtype=bool)  # light straight overhead
    ys, xs = np.mgrid[0:h, 0:w]
    # pixel steps: +x is +col, +y is -row
    sx, sy, sz = d[0] / planar, d[1] / planar, d[2] / planar
    max_t = np.hypot(h, w)
    bias = 1e-4 * max(np.ptp(scene.height), 1.0) + 1e-9
    occluded = np.zeros((h, w), dtype=bool)
    alive = scene.mask.copy()
    t = step
    while t <= max_t and alive.any():
        px = xs + t * sx
        py = ys - t * sy
        inside = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        alive &= inside
        if not alive.any():
            break
        ai, aj = np.nonzero(alive)
        fx, fy = px[alive], py[alive]
        x0 = np.clip(fx.astype(int), 0, w - 2)
        y0 = np.clip(fy.astype(int), 0, h - 2)
        tx, ty = fx - x0, fy - y0
        z00 = scene.height[y0, x0]
        z01 = scene.height[y0, x0 + 1]
        z10 = scene.height[y0 + 1, x0]
        z11 = scene.height[y0 + 1, x0 + 1]
        z_surf = (1 - ty) * ((1 - tx) * z00 + tx * z01) + ty * ((1 - tx) * z10 + tx * z11)
        z_ray = scene.height[ai, aj] + t * sz
        hit = z_surf > z_ray + bias
        occluded[ai[hit], aj[hit]] = True
        alive[ai[hit], aj[hit]] = False
        t += step
    return occluded


def render_scene(scene: Scene, lights, noise_model: NoiseModel | None = None):
    """Render one image per light; returns (ImageSet, ground-truth NormalMap)."""
    lights = list(lights)
    if not lights:
        raise ValueError("render_scene: need at least one light")
    if not scene.mask.any():
        raise ValueError("render_scene: empty scene mask")
    noise_model = noise_model or NoiseModel()
    rng = np.random.default_rng(noise_model.seed)
    images = []
    for light in lights:
        lit = np.ones_like(scene.height)
        if noise_model.shadow_casting:
            lit[_cast_shadow_mask(scene, light)] = 0.0
        img = _shade_image(scene, light, lit)
        if noise_model.sigma > 0:
            img = img + rng.normal(0.0, noise_model.sigma, size=img.shape)
        img = np.clip(img, 0.0, 1.0)
        img[:, ~scene.mask] = 0.0
        images.append(img)
    imageset = ImageSet(images=images, lights=lights, mask=scene.mask.copy(), name=scene.name)
    return imageset, scene.ground_truth()


# ---------------------------------------------------------------------------
# light sampling


# ---------------------------------------------------------------------------
# synthetic dataset generation


def random_scene(rng: np.random.Generator, size: int, material: str = "blinn_phong", name="scene") -> Scene:
    """Random shape (sphere / paraboloid / wave) with textured albedo."""
    base = rng.uniform(0.25, 0.85, size=3)
    x, _ = _grid(size, size)
    fx = rng.uniform(0.5, 2.5)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    texture = 0.12 * np.sin(2.0 * np.pi * fx * x / size + phase)
    albedo = np.clip(base[:, None, None] + texture[None], 0.1, 0.95)
    if material == "blinn_phong":
        mat = Material(
            albedo=base,
            specular_strength=rng.uniform(0.3, 0.9),
            shininess=rng.uniform(8.0, 48.0),
            model="blinn_phong",
        )
    elif material == "lambertian":
        mat = Material(albedo=base)
    else:
        raise ValueError(f"unknown material kind {material!r}")
    kind = rng.integers(0, 3)
    if kind == 0:
        scene = make_sphere(size, radius=rng.uniform(0.38, 0.48) * size, material=mat, name=name)
    elif kind == 1:
        scene = make_paraboloid(size, peak=rng.uniform(0.2, 0.45) * size, material=mat, name=name)
    else:
        scene = make_wave(
            size,
            amplitude=rng.uniform(0.05, 0.12) * size,
            fx=rng.uniform(0.8, 2.2),
            fy=rng.uniform(0.8, 2.2),
            phase=rng.uniform(0.0, 2.0 * np.pi),
            material=mat,
            name=name,
        )
    scene.albedo = albedo * scene.mask[None]
    return scene


def make_dataset(
    n_scenes: int,
    size: int,
    n_lights: int,
    seed: int,
    material: str = "blinn_phong",
    sigma: float = 0.0,
    shadow_casting: bool = False,
):
    """Render n_scenes random scenes; returns a list of (ImageSet, NormalMap)."""
    rng = np.random.default_rng(seed)
    dataset = []
    for i in range(n_scenes):
        scene = random_scene(rng, size, material, name=f"scene_{i:03d}")
        lights = sample_lights(n_lights, seed=int(rng.integers(0, 2**31)))
        noise = NoiseModel(
            sigma=sigma, shadow_casting=shadow_casting, seed=int(rng.integers(0, 2**31))
        )
        dataset.append(render_scene(scene, lights, noise))
    return dataset


GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


def sample_lights(count: int, seed: int = 0, max_polar_deg: float = 60.0):
    """Quasi-uniform directions on the upper-hemisphere cap, unit intensity.

    A Fibonacci spiral over the cap, rotated by a seeded azimuth, so the
    same seed always produces the same list.
    """
    if count < 1:
        raise ValueError(f"sample_lights: count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    phi0 = rng.uniform(0.0, 2.0 * np.pi)
    z_min = np.cos(np.deg2rad(max_polar_deg))
    lights = []
    for k in range(count):
        z = 1.0 - (k + 0.5) / count * (1.0 - z_min)
        r = np.sqrt(max(1.0 - z * z, 0.0))
        phi = k * GOLDEN_ANGLE + phi0
        d = np.array([r * np.cos(phi), r * np.sin(phi), z])
        lights.append(Light(direction=d / np.linalg.norm(d)))
    return lights
