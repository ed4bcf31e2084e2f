"""
Synthetic phantoms

Each phantom has a body (label 1) containing an inner structure (label 2) on a
smooth textured background, normalized to [0, 1].
"""

from pathlib import Path
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from ddreg.dataset import ManifestEntry, write_manifest
from ddreg.errors import ConfigurationError
from ddreg.formats import volume_formats
from ddreg.logger import logger
from ddreg.volume import Grid, LabelMap, Volume, normalize_intensity

PhantomKind = Literal["spheres", "ellipsoids"]
BODY = 1
INNER = 2


def phantom_generator(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index, 0x5A17])))


def _ellipsoid(world: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    return np.sum(((world - center) / radii) ** 2, axis=-1) <= 1.0


def make_phantom(
    kind: PhantomKind = "spheres",
    shape: Sequence[int] = (32, 32, 32),
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    seed: int = 0,
    index: int = 0,
) -> Tuple[Volume, LabelMap]:
    """One image/label phantom; the same (seed, index) always gives the same phantom"""
    if kind not in ("spheres", "ellipsoids"):
        raise ConfigurationError(f"Unknown phantom kind {kind!r}")
    rng = phantom_generator(seed, index)
    grid = Grid(shape, spacing)
    extent = np.asarray(grid.shape) * np.asarray(grid.spacing)
    world = np.stack(
        np.meshgrid(*[np.arange(n) * s for n, s in zip(grid.shape, grid.spacing)], indexing="ij"),
        axis=-1,
    )

    center = extent / 2 + rng.uniform(-0.05, 0.05, 3) * extent
    if kind == "spheres":
        radii = np.full(3, rng.uniform(0.28, 0.36) * extent.min())
    else:
        radii = rng.uniform(0.22, 0.38, 3) * extent
    body = _ellipsoid(world, center, radii)

    inner_radius = rng.uniform(0.3, 0.45) * radii.min()
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    inner_center = center + direction * rng.uniform(0.1, 0.4) * (radii.min() - inner_radius)
    inner = _ellipsoid(world, inner_center, np.full(3, inner_radius)) & body

    labels = np.zeros(grid.shape, dtype=np.uint8)
    labels[body] = BODY
    labels[inner] = INNER

    texture = ndimage.gaussian_filter(rng.standard_normal(grid.shape), sigma=2.0)
    texture /= max(np.abs(texture).max(), 1e-12)
    image = 0.05 + 0.45 * body + 0.35 * inner + 0.08 * texture
    image = ndimage.gaussian_filter(image, sigma=0.7)

    return normalize_intensity(Volume(grid, image)), LabelMap(grid, labels)


def split_for(k: int, count: int, fractions: Sequence[float]) -> str:
    """Split of entry `k`: train first, then val, then test"""
    n_val = int(round(count * fractions[1]))
    n_test = int(round(count * fractions[2]))
    if k >= count - n_test:
        return "test"
    if k >= count - n_test - n_val:
        return "val"
    return "train"


def write_synthetic_dataset(
    out_dir: Union[str, Path],
    kind: PhantomKind = "spheres",
    count: int = 10,
    shape: Sequence[int] = (32, 32, 32),
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    seed: int = 0,
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
) -> Path:
    """Write `count` phantoms as ddvol files plus ``manifest.json``; returns the manifest path"""
    if count < 1:
        raise ConfigurationError("Need at least one phantom")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ConfigurationError(f"Split fractions must be three non-negative values summing to 1, got {fractions}")
    out_dir = Path(out_dir)
    write = volume_formats()["ddvol"]

    entries: List[ManifestEntry] = []
    for k in range(count):
        image, labels = make_phantom(kind, shape, spacing, seed, k)
        image_path = write(image, out_dir / f"{kind}_{k:03d}_image")[0]
        labels_path = write(labels, out_dir / f"{kind}_{k:03d}_labels")[0]
        entries.append(ManifestEntry(fixed=image_path, labels=labels_path, split=split_for(k, count, fractions)))

    logger.info(f"Wrote {count} {kind} phantoms to {out_dir}")
    return write_manifest(entries, out_dir / "manifest.json")
