"""
Synthesis of moving images from a single fixed image

Each pair draws its parameters from a counter-based generator keyed on
``(seed, index)``, so a pair can be regenerated in any order and on any worker.
Draw order is gamma, brightness, Euler angles, translation, then the control
point displacements.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ddreg.config import AugmentConfig, worker_threads
from ddreg.errors import DdregError
from ddreg.geometry.common import control_grid_points
from ddreg.geometry.rigid import RigidTransform
from ddreg.geometry.tps import ControlGrid, TpsModel, compose_rigid_then_tps, tps_fit
from ddreg.logger import logger
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume, require_same_grid
from ddreg.warp import warp_nearest, warp_trilinear

T = TypeVar("T")


class AugmentParams(BaseModel):
    """Everything needed to regenerate one synthetic pair"""

    model_config = ConfigDict(extra="forbid")

    seed: int
    index: int
    gamma: float
    brightness: float
    angles_deg: Tuple[float, float, float]
    translation_mm: Tuple[float, float, float]
    center_mm: Tuple[float, float, float]
    control_grid: Tuple[int, int, int]
    control_displacements: List[Tuple[float, float, float]] = Field(
        ...,
        description="Displacement of each TPS control node, x-fastest node order",
    )

    def rigid(self) -> RigidTransform:
        """Rigid part of the ground-truth transform"""
        return RigidTransform.from_euler(self.angles_deg, self.translation_mm, self.center_mm)

    def save(self, path: Union[str, Path]) -> Path:
        """Write a JSON sidecar"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AugmentParams":
        """Read a JSON sidecar"""
        return cls.model_validate(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class AugmentSample:
    """Synthetic moving image with the field that produced it"""

    moving: Volume
    moving_labels: LabelMap
    gt_field: DisplacementField
    params: AugmentParams


def pair_generator(seed: int, index: int) -> np.random.Generator:
    """Independent stream for the pair at `index`"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_in_ball(rng: np.random.Generator, radius: float, count: int = 1) -> np.ndarray:
    """Uniform samples (count, 3) inside a ball of `radius`"""
    direction = rng.standard_normal((count, 3))
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    direction = np.divide(direction, norm, out=np.zeros_like(direction), where=norm > 0)
    length = radius * rng.random((count, 1)) ** (1.0 / 3.0)
    vectors = direction * length
    # keep the norm bound exact under rounding
    actual = np.linalg.norm(vectors, axis=1, keepdims=True)
    scale = np.divide(radius, actual, out=np.ones_like(actual), where=actual > radius)
    return vectors * np.minimum(scale, 1.0)


def sample_params(cfg: AugmentConfig, grid: Grid, index: int) -> AugmentParams:
    """Draw the augmentation parameters of pair `index`"""
    if index < 0:
        raise DdregError(f"Pair index must be non-negative, got {index}")
    rng = pair_generator(cfg.seed, index)
    gamma = rng.uniform(*cfg.gamma_range)
    brightness = rng.uniform(-cfg.brightness_frac, cfg.brightness_frac)
    angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3)
    translation = sample_in_ball(rng, cfg.max_rigid_translation_mm)[0]
    n_nodes = int(np.prod(cfg.control_grid))
    displacements = sample_in_ball(rng, cfg.max_nonrigid_mm, n_nodes)

    first, last = grid.bounds_mm()
    return AugmentParams(
        seed=cfg.seed,
        index=index,
        gamma=float(gamma),
        brightness=float(brightness),
        angles_deg=tuple(float(a) for a in angles),
        translation_mm=tuple(float(t) for t in translation),
        center_mm=tuple(float(c) for c in (first + last) / 2),
        control_grid=cfg.control_grid,
        control_displacements=[tuple(float(v) for v in row) for row in displacements],
    )


def tps_model(params: AugmentParams, grid: Grid) -> TpsModel:
    """Non-rigid part of the ground-truth transform"""
    points = control_grid_points(grid, params.control_grid)
    displacements = np.asarray(params.control_displacements, dtype=float)
    if not np.any(displacements):
        return TpsModel.zero(points)
    return tps_fit(ControlGrid(points, displacements))


def ground_truth_field(params: AugmentParams, grid: Grid) -> DisplacementField:
    """Rebuild the dense field of a pair from its parameters"""
    return compose_rigid_then_tps(params.rigid(), tps_model(params, grid), grid)


def apply_gamma(v: Volume, gamma: float) -> Volume:
    """Gamma correction of a normalized volume"""
    if gamma <= 0:
        raise DdregError(f"Gamma must be positive, got {gamma}")
    if gamma == 1:
        return v
    return v.with_data(np.power(np.clip(v.data, 0.0, 1.0), gamma))


def apply_brightness(v: Volume, shift: float) -> Volume:
    """Additive brightness shift, clamped to [0, 1]"""
    if shift == 0:
        return v
    return v.with_data(np.clip(v.data + shift, 0.0, 1.0))


def generate_pair(
    fixed: Volume,
    fixed_labels: LabelMap,
    cfg: AugmentConfig,
    index: int,
) -> AugmentSample:
    """
    Synthesize the moving image, its labels and the ground-truth field

    The geometric warp is applied first, then gamma and brightness.
    """
    grid = require_same_grid(fixed, fixed_labels)
    if fixed.data.min() < 0 or fixed.data.max() > 1:
        raise DdregError("Fixed image must be normalized to [0, 1]")
    if fixed_labels.is_empty:
        logger.warning(f"Pair {index}: fixed label map is empty")

    params = sample_params(cfg, grid, index)
    field = ground_truth_field(params, grid)

    moving = warp_trilinear(fixed, field)
    moving = apply_brightness(apply_gamma(moving, params.gamma), params.brightness)
    moving_labels = warp_nearest(fixed_labels, field)
    logger.debug(
        f"Pair {index}: gamma={params.gamma:.3f} brightness={params.brightness:+.3f} "
        f"max |u|={float(field.norm().max()):.2f} mm",
    )
    return AugmentSample(moving, moving_labels, field, params)


def ordered_map(fn: Callable[..., T], items: Iterable, threads: Optional[int] = None) -> Iterator[T]:
    """
    Map over `items` on a thread pool, yielding results in submission order
    """
    threads = worker_threads() if threads is None else max(1, threads)
    if threads == 1:
        yield from map(fn, items)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        yield from pool.map(fn, items)


def iter_pairs(
    volumes: Sequence[Tuple[Volume, LabelMap]],
    cfg: AugmentConfig,
    indices: Iterable[int],
    threads: Optional[int] = None,
) -> Iterator[AugmentSample]:
    """Generate pairs for ``(fixed, fixed_labels)`` items with matching pair indices"""
    jobs = list(zip(volumes, indices))
    return ordered_map(lambda job: generate_pair(job[0][0], job[0][1], cfg, job[1]), jobs, threads)
