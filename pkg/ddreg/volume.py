"""
Volumetric data model and preprocessing

Arrays are indexed ``[x, y, z]`` in memory and serialized x-fastest. World
coordinates are millimetres, ``world = origin + index * spacing`` with the origin
at the centre of voxel ``(0, 0, 0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import xarray as xr
from scipy import ndimage

from ddreg.errors import (
    EmptyMaskError,
    GridMismatchError,
    LabelNotFoundError,
    NonFiniteError,
    ShapeError,
)
from ddreg.logger import logger

AXES = ("x", "y", "z")


def _triple(values, kind) -> tuple:
    values = tuple(kind(v) for v in np.broadcast_to(np.asarray(values), (3,)))
    return values


def _frozen(array: np.ndarray, dtype) -> np.ndarray:
    array = np.array(array, dtype=dtype, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class Grid:
    """Voxel lattice with physical spacing and origin (all in millimetres)"""

    shape: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "shape", _triple(self.shape, int))
        object.__setattr__(self, "spacing", _triple(self.spacing, float))
        object.__setattr__(self, "origin", _triple(self.origin, float))
        if any(n < 1 for n in self.shape):
            raise ShapeError(f"Grid shape must be positive, got {self.shape}")
        if not all(s > 0 and math.isfinite(s) for s in self.spacing):
            raise ShapeError(f"Grid spacing must be positive, got {self.spacing}")

    @property
    def size(self) -> int:
        """Number of voxels"""
        return int(np.prod(self.shape))

    @property
    def extent_mm(self) -> np.ndarray:
        """Physical size of the voxel box, edge to edge"""
        return np.asarray(self.shape) * np.asarray(self.spacing)

    def voxel_to_world(self, index) -> np.ndarray:
        """Map voxel indices (..., 3) to world millimetres"""
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def world_to_voxel(self, point) -> np.ndarray:
        """Map world millimetres (..., 3) to continuous voxel indices"""
        return (np.asarray(point, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel centre, shape (nx, ny, nz, 3)"""
        axes = [o + s * np.arange(n) for n, s, o in zip(self.shape, self.spacing, self.origin)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def bounds_mm(self) -> Tuple[np.ndarray, np.ndarray]:
        """World positions of the first and last voxel centres"""
        return self.voxel_to_world(np.zeros(3)), self.voxel_to_world(np.asarray(self.shape) - 1)

    def to_dict(self) -> dict:
        """JSON friendly representation"""
        return {"shape": list(self.shape), "spacing": list(self.spacing), "origin": list(self.origin)}


@dataclass(frozen=True)
class Volume:
    """Scalar intensity image on a grid"""

    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.shape != self.grid.shape:
            raise ShapeError(f"Volume data shape {data.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "Volume":
        """Wrap an ``[x, y, z]`` array"""
        data = np.asarray(data)
        return cls(Grid(data.shape, spacing, origin), data)

    def with_data(self, data) -> "Volume":
        """Same grid, new values"""
        return Volume(self.grid, data)

    def to_dataarray(self, name: str = "intensity") -> xr.DataArray:
        """Labelled view with world coordinates in millimetres"""
        coords = {
            axis: (axis, o + s * np.arange(n), {"units": "mm", "axis": axis.upper()})
            for axis, n, s, o in zip(AXES, self.grid.shape, self.grid.spacing, self.grid.origin)
        }
        return xr.DataArray(
            np.array(self.data),
            dims=AXES,
            coords=coords,
            name=name,
            attrs={"spacing": list(self.grid.spacing), "origin": list(self.grid.origin)},
        )

    @classmethod
    def from_dataarray(cls, da: xr.DataArray) -> "Volume":
        """Inverse of `to_dataarray`"""
        da = da.transpose(*AXES)
        return cls(Grid(da.shape, da.attrs["spacing"], da.attrs["origin"]), da.values)


@dataclass(frozen=True)
class LabelMap:
    """Segmentation labels (uint8) on a grid"""

    grid: Grid
    data: np.ndarray
    labels: Tuple[int, ...] = field(init=False)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.size and (raw.min() < 0 or raw.max() > 255):
            raise ShapeError("Label values must fit in an unsigned byte")
        data = _frozen(raw, np.uint8)
        if data.shape != self.grid.shape:
            raise ShapeError(f"Label data shape {data.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "data", data)
        present = np.unique(data)
        object.__setattr__(self, "labels", tuple(int(v) for v in present if v != 0))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> "LabelMap":
        """Wrap an ``[x, y, z]`` integer array"""
        data = np.asarray(data)
        return cls(Grid(data.shape, spacing, origin), data)

    @property
    def is_empty(self) -> bool:
        """True when no voxel carries a nonzero label"""
        return len(self.labels) == 0

    def mask(self, label: int) -> np.ndarray:
        """Boolean mask of one label"""
        return self.data == label


@dataclass(frozen=True)
class DisplacementField:
    """Backward-warp displacement in millimetres, shape (3, nx, ny, nz)"""

    grid: Grid
    vectors: np.ndarray

    def __post_init__(self):
        vectors = _frozen(self.vectors, np.float64)
        if vectors.shape != (3, *self.grid.shape):
            raise ShapeError(
                f"Displacement shape {vectors.shape} does not match (3, {self.grid.shape})",
            )
        if not np.isfinite(vectors).all():
            raise NonFiniteError("Displacement field contains non-finite vectors")
        object.__setattr__(self, "vectors", vectors)

    @classmethod
    def zeros(cls, grid: Grid) -> "DisplacementField":
        """Identity warp"""
        return cls(grid, np.zeros((3, *grid.shape)))

    def norm(self) -> np.ndarray:
        """Euclidean vector length per voxel"""
        return np.sqrt(np.sum(self.vectors**2, axis=0))


Spatial = Union[Volume, LabelMap, DisplacementField]
S = TypeVar("S", Volume, LabelMap, DisplacementField)


def require_same_grid(*items) -> Grid:
    """Check that every item lives on the same grid and return it"""
    grid = items[0].grid
    for item in items[1:]:
        if item.grid != grid:
            raise GridMismatchError(f"Grid mismatch: {grid} != {item.grid}")
    return grid


def _check_finite(obj: Spatial):
    values = obj.vectors if isinstance(obj, DisplacementField) else obj.data
    if not np.isfinite(values).all():
        raise NonFiniteError("Input contains non-finite values")


def _nearest_index(coords: np.ndarray, n: int) -> np.ndarray:
    return np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp)


def resample_to_grid(obj: S, grid: Grid) -> S:
    """
    Sample `obj` at the voxel centres of `grid`

    Volumes and displacement fields are interpolated trilinearly, label maps take
    the nearest voxel. Samples outside the source are clamped to the edge.
    Displacement vectors are millimetres and are not rescaled.
    """
    _check_finite(obj)
    if obj.grid == grid:
        return obj

    source = obj.grid
    coords = source.world_to_voxel(grid.world_coordinates())
    coords = np.moveaxis(coords, -1, 0)

    if isinstance(obj, LabelMap):
        index = tuple(_nearest_index(coords[a], source.shape[a]) for a in range(3))
        return LabelMap(grid, obj.data[index])

    def _linear(data):
        return ndimage.map_coordinates(data, coords, order=1, mode="nearest")

    if isinstance(obj, DisplacementField):
        return DisplacementField(grid, np.stack([_linear(c) for c in obj.vectors]))
    return Volume(grid, _linear(obj.data))


def resample_isotropic(obj: S, target_spacing: float) -> S:
    """
    Resample to an isotropic spacing, keeping the first voxel centre in place
    """
    if not target_spacing > 0:
        raise ShapeError(f"Target spacing must be positive, got {target_spacing}")
    _check_finite(obj)
    source = obj.grid
    shape = [
        max(1, int(round(n * s / target_spacing))) for n, s in zip(source.shape, source.spacing)
    ]
    grid = Grid(shape, (target_spacing,) * 3, source.origin)
    logger.debug(f"Resampling {source.shape}@{source.spacing} to {grid.shape}@{grid.spacing}")
    return resample_to_grid(obj, grid)


def resized_grid(source: Grid, shape: Sequence[int]) -> Grid:
    """Grid with a new shape covering the same voxel box as `source`"""
    shape = _triple(shape, int)
    if any(n < 1 for n in shape):
        raise ShapeError(f"Resize shape must be positive, got {shape}")
    spacing = np.asarray(source.spacing) * np.asarray(source.shape) / np.asarray(shape)
    origin = np.asarray(source.origin) - np.asarray(source.spacing) / 2 + spacing / 2
    return Grid(shape, spacing, origin)


def resize(obj: S, shape: Sequence[int]) -> S:
    """
    Resize to an exact voxel shape, rescaling spacing so the world box is unchanged
    """
    values = obj.vectors if isinstance(obj, DisplacementField) else obj.data
    if values.size == 0:
        raise ShapeError("Cannot resize an empty volume")
    return resample_to_grid(obj, resized_grid(obj.grid, shape))


@dataclass(frozen=True)
class CropRecord:
    """Inclusive voxel box taken out of a source grid"""

    lower: Tuple[int, int, int]
    upper: Tuple[int, int, int]
    source: Grid

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        """Numpy slices selecting the box"""
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.lower, self.upper))

    @property
    def grid(self) -> Grid:
        """Grid of the cropped box"""
        shape = np.asarray(self.upper) - np.asarray(self.lower) + 1
        return Grid(shape, self.source.spacing, self.source.voxel_to_world(self.lower))

    def apply(self, obj: S) -> S:
        """Crop a volume or label map that lives on the source grid"""
        if obj.grid != self.source:
            raise GridMismatchError(f"Crop source grid {self.source} != {obj.grid}")
        if isinstance(obj, DisplacementField):
            return DisplacementField(self.grid, obj.vectors[(slice(None), *self.slices)])
        return type(obj)(self.grid, obj.data[self.slices])

    def invert(self, obj: S, fill: float = 0) -> S:
        """Paste a cropped volume or label map back into the source grid"""
        if obj.grid != self.grid:
            raise GridMismatchError(f"Cropped grid {self.grid} != {obj.grid}")
        if isinstance(obj, DisplacementField):
            out = np.full((3, *self.source.shape), fill, dtype=float)
            out[(slice(None), *self.slices)] = obj.vectors
            return DisplacementField(self.source, out)
        out = np.full(self.source.shape, fill, dtype=obj.data.dtype)
        out[self.slices] = obj.data
        return type(obj)(self.source, out)


def mask_bounding_box(m: LabelMap, margin_mm: float = 0.0):
    """Tight box of all labelled voxels dilated by a margin and clamped to the grid"""
    if m.is_empty:
        raise EmptyMaskError("Mask is empty, the sample cannot be cropped")
    index = np.argwhere(m.data > 0)
    margin = np.ceil(margin_mm / np.asarray(m.grid.spacing) - 1e-9).astype(int)
    margin = np.maximum(margin, 0)
    lower = np.maximum(index.min(axis=0) - margin, 0)
    upper = np.minimum(index.max(axis=0) + margin, np.asarray(m.grid.shape) - 1)
    return tuple(int(v) for v in lower), tuple(int(v) for v in upper)


def crop_to_mask(v: Volume, m: LabelMap, margin_mm: float = 0.0) -> Tuple[Volume, CropRecord]:
    """Crop a volume around the labelled region of `m`"""
    require_same_grid(v, m)
    lower, upper = mask_bounding_box(m, margin_mm)
    record = CropRecord(lower, upper, v.grid)
    logger.debug(f"Cropping {v.grid.shape} to box {lower}..{upper}")
    return record.apply(v), record


def normalize_intensity(v: Volume) -> Volume:
    """Affine rescale to [0, 1]; a constant volume becomes all zeros"""
    _check_finite(v)
    low = v.data.min()
    high = v.data.max()
    if high == low:
        logger.warning("Constant volume normalized to zeros")
        return v.with_data(np.zeros(v.grid.shape))
    if low == 0 and high == 1:
        return v
    return v.with_data((v.data - low) / (high - low))


def centroid_mm(m: LabelMap, label: int) -> np.ndarray:
    """World-space centroid of the voxels carrying `label`"""
    if m.is_empty:
        raise EmptyMaskError("Label map is empty")
    if label not in m.labels:
        raise LabelNotFoundError(f"Label {label} not present (have {m.labels})")
    index = np.argwhere(m.data == label)
    return m.grid.voxel_to_world(index).mean(axis=0)


def preprocess(
    image: Volume,
    labels: LabelMap,
    target_spacing: Optional[float] = 1.0,
    crop_margin_mm: Optional[float] = None,
    shape: Optional[Sequence[int]] = None,
) -> Tuple[Volume, LabelMap, Optional[CropRecord]]:
    """
    Isotropic resample, crop around the labels, resize and normalize an image/label pair
    """
    require_same_grid(image, labels)
    if target_spacing is not None:
        image = resample_isotropic(image, target_spacing)
        labels = resample_isotropic(labels, target_spacing)

    record = None
    if crop_margin_mm is not None:
        image, record = crop_to_mask(image, labels, crop_margin_mm)
        labels = record.apply(labels)

    if shape is not None:
        image = resize(image, shape)
        labels = resize(labels, shape)

    return normalize_intensity(image), labels, record


def uncrop(obj: S, record: CropRecord, fill: float = 0) -> S:
    """Paste a cropped object back into the grid it was cropped from"""
    return record.invert(obj, fill)


def resample_field(field: DisplacementField, grid: Grid) -> DisplacementField:
    """Move a displacement field to another grid; vectors stay in millimetres"""
    return resample_to_grid(field, grid)


def resize_field(field: DisplacementField, shape: Sequence[int]) -> DisplacementField:
    """Resize a displacement field over the same world box"""
    return resize(field, shape)
