"""
Backward warping of images, label maps and one-hot stacks

A displacement field Φ sends output voxel ``x`` to the sample point
``x + Φ(x)`` in the moving image. Sample points are clamped to the edge of the
volume, and a clamped coordinate gets no gradient.
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ddreg.errors import GridMismatchError, ShapeError
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume, require_same_grid


@dataclass(frozen=True)
class OneHotStack:
    """One channel per label, shape (L, nx, ny, nz); values may be soft"""

    grid: Grid
    labels: Tuple[int, ...]
    channels: np.ndarray

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=float)
        if channels.shape != (len(self.labels), *self.grid.shape):
            raise ShapeError(
                f"One-hot shape {channels.shape} does not match {len(self.labels)} labels on {self.grid.shape}",
            )
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))

    def channel(self, label: int) -> np.ndarray:
        """Channel of a single label"""
        return self.channels[self.labels.index(label)]


def to_onehot(m: LabelMap, labels: Optional[Sequence[int]] = None) -> OneHotStack:
    """Expand a label map; labels absent from the map give all-zero channels"""
    labels = tuple(m.labels if labels is None else labels)
    channels = np.stack([m.data == label for label in labels]) if labels else np.zeros((0, *m.grid.shape))
    return OneHotStack(m.grid, labels, channels.astype(float))


class TrilinearSampler:
    """
    Interpolation weights of a displacement field, reusable across channels

    Build once per field, then `sample` any number of volumes on the same grid
    and push gradients back with `backward`.
    """

    def __init__(self, field: DisplacementField):
        self.grid = field.grid
        spacing = np.asarray(self.grid.spacing)
        self.spacing = spacing
        self._lower = []
        self._upper = []
        self._frac = []
        self._inside = []
        for axis, n in enumerate(self.grid.shape):
            index = np.arange(n, dtype=float).reshape([-1 if a == axis else 1 for a in range(3)])
            coords = index + field.vectors[axis] / spacing[axis]
            self._inside.append((coords >= 0) & (coords <= n - 1))
            clamped = np.clip(coords, 0, n - 1)
            if n == 1:
                lower = np.zeros(clamped.shape, dtype=np.intp)
                upper = lower
                frac = np.zeros(clamped.shape)
            else:
                lower = np.clip(np.floor(clamped), 0, n - 2).astype(np.intp)
                upper = lower + 1
                frac = clamped - lower
            self._lower.append(lower)
            self._upper.append(upper)
            self._frac.append(frac)

    def _corners(self):
        for cx in (0, 1):
            for cy in (0, 1):
                for cz in (0, 1):
                    yield (cx, cy, cz)

    def _index(self, corner) -> Tuple[np.ndarray, ...]:
        return tuple(
            (self._upper[a] if c else self._lower[a]) for a, c in enumerate(corner)
        )

    def _weight(self, corner, skip: Optional[int] = None) -> np.ndarray:
        weight = 1.0
        for axis, c in enumerate(corner):
            if axis == skip:
                continue
            t = self._frac[axis]
            weight = weight * (t if c else 1.0 - t)
        return weight

    def _check(self, data: np.ndarray) -> np.ndarray:
        data = np.asarray(data, dtype=float)
        if data.shape[-3:] != self.grid.shape:
            raise GridMismatchError(f"Data shape {data.shape} does not match field grid {self.grid.shape}")
        return data

    def sample(self, data: np.ndarray) -> np.ndarray:
        """Warp an array of shape (nx, ny, nz) or (C, nx, ny, nz)"""
        data = self._check(data)
        out = np.zeros(data.shape)
        for corner in self._corners():
            out += self._weight(corner) * data[(Ellipsis, *self._index(corner))]
        return out

    def backward(
        self,
        data: np.ndarray,
        upstream: np.ndarray,
        need_data_grad: bool = True,
    ) -> Tuple[Optional[np.ndarray], np.ndarray]:
        """
        Gradients of ``sum(upstream * sample(data))``

        Returns the gradient with respect to `data` (same shape, or None) and
        with respect to the field (3, nx, ny, nz) in mm⁻¹ units of the loss.
        """
        data = self._check(data)
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != data.shape:
            raise ShapeError(f"Upstream shape {upstream.shape} does not match data {data.shape}")

        grad_data = None
        if need_data_grad:
            grad_data = np.zeros(data.shape)
            flat_grad = grad_data.reshape(-1, self.grid.size)
            flat_up = upstream.reshape(-1, self.grid.size)
            for corner in self._corners():
                target = np.ravel_multi_index(
                    [np.broadcast_to(i, self.grid.shape) for i in self._index(corner)],
                    self.grid.shape,
                ).ravel()
                weight = np.broadcast_to(self._weight(corner), self.grid.shape).ravel()
                for channel in range(flat_grad.shape[0]):
                    flat_grad[channel] += np.bincount(
                        target,
                        weights=weight * flat_up[channel],
                        minlength=self.grid.size,
                    )

        grad_field = np.zeros((3, *self.grid.shape))
        for axis in range(3):
            acc = np.zeros(data.shape)
            for corner in self._corners():
                sign = 1.0 if corner[axis] else -1.0
                acc += sign * self._weight(corner, skip=axis) * data[(Ellipsis, *self._index(corner))]
            per_voxel = acc * upstream
            if per_voxel.ndim == 4:
                per_voxel = per_voxel.sum(axis=0)
            grad_field[axis] = np.where(self._inside[axis], per_voxel, 0.0) / self.spacing[axis]
        return grad_data, grad_field


def warp_trilinear(v: Volume, f: DisplacementField) -> Volume:
    """Backward-warp an intensity volume"""
    require_same_grid(v, f)
    return v.with_data(TrilinearSampler(f).sample(v.data))


def warp_nearest(m: LabelMap, f: DisplacementField) -> LabelMap:
    """Backward-warp a label map with nearest-neighbour lookup"""
    grid = require_same_grid(m, f)
    index = []
    for axis, n in enumerate(grid.shape):
        shape = [-1 if a == axis else 1 for a in range(3)]
        coords = np.arange(n, dtype=float).reshape(shape) + f.vectors[axis] / grid.spacing[axis]
        index.append(np.clip(np.floor(coords + 0.5), 0, n - 1).astype(np.intp))
    return LabelMap(grid, m.data[tuple(index)])


def warp_onehot(s: OneHotStack, f: DisplacementField) -> OneHotStack:
    """Backward-warp every channel of a one-hot stack"""
    require_same_grid(s, f)
    return OneHotStack(s.grid, s.labels, TrilinearSampler(f).sample(s.channels))


def warp_backward(
    v: Volume,
    f: DisplacementField,
    upstream: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * warp_trilinear(v, f))`` with respect to `v` and `f`"""
    require_same_grid(v, f)
    return TrilinearSampler(f).backward(v.data, upstream)
