"""
Common geometry helpers shared by the TPS and rigid transforms
"""

from typing import Sequence

import numpy as np

from ddreg.volume import Grid

# Evaluation is chunked so the (points x control points) distance matrix stays small
MAX_KERNEL_ENTRIES = 2**22


def control_grid_points(grid: Grid, nodes: Sequence[int] = (8, 8, 8)) -> np.ndarray:
    """
    Uniform lattice of control points spanning the voxel-centre bounding box, boundaries included
    """
    first, last = grid.bounds_mm()
    axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(first, last, nodes)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def iter_chunks(n_points: int, n_centers: int):
    """Slices over `n_points` rows that keep each kernel block under the entry budget"""
    step = max(1, MAX_KERNEL_ENTRIES // max(1, n_centers))
    for start in range(0, n_points, step):
        yield slice(start, min(start + step, n_points))
