"""
Three-dimensional thin-plate splines

The spline maps a world point to ``T(x) = A [x; 1] + sum_i w_i * phi(|x - p_i|)``
with the biharmonic kernel ``phi(r) = r``. `affine` holds ``A`` as a 3x4 matrix
(linear part | translation), so a spline fitted to all-zero displacements has
``A = [I | 0]``. Displacements are ``T(x) - x``.
"""

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from ddreg.errors import ShapeError, TpsFitError
from ddreg.geometry.common import iter_chunks
from ddreg.geometry.rigid import RigidTransform
from ddreg.logger import logger
from ddreg.volume import DisplacementField, Grid

DEFAULT_RIDGE = 1e-8


@dataclass(frozen=True)
class ControlGrid:
    """Control points (N, 3) and their prescribed displacements (N, 3), in mm"""

    points: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=float).reshape(-1, 3)
        displacements = np.array(self.displacements, dtype=float).reshape(-1, 3)
        if points.shape != displacements.shape:
            raise ShapeError("Need exactly one displacement per control point")
        if not np.isfinite(displacements).all():
            raise TpsFitError("Control displacements must be finite")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "displacements", displacements)


@dataclass(frozen=True)
class TpsModel:
    """Fitted thin-plate-spline coefficients"""

    kernel_weights: np.ndarray
    affine: np.ndarray
    control_points: np.ndarray
    ridge: float = 0.0

    @classmethod
    def zero(cls, control_points: np.ndarray) -> "TpsModel":
        """Spline that leaves every point where it is"""
        control_points = np.asarray(control_points, dtype=float).reshape(-1, 3)
        affine = np.hstack([np.eye(3), np.zeros((3, 1))])
        return cls(np.zeros_like(control_points), affine, control_points, 0.0)

    def to_dict(self) -> dict:
        """JSON friendly representation"""
        return {
            "points": self.control_points.tolist(),
            "weights": self.kernel_weights.tolist(),
            "affine": self.affine.tolist(),
            "ridge": self.ridge,
        }

    @classmethod
    def from_dict(cls, data: Union[dict, str]) -> "TpsModel":
        """Inverse of `to_dict`, also accepts a JSON string"""
        if isinstance(data, str):
            data = json.loads(data)
        return cls(
            np.asarray(data["weights"], dtype=float).reshape(-1, 3),
            np.asarray(data["affine"], dtype=float).reshape(3, 4),
            np.asarray(data["points"], dtype=float).reshape(-1, 3),
            float(data["ridge"]),
        )


def _polynomial(points: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((len(points), 1)), points])


def tps_fit(cg: ControlGrid, ridge: float = DEFAULT_RIDGE) -> TpsModel:
    """
    Solve the interpolation system for the kernel weights and affine part

    ``ridge`` is added to the kernel block diagonal; with ``ridge = 0`` the fit
    reproduces every control displacement exactly.
    """
    if ridge < 0:
        raise TpsFitError(f"Ridge must be non-negative, got {ridge}")

    points = cg.points
    n = len(points)
    poly = _polynomial(points)
    if n < 4 or np.linalg.matrix_rank(poly) < 4:
        raise TpsFitError(
            f"Control points are coplanar or too few ({n}); a 3D spline needs 4 non-coplanar points",
        )

    system = np.zeros((n + 4, n + 4))
    system[:n, :n] = cdist(points, points) + ridge * np.eye(n)
    system[:n, n:] = poly
    system[n:, :n] = poly.T

    rhs = np.zeros((n + 4, 3))
    rhs[:n] = cg.displacements

    try:
        solution = scipy.linalg.solve(system, rhs, assume_a="sym")
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise TpsFitError(f"Singular spline system, duplicate control points? ({e})") from e
    if not np.isfinite(solution).all():
        raise TpsFitError("Spline system is too ill-conditioned to solve")

    weights = solution[:n]
    coefficients = solution[n:]
    # displacement = c0 + x @ C, so the point map is x -> (I + C^T) x + c0
    affine = np.hstack([np.eye(3) + coefficients[1:].T, coefficients[0][:, None]])
    logger.debug(f"Fitted TPS on {n} control points (ridge={ridge})")
    return TpsModel(weights, affine, points.copy(), float(ridge))


def tps_evaluate_points(model: TpsModel, points: np.ndarray) -> np.ndarray:
    """Displacement (..., 3) of the spline at world points (..., 3)"""
    points = np.asarray(points, dtype=float)
    flat = points.reshape(-1, 3)
    linear = model.affine[:, :3] - np.eye(3)
    out = flat @ linear.T + model.affine[:, 3]
    if np.any(model.kernel_weights):
        for chunk in iter_chunks(len(flat), len(model.control_points)):
            out[chunk] += cdist(flat[chunk], model.control_points) @ model.kernel_weights
    return out.reshape(points.shape)


def tps_evaluate(model: TpsModel, grid: Grid) -> DisplacementField:
    """Dense displacement field of the spline over every voxel of `grid`"""
    displacement = tps_evaluate_points(model, grid.world_coordinates())
    return DisplacementField(grid, np.moveaxis(displacement, -1, 0))


def compose_rigid_then_tps(r: RigidTransform, model: TpsModel, grid: Grid) -> DisplacementField:
    """
    Backward-warp field of the rigid motion followed by the spline

    ``x + field(x) = T_tps(T_rigid(x))``, evaluated exactly per voxel.
    """
    world = grid.world_coordinates()
    rigid = r.displacement(world)
    field = rigid + tps_evaluate_points(model, world + rigid)
    return DisplacementField(grid, np.moveaxis(field, -1, 0))


def max_displacement(field: DisplacementField) -> float:
    """Largest vector norm in the field"""
    return float(field.norm().max())
