"""
Rigid transforms about a pivot point
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from ddreg.errors import ConfigurationError

ORTHONORMAL_TOLERANCE = 1e-10


@dataclass(frozen=True)
class RigidTransform:
    """
    Rotation about `center` followed by a translation, all in millimetres

    ``T(x) = R (x - c) + c + t``
    """

    rotation: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=float).reshape(3, 3)
        if abs(np.linalg.det(rotation) - 1) > ORTHONORMAL_TOLERANCE:
            raise ConfigurationError("Rotation determinant must be +1")
        if np.abs(rotation.T @ rotation - np.eye(3)).max() > ORTHONORMAL_TOLERANCE:
            raise ConfigurationError("Rotation matrix is not orthonormal")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", np.array(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "center", np.array(self.center, dtype=float).reshape(3))

    @classmethod
    def identity(cls, center: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidTransform":
        """No motion"""
        return cls(np.eye(3), np.zeros(3), center)

    @classmethod
    def from_euler(
        cls,
        angles_deg: Sequence[float],
        translation: Sequence[float],
        center: Sequence[float],
    ) -> "RigidTransform":
        """Build from extrinsic x, y, z Euler angles in degrees"""
        rotation = Rotation.from_euler("xyz", np.asarray(angles_deg, dtype=float), degrees=True)
        return cls(rotation.as_matrix(), translation, center)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world points of shape (..., 3)"""
        points = np.asarray(points, dtype=float)
        return (points - self.center) @ self.rotation.T + self.center + self.translation

    def displacement(self, points: np.ndarray) -> np.ndarray:
        """``T(x) - x`` for world points of shape (..., 3)"""
        points = np.asarray(points, dtype=float)
        return (points - self.center) @ (self.rotation - np.eye(3)).T + self.translation

    def to_dict(self) -> dict:
        """JSON friendly representation"""
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "center": self.center.tolist(),
        }
