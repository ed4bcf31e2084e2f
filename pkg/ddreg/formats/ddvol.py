"""
Read and write the ``ddvol`` volume format

A ``ddvol`` is a JSON header (``<stem>.json``) next to a raw little-endian,
x-fastest payload (``<stem>.raw``). Displacement fields add a ``components``
key and store the three components one after the other.
"""

import json
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from ddreg.errors import ShapeError
from ddreg.logger import logger
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume

DTYPES = {"f32": "<f4", "f64": "<f8", "u8": "u1"}


class DdvolHeader(BaseModel):
    """JSON header of a ddvol file"""

    model_config = ConfigDict(extra="forbid")

    shape: List[int] = Field(..., min_length=3, max_length=3)
    spacing: List[float] = Field(..., min_length=3, max_length=3)
    origin: List[float] = Field(..., min_length=3, max_length=3)
    dtype: Literal["f32", "f64", "u8"]
    order: Literal["x-fastest"] = "x-fastest"
    endianness: Literal["little"] = "little"
    components: Optional[int] = Field(
        None,
        description="Vector components per voxel, only set for displacement fields",
    )

    @property
    def grid(self) -> Grid:
        """Grid described by the header"""
        return Grid(self.shape, self.spacing, self.origin)


def ddvol_paths(path: Union[str, Path]):
    """Header and payload paths for a ddvol stem or header path"""
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".raw")


def write_ddvol(
    obj: Union[Volume, LabelMap, DisplacementField],
    path: Union[str, Path],
    dtype: Optional[str] = None,
) -> List[Path]:
    """Write a volume, label map or displacement field as ddvol"""
    header_path, payload_path = ddvol_paths(path)
    grid = obj.grid

    components = None
    if isinstance(obj, LabelMap):
        dtype = "u8"
        values = obj.data
    elif isinstance(obj, DisplacementField):
        dtype = dtype or "f32"
        components = 3
        values = obj.vectors
    else:
        dtype = dtype or "f32"
        values = obj.data

    header = DdvolHeader(
        shape=list(grid.shape),
        spacing=list(grid.spacing),
        origin=list(grid.origin),
        dtype=dtype,
        components=components,
    )

    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header.model_dump(exclude_none=True), indent=2))

    if components:
        payload = b"".join(
            np.asarray(c).astype(DTYPES[dtype]).tobytes(order="F") for c in values
        )
    else:
        payload = np.asarray(values).astype(DTYPES[dtype]).tobytes(order="F")
    payload_path.write_bytes(payload)

    logger.debug(f"Wrote ddvol {header_path} ({dtype}, {grid.shape})")
    return [header_path, payload_path]


def read_ddvol(path: Union[str, Path]) -> Union[Volume, LabelMap, DisplacementField]:
    """Read a ddvol; u8 payloads become label maps, vector payloads displacement fields"""
    header_path, payload_path = ddvol_paths(path)
    header = DdvolHeader.model_validate_json(header_path.read_text())
    grid = header.grid

    components = header.components or 1
    raw = np.frombuffer(payload_path.read_bytes(), dtype=DTYPES[header.dtype])
    if raw.size != grid.size * components:
        raise ShapeError(
            f"{payload_path} holds {raw.size} values, header expects {grid.size * components}",
        )

    if header.components:
        vectors = raw.reshape((components, *grid.shape[::-1])).transpose(0, 3, 2, 1)
        return DisplacementField(grid, vectors)

    data = raw.reshape(grid.shape, order="F")
    if header.dtype == "u8":
        return LabelMap(grid, data)
    return Volume(grid, data)


def read_volume(path: Union[str, Path]) -> Volume:
    """Read a ddvol that must hold an intensity volume"""
    obj = read_ddvol(path)
    if not isinstance(obj, Volume):
        raise ShapeError(f"{path} does not hold an intensity volume")
    return obj


def read_labels(path: Union[str, Path]) -> LabelMap:
    """Read a ddvol that must hold a label map"""
    obj = read_ddvol(path)
    if not isinstance(obj, LabelMap):
        raise ShapeError(f"{path} does not hold a label map")
    return obj
