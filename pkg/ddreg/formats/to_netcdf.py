"""
Write volumes and displacement fields to NetCDF through xarray
"""

from pathlib import Path
from typing import List, Union

import xarray as xr

from ddreg.volume import DisplacementField, LabelMap, Volume


def to_dataset(obj: Union[Volume, LabelMap, DisplacementField]) -> xr.Dataset:
    """Labelled xarray view of a volume, label map or displacement field"""
    if isinstance(obj, DisplacementField):
        components = [
            Volume(obj.grid, c).to_dataarray(name=f"displacement_{axis}")
            for axis, c in zip("xyz", obj.vectors)
        ]
        ds = xr.merge(components)
        for da in ds.data_vars.values():
            da.attrs["units"] = "mm"
        return ds

    if isinstance(obj, LabelMap):
        da = Volume(obj.grid, obj.data).to_dataarray(name="labels").astype("uint8")
        da.attrs["spacing"] = list(obj.grid.spacing)
        da.attrs["origin"] = list(obj.grid.origin)
        return da.to_dataset()

    return obj.to_dataarray().to_dataset()


def to_netcdf(obj: Union[Volume, LabelMap, DisplacementField], path: Union[str, Path]) -> List[Path]:
    """Write a NetCDF file with world coordinates in millimetres"""
    path = Path(path).with_suffix(".nc")
    path.parent.mkdir(parents=True, exist_ok=True)
    to_dataset(obj).to_netcdf(path)
    return [path]
