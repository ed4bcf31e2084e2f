"""
Output format registries

Formats are discovered from the ``ddreg_volume_formats`` and
``ddreg_report_formats`` entry point groups so other packages can add their own.
The built-in formats are always available, even from a source checkout.
"""

from importlib.metadata import entry_points
from typing import Callable, Dict


def _load_group(group: str) -> Dict[str, Callable]:
    formats = {}
    for entry_point in entry_points(group=group):
        formats[entry_point.name] = entry_point.load()
    return formats


def volume_formats() -> Dict[str, Callable]:
    """
    Return volume writer functions from registered
    `ddreg_volume_formats` entry_points
    """
    from ddreg.formats.ddvol import write_ddvol
    from ddreg.formats.to_netcdf import to_netcdf

    formats = {"ddvol": write_ddvol, "nc": to_netcdf, "netcdf": to_netcdf}
    formats.update(_load_group("ddreg_volume_formats"))
    return formats


def report_formats() -> Dict[str, Callable]:
    """
    Return metric table renderers from registered
    `ddreg_report_formats` entry_points
    """
    from ddreg.formats import report

    formats = {
        "text": report.to_text,
        "csv": report.to_csv,
        "json": report.to_json,
        "markdown": report.to_markdown,
    }
    formats.update(_load_group("ddreg_report_formats"))
    return formats
