"""
Dataset and evaluation-pair manifests

A dataset manifest is a JSON list of ``{"fixed", "labels", "split"}`` entries;
a pair manifest lists ``{"fixed", "fixed_labels", "moving", "moving_labels",
"params"}``. Relative paths resolve against the manifest's directory.
"""

import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, TypeAdapter, ValidationError

from ddreg.augmentation import AugmentParams, iter_pairs
from ddreg.config import AugmentConfig
from ddreg.errors import DatasetError
from ddreg.formats import volume_formats
from ddreg.formats.ddvol import read_labels, read_volume
from ddreg.logger import logger
from ddreg.volume import LabelMap, Volume

Split = Literal["train", "val", "test"]


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fixed: Path
    labels: Path
    split: Split = "train"


class PairEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fixed: Path
    fixed_labels: Path
    moving: Path
    moving_labels: Path
    params: Optional[Path] = None


def _resolve(path: Path, base: Path) -> Path:
    return path if path.is_absolute() else base / path


def _read_list(path: Path, model) -> list:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetError(f"Cannot read manifest {path}: {e}") from e
    try:
        entries = TypeAdapter(List[model]).validate_python(raw)
    except ValidationError as e:
        raise DatasetError(f"Malformed manifest {path}: {e.errors()[0]['msg']}") from e
    if not entries:
        raise DatasetError(f"Manifest {path} is empty")
    base = path.parent
    return [
        entry.model_copy(
            update={
                name: _resolve(value, base)
                for name, value in entry
                if isinstance(value, Path)
            },
        )
        for entry in entries
    ]


def load_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Dataset entries with absolute paths"""
    return _read_list(Path(path), ManifestEntry)


def load_pairs(path: Union[str, Path]) -> List[PairEntry]:
    """Evaluation pairs with absolute paths"""
    return _read_list(Path(path), PairEntry)


def write_manifest(entries: Sequence[BaseModel], path: Union[str, Path]) -> Path:
    """Write entries with paths relative to the manifest when possible"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    rows = []
    for entry in entries:
        row = {}
        for name, value in entry:
            if isinstance(value, Path):
                try:
                    value = value.resolve().relative_to(base)
                except ValueError:
                    pass
                value = value.as_posix()
            if value is not None:
                row[name] = value
        rows.append(row)
    path.write_text(json.dumps(rows, indent=2))
    return path


def load_volumes(entries: Sequence[ManifestEntry], split: Optional[Split] = None) -> List[Tuple[Volume, LabelMap]]:
    """Read the image/label pairs of one split"""
    selected = [e for e in entries if split is None or e.split == split]
    return [(read_volume(e.fixed), read_labels(e.labels)) for e in selected]


def split_counts(entries: Sequence[ManifestEntry]) -> Dict[str, int]:
    counts = {"train": 0, "val": 0, "test": 0}
    for entry in entries:
        counts[entry.split] += 1
    return counts


def generate_pairs(
    entries: Sequence[ManifestEntry],
    cfg: AugmentConfig,
    out_dir: Union[str, Path],
    split: Split = "test",
    pairs_per_volume: int = 1,
) -> Path:
    """
    Synthesize evaluation pairs for one split and write them with a pair manifest

    Pair ``k`` of volume ``v`` uses augmentation index ``v * pairs_per_volume + k``.
    """
    out_dir = Path(out_dir)
    selected = [e for e in entries if e.split == split]
    if not selected:
        raise DatasetError(f"No {split!r} entries to generate pairs from")
    write = volume_formats()["ddvol"]

    jobs = []
    for v, entry in enumerate(selected):
        for k in range(pairs_per_volume):
            jobs.append((entry, v * pairs_per_volume + k))
    volumes = {e.fixed: (read_volume(e.fixed), read_labels(e.labels)) for e in selected}

    pairs = []
    samples = iter_pairs([volumes[e.fixed] for e, _ in jobs], cfg, [i for _, i in jobs])
    for (entry, index), sample in zip(jobs, samples):
        stem = out_dir / f"pair_{index:04d}"
        moving = write(sample.moving, stem.with_name(stem.name + "_moving"))[0]
        moving_labels = write(sample.moving_labels, stem.with_name(stem.name + "_moving_labels"))[0]
        params = sample.params.save(stem.with_name(stem.name + "_params.json"))
        pairs.append(
            PairEntry(
                fixed=entry.fixed,
                fixed_labels=entry.labels,
                moving=moving,
                moving_labels=moving_labels,
                params=params,
            ),
        )
    logger.info(f"Generated {len(pairs)} {split} pairs in {out_dir}")
    return write_manifest(pairs, out_dir / "pairs.json")


def load_pair(entry: PairEntry) -> Tuple[Volume, LabelMap, Volume, LabelMap, Optional[AugmentParams]]:
    """Read every file of a pair"""
    params = AugmentParams.load(entry.params) if entry.params is not None else None
    return (
        read_volume(entry.fixed),
        read_labels(entry.fixed_labels),
        read_volume(entry.moving),
        read_labels(entry.moving_labels),
        params,
    )
