"""
Registration metrics and model evaluation

Undefined metrics (constant images, labels missing on one side) are NaN and
are excluded from aggregates, with the exclusions counted.
"""

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import ndimage

from ddreg.dataset import PairEntry, load_pair, load_pairs
from ddreg.errors import DatasetError
from ddreg.logger import logger
from ddreg.losses import loss_ssim
from ddreg.nn.checkpoint import Checkpoint
from ddreg.nn.unet import UNet
from ddreg.volume import (
    DisplacementField,
    LabelMap,
    Volume,
    require_same_grid,
    resample_field,
    resize,
)
from ddreg.warp import warp_nearest, warp_trilinear

METRICS = ("ssim", "ncc", "dsc", "hd", "hd95", "tre", "runtime")
HIGHER_IS_BETTER = {"ssim", "ncc", "dsc"}
LABEL_METRICS = ("dsc", "hd", "hd95", "tre")


def metric_ncc(a: Volume, b: Volume) -> float:
    """Global zero-normalized cross-correlation, NaN when either image is constant"""
    require_same_grid(a, b)
    da = a.data - a.data.mean()
    db = b.data - b.data.mean()
    va = float(np.sum(da * da))
    vb = float(np.sum(db * db))
    if va == 0 or vb == 0:
        return math.nan
    return float(np.clip(np.sum(da * db) / math.sqrt(va * vb), -1.0, 1.0))


def metric_ssim(a: Volume, b: Volume) -> float:
    """Mean windowed structural similarity"""
    require_same_grid(a, b)
    return 1.0 - loss_ssim(a, b).value


def metric_dsc(a: LabelMap, b: LabelMap, label: int) -> float:
    """Hard Dice of one label, NaN when it is absent from both maps"""
    require_same_grid(a, b)
    ma, mb = a.mask(label), b.mask(label)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return math.nan
    return 2.0 * int(np.sum(ma & mb)) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of the mask with a 6-connected neighbour outside it"""
    structure = ndimage.generate_binary_structure(3, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=structure)


def directed_distances(a: LabelMap, b: LabelMap, label: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Distances (mm) from each boundary voxel of one mask to the nearest boundary
    voxel of the other, in both directions; empty when a side lacks the label
    """
    require_same_grid(a, b)
    ba, bb = boundary(a.mask(label)), boundary(b.mask(label))
    if not ba.any() or not bb.any():
        return np.empty(0), np.empty(0)
    spacing = a.grid.spacing
    to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return to_b[ba], to_a[bb]


def metric_hd(a: LabelMap, b: LabelMap, label: int) -> float:
    """Symmetric Hausdorff distance between label boundaries"""
    d_ab, d_ba = directed_distances(a, b, label)
    if d_ab.size == 0:
        return math.nan
    return float(max(d_ab.max(), d_ba.max()))


def metric_hd95(a: LabelMap, b: LabelMap, label: int) -> float:
    """95th percentile of the pooled boundary distances of both directions"""
    d_ab, d_ba = directed_distances(a, b, label)
    if d_ab.size == 0:
        return math.nan
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


def metric_tre(fixed_labels: LabelMap, pred_labels: LabelMap, label: int) -> float:
    """Distance between label centroids in world mm, NaN when either side lacks the label"""
    require_same_grid(fixed_labels, pred_labels)
    index_f = np.argwhere(fixed_labels.mask(label))
    index_p = np.argwhere(pred_labels.mask(label))
    if len(index_f) == 0 or len(index_p) == 0:
        return math.nan
    grid = fixed_labels.grid
    shift = grid.voxel_to_world(index_f).mean(axis=0) - grid.voxel_to_world(index_p).mean(axis=0)
    return float(np.linalg.norm(shift))


class MetricSummary(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mean: float
    std: float
    count: int
    excluded: int = 0


class MetricRow(BaseModel):
    """Aggregated metrics of one method over a pair set"""

    model_config = ConfigDict(extra="forbid")

    method: str
    n_pairs: int
    metrics: Dict[str, MetricSummary]
    missing_labels: int = 0

    def save(self, path: Union[str, Path]) -> Path:
        """Write as JSON; undefined statistics are written as NaN"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(), indent=2))
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "MetricRow":
        return cls.model_validate(json.loads(Path(path).read_text()))


def summarize(values: Sequence[float]) -> MetricSummary:
    """Mean and unbiased standard deviation of the finite values"""
    finite = [float(v) for v in values if v is not None and math.isfinite(v)]
    excluded = len(values) - len(finite)
    if not finite:
        return MetricSummary(mean=math.nan, std=math.nan, count=0, excluded=excluded)
    mean = math.fsum(finite) / len(finite)
    std = float(np.std(finite, ddof=1)) if len(finite) > 1 else math.nan
    return MetricSummary(mean=mean, std=std, count=len(finite), excluded=excluded)


def aggregate(per_pair: Sequence[dict], method: str) -> MetricRow:
    """Fold per-pair metric dicts into a row"""
    return MetricRow(
        method=method,
        n_pairs=len(per_pair),
        metrics={name: summarize([p.get(name, math.nan) for p in per_pair]) for name in METRICS},
        missing_labels=sum(p.get("missing_labels", 0) for p in per_pair),
    )


def _label_mean(values: List[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return math.fsum(finite) / len(finite) if finite else math.nan


def pair_metrics(
    fixed: Volume,
    fixed_labels: LabelMap,
    warped: Volume,
    warped_labels: LabelMap,
    labels: Optional[Sequence[int]] = None,
) -> dict:
    """All metrics of one registered pair; label metrics are averaged over labels"""
    labels = list(fixed_labels.labels if labels is None else labels)
    per_label = {name: [] for name in LABEL_METRICS}
    for label in labels:
        per_label["dsc"].append(metric_dsc(fixed_labels, warped_labels, label))
        per_label["hd"].append(metric_hd(fixed_labels, warped_labels, label))
        per_label["hd95"].append(metric_hd95(fixed_labels, warped_labels, label))
        per_label["tre"].append(metric_tre(fixed_labels, warped_labels, label))
    result = {
        "ssim": metric_ssim(warped, fixed),
        "ncc": metric_ncc(warped, fixed),
        **{name: _label_mean(values) for name, values in per_label.items()},
        "missing_labels": sum(1 for v in per_label["tre"] if not math.isfinite(v)),
        "labels": {
            str(label): {name: per_label[name][k] for name in LABEL_METRICS}
            for k, label in enumerate(labels)
        },
    }
    return result


class Registrar:
    """Predict and apply displacement fields for pairs on any grid"""

    def __init__(self, checkpoint: Optional[Checkpoint] = None):
        self.checkpoint = checkpoint
        self.net = UNet(checkpoint.net, checkpoint.params) if checkpoint is not None else None

    def predict(self, fixed: Volume, moving: Volume) -> DisplacementField:
        grid = require_same_grid(fixed, moving)
        if self.net is None:
            return DisplacementField.zeros(grid)
        shape = tuple(self.checkpoint.net.input_shape)
        if grid.shape == shape:
            field, _ = self.net.predict(fixed, moving)
            return field
        field, _ = self.net.predict(resize(fixed, shape), resize(moving, shape))
        return resample_field(field, grid)

    def register(
        self,
        fixed: Volume,
        moving: Volume,
        moving_labels: Optional[LabelMap] = None,
    ) -> Tuple[Volume, Optional[LabelMap], DisplacementField, float]:
        """Warped image, warped labels, field and the seconds spent predicting and warping"""
        start = time.perf_counter()
        field = self.predict(fixed, moving)
        warped = warp_trilinear(moving, field)
        warped_labels = warp_nearest(moving_labels, field) if moving_labels is not None else None
        return warped, warped_labels, field, time.perf_counter() - start


def evaluate_model(
    checkpoint: Optional[Checkpoint],
    pairs: Union[str, Path, Sequence[PairEntry]],
    method: Optional[str] = None,
    labels: Optional[Sequence[int]] = None,
) -> Tuple[List[dict], MetricRow]:
    """
    Register every pair and score it; ``checkpoint=None`` evaluates the
    identity transform
    """
    entries = load_pairs(pairs) if isinstance(pairs, (str, Path)) else list(pairs)
    if not entries:
        raise DatasetError("Pair manifest is empty")
    if method is None:
        method = checkpoint.design if checkpoint is not None else "identity"
    registrar = Registrar(checkpoint)

    per_pair = []
    for k, entry in enumerate(entries):
        fixed, fixed_labels, moving, moving_labels, params = load_pair(entry)
        warped, warped_labels, _, seconds = registrar.register(fixed, moving, moving_labels)
        metrics = pair_metrics(fixed, fixed_labels, warped, warped_labels, labels)
        metrics["runtime"] = seconds
        metrics["pair"] = k
        if params is not None:
            metrics["augmentation_index"] = params.index
        per_pair.append(metrics)
        logger.debug(f"{method} pair {k}: DSC {metrics['dsc']:.3f} TRE {metrics['tre']:.2f} mm")

    row = aggregate(per_pair, method)
    logger.info(
        f"{method}: DSC {row.metrics['dsc'].mean:.3f} TRE {row.metrics['tre'].mean:.2f} mm "
        f"over {row.n_pairs} pairs",
    )
    return per_pair, row


@dataclass(frozen=True)
class ReportTable:
    """Rows with the index of the best row per metric"""

    rows: Tuple[MetricRow, ...]
    best: Dict[str, Optional[int]]


def best_row(rows: Sequence[MetricRow], metric: str) -> Optional[int]:
    """
    Index of the best mean; ties go to the lower standard deviation, then the earlier row
    """
    sign = -1.0 if metric in HIGHER_IS_BETTER else 1.0
    candidates = []
    for k, row in enumerate(rows):
        summary = row.metrics.get(metric)
        if summary is None or not math.isfinite(summary.mean):
            continue
        std = summary.std if math.isfinite(summary.std) else math.inf
        candidates.append((sign * summary.mean, std, k))
    if not candidates:
        return None
    return min(candidates)[2]


def report_table(rows: Sequence[MetricRow]) -> ReportTable:
    """Mark the best method per metric"""
    rows = tuple(rows)
    return ReportTable(rows, {metric: best_row(rows, metric) for metric in METRICS})
