"""
Registration losses with analytic gradients

Each loss returns a `LossValue` holding the scalar and its gradient with
respect to the warped input (image, one-hot stack or displacement field).
Image and label losses lie in [0, 2] and [0, 1]; lower is better.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from ddreg.errors import GridMismatchError, LabelNotFoundError, ShapeError
from ddreg.logger import logger
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume
from ddreg.warp import OneHotStack

NCC_EPS = 1e-8
NCC_VAR_FLOOR = 1e-14
SSIM_WINDOW = 7
SSIM_C1 = 1e-4
SSIM_C2 = 9e-4
DICE_EPS = 1e-7
HD_EPS = 1e-7

ArrayLike = Union[Volume, np.ndarray]


@dataclass(frozen=True)
class LossValue:
    """Scalar loss, its gradient and notes about degenerate inputs"""

    name: str
    value: float
    gradient: np.ndarray
    target: str
    flags: Tuple[str, ...] = field(default=())


def _values(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Volume) else x, dtype=float)


def _pair(pred: ArrayLike, fixed: ArrayLike) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, Volume) and isinstance(fixed, Volume) and pred.grid != fixed.grid:
        raise GridMismatchError(f"Grid mismatch: {pred.grid} != {fixed.grid}")
    p, f = _values(pred), _values(fixed)
    if p.shape != f.shape:
        raise GridMismatchError(f"Shape mismatch: {p.shape} != {f.shape}")
    return p, f


class LocalStatistics:
    """
    Windowed first and second moments of two images

    Windows are clipped at the border and normalized by their in-bounds voxel
    count. `adjoint` maps per-voxel partial derivatives with respect to the
    moments back to the first image.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, window: int):
        if window < 1 or window % 2 == 0:
            raise ShapeError(f"Window must be a positive odd size, got {window}")
        self.window = window
        self.x = x
        self.y = y
        self.count = self._box(np.ones(x.shape))
        self.mean_x = self.mean(x)
        self.mean_y = self.mean(y)
        self.var_x = np.maximum(self.mean(x * x) - self.mean_x**2, 0.0)
        self.var_y = np.maximum(self.mean(y * y) - self.mean_y**2, 0.0)
        self.cov = self.mean(x * y) - self.mean_x * self.mean_y

    def _box(self, a: np.ndarray) -> np.ndarray:
        return ndimage.uniform_filter(a, size=self.window, mode="constant", cval=0.0)

    def mean(self, a: np.ndarray) -> np.ndarray:
        return self._box(a) / self.count

    def adjoint(self, d_mean_x: np.ndarray, d_sq_x: np.ndarray, d_xy: np.ndarray) -> np.ndarray:
        """Gradient wrt x of ``sum(d_mean_x * E[x] + d_sq_x * E[x²] + d_xy * E[xy])``"""
        return (
            self._box(d_mean_x / self.count)
            + 2 * self.x * self._box(d_sq_x / self.count)
            + self.y * self._box(d_xy / self.count)
        )


def _global_ncc(p: np.ndarray, f: np.ndarray) -> LossValue:
    n = p.size
    dp = p - p.mean()
    df = f - f.mean()
    sp = math.sqrt(float(np.mean(dp * dp)))
    sf = math.sqrt(float(np.mean(df * df)))
    cov = float(np.mean(dp * df))
    denom = sp * sf + NCC_EPS
    ncc = cov / denom
    # d cov / dp = df / n ; d sp / dp = dp / (n sp)
    grad_ncc = df / (n * denom)
    if sp > 0:
        grad_ncc = grad_ncc - cov * sf * dp / (n * sp * denom**2)
    flags = ("degenerate",) if sp == 0 or sf == 0 else ()
    if flags:
        logger.debug("NCC of a constant image")
    return LossValue("NCC", 1.0 - ncc, -grad_ncc, "image", flags)


def _windowed_ncc(p: np.ndarray, f: np.ndarray, window: int) -> LossValue:
    stats = LocalStatistics(p, f, window)
    # E[x²] - E[x]² carries round-off near this floor; flatter windows count as constant
    var_x = np.where(stats.var_x > NCC_VAR_FLOOR, stats.var_x, 0.0)
    var_y = np.where(stats.var_y > NCC_VAR_FLOOR, stats.var_y, 0.0)
    sx, sy = np.sqrt(var_x), np.sqrt(var_y)
    denom = sx * sy + NCC_EPS
    score = stats.cov / denom
    n = p.size

    # derivatives of the per-voxel score wrt sigma_xy and sigma_x²
    d_cov = 1.0 / denom
    live = var_x > 0
    d_var = np.where(live, -0.5 * stats.cov * sy / (np.where(live, sx, 1.0) * denom**2), 0.0)
    # sigma_xy = E[xy] - mx my ; sigma_x² = E[x²] - mx²
    d_mean = -d_cov * stats.mean_y - 2 * d_var * stats.mean_x
    grad_score = stats.adjoint(d_mean / n, d_var / n, d_cov / n)
    flags = ("degenerate",) if not live.any() or not np.any(var_y > 0) else ()
    return LossValue("NCC", 1.0 - float(score.mean()), -grad_score, "image", flags)


def loss_ncc(pred: ArrayLike, fixed: ArrayLike, window: Optional[int] = None) -> LossValue:
    """
    One minus normalized cross-correlation, global or over cubic windows
    """
    p, f = _pair(pred, fixed)
    if window is None:
        return _global_ncc(p, f)
    return _windowed_ncc(p, f, window)


def loss_ssim(
    pred: ArrayLike,
    fixed: ArrayLike,
    window: int = SSIM_WINDOW,
    c1: float = SSIM_C1,
    c2: float = SSIM_C2,
) -> LossValue:
    """One minus the mean structural similarity over cubic windows"""
    p, f = _pair(pred, fixed)
    stats = LocalStatistics(p, f, window)
    mx, my = stats.mean_x, stats.mean_y

    a1 = 2 * mx * my + c1
    a2 = 2 * stats.cov + c2
    b1 = mx**2 + my**2 + c1
    b2 = stats.var_x + stats.var_y + c2
    ssim = (a1 * a2) / (b1 * b2)

    d_a1 = 2 * my
    d_b1 = 2 * mx
    # partials of the per-voxel score wrt mx, sigma_x² and sigma_xy
    s_mx = ssim * (d_a1 / a1 - d_b1 / b1)
    s_var = -ssim / b2
    s_cov = 2 * ssim / a2
    # rewrite in terms of E[x], E[x²] and E[xy]
    d_mean = s_mx - 2 * mx * s_var - my * s_cov
    n = p.size
    grad = stats.adjoint(d_mean / n, s_var / n, s_cov / n)
    return LossValue("SSIM", 1.0 - float(ssim.mean()), -grad, "image")


def _onehot_pair(pred: OneHotStack, fixed: OneHotStack) -> Tuple[np.ndarray, np.ndarray]:
    if pred.grid != fixed.grid:
        raise GridMismatchError(f"Grid mismatch: {pred.grid} != {fixed.grid}")
    if pred.labels != fixed.labels:
        raise ShapeError(f"Label sets differ: {pred.labels} != {fixed.labels}")
    return pred.channels, fixed.channels


def _skip_flags(labels: Tuple[int, ...], skipped) -> Tuple[str, ...]:
    return tuple(f"skipped:{labels[k]}" for k in skipped)


def loss_dice(pred_onehot: OneHotStack, fixed_onehot: OneHotStack) -> LossValue:
    """
    One minus the soft Dice averaged over labels

    Labels absent from both stacks are skipped and flagged ``skipped:<label>``;
    when every label is skipped the loss is zero and also flagged ``no-labels``.
    """
    p, q = _onehot_pair(pred_onehot, fixed_onehot)
    grad = np.zeros(p.shape)
    scores = []
    scored = [k for k in range(len(p)) if p[k].any() or q[k].any()]
    flags = _skip_flags(fixed_onehot.labels, [k for k in range(len(p)) if k not in scored])
    for k in scored:
        inter = float(np.sum(p[k] * q[k]))
        denom = float(np.sum(p[k] * p[k]) + np.sum(q[k] * q[k])) + DICE_EPS
        scores.append(2 * inter / denom)
        grad[k] = -(2 * q[k] / denom - 4 * inter * p[k] / denom**2) / len(scored)
    if not scored:
        return LossValue("DSC", 0.0, grad, "labels", ("no-labels", *flags))
    return LossValue("DSC", 1.0 - float(np.mean(scores)), grad, "labels", flags)


def distance_transform(mask: LabelMap, label: int) -> Volume:
    """Euclidean distance in mm from each voxel to the nearest voxel of `label`"""
    if label not in mask.labels:
        raise LabelNotFoundError(f"Label {label} not present (have {mask.labels})")
    inside = mask.mask(label)
    return Volume(mask.grid, ndimage.distance_transform_edt(~inside, sampling=mask.grid.spacing))


def distance_maps(onehot: OneHotStack) -> np.ndarray:
    """Distance transform of every channel, NaN for empty channels"""
    out = np.full(onehot.channels.shape, np.nan)
    for k, channel in enumerate(onehot.channels):
        inside = channel > 0.5
        if inside.any():
            out[k] = ndimage.distance_transform_edt(~inside, sampling=onehot.grid.spacing)
    return out


def loss_hd_approx(
    pred_onehot: OneHotStack,
    fixed_onehot: OneHotStack,
    dt_fixed: Optional[np.ndarray] = None,
) -> LossValue:
    """
    Differentiable Hausdorff surrogate: mass-weighted mean squared distance of
    the predicted labels to the fixed labels, averaged over labels

    Labels absent from the fixed stack are skipped and flagged ``skipped:<label>``.
    """
    p, q = _onehot_pair(pred_onehot, fixed_onehot)
    if dt_fixed is None:
        dt_fixed = distance_maps(fixed_onehot)
    if dt_fixed.shape != p.shape:
        raise ShapeError(f"Distance maps {dt_fixed.shape} do not match {p.shape}")
    grad = np.zeros(p.shape)
    scored = [k for k in range(len(p)) if q[k].any()]
    flags = _skip_flags(fixed_onehot.labels, [k for k in range(len(p)) if k not in scored])
    if not scored:
        return LossValue("HD", 0.0, grad, "labels", ("no-labels", *flags))
    values = []
    for k in scored:
        dt2 = dt_fixed[k] ** 2
        mass = float(p[k].sum()) + HD_EPS
        value = float(np.sum(p[k] * dt2)) / mass
        values.append(value)
        grad[k] = (dt2 - value) / mass / len(scored)
    return LossValue("HD", float(np.mean(values)), grad, "labels", flags)


def reg_smoothness(field: Union[DisplacementField, np.ndarray], grid: Optional[Grid] = None) -> LossValue:
    """
    Mean squared spatial derivative of the field, averaged over the three axes

    Derivatives are forward differences in mm⁻¹ over valid entries only.
    """
    if isinstance(field, DisplacementField):
        vectors, spacing = field.vectors, field.grid.spacing
    else:
        vectors = np.asarray(field, dtype=float)
        spacing = grid.spacing if grid is not None else (1.0, 1.0, 1.0)
    if vectors.ndim != 4 or vectors.shape[0] != 3:
        raise ShapeError(f"Expected a (3, nx, ny, nz) field, got {vectors.shape}")

    value = 0.0
    grad = np.zeros(vectors.shape)
    for axis in range(3):
        n = vectors.shape[axis + 1]
        if n < 2:
            continue
        diff = np.diff(vectors, axis=axis + 1) / spacing[axis]
        count = diff[0].size
        value += float(np.sum(diff * diff)) / (3 * count)
        coef = 2 * diff / (3 * count * spacing[axis])
        head = [slice(None)] * 4
        tail = [slice(None)] * 4
        head[axis + 1] = slice(1, None)
        tail[axis + 1] = slice(None, -1)
        grad[tuple(head)] += coef
        grad[tuple(tail)] -= coef
    return LossValue("REG", value, grad, "field")
