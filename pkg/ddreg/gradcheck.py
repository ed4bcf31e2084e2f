"""
Finite-difference gradient checks

Each check compares an analytic gradient with central differences at random
entries and reports the largest elementwise relative error.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from ddreg.config import AugmentConfig, NetConfig, TrainConfig
from ddreg.losses import LossValue, loss_dice, loss_hd_approx, loss_ncc, loss_ssim, reg_smoothness
from ddreg.logger import logger
from ddreg.nn.functional import concat, conv3d, leaky_relu, maxpool3d, upsample_nn
from ddreg.nn.tensor import Tensor
from ddreg.training import Trainer, make_training_pair
from ddreg.volume import DisplacementField, Grid, LabelMap, Volume
from ddreg.warp import OneHotStack, TrilinearSampler
from ddreg.weighting import WeightState, combine

OP_TOLERANCE = 1e-4
END_TO_END_TOLERANCE = 1e-3
WEIGHT_TOLERANCE = 1e-6
# floors of the elementwise error denominator
REL_FLOOR = 1e-3
FD_ROUNDOFF = 1e3 * float(np.finfo(float).eps)


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tolerance)


def _rng(seed: int, salt: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, salt])))


def sample_indices(rng: np.random.Generator, shape: Sequence[int], count: int) -> List[tuple]:
    """Up to `count` distinct random entries of an array"""
    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(i, shape) for i in flat]


def _central(f: Callable[[], float], x: np.ndarray, index: tuple, eps: float) -> float:
    original = x[index]
    x[index] = original + eps
    plus = f()
    x[index] = original - eps
    minus = f()
    x[index] = original
    return (plus - minus) / (2 * eps)


def numerical_gradient(
    f: Callable[[], float], x: np.ndarray, indices: Iterable[tuple], eps: float, richardson: bool = False,
) -> np.ndarray:
    """
    Central differences of ``f`` with respect to `x` at `indices`; `x` is
    perturbed in place. `richardson` combines steps `eps` and `eps / 2` to
    cancel the second-order truncation term.
    """
    out = []
    for index in indices:
        d = _central(f, x, index, eps)
        if richardson:
            d = (4 * _central(f, x, index, eps / 2) - d) / 3
        out.append(d)
    return np.asarray(out)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``"""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def check_gradient(
    name: str,
    seed: int,
    f: Callable[[], float],
    arrays: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    rng: np.random.Generator,
    tolerance: float,
    samples: int = 24,
    eps: float = 1e-6,
    richardson: bool = False,
) -> GradCheckResult:
    """
    Compare `grads` with central differences of `f` at `samples` random entries
    of every array

    The error denominator never drops below `REL_FLOOR` times the array's
    largest gradient, nor below the finite-difference resolution of `f` at
    step `eps` divided by `tolerance`.
    """
    resolution = FD_ROUNDOFF * max(abs(f()), 1.0) / eps
    worst = 0.0
    for key, x in arrays.items():
        indices = sample_indices(rng, x.shape, samples)
        numeric = numerical_gradient(f, x, indices, eps, richardson)
        analytic = np.array([grads[key][i] for i in indices])
        floor = max(resolution / tolerance, REL_FLOOR * float(np.abs(grads[key]).max(initial=0)))
        worst = max(worst, relative_error(analytic, numeric, floor))
    return GradCheckResult(name, seed, worst, tolerance)


def _tensor_check(name, seed, build, inputs: Dict[str, np.ndarray], rng, samples=24) -> GradCheckResult:
    """Scalarize an op output with a random projection and check every input"""
    tensors = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    out = build(tensors)
    projection = rng.standard_normal(out.shape)
    out.backward(projection)
    grads = {k: t.grad for k, t in tensors.items()}

    def f():
        return float(np.sum(build(tensors).data * projection))

    arrays = {k: t.data for k, t in tensors.items()}
    return check_gradient(name, seed, f, arrays, grads, rng, OP_TOLERANCE, samples)


def check_conv3d(seed: int) -> GradCheckResult:
    rng = _rng(seed, 1)
    inputs = {
        "x": rng.standard_normal((1, 2, 4, 4, 4)),
        "kernel": rng.standard_normal((3, 2, 3, 3, 3)),
        "bias": rng.standard_normal(3),
    }
    return _tensor_check("conv3d", seed, lambda t: conv3d(t["x"], t["kernel"], t["bias"]), inputs, rng)


def _away_from_zero(rng, shape, gap=1e-2):
    return rng.uniform(gap, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def check_leaky_relu(seed: int) -> GradCheckResult:
    rng = _rng(seed, 2)
    inputs = {"x": _away_from_zero(rng, (1, 2, 3, 3, 3))}
    return _tensor_check("leaky_relu", seed, lambda t: leaky_relu(t["x"], 0.2), inputs, rng)


def check_maxpool3d(seed: int) -> GradCheckResult:
    rng = _rng(seed, 3)
    # distinct values so no window max is within a perturbation of its runner-up
    values = rng.permutation(2 * 4 * 4 * 4).reshape(1, 2, 4, 4, 4) * 0.1
    return _tensor_check("maxpool3d", seed, lambda t: maxpool3d(t["x"])[0], {"x": values}, rng)


def check_upsample_nn(seed: int) -> GradCheckResult:
    rng = _rng(seed, 4)
    return _tensor_check("upsample_nn", seed, lambda t: upsample_nn(t["x"]), {"x": rng.standard_normal((1, 2, 2, 2, 2))}, rng)


def check_concat(seed: int) -> GradCheckResult:
    rng = _rng(seed, 5)
    inputs = {"a": rng.standard_normal((1, 2, 2, 2, 2)), "b": rng.standard_normal((1, 3, 2, 2, 2))}
    return _tensor_check("concat", seed, lambda t: concat([t["a"], t["b"]]), inputs, rng)


def random_field_vectors(rng: np.random.Generator, shape: Sequence[int], spacing: Sequence[float]) -> np.ndarray:
    """Displacements whose sample points avoid integer voxel coordinates"""
    frac = rng.uniform(0.1, 0.9, (3, *shape))
    offset = rng.integers(-1, 1, (3, *shape))
    return (frac + offset) * np.asarray(spacing).reshape(3, 1, 1, 1)


def check_warp(seed: int, shape=(5, 5, 5), spacing=(1.0, 1.5, 0.8)) -> GradCheckResult:
    rng = _rng(seed, 6)
    grid = Grid(shape, spacing)
    data = rng.random(shape)
    vectors = random_field_vectors(rng, shape, spacing)
    upstream = rng.standard_normal(shape)
    sampler = TrilinearSampler(DisplacementField(grid, vectors))
    grad_data, grad_field = sampler.backward(data, upstream)

    def f():
        return float(np.sum(TrilinearSampler(DisplacementField(grid, vectors)).sample(data) * upstream))

    return check_gradient(
        "warp", seed, f, {"data": data, "field": vectors}, {"data": grad_data, "field": grad_field}, rng, OP_TOLERANCE,
    )


def _loss_check(name: str, seed: int, loss: Callable[[np.ndarray], LossValue], x: np.ndarray, rng) -> GradCheckResult:
    grad = loss(x).gradient
    return check_gradient(name, seed, lambda: loss(x).value, {"x": x}, {"x": grad}, rng, OP_TOLERANCE)


def check_losses(seed: int, shape=(5, 5, 5)) -> List[GradCheckResult]:
    rng = _rng(seed, 7)
    fixed = rng.random(shape)
    pred = rng.random(shape)
    grid = Grid(shape)
    labels = (1, 2)
    q = np.stack([rng.random(shape) > 0.5, rng.random(shape) > 0.6]).astype(float)
    q[:, 0, 0, 0] = 1.0
    p = rng.uniform(0.05, 0.95, (2, *shape))
    fixed_onehot = OneHotStack(grid, labels, q)
    dt = np.stack([ndimage.distance_transform_edt(c < 0.5) for c in q])
    return [
        _loss_check("loss_ncc", seed, lambda x: loss_ncc(x, fixed), pred, rng),
        _loss_check("loss_ncc_window", seed, lambda x: loss_ncc(x, fixed, window=3), pred, rng),
        _loss_check("loss_ssim", seed, lambda x: loss_ssim(x, fixed, window=3), pred, rng),
        _loss_check("loss_dice", seed, lambda x: loss_dice(OneHotStack(grid, labels, x), fixed_onehot), p, rng),
        _loss_check(
            "loss_hd_approx", seed, lambda x: loss_hd_approx(OneHotStack(grid, labels, x), fixed_onehot, dt), p, rng,
        ),
        _loss_check(
            "reg_smoothness", seed, lambda x: reg_smoothness(x, Grid(shape, (1.0, 2.0, 0.5))), rng.standard_normal((3, *shape)), rng,
        ),
    ]


def check_combine(seed: int) -> GradCheckResult:
    rng = _rng(seed, 8)
    names = ("NCC", "SSIM", "DSC", "REG")
    values = rng.uniform(0, 2, len(names))
    terms = [LossValue(n, float(v), np.zeros(1), "image") for n, v in zip(names, values)]
    logits = rng.standard_normal(len(names))
    state = WeightState(names, logits)
    grad = combine(terms, state).logits_grad

    def f():
        return combine(terms, state).value

    return check_gradient(
        "combine", seed, f, {"logits": state.logits}, {"logits": grad}, rng, WEIGHT_TOLERANCE, eps=1e-4, richardson=True,
    )


def _sphere_labels(shape, center, radius) -> np.ndarray:
    axes = np.meshgrid(*[np.arange(n) for n in shape], indexing="ij")
    inside = sum((a - c) ** 2 for a, c in zip(axes, center)) <= radius**2
    return inside.astype(np.uint8)


def check_end_to_end(seed: int, shape=(16, 16, 16), samples: int = 6) -> GradCheckResult:
    """
    Gradient of the full weighted loss (image, label and smoothness terms)
    with respect to every network tensor and the loss logits
    """
    rng = _rng(seed, 9)
    net = NetConfig(depth=2, filters=[4, 8], head_filters=4, input_shape=shape)
    cfg = TrainConfig(design="UW-NSDH", net=net, augment=AugmentConfig.identity(), seed=seed)
    trainer = Trainer(cfg)
    # non-zero output layer; the bias keeps sample points away from integer coordinates
    trainer.params["output.kernel"].data = rng.uniform(-0.02, 0.02, trainer.params["output.kernel"].shape)
    trainer.params["output.bias"].data = np.full(trainer.params["output.bias"].shape, 0.37)
    trainer.weights.logits = rng.standard_normal(len(trainer.weights.names))

    fixed = Volume.from_array(rng.random(shape))
    moving = Volume.from_array(rng.random(shape))
    labels_f = LabelMap.from_array(_sphere_labels(shape, (7, 8, 7), 4) + 2 * _sphere_labels(shape, (11, 11, 11), 2))
    labels_m = LabelMap.from_array(_sphere_labels(shape, (8, 7, 8), 4) + 2 * _sphere_labels(shape, (10, 11, 11), 2))
    pair = make_training_pair(fixed, labels_f, moving, labels_m, cfg.terms)

    result = trainer.forward_backward(pair)
    grads = {name: g.copy() for name, g in trainer.params.gradients().items()}
    grads["logits"] = result.logits_grad
    arrays = {name: tensor.data for name, tensor in trainer.params.items()}
    arrays["logits"] = trainer.weights.logits

    def f():
        return trainer.forward_backward(pair, with_grad=False).total

    return check_gradient("end_to_end", seed, f, arrays, grads, rng, END_TO_END_TOLERANCE, samples=samples)


def run_suite(seeds: int = 20, end_to_end_seeds: Optional[int] = None) -> List[GradCheckResult]:
    """Every check over `seeds` seeds (end-to-end over `end_to_end_seeds`, default 2)"""
    results: List[GradCheckResult] = []
    for seed in range(seeds):
        results.extend(
            [
                check_conv3d(seed),
                check_leaky_relu(seed),
                check_maxpool3d(seed),
                check_upsample_nn(seed),
                check_concat(seed),
                check_warp(seed),
                check_combine(seed),
                *check_losses(seed),
            ],
        )
    for seed in range(2 if end_to_end_seeds is None else end_to_end_seeds):
        results.append(check_end_to_end(seed))
    for result in results:
        if not result.passed:
            logger.warning(f"Gradient check {result.name} (seed {result.seed}) failed: {result.error:.2e}")
    return results
