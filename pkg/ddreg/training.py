"""
Training and transfer learning

Every training step synthesizes a fresh moving image from a fixed volume,
predicts the displacement, warps the moving image (and its labels for
weakly-supervised designs) and back-propagates the weighted loss through the
warp into the network and, for uncertainty-weighted designs, into the loss
weights.
"""

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from ddreg.augmentation import iter_pairs
from ddreg.config import TrainConfig
from ddreg.dataset import ManifestEntry, load_manifest, load_volumes
from ddreg.errors import (
    CheckpointMismatchError,
    ConfigurationError,
    DatasetError,
    NonFiniteError,
    NonFiniteLossError,
)
from ddreg.logger import logger
from ddreg.losses import (
    LossValue,
    distance_maps,
    loss_dice,
    loss_hd_approx,
    loss_ncc,
    loss_ssim,
    reg_smoothness,
)
from ddreg.nn.checkpoint import Checkpoint, save_checkpoint
from ddreg.nn.tensor import ParameterStore
from ddreg.nn.unet import UNet, init_parameters
from ddreg.volume import DisplacementField, LabelMap, Volume, require_same_grid, resize
from ddreg.warp import OneHotStack, TrilinearSampler, to_onehot
from ddreg.weighting import WeightHistory, WeightState, combine, init_weights, record_weights

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOGITS = "loss_weights.logits"
LABEL_TERMS = ("DSC", "HD")
ENCODER_PREFIX = "encoder."

Dataset = Union[str, Path, Sequence[ManifestEntry]]


@dataclass
class OptimizerState:
    """Adam moments per parameter"""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = ADAM_BETAS[0]
    beta2: float = ADAM_BETAS[1]
    eps: float = ADAM_EPS

    def metadata(self) -> Dict[str, float]:
        return {"step": self.step, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    frozen: Iterable[str] = (),
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One bias-corrected Adam update, applied in place

    Frozen parameters keep their values and their moments.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise ConfigurationError(f"Gradients for unknown parameters: {sorted(unknown)}")
    frozen = set(frozen)
    state.step += 1
    t = state.step
    for name, grad in grads.items():
        if name in frozen:
            continue
        if grad.shape != params[name].shape:
            raise ConfigurationError(f"Gradient of {name} has shape {grad.shape}, expected {params[name].shape}")
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"Gradient of {name} is not finite")
        m = state.beta1 * state.m.get(name, np.zeros_like(grad)) + (1 - state.beta1) * grad
        v = state.beta2 * state.v.get(name, np.zeros_like(grad)) + (1 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        params[name] -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


class PlateauScheduler:
    """
    Multiply the learning rate by `factor` once `patience` consecutive epochs
    fail to improve the best validation loss by a relative `min_delta`
    """

    def __init__(self, lr: float, factor: float = 0.1, patience: int = 10, min_delta: float = 1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.bad_epochs = 0

    def improves(self, val_loss: float) -> bool:
        if not math.isfinite(self.best):
            return val_loss < self.best
        return val_loss < self.best - abs(self.best) * self.min_delta

    def step(self, val_loss: float) -> float:
        if self.improves(val_loss):
            self.best = val_loss
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.info(f"Validation loss plateaued, learning rate reduced to {self.lr:g}")
        return self.lr


class EpochRecord(BaseModel):
    """One row of the run log"""

    model_config = ConfigDict(extra="forbid")

    epoch: int
    phase: str
    lr: float
    train_loss: float
    val_loss: float
    components: Dict[str, float]
    weights: Dict[str, float]
    epoch_seconds: float
    augmentation: bool
    improved: bool


@dataclass
class RunLog:
    """Per-epoch history of a run"""

    records: List[EpochRecord] = field(default_factory=list)
    phase_boundary: Optional[int] = None
    weight_history: WeightHistory = field(default_factory=WeightHistory)

    @property
    def best_epoch(self) -> Optional[int]:
        improved = [r.epoch for r in self.records if r.improved]
        return improved[-1] if improved else None

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.nan)

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for record in self.records:
            row = record.model_dump(exclude={"components", "weights"})
            row.update({f"loss_{k.lower()}": v for k, v in record.components.items()})
            row.update({f"weight_{k.lower()}": v for k, v in record.weights.items()})
            rows.append(row)
        return pd.DataFrame(rows)

    def summary(self) -> dict:
        return {
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_val_loss": None if math.isnan(self.best_val_loss) else self.best_val_loss,
            "phase_boundary": self.phase_boundary,
            "final_lr": self.records[-1].lr if self.records else None,
            "train_seconds": sum(r.epoch_seconds for r in self.records),
        }

    def save(self, directory: Union[str, Path]) -> List[Path]:
        """Write ``runlog.csv``, ``runlog.json`` and ``weights.csv``"""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / "runlog.csv"
        self.to_dataframe().to_csv(csv_path, index=False)
        json_path = directory / "runlog.json"
        json_path.write_text(json.dumps(self.summary(), indent=2))
        weights_path = self.weight_history.to_csv(directory / "weights.csv")
        return [csv_path, json_path, weights_path]


@dataclass
class TrainingPair:
    """Network-ready pair with the label stacks its design needs"""

    fixed: Volume
    moving: Volume
    fixed_onehot: Optional[OneHotStack] = None
    moving_onehot: Optional[OneHotStack] = None
    dt_fixed: Optional[np.ndarray] = None
    index: int = 0


def make_training_pair(
    fixed: Volume,
    fixed_labels: LabelMap,
    moving: Volume,
    moving_labels: LabelMap,
    terms: Sequence[str],
    index: int = 0,
) -> TrainingPair:
    """Precompute one-hot stacks and distance maps for the label terms"""
    require_same_grid(fixed, fixed_labels, moving, moving_labels)
    pair = TrainingPair(fixed, moving, index=index)
    if any(t in LABEL_TERMS for t in terms):
        labels = fixed_labels.labels
        pair.fixed_onehot = to_onehot(fixed_labels, labels)
        pair.moving_onehot = to_onehot(moving_labels, labels)
        if "HD" in terms:
            pair.dt_fixed = distance_maps(pair.fixed_onehot)
    return pair


@dataclass(frozen=True)
class StepResult:
    total: float
    components: Dict[str, float]
    logits_grad: np.ndarray


class Trainer:
    """
    Owns the network, loss weights, optimizer and scheduler of one run
    """

    def __init__(
        self,
        cfg: TrainConfig,
        params: Optional[ParameterStore] = None,
        weights: Optional[WeightState] = None,
        lr: Optional[float] = None,
    ):
        self.cfg = cfg
        self.params = params if params is not None else init_parameters(cfg.net, cfg.seed)
        self.net = UNet(cfg.net, self.params)
        names = (*cfg.terms, "REG")
        if weights is None or tuple(weights.names) != names:
            weights = init_weights(len(cfg.terms), 1, cfg.reg_weight, names)
        weights.trainable = cfg.learned_weights
        self.weights = weights
        self.optimizer = OptimizerState()
        self.scheduler = PlateauScheduler(
            cfg.lr if lr is None else lr,
            cfg.scheduler.factor,
            cfg.scheduler.patience,
            cfg.scheduler.min_delta,
        )
        self.log = RunLog()
        self.best_val = math.inf
        self.best_state: Optional[Tuple[Dict[str, np.ndarray], np.ndarray, int]] = None
        self.epoch = 0

    def loss_terms(self, pair: TrainingPair, field: DisplacementField, sampler: TrilinearSampler) -> List[LossValue]:
        """Evaluate the design's terms in weight order, regularizer last"""
        warped = sampler.sample(pair.moving.data)
        warped_onehot = None
        if pair.moving_onehot is not None:
            warped_onehot = OneHotStack(
                field.grid,
                pair.moving_onehot.labels,
                sampler.sample(pair.moving_onehot.channels),
            )
        terms = []
        for name in self.cfg.terms:
            if name == "NCC":
                terms.append(loss_ncc(warped, pair.fixed.data, self.cfg.ncc_window))
            elif name == "SSIM":
                terms.append(loss_ssim(warped, pair.fixed.data))
            elif name == "DSC":
                terms.append(loss_dice(warped_onehot, pair.fixed_onehot))
            elif name == "HD":
                terms.append(loss_hd_approx(warped_onehot, pair.fixed_onehot, pair.dt_fixed))
        terms.append(reg_smoothness(field))
        return terms

    def forward_backward(self, pair: TrainingPair, with_grad: bool = True) -> StepResult:
        """
        Loss of one pair; with `with_grad`, parameter gradients are left on the store
        """
        try:
            field, out = self.net.predict(pair.fixed, pair.moving)
        except NonFiniteError as e:
            raise NonFiniteLossError("displacement", pair.index) from e
        sampler = TrilinearSampler(field)
        terms = self.loss_terms(pair, field, sampler)
        combined = combine(terms, self.weights, pair.index)

        if with_grad:
            weights = combined.weights
            grad_image = None
            grad_labels = None
            grad_field = np.zeros(field.vectors.shape)
            for term in terms:
                scaled = weights[term.name] * term.gradient
                if term.target == "image":
                    grad_image = scaled if grad_image is None else grad_image + scaled
                elif term.target == "labels":
                    grad_labels = scaled if grad_labels is None else grad_labels + scaled
                else:
                    grad_field += scaled
            if grad_image is not None:
                grad_field += sampler.backward(pair.moving.data, grad_image, need_data_grad=False)[1]
            if grad_labels is not None:
                grad_field += sampler.backward(pair.moving_onehot.channels, grad_labels, need_data_grad=False)[1]
            self.params.zero_grad()
            out.backward(grad_field[None])

        return StepResult(combined.value, combined.components, combined.logits_grad)

    def _apply(self, grads: Dict[str, np.ndarray], logits_grad: np.ndarray, count: int):
        arrays = {name: tensor.data for name, tensor in self.params.items()}
        mean = {name: g / count for name, g in grads.items()}
        frozen = [name for name in self.params if not self.params.is_trainable(name)]
        if self.weights.trainable:
            arrays[LOGITS] = self.weights.logits
            mean[LOGITS] = logits_grad / count
        adam_step(arrays, mean, self.optimizer, self.scheduler.lr, frozen)

    def run_epoch(self, pairs: Iterable[TrainingPair]) -> Tuple[float, Dict[str, float]]:
        """
        One pass over `pairs`, stepping every `accumulation` samples and once
        more for a trailing partial group
        """
        grads: Dict[str, np.ndarray] = {}
        logits_grad = np.zeros(len(self.weights.names))
        count = 0
        totals = []
        components: Dict[str, List[float]] = {}
        for pair in pairs:
            result = self.forward_backward(pair)
            for name, grad in self.params.gradients().items():
                if name in grads:
                    grads[name] += grad
                else:
                    grads[name] = grad.copy()
            logits_grad += result.logits_grad
            count += 1
            totals.append(result.total)
            for name, value in result.components.items():
                components.setdefault(name, []).append(value)
            if count == self.cfg.accumulation:
                self._apply(grads, logits_grad, count)
                grads = {}
                logits_grad = np.zeros_like(logits_grad)
                count = 0
        if count:
            self._apply(grads, logits_grad, count)
        if not totals:
            raise DatasetError("Training epoch saw no samples")
        return (
            math.fsum(totals) / len(totals),
            {name: math.fsum(values) / len(values) for name, values in components.items()},
        )

    def validate(self, pairs: Sequence[TrainingPair]) -> float:
        """Mean weighted loss over a fixed pair set"""
        values = [self.forward_backward(pair, with_grad=False).total for pair in pairs]
        return math.fsum(values) / len(values)

    def snapshot(self, val_loss: float):
        self.best_val = val_loss
        self.best_state = (self.params.arrays(), self.weights.logits.copy(), self.epoch)

    def fit(
        self,
        source: Callable[[int], Iterable[TrainingPair]],
        val_pairs: Sequence[TrainingPair],
        epochs: int,
        phase: str = "train",
        augmentation: bool = True,
    ) -> RunLog:
        """Train for `epochs` epochs, continuing the epoch count of earlier phases"""
        for _ in range(epochs):
            self.epoch += 1
            record_weights(self.weights, self.epoch, self.log.weight_history)
            lr = self.scheduler.lr
            start = time.perf_counter()
            train_loss, components = self.run_epoch(source(self.epoch))
            seconds = time.perf_counter() - start
            val_loss = self.validate(val_pairs)
            improved = val_loss < self.best_val
            if improved:
                self.snapshot(val_loss)
            self.scheduler.step(val_loss)
            self.log.records.append(
                EpochRecord(
                    epoch=self.epoch,
                    phase=phase,
                    lr=lr,
                    train_loss=train_loss,
                    val_loss=val_loss,
                    components=components,
                    weights=self.weights.as_dict(),
                    epoch_seconds=seconds,
                    augmentation=augmentation,
                    improved=improved,
                ),
            )
            logger.info(
                f"[{phase}] epoch {self.epoch}: train {train_loss:.5f} val {val_loss:.5f} "
                f"lr {lr:g} ({seconds:.1f}s){' *' if improved else ''}",
            )
        return self.log

    def checkpoint(self) -> Checkpoint:
        """Best checkpoint so far, or the current state when no epoch ran"""
        params = self.params
        logits = self.weights.logits.copy()
        epoch = self.epoch
        if self.best_state is not None:
            arrays, logits, epoch = self.best_state
            params = init_parameters(self.cfg.net)
            params.load(arrays)
        return Checkpoint(
            net=self.cfg.net,
            params=params,
            design=self.cfg.design,
            loss_names=tuple(self.weights.names),
            loss_logits=logits,
            learned_weights=self.cfg.learned_weights,
            epoch=epoch,
            val_loss=self.best_val if self.best_state is not None else None,
            optimizer={**self.optimizer.metadata(), "lr": self.scheduler.lr},
        )


def prepare_volumes(volumes: Sequence[Tuple[Volume, LabelMap]], shape: Sequence[int]) -> List[Tuple[Volume, LabelMap]]:
    """Resize volumes to the network input shape where needed"""
    shape = tuple(shape)
    prepared = []
    for image, labels in volumes:
        if image.grid.shape != shape:
            image, labels = resize(image, shape), resize(labels, shape)
        prepared.append((image, labels))
    return prepared


class PairSource:
    """
    Training pairs per epoch: a seeded shuffle of the training volumes, each
    with a freshly augmented moving image, or the same pairs every epoch when
    pairs are precomputed
    """

    def __init__(self, volumes: Sequence[Tuple[Volume, LabelMap]], cfg: TrainConfig, precomputed: Optional[bool] = None):
        self.volumes = list(volumes)
        self.cfg = cfg
        self.precomputed = cfg.precomputed_pairs if precomputed is None else precomputed
        self._cache: Optional[List[TrainingPair]] = None

    def order(self, epoch: int) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([self.cfg.seed, epoch, 0x5EED])))
        return rng.permutation(len(self.volumes))

    def _generate(self, volumes: Sequence[int], indices: Sequence[int]) -> Iterator[TrainingPair]:
        samples = iter_pairs([self.volumes[v] for v in volumes], self.cfg.augment, indices)
        for v, index, sample in zip(volumes, indices, samples):
            fixed, labels = self.volumes[v]
            yield make_training_pair(fixed, labels, sample.moving, sample.moving_labels, self.cfg.terms, index)

    def __call__(self, epoch: int) -> Iterator[TrainingPair]:
        order = self.order(epoch)
        if self.precomputed:
            if self._cache is None:
                n = len(self.volumes)
                self._cache = list(self._generate(range(n), range(n)))
            return iter([self._cache[v] for v in order])
        n = len(self.volumes)
        return self._generate(order.tolist(), [(epoch - 1) * n + k for k in range(n)])


def validation_pairs(volumes: Sequence[Tuple[Volume, LabelMap]], cfg: TrainConfig) -> List[TrainingPair]:
    """Fixed validation set drawn with its own augmentation stream"""
    augment = cfg.augment.model_copy(update={"seed": (cfg.augment.seed + 1) % 2**64})
    jobs = [(v, v * cfg.validation_pairs + k) for v in range(len(volumes)) for k in range(cfg.validation_pairs)]
    samples = iter_pairs([volumes[v] for v, _ in jobs], augment, [i for _, i in jobs])
    return [
        make_training_pair(volumes[v][0], volumes[v][1], s.moving, s.moving_labels, cfg.terms, index)
        for (v, index), s in zip(jobs, samples)
    ]


def _load_splits(dataset: Dataset, cfg: TrainConfig):
    entries = load_manifest(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    if not entries:
        raise DatasetError("Dataset manifest is empty")
    train_volumes = prepare_volumes(load_volumes(entries, "train"), cfg.net.input_shape)
    if not train_volumes:
        raise DatasetError("Dataset has no training volumes")
    val_volumes = prepare_volumes(load_volumes(entries, "val"), cfg.net.input_shape)
    if not val_volumes:
        logger.warning("No validation volumes, validating on training volumes")
        val_volumes = train_volumes
    return train_volumes, val_volumes


def _finish(trainer: Trainer, out_dir: Optional[Union[str, Path]]) -> Tuple[Checkpoint, RunLog]:
    ckpt = trainer.checkpoint()
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(ckpt, out_dir / "checkpoint")
        trainer.log.save(out_dir)
    return ckpt, trainer.log


def train(
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[Checkpoint, RunLog]:
    """
    Train from scratch and return the lowest-validation-loss checkpoint
    """
    train_volumes, val_volumes = _load_splits(dataset, cfg)
    logger.info(
        f"Training {cfg.design} on {len(train_volumes)} volumes "
        f"({len(val_volumes)} validation) for {cfg.max_epochs} epochs",
    )
    trainer = Trainer(cfg)
    source = PairSource(train_volumes, cfg)
    trainer.fit(source, validation_pairs(val_volumes, cfg), cfg.max_epochs, augmentation=not source.precomputed)
    return _finish(trainer, out_dir)


def _check_compatible(checkpoint: Checkpoint, cfg: TrainConfig):
    expected = init_parameters(cfg.net).shapes()
    stored = checkpoint.params.shapes()
    mismatched = sorted(n for n in set(expected) | set(stored) if expected.get(n) != stored.get(n))
    if mismatched:
        raise CheckpointMismatchError(
            f"Checkpoint does not fit the network configuration: {', '.join(mismatched)}",
            tensors=mismatched,
        )


def _warm_trainer(checkpoint: Checkpoint, cfg: TrainConfig) -> Trainer:
    _check_compatible(checkpoint, cfg)
    params = init_parameters(cfg.net)
    params.load(checkpoint.params.arrays())
    weights = WeightState(checkpoint.loss_names, checkpoint.loss_logits.copy(), 1, cfg.learned_weights)
    return Trainer(cfg, params=params, weights=weights, lr=cfg.finetune_lr)


def finetune_full(
    checkpoint: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[Checkpoint, RunLog]:
    """Continue training every parameter at the transfer-learning rate"""
    trainer = _warm_trainer(checkpoint, cfg)
    train_volumes, val_volumes = _load_splits(dataset, cfg)
    source = PairSource(train_volumes, cfg)
    trainer.fit(source, validation_pairs(val_volumes, cfg), cfg.max_epochs, "finetune", not source.precomputed)
    return _finish(trainer, out_dir)


def finetune_two_step(
    checkpoint: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    step1_epochs: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[Checkpoint, RunLog]:
    """
    Finetune with the encoder frozen for `step1_epochs`, then everything for
    the remaining epochs
    """
    step1 = cfg.two_step_epochs if step1_epochs is None else step1_epochs
    if not 0 <= step1 <= cfg.max_epochs:
        raise ConfigurationError(f"step1_epochs must be within [0, {cfg.max_epochs}], got {step1}")
    trainer = _warm_trainer(checkpoint, cfg)
    train_volumes, val_volumes = _load_splits(dataset, cfg)
    source = PairSource(train_volumes, cfg)
    val = validation_pairs(val_volumes, cfg)

    trainer.params.freeze([ENCODER_PREFIX])
    trainer.fit(source, val, step1, "decoder", not source.precomputed)
    trainer.log.phase_boundary = step1
    trainer.params.unfreeze()
    trainer.fit(source, val, cfg.max_epochs - step1, "full", not source.precomputed)
    return _finish(trainer, out_dir)


def measure_augmentation_overhead(dataset: Dataset, cfg: TrainConfig, epochs: int = 2) -> Dict[str, float]:
    """
    Time the last of `epochs` epochs with on-the-fly augmentation and with
    precomputed pairs
    """
    if epochs < 1:
        raise ConfigurationError("Need at least one epoch to time")
    train_volumes, val_volumes = _load_splits(dataset, cfg)
    val = validation_pairs(val_volumes, cfg)
    seconds = {}
    for precomputed in (False, True):
        trainer = Trainer(cfg)
        source = PairSource(train_volumes, cfg, precomputed=precomputed)
        log = trainer.fit(source, val, epochs, augmentation=not precomputed)
        seconds[precomputed] = log.records[-1].epoch_seconds
    on_the_fly, precomputed = seconds[False], seconds[True]
    result = {
        "on_the_fly_seconds": on_the_fly,
        "precomputed_seconds": precomputed,
        "overhead_seconds": on_the_fly - precomputed,
        "overhead_fraction": (on_the_fly - precomputed) / precomputed if precomputed > 0 else math.nan,
    }
    logger.info(f"Augmentation overhead: {result['overhead_fraction']:.1%} of a precomputed epoch")
    return result
