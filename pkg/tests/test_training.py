import json
import math

import numpy as np
import numpy.testing as npt
import pytest

from ddreg.config import AugmentConfig, NetConfig, TrainConfig
from ddreg.dataset import ManifestEntry, load_manifest, load_volumes
from ddreg.errors import CheckpointMismatchError, ConfigurationError, DatasetError
from ddreg.nn import init_parameters
from ddreg.synthetic import write_synthetic_dataset
from ddreg.training import (
    ENCODER_PREFIX,
    OptimizerState,
    PairSource,
    PlateauScheduler,
    Trainer,
    adam_step,
    finetune_full,
    finetune_two_step,
    make_training_pair,
    measure_augmentation_overhead,
    train,
    validation_pairs,
)

SHAPE = (16, 16, 16)


def _cfg(**update) -> TrainConfig:
    settings = dict(
        design="UW-NSDH",
        max_epochs=2,
        accumulation=2,
        net=NetConfig(depth=1, filters=[4], head_filters=4, input_shape=SHAPE),
        augment=AugmentConfig(control_grid=(3, 3, 3), seed=3),
    )
    settings.update(update)
    return TrainConfig(**settings)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    return write_synthetic_dataset(out, count=5, shape=SHAPE, seed=2)


@pytest.fixture(scope="module")
def train_volumes(manifest):
    return load_volumes(load_manifest(manifest), "train")


def _random_output(cfg: TrainConfig, seed: int = 9):
    params = init_parameters(cfg.net, cfg.seed)
    rng = np.random.default_rng(seed)
    params["output.kernel"].data = rng.uniform(-0.01, 0.01, params["output.kernel"].shape)
    return params


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 0.0])}

    adam_step(params, grads, OptimizerState(), lr=0.1)

    # bias correction makes the first step lr * sign(g)
    npt.assert_allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_skips_frozen_parameters():
    params = {"a": np.ones(2), "b": np.ones(2)}
    grads = {"a": np.ones(2), "b": np.ones(2)}
    state = OptimizerState()

    adam_step(params, grads, state, lr=0.1, frozen=["a"])

    npt.assert_array_equal(params["a"], 1.0)
    assert "a" not in state.m, "Frozen parameters keep their moments"
    assert (params["b"] < 1.0).all()
    assert state.step == 1


def test_adam_rejects_unknown_gradients():
    with pytest.raises(ConfigurationError):
        adam_step({"a": np.ones(1)}, {"b": np.ones(1)}, OptimizerState(), lr=0.1)


def test_plateau_scheduler_reduces_after_patience():
    scheduler = PlateauScheduler(1.0, factor=0.1, patience=2)

    assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == 1.0
    assert scheduler.step(1.0) == pytest.approx(0.1), "Two bad epochs reach patience"
    assert scheduler.bad_epochs == 0
    assert scheduler.step(0.5) == pytest.approx(0.1)
    assert scheduler.best == 0.5


def test_plateau_scheduler_default_patience():
    scheduler = PlateauScheduler(1e-3)
    scheduler.step(0.5)

    rates = [scheduler.step(0.5) for _ in range(20)]

    assert rates[:9] == [1e-3] * 9
    assert rates[9] == 1e-3 * 0.1, "Ten flat epochs cut the rate by a factor of ten"
    assert rates[19] == 1e-3 * 0.1 * 0.1


def test_plateau_scheduler_relative_threshold():
    scheduler = PlateauScheduler(1.0, patience=5, min_delta=1e-4)
    scheduler.step(1.0)

    assert not scheduler.improves(0.99995)
    assert scheduler.improves(0.999)


def test_fresh_network_step(train_volumes):
    cfg = _cfg()
    trainer = Trainer(cfg)
    fixed, labels = train_volumes[0]
    moving, moving_labels = train_volumes[1]
    pair = make_training_pair(fixed, labels, moving, moving_labels, cfg.terms)

    result = trainer.forward_backward(pair)

    assert set(result.components) == {"NCC", "SSIM", "DSC", "HD", "REG"}
    assert result.components["REG"] == 0.0, "Zero field has no smoothness penalty"
    assert abs(result.logits_grad.sum()) < 1e-12, "Logit gradients of a softmax sum to zero"
    assert np.any(trainer.params["output.kernel"].grad), "The output layer receives a gradient"


def test_trailing_partial_group_is_applied(train_volumes):
    cfg = _cfg()
    trainer = Trainer(cfg)
    pairs = [make_training_pair(f, lab, f, lab, cfg.terms, k) for k, (f, lab) in enumerate(train_volumes)]

    trainer.run_epoch(pairs)

    assert len(pairs) == 3
    assert trainer.optimizer.step == 2, "Three samples with accumulation two make two steps"


def test_fixed_weights_do_not_move(train_volumes):
    cfg = _cfg(design="SG-NSD")
    trainer = Trainer(cfg)
    before = trainer.weights.logits.copy()
    pairs = [make_training_pair(f, lab, f, lab, cfg.terms, k) for k, (f, lab) in enumerate(train_volumes)]

    trainer.run_epoch(pairs)

    npt.assert_array_equal(trainer.weights.logits, before)


def test_training_is_deterministic_across_threads(manifest, monkeypatch):
    runs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("DDREG_THREADS", threads)
        runs.append(train(manifest, _cfg()))

    (ckpt_a, log_a), (ckpt_b, log_b) = runs
    for name, tensor in ckpt_a.params.items():
        npt.assert_array_equal(ckpt_b.params[name].data, tensor.data, err_msg=name)
    npt.assert_array_equal(ckpt_a.loss_logits, ckpt_b.loss_logits)
    assert [r.val_loss for r in log_a.records] == [r.val_loss for r in log_b.records]


def test_checkpoint_keeps_lowest_validation_loss(manifest, tmp_path):
    ckpt, log = train(manifest, _cfg(max_epochs=3), out_dir=tmp_path)

    assert len(log.records) == 3
    assert ckpt.val_loss == log.best_val_loss
    assert ckpt.epoch == log.best_epoch
    assert (tmp_path / "checkpoint" / "checkpoint.bin").exists()
    assert (tmp_path / "weights.csv").exists()
    summary = json.loads((tmp_path / "runlog.json").read_text())
    assert summary["epochs"] == 3
    assert summary["best_epoch"] == log.best_epoch


def test_learned_weights_stay_on_simplex(manifest):
    _, log = train(manifest, _cfg())

    for record in log.records:
        assert math.fsum(record.weights.values()) == pytest.approx(1.0, abs=1e-12)
        assert min(record.weights.values()) > 0


def test_precomputed_pairs_repeat(train_volumes):
    cfg = _cfg()
    cached = PairSource(train_volumes, cfg, precomputed=True)
    fresh = PairSource(train_volumes, cfg, precomputed=False)

    first = {p.index: p.moving.data for p in cached(1)}
    second = {p.index: p.moving.data for p in cached(2)}
    assert first.keys() == second.keys()
    for index in first:
        npt.assert_array_equal(first[index], second[index])

    indices_1 = sorted(p.index for p in fresh(1))
    indices_2 = sorted(p.index for p in fresh(2))
    assert indices_1 == [0, 1, 2]
    assert indices_2 == [3, 4, 5], "Every epoch draws new augmentation indices"


def test_validation_pairs_are_fixed(train_volumes):
    cfg = _cfg(validation_pairs=2)
    a = validation_pairs(train_volumes, cfg)
    b = validation_pairs(train_volumes, cfg)

    assert len(a) == 6
    for pa, pb in zip(a, b):
        npt.assert_array_equal(pa.moving.data, pb.moving.data)


def test_encoder_is_frozen_in_decoder_phase(train_volumes):
    cfg = _cfg()
    trainer = Trainer(cfg, params=_random_output(cfg))
    before = trainer.params.arrays()

    trainer.params.freeze([ENCODER_PREFIX])
    trainer.fit(PairSource(train_volumes, cfg), validation_pairs(train_volumes, cfg), 1, "decoder")

    after = trainer.params.arrays()
    for name in before:
        if name.startswith(ENCODER_PREFIX):
            npt.assert_array_equal(after[name], before[name], err_msg=f"{name} moved while frozen")
    assert not np.array_equal(after["head.0.kernel"], before["head.0.kernel"])


def test_two_step_finetune(manifest):
    cfg = _cfg()
    ckpt = Trainer(cfg, params=_random_output(cfg)).checkpoint()

    _, log = finetune_two_step(ckpt, manifest, cfg, step1_epochs=1)

    assert log.phase_boundary == 1
    assert [r.phase for r in log.records] == ["decoder", "full"]
    assert [r.epoch for r in log.records] == [1, 2]
    assert log.records[0].lr == cfg.finetune_lr


def test_two_step_rejects_long_first_phase(manifest):
    cfg = _cfg()
    ckpt = Trainer(cfg).checkpoint()
    with pytest.raises(ConfigurationError):
        finetune_two_step(ckpt, manifest, cfg, step1_epochs=5)


def test_finetune_full_uses_transfer_rate(manifest):
    cfg = _cfg(max_epochs=1, finetune_lr=5e-5)
    ckpt = Trainer(cfg).checkpoint()

    _, log = finetune_full(ckpt, manifest, cfg)

    assert log.records[0].phase == "finetune"
    assert log.records[0].lr == 5e-5


def test_finetune_rejects_other_network(manifest):
    ckpt = Trainer(_cfg()).checkpoint()
    wider = _cfg(net=NetConfig(depth=1, filters=[4], head_filters=6, input_shape=SHAPE))

    with pytest.raises(CheckpointMismatchError) as info:
        finetune_full(ckpt, manifest, wider)

    assert "head.1.kernel" in info.value.tensors


def test_dataset_without_training_volumes(manifest):
    entries = [e.model_copy(update={"split": "test"}) for e in load_manifest(manifest)]
    with pytest.raises(DatasetError):
        train(entries, _cfg())


def test_missing_validation_split_falls_back(manifest):
    entries = [ManifestEntry(fixed=e.fixed, labels=e.labels) for e in load_manifest(manifest)][:2]
    _, log = train(entries, _cfg(max_epochs=1))
    assert math.isfinite(log.records[0].val_loss)


def test_augmentation_overhead(manifest):
    result = measure_augmentation_overhead(manifest, _cfg(), epochs=1)

    assert set(result) == {"on_the_fly_seconds", "precomputed_seconds", "overhead_seconds", "overhead_fraction"}
    assert result["precomputed_seconds"] > 0
    assert result["overhead_seconds"] == pytest.approx(result["on_the_fly_seconds"] - result["precomputed_seconds"])


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(4)
    grads = rng.standard_normal((5, 3))
    params = {"w": np.zeros(3)}
    state = OptimizerState()

    m = np.zeros(3)
    v = np.zeros(3)
    expected = np.zeros(3)
    for t, g in enumerate(grads, start=1):
        adam_step(params, {"w": g}, state, lr=0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)

    npt.assert_allclose(params["w"], expected, rtol=0, atol=1e-12)


def test_adam_zero_gradient_keeps_values():
    params = {"w": np.array([0.5])}
    state = OptimizerState()
    adam_step(params, {"w": np.zeros(1)}, state, lr=0.1)

    assert params["w"][0] == 0.5
    assert state.step == 1


def test_accumulated_identical_samples_match_single_sample(train_volumes):
    fixed, labels = train_volumes[0]
    moving, moving_labels = train_volumes[1]

    updates = []
    for accumulation, count in ((8, 8), (1, 1)):
        cfg = _cfg(accumulation=accumulation)
        trainer = Trainer(cfg, params=_random_output(cfg))
        pair = make_training_pair(fixed, labels, moving, moving_labels, cfg.terms)
        trainer.run_epoch([pair] * count)
        updates.append(trainer.params.arrays())

    for name in updates[0]:
        npt.assert_allclose(updates[0][name], updates[1][name], rtol=0, atol=1e-12, err_msg=name)


def test_finetune_without_epochs_keeps_parameters(manifest):
    cfg = _cfg()
    ckpt = Trainer(cfg, params=_random_output(cfg)).checkpoint()

    tuned, log = finetune_full(ckpt, manifest, _cfg(max_epochs=0))

    assert log.records == []
    for name, tensor in ckpt.params.items():
        npt.assert_array_equal(tuned.params[name].data, tensor.data)
