"""
Desk-scale training trends on synthetic phantoms

Takes tens of minutes; run with ``DDREG_SLOW_TESTS=1 pytest -m slow``.
"""

import os

import numpy as np
import numpy.testing as npt
import pytest

from ddreg.config import load_experiment
from ddreg.dataset import generate_pairs, load_manifest, load_volumes
from ddreg.evaluation import evaluate_model
from ddreg.synthetic import write_synthetic_dataset
from ddreg.training import ENCODER_PREFIX, PairSource, Trainer, train, validation_pairs

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get("DDREG_SLOW_TESTS") != "1", reason="set DDREG_SLOW_TESTS=1"),
]


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    cfg = load_experiment(profile="desk")
    manifest = write_synthetic_dataset(root / "data", "ellipsoids", count=10, shape=(32, 32, 32), seed=0)
    augment = cfg.augment.model_copy(update={"seed": cfg.eval.seed})
    pairs = generate_pairs(load_manifest(manifest), augment, root / "pairs", pairs_per_volume=4)
    return cfg, manifest, pairs


@pytest.fixture(scope="module")
def rows(experiment):
    cfg, manifest, pairs = experiment
    results = {"identity": evaluate_model(None, pairs)[1]}
    for design in ("BL-N", "SG-ND"):
        train_cfg = cfg.train_config().model_copy(update={"design": design})
        ckpt, _ = train(manifest, train_cfg)
        results[design] = evaluate_model(ckpt, pairs)[1]
    return results


def test_segmentation_guidance_beats_intensity_only(rows):
    guided, baseline = rows["SG-ND"].metrics, rows["BL-N"].metrics

    assert guided["dsc"].mean > baseline["dsc"].mean
    assert guided["tre"].mean < baseline["tre"].mean


def test_registration_halves_misalignment(rows):
    assert rows["SG-ND"].metrics["tre"].mean < 0.5 * rows["identity"].metrics["tre"].mean


def test_decoder_phase_keeps_encoder(experiment):
    cfg, manifest, _ = experiment
    train_cfg = cfg.train_config().model_copy(update={"max_epochs": 20})
    volumes = load_volumes(load_manifest(manifest), "train")
    ckpt, _ = train(manifest, train_cfg)

    trainer = Trainer(train_cfg, params=ckpt.params, lr=train_cfg.finetune_lr)
    before = trainer.params.arrays()
    trainer.params.freeze([ENCODER_PREFIX])
    trainer.fit(PairSource(volumes, train_cfg), validation_pairs(volumes, train_cfg), 5, "decoder")

    after = trainer.params.arrays()
    for name in before:
        if name.startswith(ENCODER_PREFIX):
            npt.assert_array_equal(after[name], before[name])
    assert not all(np.array_equal(after[n], before[n]) for n in before)
