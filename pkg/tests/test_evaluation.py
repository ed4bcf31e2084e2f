import math

import numpy as np
import pytest
from scipy.spatial.distance import cdist

from ddreg.config import AugmentConfig, NetConfig
from ddreg.dataset import generate_pairs, load_manifest
from ddreg.evaluation import (
    MetricRow,
    MetricSummary,
    Registrar,
    best_row,
    boundary,
    evaluate_model,
    metric_dsc,
    metric_hd,
    metric_hd95,
    metric_ncc,
    metric_ssim,
    metric_tre,
    pair_metrics,
    report_table,
    summarize,
)
from ddreg.nn import Checkpoint, init_parameters
from ddreg.synthetic import make_phantom, write_synthetic_dataset
from ddreg.volume import LabelMap, Volume

SPACING = (1.0, 2.0, 0.5)


@pytest.fixture(scope="module")
def masks():
    rng = np.random.default_rng(0)
    a = np.zeros((9, 8, 10), dtype=np.uint8)
    b = np.zeros_like(a)
    a[2:7, 1:6, 2:8] = 1
    b[3:8, 2:6, 1:7] = 1
    # ragged edges
    a[rng.random(a.shape) < 0.05] = 0
    b[rng.random(b.shape) < 0.05] = 0
    return LabelMap.from_array(a, spacing=SPACING), LabelMap.from_array(b, spacing=SPACING)


def _boundary_points(m: LabelMap) -> np.ndarray:
    return m.grid.voxel_to_world(np.argwhere(boundary(m.mask(1))))


def test_dice_matches_brute_force(masks):
    a, b = masks
    ma, mb = a.mask(1), b.mask(1)
    expected = 2 * np.logical_and(ma, mb).sum() / (ma.sum() + mb.sum())
    assert metric_dsc(a, b, 1) == pytest.approx(expected)
    assert metric_dsc(a, a, 1) == 1.0
    assert math.isnan(metric_dsc(a, b, 5)), "Labels absent on both sides are undefined"


def test_hausdorff_matches_brute_force(masks):
    a, b = masks
    distances = cdist(_boundary_points(a), _boundary_points(b))
    d_ab, d_ba = distances.min(axis=1), distances.min(axis=0)

    assert metric_hd(a, b, 1) == pytest.approx(max(d_ab.max(), d_ba.max()))
    assert metric_hd95(a, b, 1) == pytest.approx(np.percentile(np.concatenate([d_ab, d_ba]), 95))
    assert metric_hd(a, a, 1) == 0.0


def test_boundary_distance_undefined_for_missing_label(masks):
    a, _ = masks
    empty = LabelMap(a.grid, np.zeros(a.grid.shape, dtype=np.uint8))
    assert math.isnan(metric_hd(a, empty, 1))
    assert math.isnan(metric_hd95(empty, a, 1))


def test_tre_of_shifted_label():
    data = np.zeros((10, 6, 6), dtype=np.uint8)
    data[2:5, 1:4, 1:4] = 1
    fixed = LabelMap.from_array(data, spacing=(1.5, 1.0, 1.0))
    moved = LabelMap(fixed.grid, np.roll(data, 2, axis=0))

    assert metric_tre(fixed, moved, 1) == pytest.approx(3.0)
    assert math.isnan(metric_tre(fixed, moved, 2))


def test_image_similarity():
    rng = np.random.default_rng(1)
    a = Volume.from_array(rng.random((6, 6, 6)))

    assert metric_ncc(a, a) == pytest.approx(1.0)
    assert metric_ssim(a, a) == pytest.approx(1.0)
    assert math.isnan(metric_ncc(a, a.with_data(np.zeros(a.grid.shape))))


def test_summarize_excludes_undefined():
    summary = summarize([1.0, 2.0, math.nan, 3.0])

    assert summary.mean == 2.0
    assert summary.std == pytest.approx(1.0), "Standard deviation is unbiased"
    assert summary.count == 3
    assert summary.excluded == 1

    single = summarize([4.0])
    assert single.mean == 4.0 and math.isnan(single.std)
    assert summarize([math.nan]).count == 0


def test_pair_metrics_counts_missing_labels(masks):
    a, b = masks
    image = Volume.from_array(np.random.default_rng(2).random(a.grid.shape), spacing=SPACING)

    metrics = pair_metrics(image, a, image, b, labels=[1, 7])

    assert metrics["missing_labels"] == 1
    assert metrics["dsc"] == pytest.approx(metric_dsc(a, b, 1)), "Undefined labels are left out of the mean"
    assert math.isnan(metrics["labels"]["7"]["dsc"])


def _row(method, **means):
    return MetricRow(
        method=method,
        n_pairs=3,
        metrics={name: MetricSummary(mean=m, std=s, count=3) for name, (m, s) in means.items()},
    )


def test_best_row_direction_and_ties():
    rows = [
        _row("a", dsc=(0.8, 0.05), hd=(4.0, 1.0)),
        _row("b", dsc=(0.8, 0.01), hd=(3.0, 1.0)),
        _row("c", dsc=(0.7, 0.00), hd=(3.0, 1.0)),
    ]

    assert best_row(rows, "dsc") == 1, "Equal means go to the lower deviation"
    assert best_row(rows, "hd") == 1, "Full ties go to the earlier row"
    assert best_row(rows, "tre") is None

    table = report_table(rows)
    assert table.best["dsc"] == 1
    assert table.best["runtime"] is None


def test_best_row_skips_undefined_means():
    rows = [_row("a", tre=(math.nan, math.nan)), _row("b", tre=(2.0, math.nan))]
    assert best_row(rows, "tre") == 1


def test_metric_row_round_trip(tmp_path):
    row = _row("UW-NSD", dsc=(0.9, 0.02), tre=(math.nan, math.nan))

    loaded = MetricRow.load(row.save(tmp_path / "row.json"))

    assert loaded.method == "UW-NSD"
    assert loaded.metrics["dsc"] == row.metrics["dsc"]
    assert math.isnan(loaded.metrics["tre"].mean)


@pytest.fixture(scope="module")
def identity_pairs(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    manifest = write_synthetic_dataset(out / "data", count=5, shape=(16, 16, 16), seed=1)
    return generate_pairs(load_manifest(manifest), AugmentConfig.identity(), out / "pairs", pairs_per_volume=2)


def test_identity_evaluation(identity_pairs):
    per_pair, row = evaluate_model(None, identity_pairs)

    assert row.method == "identity"
    assert row.n_pairs == 2
    assert row.metrics["dsc"].mean == 1.0
    assert row.metrics["tre"].mean == 0.0
    assert row.metrics["hd"].mean == 0.0
    assert row.metrics["ncc"].mean == pytest.approx(1.0)
    assert [p["augmentation_index"] for p in per_pair] == [0, 1]


def test_fresh_network_on_another_grid_is_identity():
    net = NetConfig(depth=1, filters=[4], head_filters=4, input_shape=(8, 8, 8))
    ckpt = Checkpoint(
        net=net,
        params=init_parameters(net),
        design="BL-N",
        loss_names=("NCC", "REG"),
        loss_logits=np.zeros(2),
        learned_weights=False,
    )
    fixed, labels = make_phantom("ellipsoids", (12, 16, 10), seed=3)

    warped, warped_labels, field, seconds = Registrar(ckpt).register(fixed, fixed, labels)

    assert field.grid == fixed.grid
    np.testing.assert_array_equal(warped.data, fixed.data)
    np.testing.assert_array_equal(warped_labels.data, labels.data)
    assert seconds >= 0


@pytest.mark.parametrize("seed", range(200))
def test_metrics_match_exhaustive_oracles(seed):
    rng = np.random.default_rng(1000 + seed)
    shape = tuple(rng.integers(4, 13, 3))
    spacing = tuple(rng.uniform(0.5, 2.0, 3))
    a = LabelMap.from_array((rng.random(shape) < 0.3).astype(np.uint8), spacing=spacing)
    b = LabelMap.from_array((rng.random(shape) < 0.3).astype(np.uint8), spacing=spacing)
    if a.is_empty or b.is_empty:
        pytest.skip("Degenerate draw")

    ma, mb = a.mask(1), b.mask(1)
    assert metric_dsc(a, b, 1) == 2 * np.sum(ma & mb) / (ma.sum() + mb.sum())

    distances = cdist(_boundary_points(a), _boundary_points(b))
    d_ab, d_ba = distances.min(axis=1), distances.min(axis=0)
    assert metric_hd(a, b, 1) == pytest.approx(max(d_ab.max(), d_ba.max()), abs=1e-12)
    assert metric_hd95(a, b, 1) == pytest.approx(np.percentile(np.concatenate([d_ab, d_ba]), 95), abs=1e-12)

    centroid_a = a.grid.voxel_to_world(np.argwhere(ma)).mean(axis=0)
    centroid_b = b.grid.voxel_to_world(np.argwhere(mb)).mean(axis=0)
    assert metric_tre(a, b, 1) == pytest.approx(np.linalg.norm(centroid_a - centroid_b), abs=1e-12)

    x = Volume.from_array(rng.random(shape), spacing=spacing)
    y = Volume.from_array(rng.random(shape), spacing=spacing)
    assert abs(metric_ncc(x, y) - np.corrcoef(x.data.ravel(), y.data.ravel())[0, 1]) <= 1e-10
