import numpy as np
import numpy.testing as npt
import pytest
import xarray.testing as xrt

from ddreg.errors import EmptyMaskError, GridMismatchError, NonFiniteError, ShapeError
from ddreg.volume import (
    DisplacementField,
    Grid,
    LabelMap,
    Volume,
    crop_to_mask,
    normalize_intensity,
    preprocess,
    require_same_grid,
    resample_field,
    resample_isotropic,
    resize,
    resize_field,
    uncrop,
)


@pytest.fixture(scope="function")
def ramp_volume():
    """Linear ramp along x on an anisotropic grid"""
    data = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 6, 4))
    return Volume.from_array(data, spacing=(1.0, 2.0, 3.0), origin=(-4.0, 0.0, 10.0))


@pytest.fixture(scope="function")
def box_labels():
    data = np.zeros((8, 6, 4), dtype=np.uint8)
    data[2:5, 1:4, 1:3] = 1
    data[3, 2, 2] = 2
    return LabelMap.from_array(data, spacing=(1.0, 2.0, 3.0), origin=(-4.0, 0.0, 10.0))


def test_grid_world_mapping():
    grid = Grid((4, 5, 6), (0.5, 1.0, 2.0), (10.0, -3.0, 1.0))

    index = np.array([[0, 0, 0], [3, 4, 5]])
    world = grid.voxel_to_world(index)

    npt.assert_allclose(world, [[10.0, -3.0, 1.0], [11.5, 1.0, 11.0]])
    npt.assert_allclose(grid.world_to_voxel(world), index)
    assert grid.world_coordinates().shape == (4, 5, 6, 3), "World coordinates have the wrong shape"


def test_grid_rejects_bad_spacing():
    with pytest.raises(ShapeError):
        Grid((4, 4, 4), (1.0, 0.0, 1.0))


def test_volume_data_is_read_only(ramp_volume):
    assert not ramp_volume.data.flags.writeable, "Volume data should be frozen"
    assert ramp_volume.data.dtype == np.float64


def test_label_map_lists_present_labels(box_labels):
    assert box_labels.labels == (1, 2), "Labels should exclude background"
    assert not box_labels.is_empty


def test_require_same_grid(ramp_volume, box_labels):
    assert require_same_grid(ramp_volume, box_labels) == ramp_volume.grid

    other = Volume.from_array(np.zeros((8, 6, 4)))
    with pytest.raises(GridMismatchError):
        require_same_grid(ramp_volume, other)


def test_resample_isotropic_keeps_origin(ramp_volume):
    iso = resample_isotropic(ramp_volume, 1.0)

    assert iso.grid.spacing == (1.0, 1.0, 1.0)
    assert iso.grid.shape == (8, 12, 12), "Isotropic shape should cover the same extent"
    assert iso.grid.origin == ramp_volume.grid.origin, "First voxel centre must stay in place"
    # the ramp is along x with unit spacing, so it survives unchanged
    npt.assert_allclose(iso.data[:, 0, 0], np.arange(8.0))


def test_resample_rejects_non_finite():
    data = np.zeros((4, 4, 4))
    data[1, 1, 1] = np.nan
    with pytest.raises(NonFiniteError):
        resample_isotropic(Volume.from_array(data), 0.5)


def test_resize_labels_are_nearest(box_labels):
    resized = resize(box_labels, (16, 12, 8))

    assert resized.grid.shape == (16, 12, 8)
    assert set(np.unique(resized.data)) <= {0, 1, 2}, "Resize must not invent label values"
    npt.assert_allclose(resized.grid.extent_mm, box_labels.grid.extent_mm)


def test_resize_to_same_shape_is_identity(ramp_volume):
    same = resize(ramp_volume, ramp_volume.grid.shape)
    npt.assert_array_equal(same.data, ramp_volume.data)


def test_crop_and_uncrop_round_trip(ramp_volume, box_labels):
    cropped, record = crop_to_mask(ramp_volume, box_labels, margin_mm=1.0)

    assert record.lower == (1, 0, 0)
    assert record.upper == (5, 4, 3)
    npt.assert_allclose(cropped.grid.origin, ramp_volume.grid.voxel_to_world(record.lower))

    restored = uncrop(cropped, record)
    npt.assert_array_equal(restored.data[record.slices], ramp_volume.data[record.slices])
    assert restored.data[7, 5, 0] == 0, "Outside the crop box the fill value is used"


def test_crop_empty_mask_raises(ramp_volume):
    empty = LabelMap(ramp_volume.grid, np.zeros(ramp_volume.grid.shape, dtype=np.uint8))
    with pytest.raises(EmptyMaskError):
        crop_to_mask(ramp_volume, empty)


def test_normalize_intensity():
    v = Volume.from_array(np.linspace(-3, 5, 27).reshape(3, 3, 3))
    n = normalize_intensity(v)

    assert n.data.min() == 0.0 and n.data.max() == 1.0, "Normalized range should be [0, 1]"

    constant = normalize_intensity(Volume.from_array(np.full((2, 2, 2), 7.0)))
    npt.assert_array_equal(constant.data, 0.0)


def test_preprocess_pipeline(ramp_volume, box_labels):
    image, labels, record = preprocess(ramp_volume, box_labels, 1.0, 2.0, (8, 8, 8))

    assert image.grid == labels.grid, "Image and labels must share a grid"
    assert image.grid.shape == (8, 8, 8)
    assert record is not None
    assert 0.0 <= image.data.min() and image.data.max() <= 1.0


def test_field_resampling_keeps_millimetres():
    grid = Grid((4, 4, 4), (2.0, 2.0, 2.0))
    vectors = np.zeros((3, 4, 4, 4))
    vectors[0] = 1.5
    field = DisplacementField(grid, vectors)

    fine = resize_field(field, (8, 8, 8))
    npt.assert_allclose(fine.vectors[0], 1.5)
    npt.assert_allclose(fine.vectors[1:], 0.0)

    moved = resample_field(field, Grid((3, 3, 3), (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)))
    npt.assert_allclose(moved.vectors[0], 1.5)


def test_field_rejects_non_finite():
    vectors = np.zeros((3, 2, 2, 2))
    vectors[0, 0, 0, 0] = np.inf
    with pytest.raises(NonFiniteError):
        DisplacementField(Grid((2, 2, 2)), vectors)


def test_dataarray_round_trip(ramp_volume):
    da = ramp_volume.to_dataarray()

    assert da.dims == ("x", "y", "z")
    npt.assert_allclose(da["y"].values, [0.0, 2.0, 4.0, 6.0, 8.0, 10.0])

    back = Volume.from_dataarray(da)
    xrt.assert_identical(back.to_dataarray(), da)


def _trilinear_at(data: np.ndarray, point) -> float:
    """Clamp-to-edge trilinear interpolation at a continuous voxel index"""
    base, frac = [], []
    for p, n in zip(point, data.shape):
        p = min(max(float(p), 0.0), n - 1.0)
        i = min(int(np.floor(p)), max(n - 2, 0))
        base.append(i)
        frac.append(p - i)
    value = 0.0
    for corner in np.ndindex(2, 2, 2):
        weight = 1.0
        index = []
        for c, i, t, n in zip(corner, base, frac, data.shape):
            weight *= t if c else 1.0 - t
            index.append(min(i + c, n - 1))
        value += weight * data[tuple(index)]
    return value


def test_resample_isotropic_matches_trilinear_oracle():
    rng = np.random.default_rng(7)
    v = Volume.from_array(rng.random((7, 7, 7)), spacing=(2.0, 1.5, 1.0), origin=(1.0, -2.0, 0.5))
    out = resample_isotropic(v, 1.0)

    assert out.grid.spacing == (1.0, 1.0, 1.0)
    for index in np.ndindex(out.grid.shape):
        point = v.grid.world_to_voxel(out.grid.voxel_to_world(index))
        assert out.data[index] == pytest.approx(_trilinear_at(v.data, point), abs=1e-12), f"voxel {index}"


def test_resize_halving_averages_blocks():
    rng = np.random.default_rng(8)
    data = rng.random((8, 8, 8))
    out = resize(Volume.from_array(data), (4, 4, 4))

    blocks = data.reshape(4, 2, 4, 2, 4, 2).mean(axis=(1, 3, 5))
    npt.assert_allclose(out.data, blocks, atol=1e-12)
    assert out.grid.spacing == (2.0, 2.0, 2.0)
    npt.assert_allclose(out.grid.extent_mm, (8.0, 8.0, 8.0))


@pytest.mark.parametrize("seed", range(5))
def test_crop_box_matches_exhaustive_scan(seed):
    rng = np.random.default_rng(seed)
    spacing = (1.0, 2.0, 0.5)
    labels = LabelMap.from_array((rng.random((10, 9, 12)) > 0.97).astype(np.uint8), spacing=spacing)
    if labels.is_empty:
        pytest.skip("no labelled voxel drawn")
    image = Volume(labels.grid, rng.random(labels.grid.shape))

    margin_voxels = (2, 1, 4)
    lower, upper = [10**6] * 3, [-1] * 3
    for index in np.ndindex(labels.grid.shape):
        if labels.data[index]:
            for a in range(3):
                lower[a] = min(lower[a], index[a])
                upper[a] = max(upper[a], index[a])
    lower = [max(lo - m, 0) for lo, m in zip(lower, margin_voxels)]
    upper = [min(hi + m, n - 1) for hi, m, n in zip(upper, margin_voxels, labels.grid.shape)]

    cropped, record = crop_to_mask(image, labels, margin_mm=2.0)

    assert record.lower == tuple(lower)
    assert record.upper == tuple(upper)
    npt.assert_array_equal(cropped.data, image.data[lower[0] : upper[0] + 1, lower[1] : upper[1] + 1, lower[2] : upper[2] + 1])


def test_normalize_intensity_is_idempotent():
    rng = np.random.default_rng(9)
    once = normalize_intensity(Volume.from_array(rng.normal(50, 20, (6, 5, 4))))
    twice = normalize_intensity(once)

    npt.assert_array_equal(twice.data, once.data)
    assert once.data.min() == 0.0 and once.data.max() == 1.0


def test_uncrop_restores_non_cubic_mask():
    data = np.zeros((9, 6, 5), dtype=np.uint8)
    data[2:7, 1, 1:3] = 1
    data[2, 1:5, 2] = 2
    labels = LabelMap.from_array(data, spacing=(0.5, 1.0, 2.0))
    image = Volume(labels.grid, np.arange(data.size, dtype=float).reshape(data.shape))

    cropped, record = crop_to_mask(image, labels)
    cropped_labels = record.apply(labels)

    assert cropped.grid.shape == (5, 4, 2)
    restored = uncrop(cropped_labels, record)
    npt.assert_array_equal(restored.data, data)
    assert restored.grid == labels.grid
    restored_image = uncrop(cropped, record, fill=-1.0)
    npt.assert_array_equal(restored_image.data[record.slices], image.data[record.slices])
    assert (restored_image.data == -1.0).sum() == data.size - 5 * 4 * 2
