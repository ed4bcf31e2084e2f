import math

import numpy as np
import numpy.testing as npt
import pytest

from ddreg.errors import ConfigurationError, NonFiniteLossError
from ddreg.gradcheck import check_combine
from ddreg.losses import LossValue
from ddreg.weighting import (
    HISTORY_COLUMNS,
    WeightHistory,
    WeightState,
    combine,
    init_weights,
    record_weights,
)


def _terms(names, values):
    return [LossValue(n, v, np.zeros(1), "image") for n, v in zip(names, values)]


@pytest.mark.parametrize("n_losses", [1, 2, 3, 4])
def test_initial_weights(n_losses):
    state = init_weights(n_losses, 1, 5e-3)
    weights = state.weights

    assert abs(weights.sum() - 1.0) <= 1e-12, "Weights must lie on the simplex"
    assert weights[-1] == pytest.approx(5e-3, rel=1e-12)
    npt.assert_allclose(weights[:-1], (1 - 5e-3) / n_losses, rtol=1e-12)
    assert abs(state.logits.mean()) < 1e-12, "Initial logits are centred"


def test_init_weights_validation():
    with pytest.raises(ConfigurationError):
        init_weights(0, 1, 5e-3)
    with pytest.raises(ConfigurationError):
        init_weights(2, 1, 1.5)


def test_combine_total_and_gradient():
    names = ("NCC", "DSC", "REG")
    state = init_weights(2, 1, 0.2, names)
    result = combine(_terms(names, [0.5, 0.3, 0.1]), state)

    weights = state.weights
    assert result.value == pytest.approx(0.4 * 0.5 + 0.4 * 0.3 + 0.2 * 0.1)
    npt.assert_allclose(result.logits_grad, weights * (np.array([0.5, 0.3, 0.1]) - result.value))
    assert result.components == {"NCC": 0.5, "DSC": 0.3, "REG": 0.1}
    assert sum(result.weights.values()) == pytest.approx(1.0, abs=1e-12)


def test_combine_rejects_non_finite():
    names = ("NCC", "REG")
    state = init_weights(1, 1, 5e-3, names)

    with pytest.raises(NonFiniteLossError) as info:
        combine(_terms(names, [math.nan, 0.0]), state, sample=7)

    assert info.value.term == "NCC"
    assert info.value.sample == 7


def test_combine_requires_matching_terms():
    state = init_weights(2, 1, 5e-3)
    with pytest.raises(ConfigurationError):
        combine(_terms(("a", "b"), [0.1, 0.2]), state)


def test_weights_stay_on_simplex_for_extreme_logits():
    state = WeightState(("NCC", "REG"), np.array([800.0, -800.0]))
    weights = state.weights

    assert np.isfinite(weights).all()
    assert abs(weights.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_logit_gradient_matches_finite_differences(seed):
    result = check_combine(seed)
    assert result.passed, f"Logit gradient error {result.error:.2e} above {result.tolerance}"


def test_weight_history(tmp_path):
    names = ("NCC", "SSIM", "REG")
    state = init_weights(2, 1, 5e-3, names)
    history = WeightHistory()

    row = record_weights(state, 1, history)

    assert math.isnan(row["w_dsc"]) and math.isnan(row["w_hd"]), "Unused terms are NaN"
    assert row["lambda_reg"] == pytest.approx(5e-3)

    df = history.to_dataframe()
    assert list(df.columns) == HISTORY_COLUMNS
    assert len(df) == 1

    path = history.to_csv(tmp_path / "weights.csv")
    assert path.read_text().startswith("epoch,w_ncc,w_ssim")


def test_combine_of_known_weights():
    names = ("NCC", "SSIM", "DSC", "REG")
    state = init_weights(3, 1, 5e-3, names)

    result = combine(_terms(names, [1.0, 1.0, 1.0, 10.0]), state)

    assert result.value == pytest.approx(0.995 + 0.05, abs=1e-12)
