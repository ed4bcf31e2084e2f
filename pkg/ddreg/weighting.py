"""
Loss weighting on the simplex

Loss and regularizer weights are the softmax of one logit per term, so they
stay positive and sum to one whatever the logits are. Fixed-weight designs
simply never update the logits.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from ddreg.errors import ConfigurationError, NonFiniteLossError
from ddreg.losses import LossValue

HISTORY_COLUMNS = ["epoch", "w_ncc", "w_ssim", "w_dsc", "w_hd", "lambda_reg"]
_COLUMN_OF = {"NCC": "w_ncc", "SSIM": "w_ssim", "DSC": "w_dsc", "HD": "w_hd", "REG": "lambda_reg"}


@dataclass
class WeightState:
    """Logits of the loss and regularizer weights"""

    names: Tuple[str, ...]
    logits: np.ndarray
    n_regs: int = 1
    trainable: bool = True

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float).reshape(-1)
        if len(self.names) != len(self.logits):
            raise ConfigurationError("Need one logit per weighted term")

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits)

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(self.names, (float(w) for w in self.weights)))


def init_weights(
    n_losses: int,
    n_regs: int,
    reg_weight: float,
    names: Optional[Sequence[str]] = None,
    trainable: bool = True,
) -> WeightState:
    """
    Logits giving each regularizer ``reg_weight / n_regs`` and splitting the
    remainder equally between the losses
    """
    if n_losses < 1:
        raise ConfigurationError("Need at least one loss term")
    if n_regs < 0 or (n_regs and not 0 < reg_weight < 1):
        raise ConfigurationError(f"Regularizer weight must be in (0, 1), got {reg_weight}")
    if n_regs == 0:
        reg_weight = 0.0
    targets = np.concatenate(
        [np.full(n_losses, (1 - reg_weight) / n_losses), np.full(n_regs, reg_weight / max(n_regs, 1))],
    )
    logits = np.log(targets)
    logits -= logits.mean()
    if names is None:
        names = [f"loss_{i}" for i in range(n_losses)] + [f"reg_{j}" for j in range(n_regs)]
    return WeightState(tuple(names), logits, n_regs, trainable)


@dataclass(frozen=True)
class Combined:
    """Weighted total with its gradients"""

    value: float
    weights: Dict[str, float]
    logits_grad: np.ndarray
    components: Dict[str, float]


def combine(losses: Sequence[LossValue], state: WeightState, sample: Optional[int] = None) -> Combined:
    """
    Weighted sum of the terms

    Each term's upstream gradient is its weight; the gradient with respect to
    logit ``k`` is ``w_k (L_k - total)``.
    """
    if len(losses) != len(state.names):
        raise ConfigurationError(f"Expected {len(state.names)} terms, got {len(losses)}")
    values = np.array([loss.value for loss in losses], dtype=float)
    for loss in losses:
        if not np.isfinite(loss.value):
            raise NonFiniteLossError(loss.name, sample, loss.value)
    weights = state.weights
    total = float(np.dot(weights, values))
    return Combined(
        value=total,
        weights=dict(zip(state.names, (float(w) for w in weights))),
        logits_grad=weights * (values - total),
        components={loss.name: float(loss.value) for loss in losses},
    )


class WeightHistory:
    """Per-epoch weight log"""

    def __init__(self):
        self.rows: List[dict] = []

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=HISTORY_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(path, index=False)
        return path


def record_weights(state: WeightState, epoch: int, history: Optional[WeightHistory] = None) -> dict:
    """
    Row of the weight history; terms the design does not use are NaN
    """
    row = {column: np.nan for column in HISTORY_COLUMNS}
    row["epoch"] = epoch
    for name, weight in zip(state.names, state.weights):
        column = _COLUMN_OF.get(name)
        if column is not None:
            row[column] = float(weight)
    if history is not None:
        history.rows.append(row)
    return row
