"""Stage-I rest/task gating: a binary classifier decides whether a window
enters control processing at all."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import NativeBackboneModel, extract_features


class GateError(ValueError):
    pass


TASK = "task"
REST = "rest"

# Index of the task class in the binary gate head.
TASK_CLASS = 1


@dataclass(frozen=True)
class GateConfig:
    threshold: float = 0.5  # window is task iff p_task >= threshold

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise GateError(f"gate threshold must be in [0, 1], got {self.threshold}")


def gate_probability_from_logits(logits: np.ndarray) -> float:
    """Softmax probability of the task class from binary gate logits."""
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (2,):
        raise GateError(f"gate logits must have shape (2,), got {z.shape}")
    # stable sigmoid of the logit margin
    margin = z[TASK_CLASS] - z[1 - TASK_CLASS]
    if margin >= 0:
        p = 1.0 / (1.0 + np.exp(-margin))
    else:
        e = np.exp(margin)
        p = e / (1.0 + e)
    return float(p)


def gate_probability(window_samples: np.ndarray, gate_model: NativeBackboneModel) -> float:
    if gate_model.n_classes != 2:
        raise GateError(f"gate model must be binary, has {gate_model.n_classes} classes")
    f = extract_features(window_samples, gate_model)
    return gate_probability_from_logits(gate_model.head_weights @ f + gate_model.head_bias)


def gate_decide(p_task: float, threshold: float) -> str:
    """Task iff p_task >= threshold (boundary counts as task)."""
    return TASK if p_task >= threshold else REST
