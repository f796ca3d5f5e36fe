"""The online decision loop.

Every update step gates the current window; rest windows short-circuit to
NoAction without touching any scoring state.  Task windows are scored against
the calibration pack (energy, density, temporal consistency), the standardized
components are fused, and the fused score decides between Reject and the
argmax control class.  A long enough run of rest decisions clears the feature
history so stale trajectories never leak across task episodes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .backbone import FeatureFrame
from .calibration import CalibrationPack, raw_components
from .gate import REST, gate_decide
from .scoring import SECOND_ORDER, FeatureHistory, FusionWeights, ScoringError
from .stream_io import TrueState


class EngineError(ValueError):
    pass


NO_ACTION = "no_action"
CLASS = "class"
REJECT = "reject"


@dataclass(frozen=True)
class DecisionRecord:
    start_s: float
    decision: str  # no_action | class | reject
    class_index: Optional[int]
    p_task: float
    scores: Optional[dict]  # raw and standardized components plus the fused score
    history_mature: Optional[bool]
    fault: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "start_s": self.start_s,
            "decision": self.decision,
            "class_index": self.class_index,
            "p_task": self.p_task,
            "scores": self.scores,
            "history_mature": self.history_mature,
            "fault": self.fault,
        }


@dataclass(frozen=True)
class GatedFrame:
    """One engine input: the gate probability plus lazy stage-II outputs.

    ``stage2`` is only invoked for task-gated frames, so rest windows never
    pay for (or depend on) classifier inference.
    """

    start_s: float
    p_task: float
    stage2: Callable[[], tuple[np.ndarray, np.ndarray]]  # -> (logits, features)
    true_state: Optional[TrueState] = None


@dataclass
class EngineConfig:
    weights: FusionWeights = field(default_factory=FusionWeights)
    knn_k: int = 10
    temporal_metric: str = SECOND_ORDER
    hop_s: float = 0.125
    reset_gap_s: float = 1.0
    aggregation_window: int = 3


class EngineState:
    """Mutable per-stream state: feature history, aggregation buffer, rest-run clock."""

    def __init__(self, config: EngineConfig):
        self.history = FeatureHistory(capacity=max(3, config.aggregation_window))
        self.aggregation: deque[FeatureFrame] = deque(maxlen=config.aggregation_window)
        self.rest_run_s = 0.0
        self.last_start_s: Optional[float] = None

    def reset_trajectory(self) -> None:
        self.history.clear()
        self.aggregation.clear()


def step(
    frame: GatedFrame,
    pack: CalibrationPack,
    config: EngineConfig,
    state: EngineState,
) -> DecisionRecord:
    """Run one update: gate, score, threshold."""
    if state.last_start_s is not None and frame.start_s <= state.last_start_s:
        raise EngineError(
            f"frames out of order: {frame.start_s}s after {state.last_start_s}s"
        )
    state.last_start_s = frame.start_s

    if gate_decide(frame.p_task, pack.gate_threshold) == REST:
        state.rest_run_s += config.hop_s
        if state.rest_run_s >= config.reset_gap_s:
            state.reset_trajectory()
        return DecisionRecord(
            start_s=frame.start_s,
            decision=NO_ACTION,
            class_index=None,
            p_task=frame.p_task,
            scores=None,
            history_mature=None,
        )

    state.rest_run_s = 0.0
    try:
        logits, features = frame.stage2()
        feature_frame = FeatureFrame(
            start_s=frame.start_s,
            logits=np.asarray(logits, dtype=np.float64),
            features=np.asarray(features, dtype=np.float64),
            true_state=frame.true_state,
        )
    except (ValueError, FloatingPointError) as exc:
        return _fault_record(frame, str(exc))

    try:
        comp = raw_components(
            feature_frame,
            state.history,
            pack.class_means,
            pack.inv_cov,
            pack.id_memory,
            config.weights,
            config.knn_k,
            config.temporal_metric,
        )
        state.history.push(frame.start_s, feature_frame.features)
        state.aggregation.append(feature_frame)

        ebo_std = pack.standardize("ebo", comp["ebo"])
        dens_std = pack.standardize("dens", comp["dens"])
        temp_std = pack.standardize("temp", comp["temp"])
        w = config.weights
        fused = w.alpha * ebo_std + w.beta * dens_std + w.gamma * temp_std
        if not np.isfinite(fused):
            raise ScoringError("fused score is non-finite")
    except (ValueError, FloatingPointError) as exc:
        return _fault_record(frame, str(exc))

    scores = {
        "ebo_raw": comp["ebo"],
        "mahal_raw": comp["mahal"],
        "knn_raw": comp["knn"],
        "dens_raw": comp["dens"],
        "temp_raw": comp["temp"],
        "ebo_std": ebo_std,
        "dens_std": dens_std,
        "temp_std": temp_std,
        "fused": fused,
    }
    if fused > pack.tau:
        return DecisionRecord(
            start_s=frame.start_s,
            decision=REJECT,
            class_index=None,
            p_task=frame.p_task,
            scores=scores,
            history_mature=comp["mature"],
        )
    class_index = int(np.argmax(feature_frame.logits))  # ties resolve to the lowest index
    return DecisionRecord(
        start_s=frame.start_s,
        decision=CLASS,
        class_index=class_index,
        p_task=frame.p_task,
        scores=scores,
        history_mature=comp["mature"],
    )


def _fault_record(frame: GatedFrame, message: str) -> DecisionRecord:
    # numeric trouble fails closed: the step counts as a rejection, never a command
    return DecisionRecord(
        start_s=frame.start_s,
        decision=REJECT,
        class_index=None,
        p_task=frame.p_task,
        scores=None,
        history_mature=None,
        fault=message,
    )


def run_stream(
    frames: Iterable[GatedFrame],
    pack: CalibrationPack,
    config: EngineConfig,
    state: Optional[EngineState] = None,
) -> list[DecisionRecord]:
    state = state or EngineState(config)
    return [step(frame, pack, config, state) for frame in frames]


def records_to_jsonl(records: Iterable[DecisionRecord]) -> str:
    lines = [json.dumps(r.to_dict(), separators=(",", ":")) for r in records]
    return "\n".join(lines) + ("\n" if lines else "")


def records_from_jsonl(text: str) -> list[DecisionRecord]:
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        if "decision" not in doc:
            continue  # provenance or other header line
        records.append(
            DecisionRecord(
                start_s=doc["start_s"],
                decision=doc["decision"],
                class_index=doc["class_index"],
                p_task=doc["p_task"],
                scores=doc["scores"],
                history_mature=doc["history_mature"],
                fault=doc.get("fault"),
            )
        )
    return records
