"""In-memory registry of live streaming decision sessions.

Each session owns one engine state; the trained models and the calibration
pack are immutable and may be shared.  The registry itself is guarded by a
lock; per-session stepping is serialized by the session's own lock, so two
clients cannot interleave updates within one stream.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..backbone import NativeBackboneModel, infer
from ..calibration import CalibrationPack
from ..engine import DecisionRecord, EngineConfig, EngineState, GatedFrame, step
from ..gate import gate_probability
from ..stream_io import WindowFrame


@dataclass
class DecoderSession:
    session_id: str
    gate_model: NativeBackboneModel
    task_model: NativeBackboneModel
    pack: CalibrationPack
    engine_config: EngineConfig
    state: EngineState
    steps: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def process_window(self, start_s: float, samples: np.ndarray) -> DecisionRecord:
        p = gate_probability(samples, self.gate_model)
        window = WindowFrame(start_s=start_s, samples=samples, true_state=None, coverage=0.0)
        frame = GatedFrame(
            start_s=start_s,
            p_task=p,
            stage2=lambda: _stage2(window, self.task_model),
        )
        with self.lock:
            record = step(frame, self.pack, self.engine_config, self.state)
            self.steps += 1
        return record


def _stage2(window: WindowFrame, model: NativeBackboneModel):
    ff = infer(window, model)
    return ff.logits, ff.features


class SessionStore:
    def __init__(self) -> None:
        self._sessions: dict[str, DecoderSession] = {}
        self._lock = threading.Lock()

    def create(
        self,
        gate_model: NativeBackboneModel,
        task_model: NativeBackboneModel,
        pack: CalibrationPack,
        engine_config: EngineConfig,
    ) -> DecoderSession:
        session = DecoderSession(
            session_id=uuid.uuid4().hex,
            gate_model=gate_model,
            task_model=task_model,
            pack=pack,
            engine_config=engine_config,
            state=EngineState(engine_config),
        )
        with self._lock:
            self._sessions[session.session_id] = session
        return session

    def get(self, session_id: str) -> Optional[DecoderSession]:
        with self._lock:
            return self._sessions.get(session_id)

    def close(self, session_id: str) -> bool:
        with self._lock:
            return self._sessions.pop(session_id, None) is not None

    def ids(self) -> list[str]:
        with self._lock:
            return list(self._sessions)
