"""Request/response models for the HTTP surface."""

from __future__ import annotations

import base64
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from ..config import RunConfig


class JobRequest(BaseModel):
    config: RunConfig


class JobResponse(BaseModel):
    result: dict


class ErrorBody(BaseModel):
    type: str
    message: str


class SessionCreateRequest(BaseModel):
    """Open a streaming decision session from trained artifacts."""

    config: RunConfig
    dataset: str
    subject_id: str


class SessionCreateResponse(BaseModel):
    session_id: str
    n_channels: int
    feature_dim: int
    n_classes: int
    tau: float
    gate_threshold: float


class WindowRequest(BaseModel):
    """One window of raw samples, channel-major little-endian float32, base64 packed."""

    start_s: float
    samples_f32: str
    channel_count: int = Field(gt=0)

    def to_matrix(self) -> np.ndarray:
        flat = np.frombuffer(base64.b64decode(self.samples_f32), dtype="<f4").astype(np.float64)
        if flat.size % self.channel_count != 0:
            raise ValueError(
                f"{flat.size} samples do not divide into {self.channel_count} channels"
            )
        return flat.reshape(self.channel_count, -1)

    @classmethod
    def from_matrix(cls, start_s: float, samples: np.ndarray) -> "WindowRequest":
        packed = base64.b64encode(np.asarray(samples, dtype="<f4").tobytes()).decode("ascii")
        return cls(start_s=start_s, samples_f32=packed, channel_count=samples.shape[0])


class DecisionResponse(BaseModel):
    start_s: float
    decision: str
    class_index: Optional[int]
    class_name: Optional[str]
    p_task: float
    scores: Optional[dict]
    history_mature: Optional[bool]
    fault: Optional[str] = None


class SessionInfo(BaseModel):
    session_id: str
    steps: int
    last_start_s: Optional[float]


class HealthResponse(BaseModel):
    status: str
    version: str
