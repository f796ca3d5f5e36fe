"""Run configuration shared by the service, the CLI and the pipeline.

A run is fully described by one JSON document; every module precondition that
can be checked without data is enforced at parse time.  Identical config plus
seed must yield identical outputs, so nothing here is environment dependent.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from .scoring import BASELINE_NAMES, TEMPORAL_METRICS

TEMPDENS = "tempdens"
ALL_METHODS = (*BASELINE_NAMES, TEMPDENS)


class RunConfig(BaseModel):
    data_root: str = "."
    datasets: Optional[list[str]] = None  # subdirectories of data_root; None = data_root itself
    subjects: Optional[list[str]] = None  # subset filter; None = all subjects in the index
    out: str = "out"

    window_len_s: float = 2.0
    hop_s: float = 0.125
    band_low_hz: float = 8.0
    band_high_hz: float = 30.0

    gate_threshold: float = Field(0.5, ge=0.0, le=1.0)
    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(1.0, ge=0.0)
    gamma: float = Field(1.0, ge=0.0)
    temperature: float = Field(1.0, gt=0.0)
    eta: float = Field(0.5, ge=0.0, le=1.0)
    knn_k: int = Field(10, ge=1)
    temporal_metric: str = "second_order"
    tau_quantile: float = Field(0.95, gt=0.0, lt=1.0)
    reset_gap_s: float = Field(1.0, ge=0.0)
    aggregation_window: int = Field(3, ge=1)

    n_pairs: int = Field(3, ge=1)
    head_epochs: int = Field(500, ge=0)
    head_lr: float = Field(0.1, ge=0.0)
    head_l2: float = Field(1e-4, ge=0.0)
    rest_subsample_factor: float = Field(2.0, gt=0.0)
    validation_fraction: float = Field(0.2, gt=0.0, lt=1.0)

    methods: list[str] = Field(default_factory=lambda: list(ALL_METHODS))
    ood_eval_population: str = "gated"  # or "all_task"
    coverage_bins: int = Field(10, ge=1)

    provider: str = "native"  # or "replay"
    seed: int = 0
    jobs: int = Field(1, ge=1)

    @field_validator("temporal_metric")
    @classmethod
    def _metric_known(cls, v: str) -> str:
        if v not in TEMPORAL_METRICS:
            raise ValueError(f"temporal_metric must be one of {TEMPORAL_METRICS}, got {v!r}")
        return v

    @field_validator("methods")
    @classmethod
    def _methods_known(cls, v: list[str]) -> list[str]:
        for name in v:
            if name not in ALL_METHODS:
                raise ValueError(f"unknown method {name!r}; known: {ALL_METHODS}")
        return v

    @field_validator("ood_eval_population")
    @classmethod
    def _population_known(cls, v: str) -> str:
        if v not in ("gated", "all_task"):
            raise ValueError(f"ood_eval_population must be 'gated' or 'all_task', got {v!r}")
        return v

    @field_validator("provider")
    @classmethod
    def _provider_known(cls, v: str) -> str:
        if v not in ("native", "replay"):
            raise ValueError(f"provider must be 'native' or 'replay', got {v!r}")
        return v

    @model_validator(mode="after")
    def _cross_checks(self) -> "RunConfig":
        if not 0 < self.band_low_hz < self.band_high_hz:
            raise ValueError(
                f"band edges must satisfy 0 < low < high, got ({self.band_low_hz}, {self.band_high_hz})"
            )
        if self.window_len_s <= 0 or self.hop_s <= 0:
            raise ValueError("window_len_s and hop_s must be positive")
        return self

    def resolved_dict(self) -> dict:
        return json.loads(self.model_dump_json())

    def config_hash(self) -> str:
        canonical = json.dumps(self.resolved_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(path_or_doc) -> RunConfig:
    """Accept a path to a JSON file or an already-parsed dict."""
    if isinstance(path_or_doc, dict):
        return RunConfig.model_validate(path_or_doc)
    with open(path_or_doc, "r", encoding="utf-8") as fh:
        return RunConfig.model_validate(json.load(fh))
