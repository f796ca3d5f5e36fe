"""Seeded synthetic data: feature-level benchmark streams, random policy
streams, and a raw multichannel dataset that exercises the whole pipeline.

Everything here is driven by an explicit generator seed so fixtures are
reproducible byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .backbone import FeatureFrame
from .engine import GatedFrame
from .stream_io import (
    ClassRole,
    EventSpec,
    SessionManifest,
    StateKind,
    TrueState,
    save_manifest,
)

INDEX_FORMAT = "oodgate-index-v1"


# -- feature-level benchmark -----------------------------------------------------


@dataclass
class FeatureBenchmark:
    """Two well-separated control classes plus a shifted, jittery outlier class.

    Control-class feature trajectories evolve smoothly (high AR coefficient)
    around their class means; outlier trajectories are mean-shifted into
    directions the linear head ignores and jump frame to frame.  Each cue is
    therefore informative but imperfect: logits (energy), feature location
    (density) and trajectory roughness (temporal).
    """

    head_weights: np.ndarray
    head_bias: np.ndarray
    calibration: list[FeatureFrame]  # ID-only frames in stream order
    test_frames: list[GatedFrame]  # includes rest gaps between trials
    test_is_ood: list[Optional[bool]]  # None for rest frames, aligned with test_frames


def _ar1_trajectory(
    rng: np.random.Generator, mean: np.ndarray, rho: float, sigma: float, n: int
) -> np.ndarray:
    d = mean.shape[0]
    out = np.empty((n, d))
    e = rng.normal(0.0, sigma, d)
    for t in range(n):
        out[t] = mean + e
        e = rho * e + math.sqrt(1.0 - rho * rho) * rng.normal(0.0, sigma, d)
    return out


def feature_benchmark(
    seed: int = 0,
    d: int = 6,
    n_cal_trials: int = 30,
    n_test_trials_per_kind: int = 25,
    frames_per_trial: int = 24,
    rest_frames_between: int = 10,
    hop_s: float = 0.125,
) -> FeatureBenchmark:
    rng = np.random.default_rng(seed)
    id_sep = 1.35  # class means at +-id_sep on the logit-relevant axis
    logit_gain = 2.0
    id_rho, id_sigma = 0.9, 0.55
    ood_shift = 1.9  # outlier mean offset, orthogonal to the head weights
    ood_rho, ood_sigma = 0.1, 0.8

    head_w = np.zeros((2, d))
    head_w[0, 0] = logit_gain
    head_w[1, 0] = -logit_gain
    head_b = np.zeros(2)

    mu_id = [np.zeros(d), np.zeros(d)]
    mu_id[0][0] = id_sep
    mu_id[1][0] = -id_sep
    mu_ood = np.zeros(d)
    mu_ood[1] = ood_shift / math.sqrt(2.0)
    mu_ood[2] = ood_shift / math.sqrt(2.0)

    def frames_for(features: np.ndarray, t0: float, state: TrueState) -> list[FeatureFrame]:
        return [
            FeatureFrame(
                start_s=t0 + i * hop_s,
                logits=head_w @ f + head_b,
                features=f,
                true_state=state,
            )
            for i, f in enumerate(features)
        ]

    id_state = [TrueState(StateKind.ID, "class_a", 0), TrueState(StateKind.ID, "class_b", 1)]
    ood_state = TrueState(StateKind.OOD, "outlier")

    calibration: list[FeatureFrame] = []
    t = 0.0
    for trial in range(n_cal_trials):
        cls = trial % 2
        feats = _ar1_trajectory(rng, mu_id[cls], id_rho, id_sigma, frames_per_trial)
        calibration.extend(frames_for(feats, t, id_state[cls]))
        t += frames_per_trial * hop_s

    test_frames: list[GatedFrame] = []
    test_is_ood: list[Optional[bool]] = []

    def emit_rest(t: float) -> float:
        for _ in range(rest_frames_between):
            test_frames.append(
                GatedFrame(start_s=t, p_task=0.0, stage2=_never, true_state=TrueState(StateKind.REST))
            )
            test_is_ood.append(None)
            t += hop_s
        return t

    def emit_trial(t: float, is_ood: bool, cls: int) -> float:
        if is_ood:
            feats = _ar1_trajectory(rng, mu_ood, ood_rho, ood_sigma, frames_per_trial)
            state = ood_state
        else:
            feats = _ar1_trajectory(rng, mu_id[cls], id_rho, id_sigma, frames_per_trial)
            state = id_state[cls]
        for fr in frames_for(feats, t, state):
            test_frames.append(
                GatedFrame(
                    start_s=fr.start_s,
                    p_task=1.0,
                    stage2=(lambda z=fr.logits, f=fr.features: (z, f)),
                    true_state=state,
                )
            )
            test_is_ood.append(is_ood)
        return t + frames_per_trial * hop_s

    kinds = [False, True] * n_test_trials_per_kind
    rng.shuffle(kinds)
    for i, is_ood in enumerate(kinds):
        t = emit_rest(t)
        t = emit_trial(t, is_ood, cls=i % 2)

    return FeatureBenchmark(
        head_weights=head_w,
        head_bias=head_b,
        calibration=calibration,
        test_frames=test_frames,
        test_is_ood=test_is_ood,
    )


def _never() -> tuple[np.ndarray, np.ndarray]:
    raise AssertionError("stage2 must not be invoked for rest-gated frames")


def random_policy_stream(
    seed: int, n_steps: int, d: int = 6, n_classes: int = 3, hop_s: float = 0.125
) -> list[GatedFrame]:
    """Unstructured gate probabilities, logits and features for policy tests."""
    rng = np.random.default_rng(seed)
    p_task = rng.uniform(0.0, 1.0, n_steps)
    logits = rng.normal(0.0, 2.0, (n_steps, n_classes))
    features = rng.normal(0.0, 1.3, (n_steps, d))
    frames = []
    for i in range(n_steps):
        frames.append(
            GatedFrame(
                start_s=i * hop_s,
                p_task=float(p_task[i]),
                stage2=(lambda z=logits[i], f=features[i]: (z, f)),
            )
        )
    return frames


# -- raw end-to-end dataset --------------------------------------------------------

LEFT, RIGHT, FEET = "left_hand", "right_hand", "feet"

# The held-out class drives a subset of one control group harder and with a
# nonstationary envelope: the closed-set head then produces confident (wrong)
# logits while feature location and trajectory roughness still betray it.
_CHANNEL_GROUPS = {LEFT: (0, 1, 2), RIGHT: (3, 4, 5), FEET: (0, 1)}
_RHYTHM_HZ = {LEFT: 11.0, RIGHT: 11.0, FEET: 11.0}
_RHYTHM_AMP = {LEFT: 2.2, RIGHT: 2.2, FEET: 3.1}


def _synthesize_session(
    rng: np.random.Generator,
    classes: list[str],
    trials_per_class: int,
    n_channels: int,
    rate: float,
    trial_len_s: float,
    gap_range_s: tuple[float, float],
) -> tuple[np.ndarray, list[EventSpec]]:
    order = [c for c in classes for _ in range(trials_per_class)]
    rng.shuffle(order)
    events = []
    t = float(rng.uniform(*gap_range_s)) + 2.0
    for cls in order:
        events.append(EventSpec(onset_s=round(t, 3), duration_s=trial_len_s, class_name=cls))
        t += trial_len_s + float(rng.uniform(*gap_range_s))
    n = int(round((t + 2.0) * rate))
    signal = rng.normal(0.0, 1.0, (n_channels, n))

    ts = np.arange(n) / rate
    for ev in events:
        idx = np.flatnonzero((ts >= ev.onset_s) & (ts < ev.offset_s))
        tt = ts[idx]
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * _RHYTHM_HZ[ev.class_name] * tt + phase)
        amp = _RHYTHM_AMP[ev.class_name] * rng.uniform(0.85, 1.15)
        if ev.class_name == FEET:
            # nonstationary envelope: random telegraph slow enough (~0.8 s)
            # that overlapping 2-s windows see different burst fractions
            env = np.empty(idx.size)
            level = 1.75 if rng.uniform() < 0.5 else 0.25
            for i in range(idx.size):
                if rng.uniform() < 1.0 / (0.8 * rate):
                    level = 2.0 - level  # flip between 0.25 and 1.75
                env[i] = level
            wave = wave * env
        for ch in _CHANNEL_GROUPS[ev.class_name]:
            signal[ch, idx] += amp * wave
    return signal.astype(np.float32).astype(np.float64), events


def make_synthetic_dataset(
    root: Path | str,
    dataset_name: str = "synthetic",
    n_subjects: int = 2,
    seed: int = 7,
    n_channels: int = 8,
    rate: float = 250.0,
    train_trials_per_class: int = 10,
    test_trials_per_class: int = 8,
    trial_len_s: float = 3.0,
) -> Path:
    """Write manifests, raw .f32 files and an index; returns the index path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    class_map = {
        LEFT: ClassRole("id", 0),
        RIGHT: ClassRole("id", 1),
        FEET: ClassRole("ood"),
    }
    subjects = []
    for s in range(1, n_subjects + 1):
        subject_id = f"S{s}"
        subject_dir = root / subject_id
        subject_dir.mkdir(parents=True, exist_ok=True)
        entries = {}
        for split, classes, trials in (
            ("train", [LEFT, RIGHT], train_trials_per_class),
            ("test", [LEFT, RIGHT, FEET], test_trials_per_class),
        ):
            rng = np.random.default_rng([seed, s, 0 if split == "train" else 1])
            signal, events = _synthesize_session(
                rng, classes, trials, n_channels, rate, trial_len_s, (2.0, 3.5)
            )
            raw_name = f"{split}.f32"
            (subject_dir / raw_name).write_bytes(signal.astype("<f4").tobytes())
            manifest = SessionManifest(
                subject_id=subject_id,
                channel_count=n_channels,
                sampling_rate=rate,
                events=events,
                class_map=dict(class_map),
                data_path=raw_name,
            )
            manifest_name = f"{split}.json"
            save_manifest(manifest, subject_dir / manifest_name)
            entries[split] = [f"{subject_id}/{manifest_name}"]
        subjects.append({"subject_id": subject_id, "train": entries["train"], "test": entries["test"]})

    index = {"format": INDEX_FORMAT, "dataset": dataset_name, "subjects": subjects}
    index_path = root / "index.json"
    index_path.write_text(json.dumps(index, indent=2) + "\n", encoding="utf-8")
    return index_path
