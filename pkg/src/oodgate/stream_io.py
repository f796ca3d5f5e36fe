"""Recording manifests, raw signal loading, band-pass filtering and windowing.

A recording is a pair of files: a JSON manifest describing geometry and
labeled events, and a channel-major little-endian float32 sample file
(``.f32``).  Segmentation turns the continuous signal into overlapping
windows labeled Rest / task-class / Excluded from the event annotations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy.signal import butter, sosfilt

MANIFEST_FORMAT = "oodgate-manifest-v1"


class StreamIOError(ValueError):
    """Malformed manifest, raw file, or segmentation parameters."""


class StateKind(str, Enum):
    REST = "rest"
    ID = "id"
    OOD = "ood"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class TrueState:
    """Ground-truth label of one window."""

    kind: StateKind
    class_name: Optional[str] = None
    class_index: Optional[int] = None

    @property
    def is_task(self) -> bool:
        return self.kind in (StateKind.ID, StateKind.OOD)


REST_STATE = TrueState(StateKind.REST)
EXCLUDED_STATE = TrueState(StateKind.EXCLUDED)


@dataclass(frozen=True)
class EventSpec:
    onset_s: float
    duration_s: float
    class_name: str

    @property
    def offset_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass(frozen=True)
class ClassRole:
    """Role of one annotated class: rest, an indexed control class, or ood."""

    role: str  # "rest" | "id" | "ood"
    index: Optional[int] = None


@dataclass
class SessionManifest:
    subject_id: str
    channel_count: int
    sampling_rate: float
    events: list[EventSpec]
    class_map: dict[str, ClassRole]
    data_path: str
    channel_names: Optional[list[str]] = None

    def __post_init__(self) -> None:
        if self.channel_count <= 0:
            raise StreamIOError(f"channel_count must be positive, got {self.channel_count}")
        if self.sampling_rate <= 0:
            raise StreamIOError(f"sampling_rate must be positive, got {self.sampling_rate}")
        prev_end = -math.inf
        for ev in self.events:
            if ev.duration_s < 0:
                raise StreamIOError(f"negative duration for event at {ev.onset_s}s")
            if ev.onset_s < prev_end:
                raise StreamIOError(
                    f"events must be sorted and non-overlapping; event at {ev.onset_s}s "
                    f"starts before previous event ends ({prev_end}s)"
                )
            prev_end = ev.offset_s
            if ev.class_name not in self.class_map:
                raise StreamIOError(f"event class {ev.class_name!r} missing from class_map")
        self._validate_class_map()

    def _validate_class_map(self) -> None:
        id_indices = []
        for name, role in self.class_map.items():
            if role.role not in ("rest", "id", "ood"):
                raise StreamIOError(f"unknown role {role.role!r} for class {name!r}")
            if role.role == "id":
                if role.index is None or role.index < 0:
                    raise StreamIOError(f"id class {name!r} needs a non-negative index")
                id_indices.append(role.index)
            elif role.index is not None:
                raise StreamIOError(f"class {name!r} with role {role.role!r} must not carry an index")
        if id_indices and sorted(id_indices) != list(range(len(id_indices))):
            raise StreamIOError(f"id class indices must be 0..K-1, got {sorted(id_indices)}")

    @property
    def n_id_classes(self) -> int:
        return sum(1 for r in self.class_map.values() if r.role == "id")

    def id_class_names(self) -> list[str]:
        """ID class names ordered by their index."""
        pairs = [(r.index, n) for n, r in self.class_map.items() if r.role == "id"]
        return [n for _, n in sorted(pairs)]

    def task_events(self) -> list[EventSpec]:
        """Events whose class maps to id or ood (rest-role events carry no coverage)."""
        return [e for e in self.events if self.class_map[e.class_name].role in ("id", "ood")]

    def state_for_class(self, class_name: str) -> TrueState:
        role = self.class_map[class_name]
        if role.role == "id":
            return TrueState(StateKind.ID, class_name, role.index)
        if role.role == "ood":
            return TrueState(StateKind.OOD, class_name)
        return REST_STATE

    def to_dict(self) -> dict:
        doc = {
            "format": MANIFEST_FORMAT,
            "subject_id": self.subject_id,
            "channel_count": self.channel_count,
            "sampling_rate": self.sampling_rate,
            "events": [
                {"onset_s": e.onset_s, "duration_s": e.duration_s, "class_name": e.class_name}
                for e in self.events
            ],
            "class_map": {
                name: ({"role": r.role, "index": r.index} if r.role == "id" else {"role": r.role})
                for name, r in self.class_map.items()
            },
            "data_path": self.data_path,
        }
        if self.channel_names is not None:
            doc["channel_names"] = self.channel_names
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionManifest":
        try:
            events = [
                EventSpec(float(e["onset_s"]), float(e["duration_s"]), str(e["class_name"]))
                for e in doc["events"]
            ]
            class_map = {}
            for name, entry in doc["class_map"].items():
                class_map[name] = ClassRole(str(entry["role"]), entry.get("index"))
            return cls(
                subject_id=str(doc["subject_id"]),
                channel_count=int(doc["channel_count"]),
                sampling_rate=float(doc["sampling_rate"]),
                events=events,
                class_map=class_map,
                data_path=str(doc["data_path"]),
                channel_names=doc.get("channel_names"),
            )
        except (KeyError, TypeError) as exc:
            raise StreamIOError(f"malformed manifest: {exc}") from exc


@dataclass(frozen=True)
class WindowFrame:
    """One sliding window with its ground-truth label.

    ``coverage`` is the fraction of samples falling inside any task (id/ood)
    event; non-excluded windows have coverage 0 exactly when they are Rest.
    Live windows (no annotation available) carry ``true_state=None``.
    """

    start_s: float
    samples: np.ndarray  # C x T_w
    true_state: Optional[TrueState]
    coverage: float


def save_manifest(manifest: SessionManifest, path: Path | str) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: Path | str) -> SessionManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StreamIOError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise StreamIOError(f"manifest {path} is not a JSON object")
    return SessionManifest.from_dict(doc)


def load_raw_signal(path: Path | str, channel_count: int) -> np.ndarray:
    """Read a channel-major little-endian float32 sample file as a C x N matrix."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise StreamIOError(f"cannot read raw file {path}: {exc}") from exc
    if len(raw) % (4 * channel_count) != 0:
        raise StreamIOError(
            f"raw file {path} has {len(raw)} bytes, not a multiple of "
            f"4 x {channel_count} channels"
        )
    flat = np.frombuffer(raw, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise StreamIOError(f"non-finite sample at float offset {int(bad[0])} in {path}")
    n = flat.size // channel_count
    return flat.reshape(channel_count, n).astype(np.float64)


def load_session(manifest_path: Path | str) -> tuple[SessionManifest, np.ndarray]:
    """Load a manifest plus its raw signal; paths in the manifest are relative to it."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    raw_path = manifest_path.parent / manifest.data_path
    signal = load_raw_signal(raw_path, manifest.channel_count)
    length_s = signal.shape[1] / manifest.sampling_rate
    for ev in manifest.events:
        if ev.offset_s > length_s + 1e-9:
            raise StreamIOError(
                f"event {ev.class_name!r} ends at {ev.offset_s}s, past the "
                f"{length_s}s recording"
            )
    return manifest, signal


def design_bandpass(low_hz: float, high_hz: float, rate: float, order: int = 4) -> np.ndarray:
    """Second-order sections for a causal Butterworth band-pass."""
    if not (0 < low_hz < high_hz < rate / 2):
        raise StreamIOError(
            f"band edges must satisfy 0 < low < high < rate/2, got "
            f"({low_hz}, {high_hz}) at {rate} Hz"
        )
    return butter(order, [low_hz, high_hz], btype="bandpass", fs=rate, output="sos")


def bandpass(
    signal: np.ndarray, low_hz: float, high_hz: float, rate: float, order: int = 4
) -> np.ndarray:
    """Causal (forward-only) band-pass, applied independently per channel."""
    sos = design_bandpass(low_hz, high_hz, rate, order)
    out = sosfilt(sos, np.asarray(signal, dtype=np.float64), axis=-1)
    if not np.all(np.isfinite(out)):
        raise StreamIOError("band-pass produced non-finite output")
    return out


# Transition zone after a task-event offset; windows inside it with no
# task content are ambiguous and excluded from training and evaluation.
POST_OFFSET_EXCLUSION_S = 0.5


def _window_sample_count(window_len_s: float, rate: float) -> int:
    n = window_len_s * rate
    if abs(n - round(n)) > 1e-9:
        raise StreamIOError(
            f"window length {window_len_s}s is not an integer number of samples at {rate} Hz"
        )
    return int(round(n))


def frame_start_indices(
    n_samples: int, rate: float, window_len_s: float, hop_s: float
) -> list[int]:
    """Start sample index per frame k, at nominal start times k * hop_s.

    Hops that are not an integer number of samples (0.125 s at 250 Hz gives
    31.25) snap each start to the nearest sample, keeping the frame count at
    floor((N/rate - window)/hop) + 1.
    """
    if hop_s <= 0:
        raise StreamIOError(f"hop must be positive, got {hop_s}")
    win_n = _window_sample_count(window_len_s, rate)
    starts = []
    k = 0
    while True:
        idx = int(math.floor(k * hop_s * rate + 0.5))
        if idx + win_n > n_samples:
            break
        starts.append(idx)
        k += 1
    return starts


def label_window(
    manifest: SessionManifest, start_index: int, win_n: int
) -> tuple[TrueState, float]:
    """Ground-truth state and task coverage of the window starting at a sample index."""
    rate = manifest.sampling_rate
    t = (start_index + np.arange(win_n)) / rate
    span_lo = start_index / rate
    span_hi = (start_index + win_n) / rate

    best: tuple[int, float, EventSpec] | None = None  # (count, onset, event)
    covered = np.zeros(win_n, dtype=bool)
    in_exclusion_zone = False
    for ev in manifest.task_events():
        inside = (t >= ev.onset_s) & (t < ev.offset_s)
        count = int(inside.sum())
        if count:
            covered |= inside
            # majority-covering event labels the window; ties go to the earlier event
            if best is None or count > best[0]:
                best = (count, ev.onset_s, ev)
        if span_lo < ev.offset_s + POST_OFFSET_EXCLUSION_S and span_hi > ev.offset_s:
            in_exclusion_zone = True

    coverage = float(covered.sum()) / win_n
    if coverage == 0.0:
        return (EXCLUDED_STATE if in_exclusion_zone else REST_STATE), 0.0
    assert best is not None
    return manifest.state_for_class(best[2].class_name), coverage


def label_frames(
    manifest: SessionManifest,
    n_samples: int,
    window_len_s: float = 2.0,
    hop_s: float = 0.125,
) -> list[tuple[float, int, TrueState, float]]:
    """Per-frame (start_s, start_index, state, coverage) without touching samples."""
    win_n = _window_sample_count(window_len_s, manifest.sampling_rate)
    out = []
    for k, idx in enumerate(frame_start_indices(n_samples, manifest.sampling_rate, window_len_s, hop_s)):
        state, coverage = label_window(manifest, idx, win_n)
        out.append((k * hop_s, idx, state, coverage))
    return out


def segment(
    signal: np.ndarray,
    manifest: SessionManifest,
    window_len_s: float = 2.0,
    hop_s: float = 0.125,
) -> Iterator[WindowFrame]:
    """Yield labeled overlapping windows at start times 0, hop, 2*hop, ..."""
    signal = np.asarray(signal)
    if signal.shape[0] != manifest.channel_count:
        raise StreamIOError(
            f"signal has {signal.shape[0]} channels, manifest says {manifest.channel_count}"
        )
    win_n = _window_sample_count(window_len_s, manifest.sampling_rate)
    for start_s, idx, state, coverage in label_frames(
        manifest, signal.shape[1], window_len_s, hop_s
    ):
        yield WindowFrame(
            start_s=start_s,
            samples=signal[:, idx : idx + win_n],
            true_state=state,
            coverage=coverage,
        )


def expected_frame_count(
    n_samples: int, rate: float, window_len_s: float = 2.0, hop_s: float = 0.125
) -> int:
    return len(frame_start_indices(n_samples, rate, window_len_s, hop_s))
