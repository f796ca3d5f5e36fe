"""Feature providers: a native CSP + linear-head pipeline, and feature-file replay.

The native provider projects each window through spatial filters obtained from
a generalized eigendecomposition of class covariance matrices, takes the log
variance of each projected row, and feeds that through a trained multinomial
logistic head.  The replay provider streams externally computed logits and
features from a packed binary file, so any upstream model can stand in.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy.linalg import eigh

from .stream_io import SessionManifest, TrueState, WindowFrame, expected_frame_count, label_frames

FEATURE_FILE_FORMAT = "oodgate-features-v1"
CHECKPOINT_FORMAT = "oodgate-model-v1"

# Relative ridge added to covariance estimates before eigensolving; guards
# against rank deficiency with few channels and short windows.
COV_SHRINKAGE = 1e-3


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureFrame:
    """Per-window backbone output: logits over the K control classes plus a feature vector."""

    start_s: float
    logits: np.ndarray
    features: np.ndarray
    true_state: Optional[TrueState]

    def __post_init__(self) -> None:
        if not (np.all(np.isfinite(self.logits)) and np.all(np.isfinite(self.features))):
            raise BackboneError(f"non-finite frame at {self.start_s}s")


@dataclass
class NativeBackboneModel:
    """Spatial filters plus linear head; immutable once trained."""

    csp_filters: np.ndarray  # d x C
    head_weights: np.ndarray  # K x d
    head_bias: np.ndarray  # K
    class_names: list[str]

    @property
    def n_channels(self) -> int:
        return self.csp_filters.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.csp_filters.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_weights.shape[0]


def _normalized_covariance(window: np.ndarray) -> np.ndarray:
    cov = window @ window.T
    tr = np.trace(cov)
    if tr <= 0:
        raise BackboneError("window has zero total power; cannot normalize covariance")
    return cov / tr


def _shrink(cov: np.ndarray) -> np.ndarray:
    c = cov.shape[0]
    return cov + COV_SHRINKAGE * (np.trace(cov) / c) * np.eye(c)


def csp_from_covariances(cov_a: np.ndarray, cov_b: np.ndarray, n_pairs: int) -> tuple[np.ndarray, np.ndarray]:
    """Solve cov_a w = lambda (cov_a + cov_b) w; return (filters, eigenvalues).

    Filters are rows, ordered: the n_pairs most class-a-dominant first, then
    the n_pairs most class-b-dominant.
    """
    c = cov_a.shape[0]
    if n_pairs < 1 or 2 * n_pairs > c:
        raise BackboneError(f"n_pairs={n_pairs} out of range for {c} channels")
    composite = cov_a + cov_b
    try:
        vals, vecs = eigh(cov_a, composite)
    except np.linalg.LinAlgError as exc:
        raise BackboneError(f"singular composite covariance: {exc}") from exc
    if not np.all(np.isfinite(vals)):
        raise BackboneError("eigensolve produced non-finite eigenvalues")
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    keep = list(range(n_pairs)) + list(range(c - n_pairs, c))
    return vecs[:, keep].T.copy(), vals


def fit_csp(
    class_a_windows: Sequence[np.ndarray],
    class_b_windows: Sequence[np.ndarray],
    n_pairs: int = 3,
) -> np.ndarray:
    """Fit spatial filters from two sets of windows (each C x T)."""
    if len(class_a_windows) < 2 or len(class_b_windows) < 2:
        raise BackboneError(
            f"need at least 2 windows per class, got {len(class_a_windows)} and {len(class_b_windows)}"
        )
    cov_a = _shrink(np.mean([_normalized_covariance(w) for w in class_a_windows], axis=0))
    cov_b = _shrink(np.mean([_normalized_covariance(w) for w in class_b_windows], axis=0))
    filters, _ = csp_from_covariances(cov_a, cov_b, n_pairs)
    return filters


def fit_csp_multiclass(
    windows_by_class: Sequence[Sequence[np.ndarray]], n_pairs: int = 3
) -> np.ndarray:
    """One-vs-rest filter banks, concatenated, for more than two classes."""
    if len(windows_by_class) == 2:
        return fit_csp(windows_by_class[0], windows_by_class[1], n_pairs)
    banks = []
    for i, own in enumerate(windows_by_class):
        rest = [w for j, cls in enumerate(windows_by_class) if j != i for w in cls]
        banks.append(fit_csp(own, rest, n_pairs))
    return np.vstack(banks)


def extract_features(window: np.ndarray, model: NativeBackboneModel) -> np.ndarray:
    """Log variance of each spatially filtered row."""
    window = np.asarray(window)
    if window.shape[0] != model.n_channels:
        raise BackboneError(
            f"window has {window.shape[0]} channels, model expects {model.n_channels}"
        )
    projected = model.csp_filters @ window
    var = projected.var(axis=1)
    dead = np.flatnonzero(var <= 0)
    if dead.size:
        raise BackboneError(f"zero variance after spatial filter {int(dead[0])}")
    return np.log(var)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy_loss_and_grad(
    weights: np.ndarray,
    bias: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    l2: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of a linear softmax head, with L2 on the weights.

    Returns (loss, d_loss/d_weights, d_loss/d_bias).
    """
    n = features.shape[0]
    logits = features @ weights.T + bias
    probs = softmax(logits, axis=1)
    nll = -np.log(probs[np.arange(n), labels] + 1e-300)
    loss = float(nll.mean() + 0.5 * l2 * np.sum(weights**2))
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    grad_w = delta.T @ features / n + l2 * weights
    grad_b = delta.mean(axis=0)
    return loss, grad_w, grad_b


def train_head(
    features: np.ndarray,
    labels: np.ndarray,
    epochs: int = 500,
    lr: float = 0.1,
    l2: float = 1e-4,
    n_classes: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    loss_trace: Optional[list] = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch gradient descent on cross-entropy + L2.

    Each step backtracks (halves the step) until the loss does not increase,
    so the loss trace is non-increasing by construction.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise BackboneError("features must be n x d with one label per row")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    present = np.unique(labels)
    if len(present) < k or present.min() < 0 or present.max() >= k:
        raise BackboneError(f"labels must cover all classes 0..{k - 1}, saw {present.tolist()}")
    d = features.shape[1]
    rng = rng or np.random.default_rng(0)
    weights = rng.normal(0.0, 0.01, size=(k, d))
    bias = np.zeros(k)

    loss, grad_w, grad_b = cross_entropy_loss_and_grad(weights, bias, features, labels, l2)
    if loss_trace is not None:
        loss_trace.append(loss)
    for _ in range(epochs):
        if lr == 0.0:
            break
        step = lr
        for _ in range(60):
            w_new = weights - step * grad_w
            b_new = bias - step * grad_b
            new_loss, new_gw, new_gb = cross_entropy_loss_and_grad(
                w_new, b_new, features, labels, l2
            )
            if new_loss <= loss + 1e-12:
                break
            step *= 0.5
        else:
            break  # no acceptable step; converged to gradient noise floor
        weights, bias, loss, grad_w, grad_b = w_new, b_new, new_loss, new_gw, new_gb
        if loss_trace is not None:
            loss_trace.append(loss)
        if not math.isfinite(loss):
            raise BackboneError("training loss became non-finite")
    return weights, bias


def infer(window: WindowFrame, model: NativeBackboneModel) -> FeatureFrame:
    f = extract_features(window.samples, model)
    z = model.head_weights @ f + model.head_bias
    return FeatureFrame(
        start_s=window.start_s, logits=z, features=f, true_state=window.true_state
    )


# -- checkpoint serialization -------------------------------------------------


def _pack(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "f32": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack(entry: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(entry["f32"]), dtype="<f4").astype(np.float64)
    return flat.reshape(entry["shape"])


def model_to_dict(model: NativeBackboneModel) -> dict:
    return {
        "csp_filters": _pack(model.csp_filters),
        "head_weights": _pack(model.head_weights),
        "head_bias": _pack(model.head_bias),
        "class_names": model.class_names,
    }


def model_from_dict(doc: dict) -> NativeBackboneModel:
    return NativeBackboneModel(
        csp_filters=_unpack(doc["csp_filters"]),
        head_weights=_unpack(doc["head_weights"]),
        head_bias=_unpack(doc["head_bias"]),
        class_names=list(doc["class_names"]),
    )


def save_checkpoint(gate_model: NativeBackboneModel, task_model: NativeBackboneModel, path: Path | str) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "gate": model_to_dict(gate_model),
        "task": model_to_dict(task_model),
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_checkpoint(path: Path | str) -> tuple[NativeBackboneModel, NativeBackboneModel]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise BackboneError(f"unexpected checkpoint format {doc.get('format')!r}")
    return model_from_dict(doc["gate"]), model_from_dict(doc["task"])


# -- feature export / replay ---------------------------------------------------


def write_feature_file(path: Path | str, frames: Sequence[FeatureFrame]) -> None:
    """JSON header line {d, K, frame_count} followed by packed [logits||features] f32 records."""
    if frames:
        d = len(frames[0].features)
        k = len(frames[0].logits)
    else:
        d = k = 0
    header = {"format": FEATURE_FILE_FORMAT, "d": d, "K": k, "frame_count": len(frames)}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        for fr in frames:
            if len(fr.features) != d or len(fr.logits) != k:
                raise BackboneError("inconsistent record shapes in feature export")
            rec = np.concatenate([fr.logits, fr.features]).astype("<f4")
            fh.write(rec.tobytes())


def read_feature_records(path: Path | str) -> tuple[dict, np.ndarray, np.ndarray]:
    """Return (header, logits matrix, features matrix) from a feature file."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        body = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
        d, k, count = int(header["d"]), int(header["K"]), int(header["frame_count"])
    except (ValueError, KeyError) as exc:
        raise BackboneError(f"malformed feature file header in {path}: {exc}") from exc
    rec_len = (d + k) * 4
    if count == 0:
        if body:
            raise BackboneError(f"feature file {path} declares 0 frames but has payload bytes")
        return header, np.zeros((0, k)), np.zeros((0, d))
    if rec_len == 0 or len(body) != rec_len * count:
        raise BackboneError(
            f"feature file {path} payload is {len(body)} bytes, expected {rec_len * count} "
            f"for {count} records of K={k}, d={d}"
        )
    mat = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(count, d + k)
    return header, mat[:, :k], mat[:, k:]


def replay_provider(
    feature_path: Path | str,
    manifest: SessionManifest,
    n_samples: Optional[int] = None,
    window_len_s: float = 2.0,
    hop_s: float = 0.125,
) -> Iterator[FeatureFrame]:
    """Stream externally exported frames, labeled from the manifest's events.

    When the recording length is known the record count is checked against the
    segmentation arithmetic; otherwise the header's frame count is trusted.
    """
    header, logits, features = read_feature_records(feature_path)
    count = logits.shape[0]
    if n_samples is not None:
        expected = expected_frame_count(n_samples, manifest.sampling_rate, window_len_s, hop_s)
        if count != expected:
            raise BackboneError(
                f"feature file holds {count} frames, segmentation of {n_samples} samples "
                f"yields {expected}"
            )
        labels = label_frames(manifest, n_samples, window_len_s, hop_s)
    else:
        # enough virtual samples to label `count` frames on the nominal grid
        win_n = int(round(window_len_s * manifest.sampling_rate))
        virtual = int(math.floor((count - 1) * hop_s * manifest.sampling_rate + 0.5)) + win_n
        labels = label_frames(manifest, virtual, window_len_s, hop_s)[:count]
    for i in range(count):
        start_s, _, state, _ = labels[i]
        yield FeatureFrame(start_s=start_s, logits=logits[i], features=features[i], true_state=state)
