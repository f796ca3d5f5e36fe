"""Freezing statistics from training ID data into an immutable calibration pack.

The pack carries everything the online engine and the baseline suite need at
test time: class means and a shared inverse covariance, the feature memory,
per-component standardization stats, the gate and rejection thresholds, and
the per-detector auxiliaries (clamp level, weight mask, residual subspace,
tail models).  Nothing in it may be derived from OOD or test data.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import weibull_min

from .backbone import FeatureFrame
from .scoring import (
    SECOND_ORDER,
    FeatureHistory,
    FusionWeights,
    score_density,
    score_energy,
    score_knn,
    score_mahalanobis,
    score_temporal,
)

PACK_FORMAT = "oodgate-calibration-v1"

COV_SHRINKAGE = 1e-3
ID_MEMORY_CAP = 50_000

SCORE_COMPONENTS = ("ebo", "dens", "temp")


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class VimSubspace:
    """Residual subspace for the logit/feature residual detector."""

    origin: np.ndarray  # d
    residual_basis: np.ndarray  # d x (d - d'), spans the minor directions
    scale: float


@dataclass(frozen=True)
class WeibullTails:
    """Per-class Weibull tail models over activation distances."""

    mean_activations: np.ndarray  # K x K logit-space class means
    shapes: np.ndarray
    scales: np.ndarray

    def tail_cdf(self, class_index: int, distance: float) -> float:
        return float(
            weibull_min.cdf(distance, self.shapes[class_index], loc=0.0, scale=self.scales[class_index])
        )


@dataclass
class CalibrationPack:
    class_means: list[np.ndarray]
    inv_cov: np.ndarray
    id_memory: np.ndarray
    score_stats: dict[str, tuple[float, float]]  # component -> (mean, std)
    tau: float
    gate_threshold: float
    head_weights: np.ndarray
    head_bias: np.ndarray
    react_clamp: float
    dice_mask: np.ndarray
    vim_subspace: VimSubspace
    openmax_weibull: WeibullTails
    score_params: dict  # temperature / eta / knn_k / temporal_metric the stats were fit under

    def standardize(self, component: str, raw: float) -> float:
        mu, sigma = self.score_stats[component]
        return (raw - mu) / sigma


def fit_class_stats(
    features: np.ndarray, labels: np.ndarray, shrinkage: float = COV_SHRINKAGE
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-class means and one pooled, shrinkage-regularized inverse covariance."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise CalibrationError("features must be n x d with one label per row")
    classes = np.unique(labels)
    means = []
    centered = np.empty_like(features)
    for c in classes:
        rows = labels == c
        if rows.sum() < 2:
            raise CalibrationError(f"class {c} has {int(rows.sum())} samples; need at least 2")
        mu = features[rows].mean(axis=0)
        means.append(mu)
        centered[rows] = features[rows] - mu
    d = features.shape[1]
    cov = centered.T @ centered / features.shape[0]
    # relative ridge, plus an absolute floor so constant features stay invertible
    cov = cov + (shrinkage * (np.trace(cov) / d) + 1e-12) * np.eye(d)
    try:
        factor = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise CalibrationError(f"covariance not positive definite after shrinkage: {exc}") from exc
    inv_cov = cho_solve(factor, np.eye(d))
    inv_cov = 0.5 * (inv_cov + inv_cov.T)
    return means, inv_cov


def raw_components(
    frame: FeatureFrame,
    history: FeatureHistory,
    class_means: Sequence[np.ndarray],
    inv_cov: np.ndarray,
    id_memory: np.ndarray,
    weights: FusionWeights,
    knn_k: int = 10,
    temporal_metric: str = SECOND_ORDER,
) -> dict:
    """Raw component scores of one frame against frozen ID statistics.

    The temporal score is computed against the history *before* the current
    frame is pushed; callers push afterwards.
    """
    mahal = score_mahalanobis(frame.features, class_means, inv_cov)
    knn = score_knn(frame.features, id_memory, knn_k)
    temp, mature = score_temporal(frame.features, history, temporal_metric)
    return {
        "ebo": score_energy(frame.logits, weights.temperature),
        "mahal": mahal,
        "knn": knn,
        "dens": weights.eta * mahal + (1.0 - weights.eta) * knn,
        "temp": temp,
        "mature": mature,
    }


def population_stats(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population (1/n) standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    mu = float(arr.mean())
    return mu, float(np.sqrt(((arr - mu) ** 2).mean()))


def fit_score_stats(
    frames: Sequence[FeatureFrame],
    class_means: Sequence[np.ndarray],
    inv_cov: np.ndarray,
    id_memory: np.ndarray,
    weights: FusionWeights,
    knn_k: int = 10,
    temporal_metric: str = SECOND_ORDER,
) -> dict[str, tuple[float, float]]:
    """Population mean/std of each component over a training ID stream.

    Frames are walked in stream order so the temporal component sees genuine
    trajectories; frames with an immature history contribute to the energy and
    density stats but are skipped for the temporal ones.
    """
    if len(frames) < 2:
        raise CalibrationError(f"need at least 2 ID frames, got {len(frames)}")
    history = FeatureHistory()
    ebo, dens, temp = [], [], []
    for frame in frames:
        comp = raw_components(
            frame, history, class_means, inv_cov, id_memory, weights, knn_k, temporal_metric
        )
        ebo.append(comp["ebo"])
        dens.append(comp["dens"])
        if comp["mature"]:
            temp.append(comp["temp"])
        history.push(frame.start_s, frame.features)
    stats = {}
    for name, values in (("ebo", ebo), ("dens", dens), ("temp", temp)):
        if len(values) < 2:
            raise CalibrationError(f"component {name!r} has {len(values)} usable scores; need 2")
        mu, sigma = population_stats(values)
        if sigma <= 1e-12 * max(1.0, abs(mu)):  # constant up to rounding noise
            raise CalibrationError(f"component {name!r} has zero variance on the calibration set")
        stats[name] = (mu, sigma)
    return stats


def calibrate_tau(validation_id_scores: Sequence[float], quantile: float = 0.95) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th order statistic of the ID scores."""
    scores = np.asarray(validation_id_scores, dtype=np.float64)
    if scores.size == 0:
        raise CalibrationError("cannot calibrate a threshold on an empty score list")
    if not 0.0 < quantile < 1.0:
        raise CalibrationError(f"quantile must be in (0, 1), got {quantile}")
    rank = int(np.ceil(quantile * scores.size))
    return float(np.sort(scores)[rank - 1])


def build_id_memory(
    features: np.ndarray, cap: int = ID_MEMORY_CAP, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """All training ID features, reservoir-subsampled only past the cap."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] <= cap:
        return features.copy()
    rng = rng or np.random.default_rng(0)
    keep = np.sort(rng.choice(features.shape[0], size=cap, replace=False))
    return features[keep].copy()


# -- baseline auxiliaries --------------------------------------------------------


def fit_react_clamp(features: np.ndarray, percentile: float = 90.0) -> float:
    return float(np.percentile(np.asarray(features).ravel(), percentile))


def fit_dice_mask(
    head_weights: np.ndarray, mean_features: np.ndarray, percentile: float = 90.0
) -> np.ndarray:
    """Keep, per class row, the weights whose mean contribution clears the percentile."""
    contribution = head_weights * mean_features[None, :]
    thresh = np.percentile(contribution, percentile, axis=1, keepdims=True)
    return (contribution >= thresh).astype(np.float64)


def fit_vim_subspace(
    features: np.ndarray,
    logits: np.ndarray,
    head_weights: np.ndarray,
    head_bias: np.ndarray,
    principal_dim: Optional[int] = None,
) -> VimSubspace:
    """Residual basis outside the top principal directions of the ID features."""
    d = features.shape[1]
    if principal_dim is None:
        principal_dim = int(np.ceil(d / 2))
    principal_dim = min(max(principal_dim, 1), d - 1)
    origin = -np.linalg.pinv(head_weights) @ head_bias
    centered = features - origin
    cov = centered.T @ centered / features.shape[0]
    vals, vecs = np.linalg.eigh(cov)  # ascending
    residual_basis = vecs[:, : d - principal_dim]
    residuals = np.linalg.norm(centered @ residual_basis, axis=1)
    mean_residual = float(residuals.mean())
    scale = float(logits.max(axis=1).mean()) / max(mean_residual, 1e-12)
    return VimSubspace(origin=origin, residual_basis=residual_basis, scale=scale)


def fit_openmax_tails(
    logits: np.ndarray, labels: np.ndarray, tail_size: int = 20
) -> WeibullTails:
    """Per-class Weibull fits over the largest distances to the class mean activation."""
    logits = np.asarray(logits, dtype=np.float64)
    k = logits.shape[1]
    means = np.empty((k, k))
    shapes = np.empty(k)
    scales = np.empty(k)
    for c in range(k):
        rows = logits[labels == c]
        if rows.shape[0] < 2:
            raise CalibrationError(f"class {c} has too few samples for tail fitting")
        means[c] = rows.mean(axis=0)
        dists = np.linalg.norm(rows - means[c], axis=1)
        tail = np.sort(dists)[-min(tail_size, dists.size) :]
        tail = np.maximum(tail, 1e-12)
        if np.allclose(tail, tail[0]):
            shapes[c], scales[c] = 10.0, float(tail[0])
        else:
            shape, _, scale = weibull_min.fit(tail, floc=0.0)
            shapes[c], scales[c] = float(shape), float(scale)
    return WeibullTails(mean_activations=means, shapes=shapes, scales=scales)


# -- serialization ----------------------------------------------------------------


def _pack_arr(arr: np.ndarray) -> dict:
    arr = np.asarray(arr, dtype="<f4")
    return {"shape": list(arr.shape), "f32": base64.b64encode(arr.tobytes()).decode("ascii")}


def _unpack_arr(entry: dict) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(entry["f32"]), dtype="<f4").astype(np.float64)
    return flat.reshape(entry["shape"])


def pack_to_dict(pack: CalibrationPack) -> dict:
    return {
        "format": PACK_FORMAT,
        "class_means": [_pack_arr(m) for m in pack.class_means],
        "inv_cov": _pack_arr(pack.inv_cov),
        "id_memory": _pack_arr(pack.id_memory),
        "score_stats": {k: list(v) for k, v in pack.score_stats.items()},
        "tau": pack.tau,
        "gate_threshold": pack.gate_threshold,
        "head_weights": _pack_arr(pack.head_weights),
        "head_bias": _pack_arr(pack.head_bias),
        "react_clamp": pack.react_clamp,
        "dice_mask": _pack_arr(pack.dice_mask),
        "vim": {
            "origin": _pack_arr(pack.vim_subspace.origin),
            "residual_basis": _pack_arr(pack.vim_subspace.residual_basis),
            "scale": pack.vim_subspace.scale,
        },
        "openmax": {
            "mean_activations": _pack_arr(pack.openmax_weibull.mean_activations),
            "shapes": pack.openmax_weibull.shapes.tolist(),
            "scales": pack.openmax_weibull.scales.tolist(),
        },
        "score_params": pack.score_params,
    }


def pack_from_dict(doc: dict) -> CalibrationPack:
    if doc.get("format") != PACK_FORMAT:
        raise CalibrationError(f"unexpected calibration format {doc.get('format')!r}")
    stats = {k: (float(v[0]), float(v[1])) for k, v in doc["score_stats"].items()}
    for name, (_, sigma) in stats.items():
        if sigma <= 0:
            raise CalibrationError(f"component {name!r} has non-positive std in pack")
    return CalibrationPack(
        class_means=[_unpack_arr(m) for m in doc["class_means"]],
        inv_cov=_unpack_arr(doc["inv_cov"]),
        id_memory=_unpack_arr(doc["id_memory"]),
        score_stats=stats,
        tau=float(doc["tau"]),
        gate_threshold=float(doc["gate_threshold"]),
        head_weights=_unpack_arr(doc["head_weights"]),
        head_bias=_unpack_arr(doc["head_bias"]),
        react_clamp=float(doc["react_clamp"]),
        dice_mask=_unpack_arr(doc["dice_mask"]),
        vim_subspace=VimSubspace(
            origin=_unpack_arr(doc["vim"]["origin"]),
            residual_basis=_unpack_arr(doc["vim"]["residual_basis"]),
            scale=float(doc["vim"]["scale"]),
        ),
        openmax_weibull=WeibullTails(
            mean_activations=_unpack_arr(doc["openmax"]["mean_activations"]),
            shapes=np.asarray(doc["openmax"]["shapes"], dtype=np.float64),
            scales=np.asarray(doc["openmax"]["scales"], dtype=np.float64),
        ),
        score_params=dict(doc["score_params"]),
    )


def save_pack(pack: CalibrationPack, path: Path | str) -> None:
    Path(path).write_text(json.dumps(pack_to_dict(pack)) + "\n", encoding="utf-8")


def load_pack(path: Path | str) -> CalibrationPack:
    return pack_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
