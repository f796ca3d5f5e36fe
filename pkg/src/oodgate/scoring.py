"""Scores over backbone outputs, oriented so that higher always means more
out-of-distribution.

Three components feed the fused score:

* energy: negative temperature-scaled log-sum-exp of the logits,
* density: a blend of the nearest class-conditional Mahalanobis distance and
  the mean distance to the k nearest stored training features,
* temporal: the norm of the second-order difference of the feature trajectory
  (or an alternative distance between the current feature and the mean of the
  two previous ones).

A suite of post-hoc detectors (msp, maxlogit, odin-t, ebo, react, dice, vim,
openmax, gradnorm, mahalanobis, knn) shares the same orientation so AUROC
never needs per-method sign handling.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .backbone import FeatureFrame, softmax

if TYPE_CHECKING:  # pragma: no cover
    from .calibration import CalibrationPack


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class FusionWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float = 1.0
    eta: float = 0.5

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise ScoringError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.eta <= 1.0:
            raise ScoringError(f"eta must be in [0, 1], got {self.eta}")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ScoringError("fusion weights must be non-negative")


class FeatureHistory:
    """Ring buffer of recent feature vectors with strictly increasing timestamps."""

    def __init__(self, capacity: int = 3):
        if capacity < 3:
            raise ScoringError(f"history capacity must be >= 3, got {capacity}")
        self._buf: deque[tuple[float, np.ndarray]] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._buf)

    def push(self, timestamp: float, features: np.ndarray) -> None:
        if self._buf and timestamp <= self._buf[-1][0]:
            raise ScoringError(
                f"history timestamps must increase: {timestamp} after {self._buf[-1][0]}"
            )
        self._buf.append((timestamp, np.asarray(features, dtype=np.float64)))

    def last(self, n: int) -> list[np.ndarray]:
        """Most recent n feature vectors, newest first."""
        items = list(self._buf)[-n:]
        return [f for _, f in reversed(items)]

    def clear(self) -> None:
        self._buf.clear()

    @property
    def mature(self) -> bool:
        return len(self._buf) >= 2


# -- fused-score components ----------------------------------------------------


def score_energy(logits: np.ndarray, temperature: float = 1.0) -> float:
    """-T log sum_k exp(z_k / T), computed with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size < 2:
        raise ScoringError(f"need at least 2 logits, got {z.size}")
    if temperature <= 0:
        raise ScoringError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(z)):
        raise ScoringError("non-finite logits")
    scaled = z / temperature
    m = scaled.max()
    return float(-temperature * (m + np.log(np.exp(scaled - m).sum())))


def score_mahalanobis(
    features: np.ndarray, class_means: Sequence[np.ndarray], inv_cov: np.ndarray
) -> float:
    """Smallest class-conditional squared Mahalanobis distance."""
    f = np.asarray(features, dtype=np.float64)
    if not class_means:
        raise ScoringError("need at least one class mean")
    best = np.inf
    for mu in class_means:
        diff = f - mu
        if diff.shape[0] != inv_cov.shape[0]:
            raise ScoringError(
                f"feature dim {diff.shape[0]} does not match covariance dim {inv_cov.shape[0]}"
            )
        best = min(best, float(diff @ inv_cov @ diff))
    return best


def score_knn(features: np.ndarray, id_memory: np.ndarray, k: int = 10) -> float:
    """Mean Euclidean distance to the k nearest stored training features."""
    f = np.asarray(features, dtype=np.float64)
    memory = np.asarray(id_memory, dtype=np.float64)
    if k < 1 or k > memory.shape[0]:
        raise ScoringError(f"k={k} out of range for memory of {memory.shape[0]} points")
    dists = np.sqrt(((memory - f) ** 2).sum(axis=1))
    smallest = np.sort(np.partition(dists, k - 1)[:k])
    return float(smallest.mean())


def score_density(
    features: np.ndarray,
    class_means: Sequence[np.ndarray],
    inv_cov: np.ndarray,
    id_memory: np.ndarray,
    k: int = 10,
    eta: float = 0.5,
) -> float:
    """eta * mahalanobis + (1 - eta) * knn."""
    if eta == 1.0:
        return score_mahalanobis(features, class_means, inv_cov)
    if eta == 0.0:
        return score_knn(features, id_memory, k)
    return eta * score_mahalanobis(features, class_means, inv_cov) + (1.0 - eta) * score_knn(
        features, id_memory, k
    )


SECOND_ORDER = "second_order"
TEMPORAL_METRICS = (
    SECOND_ORDER,
    "euclidean",
    "manhattan",
    "cosine",
    "correlation",
    "canberra",
    "braycurtis",
)


def score_temporal(
    features: np.ndarray, history: FeatureHistory, metric: str = SECOND_ORDER
) -> tuple[float, bool]:
    """Trajectory-instability score and a maturity flag.

    With fewer than two stored feature vectors the score is 0 and the flag is
    False.  The default metric is ||f_t - 2 f_{t-1} + f_{t-2}||_2; alternative
    metrics measure the distance between f_t and the mean of the previous two.
    """
    if metric not in TEMPORAL_METRICS:
        raise ScoringError(f"unknown temporal metric {metric!r}")
    if not history.mature:
        return 0.0, False
    f_t = np.asarray(features, dtype=np.float64)
    prev1, prev2 = history.last(2)
    if prev1.shape != f_t.shape or prev2.shape != f_t.shape:
        raise ScoringError("feature dimension changed within one stream")
    if metric == SECOND_ORDER:
        return float(np.linalg.norm(f_t - 2.0 * prev1 + prev2)), True
    center = 0.5 * (prev1 + prev2)
    return metric_distance(metric, f_t, center), True


CANBERRA_EPS = 1e-8


def metric_distance(name: str, h: np.ndarray, c: np.ndarray, eps: float = CANBERRA_EPS) -> float:
    """Pairwise distance d(h, c) for the supported metric names."""
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if h.shape != c.shape:
        raise ScoringError(f"shape mismatch {h.shape} vs {c.shape}")
    if name == "euclidean":
        return float(np.sqrt(((h - c) ** 2).sum()))
    if name == "manhattan":
        return float(np.abs(h - c).sum())
    if name == "cosine":
        nh, nc = np.linalg.norm(h), np.linalg.norm(c)
        if nh == 0 or nc == 0:
            raise ScoringError("cosine distance undefined for zero-norm vector")
        return float(1.0 - (h @ c) / (nh * nc))
    if name == "correlation":
        hc, cc = h - h.mean(), c - c.mean()
        nh, nc = np.linalg.norm(hc), np.linalg.norm(cc)
        if nh == 0 or nc == 0:
            raise ScoringError("correlation distance undefined for constant vector")
        return float(1.0 - (hc @ cc) / (nh * nc))
    if name == "canberra":
        if eps <= 0:
            raise ScoringError("canberra needs eps > 0")
        return float((np.abs(h - c) / (np.abs(h) + np.abs(c) + eps)).sum())
    if name == "braycurtis":
        if eps <= 0:
            raise ScoringError("braycurtis needs eps > 0")
        return float(np.abs(h - c).sum() / ((np.abs(h) + np.abs(c)).sum() + eps))
    raise ScoringError(f"unknown metric {name!r}")


def online_aggregate(frames: Sequence[FeatureFrame]) -> FeatureFrame:
    """Element-wise mean of the trailing frames; the single-frame case is the identity."""
    if not frames:
        raise ScoringError("cannot aggregate an empty frame buffer")
    d = frames[-1].features.shape
    k = frames[-1].logits.shape
    for fr in frames:
        if fr.features.shape != d or fr.logits.shape != k:
            raise ScoringError("mixed feature/logit dimensions in aggregation buffer")
    return FeatureFrame(
        start_s=frames[-1].start_s,
        logits=np.mean([fr.logits for fr in frames], axis=0),
        features=np.mean([fr.features for fr in frames], axis=0),
        true_state=frames[-1].true_state,
    )


# -- post-hoc baseline suite -----------------------------------------------------

BASELINE_NAMES = (
    "msp",
    "maxlogit",
    "odin-t",
    "ebo",
    "react",
    "dice",
    "vim",
    "openmax",
    "gradnorm",
    "mahalanobis",
    "knn",
)


@dataclass(frozen=True)
class BaselineConfig:
    temperature: float = 1.0  # energy temperature
    odin_temperature: float = 1000.0
    knn_k: int = 10

    def __post_init__(self) -> None:
        if self.temperature <= 0 or self.odin_temperature <= 0:
            raise ScoringError("temperatures must be positive")
        if self.knn_k < 1:
            raise ScoringError("knn_k must be >= 1")


def _head_logits(pack: "CalibrationPack", features: np.ndarray) -> np.ndarray:
    return pack.head_weights @ features + pack.head_bias


def score_baseline(
    name: str,
    frame: FeatureFrame,
    pack: "CalibrationPack",
    config: BaselineConfig = BaselineConfig(),
) -> float:
    """One detector score for one frame, higher = more OOD."""
    z = frame.logits
    f = frame.features
    if name == "msp":
        return float(1.0 - softmax(z).max())
    if name == "maxlogit":
        return float(-z.max())
    if name == "odin-t":
        return float(1.0 - softmax(z / config.odin_temperature).max())
    if name == "ebo":
        return score_energy(z, config.temperature)
    if name == "react":
        clipped = np.minimum(f, pack.react_clamp)
        return score_energy(_head_logits(pack, clipped), config.temperature)
    if name == "dice":
        masked = (pack.head_weights * pack.dice_mask) @ f + pack.head_bias
        return score_energy(masked, config.temperature)
    if name == "vim":
        residual = float(np.linalg.norm(pack.vim_subspace.residual_basis.T @ (f - pack.vim_subspace.origin)))
        energy = -score_energy(z, 1.0)  # log-sum-exp of the raw logits
        return pack.vim_subspace.scale * residual - energy
    if name == "openmax":
        return openmax_score(z, pack)
    if name == "gradnorm":
        k = z.shape[0]
        grad = np.abs(softmax(z) - 1.0 / k).sum() * np.abs(f).sum()
        return float(-grad)
    if name == "mahalanobis":
        return score_mahalanobis(f, pack.class_means, pack.inv_cov)
    if name == "knn":
        return score_knn(f, pack.id_memory, config.knn_k)
    raise ScoringError(f"unknown baseline {name!r}")


def openmax_score(logits: np.ndarray, pack: "CalibrationPack") -> float:
    """Weibull-revised activation score: 1 minus the best known-class probability.

    Each class logit is shrunk by the tail CDF of the distance between the
    activation vector and that class's mean activation; the shaved-off mass
    becomes an explicit unknown logit before the softmax.
    """
    wb = pack.openmax_weibull
    z = np.asarray(logits, dtype=np.float64)
    k = z.shape[0]
    rank = np.argsort(z)[::-1]
    alpha = np.zeros(k)
    for r, cls in enumerate(rank):
        alpha[cls] = (k - r) / k
    revised = np.empty(k)
    unknown = 0.0
    for c in range(k):
        dist = float(np.linalg.norm(z - wb.mean_activations[c]))
        w = wb.tail_cdf(c, dist)
        revised[c] = z[c] * (1.0 - w * alpha[c])
        unknown += z[c] - revised[c]
    probs = softmax(np.concatenate([revised, [unknown]]))
    return float(1.0 - probs[:k].max())
