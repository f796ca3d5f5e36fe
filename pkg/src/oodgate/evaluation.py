"""Detection and gating metrics, plus the ablation / metric-sweep grids.

All scores entering `auroc` follow the package-wide orientation (higher =
more OOD, OOD is the positive class).  Heavy lifting such as producing score
tables per subject lives in the pipeline layer; this module is pure math and
table assembly.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .stream_io import StateKind, TrueState


class EvaluationError(ValueError):
    pass


def auroc(id_scores: Sequence[float], ood_scores: Sequence[float]) -> float:
    """Probability that a random OOD score outranks a random ID score, ties at half credit."""
    neg = np.asarray(id_scores, dtype=np.float64)
    pos = np.asarray(ood_scores, dtype=np.float64)
    if neg.size == 0 or pos.size == 0:
        raise EvaluationError("auroc needs at least one score on each side")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def coverage_recall_curve(
    gate_is_task: Sequence[bool],
    coverages: Sequence[float],
    n_bins: int = 10,
) -> list[tuple[float, float]]:
    """Per coverage bin over (0, 1], the fraction of task-containing windows gated task.

    Only windows with coverage > 0 participate; empty bins are omitted.
    """
    if n_bins < 1:
        raise EvaluationError(f"n_bins must be >= 1, got {n_bins}")
    if len(gate_is_task) != len(coverages):
        raise EvaluationError("gate decisions and coverages must align")
    hits = np.zeros(n_bins)
    totals = np.zeros(n_bins)
    for gated, cov in zip(gate_is_task, coverages):
        if cov <= 0.0:
            continue
        idx = min(int(np.ceil(cov * n_bins)) - 1, n_bins - 1)
        totals[idx] += 1
        if gated:
            hits[idx] += 1
    curve = []
    for i in range(n_bins):
        if totals[i] > 0:
            center = (i + 0.5) / n_bins
            curve.append((center, float(hits[i] / totals[i])))
    return curve


def gate_accuracy(
    gate_is_task: Sequence[bool],
    true_states: Sequence[TrueState],
    ood_counts_as_task: bool = True,
) -> float:
    """Fraction of correct rest/task gate decisions, excluded windows dropped.

    OOD windows are genuinely task-state; by default they count as task truth.
    With ``ood_counts_as_task=False`` they are removed from the evaluation set
    instead.
    """
    if len(gate_is_task) != len(true_states):
        raise EvaluationError("gate decisions and labels must align")
    correct = 0
    total = 0
    for gated, state in zip(gate_is_task, true_states):
        if state.kind == StateKind.EXCLUDED:
            continue
        if state.kind == StateKind.OOD and not ood_counts_as_task:
            continue
        total += 1
        truth_task = state.is_task
        if gated == truth_task:
            correct += 1
    if total == 0:
        raise EvaluationError("no windows left to evaluate the gate on")
    return correct / total


# -- grids -----------------------------------------------------------------------

ABLATION_MASKS = (
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
)

METRIC_SWEEP_ORDER = (
    "braycurtis",
    "canberra",
    "correlation",
    "cosine",
    "euclidean",
    "manhattan",
    "second_order",
)


@dataclass
class ScoreTable:
    """Aligned per-frame arrays for one evaluation population."""

    is_ood: np.ndarray  # boolean per frame
    std_components: dict[str, np.ndarray]  # "ebo" / "dens" / "temp"

    def fused(self, mask: tuple[int, int, int], weights: tuple[float, float, float]) -> np.ndarray:
        out = np.zeros(self.is_ood.shape[0])
        for on, w, name in zip(mask, weights, ("ebo", "dens", "temp")):
            if on:
                out = out + w * self.std_components[name]
        return out

    def auroc_for(self, scores: np.ndarray) -> float:
        return auroc(scores[~self.is_ood], scores[self.is_ood])


def run_ablation(
    tables_by_dataset: dict[str, ScoreTable],
    masks: Sequence[tuple[int, int, int]] = ABLATION_MASKS,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> list[dict]:
    """AUROC of every component mask on every dataset, plus the row average."""
    if not masks:
        raise EvaluationError("empty mask grid")
    seen = []
    for mask in masks:
        if mask == (0, 0, 0):
            raise EvaluationError("the all-zeros mask scores nothing")
        if mask in seen:
            warnings.warn(f"duplicate ablation mask {mask} dropped")
            continue
        seen.append(mask)
    rows = []
    for mask in seen:
        cells = {
            name: table.auroc_for(table.fused(mask, weights))
            for name, table in tables_by_dataset.items()
        }
        rows.append({"mask": mask, "auroc": cells, "average": float(np.mean(list(cells.values())))})
    return rows


def run_metric_sweep(
    tables_by_metric_and_dataset: dict[str, dict[str, ScoreTable]],
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> list[dict]:
    """Full-fusion AUROC per temporal metric per dataset, plus the row average."""
    rows = []
    for metric, tables in tables_by_metric_and_dataset.items():
        if metric not in METRIC_SWEEP_ORDER:
            raise EvaluationError(f"unknown temporal metric {metric!r}")
        cells = {
            name: table.auroc_for(table.fused((1, 1, 1), weights))
            for name, table in tables.items()
        }
        rows.append(
            {"metric": metric, "auroc": cells, "average": float(np.mean(list(cells.values())))}
        )
    return rows


# -- report assembly ----------------------------------------------------------------


@dataclass
class EvalReport:
    per_subject_auroc: dict[str, dict[str, dict[str, float]]]  # setting -> method -> subject -> auroc
    auroc_averages: dict[str, dict[str, float]]  # setting -> method -> mean over subjects
    gate_accuracy_ood_as_task: dict[str, float]  # subject -> accuracy
    gate_accuracy_ood_excluded: dict[str, float]
    coverage_curve: list[tuple[float, float]]
    config_snapshot: dict
    ablation: Optional[list[dict]] = None
    metric_sweep: Optional[list[dict]] = None

    def to_dict(self) -> dict:
        return {
            "per_subject_auroc": self.per_subject_auroc,
            "auroc_averages": self.auroc_averages,
            "gate_accuracy": {
                "ood_as_task": self.gate_accuracy_ood_as_task,
                "ood_excluded": self.gate_accuracy_ood_excluded,
            },
            "coverage_curve": [{"bin_center": c, "recall": r} for c, r in self.coverage_curve],
            "ablation": self.ablation,
            "metric_sweep": self.metric_sweep,
            "config": self.config_snapshot,
        }


def average_over_subjects(per_subject: dict[str, float]) -> float:
    return float(np.mean(list(per_subject.values())))


def auroc_table_csv(per_subject: dict[str, dict[str, float]], subjects: Sequence[str]) -> str:
    """Methods as rows, subjects as columns, trailing average column."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", *subjects, "average"])
    for method, cells in per_subject.items():
        row = [method] + [f"{cells[s]:.4f}" for s in subjects]
        row.append(f"{average_over_subjects(cells):.4f}")
        writer.writerow(row)
    return buf.getvalue()


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    datasets = sorted(rows[0]["auroc"].keys()) if rows else []
    writer.writerow(["ebo", "dens", "temp", *datasets, "average"])
    for row in rows:
        writer.writerow(
            [*row["mask"], *[f"{row['auroc'][d]:.4f}" for d in datasets], f"{row['average']:.4f}"]
        )
    return buf.getvalue()


def metric_sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    datasets = sorted(rows[0]["auroc"].keys()) if rows else []
    writer.writerow(["metric", *datasets, "average"])
    for row in rows:
        writer.writerow(
            [row["metric"], *[f"{row['auroc'][d]:.4f}" for d in datasets], f"{row['average']:.4f}"]
        )
    return buf.getvalue()


def coverage_curve_csv(curve: list[tuple[float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin_center", "recall"])
    for center, recall in curve:
        writer.writerow([f"{center:.3f}", f"{recall:.6f}"])
    return buf.getvalue()
