"""End-to-end orchestration over on-disk datasets.

A dataset directory holds ``index.json`` naming subjects and their train/test
session manifests.  The pipeline trains per-subject gate and control-class
models, freezes a calibration pack, replays test sessions through the online
engine, and assembles the evaluation tables and grids.  Every artifact is
written atomically and embeds the resolved config plus content hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import warnings
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import backbone, calibration, engine, evaluation, stream_io
from .backbone import FeatureFrame, NativeBackboneModel
from .calibration import CalibrationPack
from .config import TEMPDENS, RunConfig
from .engine import DecisionRecord, EngineConfig, GatedFrame
from .evaluation import ScoreTable
from .gate import gate_probability
from .scoring import BaselineConfig, FeatureHistory, FusionWeights, score_baseline, score_temporal
from .stream_io import SessionManifest, StateKind, WindowFrame

INDEX_FORMAT = "oodgate-index-v1"

# Stage-II training and calibration use windows fully inside a task event;
# partially covered windows stay in the gate's training set and in evaluation.
FULL_COVERAGE = 1.0


class PipelineError(Exception):
    pass


class DataRootError(PipelineError):
    """Missing or unreadable dataset location (maps to CLI exit code 2)."""


# -- dataset index ------------------------------------------------------------------


@dataclass
class SubjectEntry:
    subject_id: str
    root: Path  # dataset directory all index paths are relative to
    train_manifests: list[Path]
    test_manifests: list[Path]
    test_features: dict[str, str]  # manifest (index-relative) -> feature file (replay provider)


@dataclass
class DatasetIndex:
    name: str
    root: Path
    subjects: list[SubjectEntry]


def load_index(dataset_dir: Path | str) -> DatasetIndex:
    dataset_dir = Path(dataset_dir)
    index_path = dataset_dir / "index.json"
    if not index_path.is_file():
        raise DataRootError(f"no index.json under {dataset_dir}")
    doc = json.loads(index_path.read_text(encoding="utf-8"))
    if doc.get("format") != INDEX_FORMAT:
        raise DataRootError(f"unexpected index format {doc.get('format')!r} in {index_path}")
    subjects = []
    for entry in doc["subjects"]:
        subjects.append(
            SubjectEntry(
                subject_id=str(entry["subject_id"]),
                root=dataset_dir,
                train_manifests=[dataset_dir / p for p in entry["train"]],
                test_manifests=[dataset_dir / p for p in entry["test"]],
                test_features=dict(entry.get("features", {})),
            )
        )
    return DatasetIndex(name=str(doc.get("dataset", dataset_dir.name)), root=dataset_dir, subjects=subjects)


def resolve_datasets(config: RunConfig) -> list[DatasetIndex]:
    root = Path(config.data_root)
    if not root.is_dir():
        raise DataRootError(f"data root {root} does not exist")
    dirs = [root / d for d in config.datasets] if config.datasets else [root]
    indexes = [load_index(d) for d in dirs]
    if config.subjects is not None:
        wanted = set(config.subjects)
        for idx in indexes:
            idx.subjects = [s for s in idx.subjects if s.subject_id in wanted]
            if not idx.subjects:
                raise DataRootError(f"no requested subjects found in dataset {idx.name}")
    return indexes


# -- provenance-wrapped artifacts ----------------------------------------------------


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _provenance(config: RunConfig, content: str) -> dict:
    return {
        "config": config.resolved_dict(),
        "config_sha256": config.config_hash(),
        "content_sha256": hashlib.sha256(content.encode("utf-8")).hexdigest(),
    }


def write_artifact_json(path: Path, payload: dict, config: RunConfig) -> None:
    content = json.dumps(payload, separators=(",", ":"), sort_keys=False)
    doc = {"provenance": _provenance(config, content), "payload": payload}
    _atomic_write_text(path, json.dumps(doc, separators=(",", ":")) + "\n")


def read_artifact_json(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return doc["payload"] if "payload" in doc and "provenance" in doc else doc


def write_decisions_jsonl(path: Path, records: Sequence[DecisionRecord], config: RunConfig) -> None:
    body = engine.records_to_jsonl(records)
    header = json.dumps({"provenance": _provenance(config, body)}, separators=(",", ":"))
    _atomic_write_text(path, header + "\n" + body)


def write_csv(path: Path, text: str, config: RunConfig) -> None:
    _atomic_write_text(path, text)
    sidecar = path.with_suffix(path.suffix + ".provenance.json")
    _atomic_write_text(
        sidecar, json.dumps({"provenance": _provenance(config, text)}, separators=(",", ":")) + "\n"
    )


# -- shared frame preparation ---------------------------------------------------------


def _subject_rng(config: RunConfig, dataset: str, subject_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{dataset}/{subject_id}".encode("utf-8")).digest()
    return np.random.default_rng([config.seed, *digest[:4]])


def load_windows(manifest_path: Path, config: RunConfig) -> tuple[SessionManifest, list[WindowFrame]]:
    manifest, signal = stream_io.load_session(manifest_path)
    filtered = stream_io.bandpass(
        signal, config.band_low_hz, config.band_high_hz, manifest.sampling_rate
    )
    frames = list(stream_io.segment(filtered, manifest, config.window_len_s, config.hop_s))
    return manifest, frames


def _usable(frames: Sequence[WindowFrame]) -> list[WindowFrame]:
    return [f for f in frames if f.true_state.kind != StateKind.EXCLUDED]


def fusion_weights(config: RunConfig) -> FusionWeights:
    return FusionWeights(
        alpha=config.alpha,
        beta=config.beta,
        gamma=config.gamma,
        temperature=config.temperature,
        eta=config.eta,
    )


def engine_config(config: RunConfig) -> EngineConfig:
    return EngineConfig(
        weights=fusion_weights(config),
        knn_k=config.knn_k,
        temporal_metric=config.temporal_metric,
        hop_s=config.hop_s,
        reset_gap_s=config.reset_gap_s,
        aggregation_window=config.aggregation_window,
    )


def baseline_config(config: RunConfig) -> BaselineConfig:
    return BaselineConfig(temperature=config.temperature, knn_k=config.knn_k)


# -- training ----------------------------------------------------------------------


def train_subject(
    entry: SubjectEntry, config: RunConfig, rng: np.random.Generator
) -> tuple[NativeBackboneModel, NativeBackboneModel]:
    rest_windows: list[np.ndarray] = []
    id_windows: dict[int, list[np.ndarray]] = {}
    id_full_windows: dict[int, list[np.ndarray]] = {}
    class_names: dict[int, str] = {}
    for manifest_path in entry.train_manifests:
        manifest, frames = load_windows(manifest_path, config)
        for name, role in manifest.class_map.items():
            if role.role == "id":
                class_names[role.index] = name
        for frame in _usable(frames):
            state = frame.true_state
            if state.kind == StateKind.REST:
                rest_windows.append(frame.samples)
            elif state.kind == StateKind.ID:
                id_windows.setdefault(state.class_index, []).append(frame.samples)
                if frame.coverage >= FULL_COVERAGE:
                    id_full_windows.setdefault(state.class_index, []).append(frame.samples)

    if not id_windows:
        raise PipelineError(f"subject {entry.subject_id}: no control-class windows in training data")
    k = max(id_windows) + 1
    for c in range(k):
        if len(id_full_windows.get(c, [])) < 2:
            raise PipelineError(
                f"subject {entry.subject_id}: class {class_names.get(c, c)} has too few fully "
                f"covered training windows"
            )
    if len(rest_windows) < 2:
        raise PipelineError(f"subject {entry.subject_id}: not enough rest windows to train the gate")

    task_windows = [w for c in sorted(id_windows) for w in id_windows[c]]
    cap = int(config.rest_subsample_factor * len(task_windows))
    if len(rest_windows) > cap:
        keep = np.sort(rng.choice(len(rest_windows), size=cap, replace=False))
        rest_windows = [rest_windows[i] for i in keep]

    gate_csp = backbone.fit_csp(rest_windows, task_windows, config.n_pairs)
    gate_stub = NativeBackboneModel(gate_csp, np.zeros((2, gate_csp.shape[0])), np.zeros(2), ["rest", "task"])
    gate_feats = np.array([backbone.extract_features(w, gate_stub) for w in rest_windows + task_windows])
    gate_labels = np.array([0] * len(rest_windows) + [1] * len(task_windows))
    gw, gb = backbone.train_head(
        gate_feats, gate_labels, config.head_epochs, config.head_lr, config.head_l2, rng=rng
    )
    gate_model = NativeBackboneModel(gate_csp, gw, gb, ["rest", "task"])

    per_class = [id_full_windows[c] for c in range(k)]
    task_csp = backbone.fit_csp_multiclass(per_class, config.n_pairs)
    task_stub = NativeBackboneModel(task_csp, np.zeros((k, task_csp.shape[0])), np.zeros(k), [])
    feats = np.array([backbone.extract_features(w, task_stub) for cls in per_class for w in cls])
    labels = np.array([c for c in range(k) for _ in per_class[c]])
    tw, tb = backbone.train_head(
        feats, labels, config.head_epochs, config.head_lr, config.head_l2, n_classes=k, rng=rng
    )
    task_model = NativeBackboneModel(task_csp, tw, tb, [class_names[c] for c in range(k)])
    return gate_model, task_model


# -- calibration ---------------------------------------------------------------------


def _training_id_frames(
    entry: SubjectEntry, config: RunConfig, task_model: NativeBackboneModel
) -> list[FeatureFrame]:
    """Chronological fully-covered ID frames across all training sessions."""
    frames: list[FeatureFrame] = []
    offset = 0.0
    for manifest_path in entry.train_manifests:
        manifest, windows = load_windows(manifest_path, config)
        last = 0.0
        for w in windows:
            last = w.start_s
            if w.true_state.kind == StateKind.ID and w.coverage >= FULL_COVERAGE:
                ff = backbone.infer(w, task_model)
                frames.append(replace_start(ff, offset + w.start_s))
        offset += last + config.window_len_s + 1.0  # keep timestamps increasing across sessions
    return frames


def replace_start(frame: FeatureFrame, start_s: float) -> FeatureFrame:
    return FeatureFrame(
        start_s=start_s, logits=frame.logits, features=frame.features, true_state=frame.true_state
    )


def calibrate_subject(
    entry: SubjectEntry,
    config: RunConfig,
    task_model: NativeBackboneModel,
    rng: np.random.Generator,
) -> CalibrationPack:
    frames = _training_id_frames(entry, config, task_model)
    if len(frames) < 5:
        raise PipelineError(
            f"subject {entry.subject_id}: only {len(frames)} calibration frames; need more data"
        )
    n_val = max(1, int(round(config.validation_fraction * len(frames))))
    stat_frames = frames[: len(frames) - n_val]
    weights = fusion_weights(config)

    feats = np.array([f.features for f in stat_frames])
    labels = np.array([f.true_state.class_index for f in stat_frames])
    logits = np.array([f.logits for f in stat_frames])
    class_means, inv_cov = calibration.fit_class_stats(feats, labels)
    id_memory = calibration.build_id_memory(feats, rng=rng)
    score_stats = calibration.fit_score_stats(
        stat_frames, class_means, inv_cov, id_memory, weights, config.knn_k, config.temporal_metric
    )

    # fused scores on the chronological tail, with the history warmed by the stat portion
    history = FeatureHistory()
    val_scores = []
    for i, frame in enumerate(frames):
        if i >= len(stat_frames):
            comp = calibration.raw_components(
                frame, history, class_means, inv_cov, id_memory, weights,
                config.knn_k, config.temporal_metric,
            )
            fused = (
                weights.alpha * (comp["ebo"] - score_stats["ebo"][0]) / score_stats["ebo"][1]
                + weights.beta * (comp["dens"] - score_stats["dens"][0]) / score_stats["dens"][1]
                + weights.gamma * (comp["temp"] - score_stats["temp"][0]) / score_stats["temp"][1]
            )
            val_scores.append(fused)
        history.push(frame.start_s, frame.features)
    tau = calibration.calibrate_tau(val_scores, config.tau_quantile)

    return CalibrationPack(
        class_means=class_means,
        inv_cov=inv_cov,
        id_memory=id_memory,
        score_stats=score_stats,
        tau=tau,
        gate_threshold=config.gate_threshold,
        head_weights=task_model.head_weights,
        head_bias=task_model.head_bias,
        react_clamp=calibration.fit_react_clamp(feats),
        dice_mask=calibration.fit_dice_mask(task_model.head_weights, feats.mean(axis=0)),
        vim_subspace=calibration.fit_vim_subspace(
            feats, logits, task_model.head_weights, task_model.head_bias
        ),
        openmax_weibull=calibration.fit_openmax_tails(logits, labels),
        score_params={
            "temperature": config.temperature,
            "eta": config.eta,
            "knn_k": config.knn_k,
            "temporal_metric": config.temporal_metric,
        },
    )


# -- test-session preparation ----------------------------------------------------------


@dataclass
class PreparedSession:
    manifest: SessionManifest
    windows: list[WindowFrame]
    p_task: np.ndarray
    feature_frames: list[FeatureFrame]

    def gated_frames(self) -> list[GatedFrame]:
        return [
            GatedFrame(
                start_s=w.start_s,
                p_task=float(self.p_task[i]),
                stage2=(lambda ff=self.feature_frames[i]: (ff.logits, ff.features)),
                true_state=w.true_state,
            )
            for i, w in enumerate(self.windows)
        ]


def prepare_session(
    manifest_path: Path,
    entry: SubjectEntry,
    config: RunConfig,
    gate_model: NativeBackboneModel,
    task_model: NativeBackboneModel,
) -> PreparedSession:
    manifest, windows = load_windows(manifest_path, config)
    p_task = np.array([gate_probability(w.samples, gate_model) for w in windows])
    if config.provider == "replay":
        rel = str(manifest_path.relative_to(entry.root))
        feature_name = entry.test_features.get(rel)
        if feature_name is None:
            raise PipelineError(
                f"replay provider needs a feature file for {rel} in the dataset index"
            )
        n_samples = stream_io.load_raw_signal(
            manifest_path.parent / manifest.data_path, manifest.channel_count
        ).shape[1]
        feature_frames = list(
            backbone.replay_provider(
                entry.root / feature_name,
                manifest,
                n_samples=n_samples,
                window_len_s=config.window_len_s,
                hop_s=config.hop_s,
            )
        )
    else:
        feature_frames = [backbone.infer(w, task_model) for w in windows]
    return PreparedSession(manifest, windows, p_task, feature_frames)


# -- commands ---------------------------------------------------------------------------


def _map_subjects(config: RunConfig, subjects: list, fn: Callable):
    if config.jobs == 1 or len(subjects) <= 1:
        return [fn(s) for s in subjects]
    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        return list(pool.map(fn, subjects))


def _model_path(out: Path, dataset: str, subject_id: str) -> Path:
    return out / "models" / dataset / f"{subject_id}.model.json"


def _pack_path(out: Path, dataset: str, subject_id: str) -> Path:
    return out / "packs" / dataset / f"{subject_id}.pack.json"


def cmd_train(config: RunConfig) -> dict:
    out = Path(config.out)
    summary = {}
    for index in resolve_datasets(config):
        def train_one(entry: SubjectEntry) -> tuple[str, str]:
            rng = _subject_rng(config, index.name, entry.subject_id)
            gate_model, task_model = train_subject(entry, config, rng)
            path = _model_path(out, index.name, entry.subject_id)
            payload = {
                "format": backbone.CHECKPOINT_FORMAT,
                "gate": backbone.model_to_dict(gate_model),
                "task": backbone.model_to_dict(task_model),
            }
            write_artifact_json(path, payload, config)
            return entry.subject_id, str(path)

        results = _map_subjects(config, index.subjects, train_one)
        summary[index.name] = {sid: path for sid, path in results}
    return {"models": summary}


def load_models(config: RunConfig, dataset: str, subject_id: str) -> tuple[NativeBackboneModel, NativeBackboneModel]:
    path = _model_path(Path(config.out), dataset, subject_id)
    if not path.is_file():
        raise PipelineError(f"no trained model at {path}; run train first")
    doc = read_artifact_json(path)
    return backbone.model_from_dict(doc["gate"]), backbone.model_from_dict(doc["task"])


def cmd_calibrate(config: RunConfig) -> dict:
    out = Path(config.out)
    summary = {}
    for index in resolve_datasets(config):
        def calibrate_one(entry: SubjectEntry) -> tuple[str, str, float]:
            rng = _subject_rng(config, index.name, entry.subject_id)
            _, task_model = load_models(config, index.name, entry.subject_id)
            pack = calibrate_subject(entry, config, task_model, rng)
            path = _pack_path(out, index.name, entry.subject_id)
            write_artifact_json(path, calibration.pack_to_dict(pack), config)
            return entry.subject_id, str(path), pack.tau

        results = _map_subjects(config, index.subjects, calibrate_one)
        summary[index.name] = {sid: {"path": path, "tau": tau} for sid, path, tau in results}
    return {"packs": summary}


def load_calibration(config: RunConfig, dataset: str, subject_id: str) -> CalibrationPack:
    path = _pack_path(Path(config.out), dataset, subject_id)
    if not path.is_file():
        raise PipelineError(f"no calibration pack at {path}; run calibrate first")
    return calibration.pack_from_dict(read_artifact_json(path))


def cmd_replay(config: RunConfig) -> dict:
    out = Path(config.out)
    summary = {}
    for index in resolve_datasets(config):
        def replay_one(entry: SubjectEntry) -> tuple[str, dict]:
            gate_model, task_model = load_models(config, index.name, entry.subject_id)
            pack = load_calibration(config, index.name, entry.subject_id)
            econf = engine_config(config)
            paths = {}
            for manifest_path in entry.test_manifests:
                prepared = prepare_session(manifest_path, entry, config, gate_model, task_model)
                records = engine.run_stream(prepared.gated_frames(), pack, econf)
                dest = (
                    out / "decisions" / index.name / entry.subject_id / f"{manifest_path.stem}.jsonl"
                )
                write_decisions_jsonl(dest, records, config)
                counts = {
                    "no_action": sum(r.decision == engine.NO_ACTION for r in records),
                    "class": sum(r.decision == engine.CLASS for r in records),
                    "reject": sum(r.decision == engine.REJECT for r in records),
                }
                paths[manifest_path.stem] = {"path": str(dest), "counts": counts}
            return entry.subject_id, paths

        results = _map_subjects(config, index.subjects, replay_one)
        summary[index.name] = dict(results)
    return {"decisions": summary}


# -- evaluation ---------------------------------------------------------------------------


@dataclass
class SubjectEvalData:
    subject_id: str
    sessions: list[PreparedSession]
    records: list[list[DecisionRecord]]  # aligned with sessions


def _collect_subject(
    entry: SubjectEntry, index: DatasetIndex, config: RunConfig
) -> SubjectEvalData:
    gate_model, task_model = load_models(config, index.name, entry.subject_id)
    pack = load_calibration(config, index.name, entry.subject_id)
    econf = engine_config(config)
    if config.ood_eval_population == "all_task":
        pack = replace(pack, gate_threshold=0.0)
    sessions, records = [], []
    for manifest_path in entry.test_manifests:
        prepared = prepare_session(manifest_path, entry, config, gate_model, task_model)
        sessions.append(prepared)
        records.append(engine.run_stream(prepared.gated_frames(), pack, econf))
    return SubjectEvalData(entry.subject_id, sessions, records)


def _population_mask(prepared: PreparedSession, records: list[DecisionRecord], config: RunConfig) -> np.ndarray:
    """Frames entering the OOD-detection population: task truthics, gate permitting."""
    mask = np.zeros(len(prepared.windows), dtype=bool)
    for i, w in enumerate(prepared.windows):
        if w.true_state.kind not in (StateKind.ID, StateKind.OOD):
            continue
        if config.ood_eval_population == "gated" and records[i].decision == engine.NO_ACTION:
            continue
        mask[i] = True
    return mask


def _online_frames(
    prepared: PreparedSession, records: list[DecisionRecord], config: RunConfig
) -> list[Optional[FeatureFrame]]:
    """Aggregated frame per position, mirroring the engine's buffer discipline."""
    buffer: deque[FeatureFrame] = deque(maxlen=config.aggregation_window)
    rest_run = 0.0
    out: list[Optional[FeatureFrame]] = []
    from .scoring import online_aggregate

    for i, record in enumerate(records):
        if record.decision == engine.NO_ACTION:
            rest_run += config.hop_s
            if rest_run >= config.reset_gap_s:
                buffer.clear()
            out.append(None)
            continue
        rest_run = 0.0
        buffer.append(prepared.feature_frames[i])
        out.append(online_aggregate(list(buffer)))
    return out


def _method_scores(
    data: SubjectEvalData, pack: CalibrationPack, config: RunConfig
) -> tuple[dict[str, dict[str, list[float]]], np.ndarray]:
    """Per-setting per-method score arrays over the subject's population, plus truth."""
    bconf = baseline_config(config)
    methods = [m for m in config.methods if m != TEMPDENS]
    scores: dict[str, dict[str, list[float]]] = {
        "offline": {m: [] for m in methods},
        "online": {m: [] for m in methods},
    }
    if TEMPDENS in config.methods:
        scores["online"][TEMPDENS] = []
    truth = []
    for prepared, records in zip(data.sessions, data.records):
        mask = _population_mask(prepared, records, config)
        online = _online_frames(prepared, records, config)
        for i in np.flatnonzero(mask):
            frame = prepared.feature_frames[i]
            truth.append(prepared.windows[i].true_state.kind == StateKind.OOD)
            for m in methods:
                scores["offline"][m].append(score_baseline(m, frame, pack, bconf))
                agg = online[i] if online[i] is not None else frame
                scores["online"][m].append(score_baseline(m, agg, pack, bconf))
            if TEMPDENS in config.methods:
                rec = records[i]
                fused = rec.scores["fused"] if rec.scores else float("inf")
                scores["online"][TEMPDENS].append(fused)
    return scores, np.asarray(truth, dtype=bool)


def cmd_eval(config: RunConfig) -> dict:
    out = Path(config.out)
    reports = {}
    for index in resolve_datasets(config):
        subject_data = _map_subjects(
            config, index.subjects, lambda e: _collect_subject(e, index, config)
        )
        per_subject: dict[str, dict[str, dict[str, float]]] = {"offline": {}, "online": {}}
        gate_acc_task: dict[str, float] = {}
        gate_acc_excl: dict[str, float] = {}
        curve_gate, curve_cov = [], []
        component_tables: dict[str, ScoreTable] = {}

        for entry, data in zip(index.subjects, subject_data):
            pack = load_calibration(config, index.name, entry.subject_id)
            scores, truth = _method_scores(data, pack, config)
            if truth.size and truth.any() and (~truth).any():
                for setting, by_method in scores.items():
                    for method, vals in by_method.items():
                        arr = np.asarray(vals)
                        auc = evaluation.auroc(arr[~truth], arr[truth])
                        per_subject[setting].setdefault(method, {})[entry.subject_id] = auc
            else:
                warnings.warn(
                    f"subject {entry.subject_id}: population lacks ID or OOD frames; AUROC skipped"
                )

            flags, states, covs = [], [], []
            for prepared, records in zip(data.sessions, data.records):
                for i, w in enumerate(prepared.windows):
                    gated = records[i].decision != engine.NO_ACTION
                    flags.append(gated)
                    states.append(w.true_state)
                    covs.append(w.coverage)
            gate_acc_task[entry.subject_id] = evaluation.gate_accuracy(flags, states, True)
            gate_acc_excl[entry.subject_id] = evaluation.gate_accuracy(flags, states, False)
            curve_gate.extend(flags)
            curve_cov.extend(covs)

            component_tables[entry.subject_id] = _component_table(data, config)

        averages = {
            setting: {
                method: evaluation.average_over_subjects(cells)
                for method, cells in by_method.items()
            }
            for setting, by_method in per_subject.items()
        }
        curve = evaluation.coverage_recall_curve(curve_gate, curve_cov, config.coverage_bins)
        report = evaluation.EvalReport(
            per_subject_auroc=per_subject,
            auroc_averages=averages,
            gate_accuracy_ood_as_task=gate_acc_task,
            gate_accuracy_ood_excluded=gate_acc_excl,
            coverage_curve=curve,
            config_snapshot=config.resolved_dict(),
        )
        report_dir = out / "reports" / index.name
        write_artifact_json(report_dir / "eval.json", report.to_dict(), config)
        subjects = [e.subject_id for e in index.subjects]
        for setting in ("offline", "online"):
            if per_subject[setting]:
                write_csv(
                    report_dir / f"auroc_{setting}.csv",
                    evaluation.auroc_table_csv(per_subject[setting], subjects),
                    config,
                )
        write_csv(report_dir / "coverage_curve.csv", evaluation.coverage_curve_csv(curve), config)
        reports[index.name] = report.to_dict()
    return {"reports": reports}


def _component_table(data: SubjectEvalData, config: RunConfig) -> ScoreTable:
    """Standardized component scores over the population, from the engine records."""
    is_ood, ebo, dens, temp = [], [], [], []
    for prepared, records in zip(data.sessions, data.records):
        mask = _population_mask(prepared, records, config)
        for i in np.flatnonzero(mask):
            rec = records[i]
            if rec.scores is None:
                continue
            is_ood.append(prepared.windows[i].true_state.kind == StateKind.OOD)
            ebo.append(rec.scores["ebo_std"])
            dens.append(rec.scores["dens_std"])
            temp.append(rec.scores["temp_std"])
    return ScoreTable(
        is_ood=np.asarray(is_ood, dtype=bool),
        std_components={
            "ebo": np.asarray(ebo),
            "dens": np.asarray(dens),
            "temp": np.asarray(temp),
        },
    )


def _temp_stats_for_metric(
    frames: Sequence[FeatureFrame], metric: str
) -> tuple[float, float]:
    history = FeatureHistory()
    values = []
    for frame in frames:
        val, mature = score_temporal(frame.features, history, metric)
        if mature:
            values.append(val)
        history.push(frame.start_s, frame.features)
    arr = np.asarray(values)
    mu = float(arr.mean())
    sigma = float(np.sqrt(((arr - mu) ** 2).mean()))
    if sigma <= 0:
        raise PipelineError(f"temporal metric {metric!r} degenerate on calibration stream")
    return mu, sigma


def _temp_std_for_metric(
    data: SubjectEvalData, config: RunConfig, metric: str, stats: tuple[float, float]
) -> ScoreTable:
    """Re-score the temporal component under another metric, mirroring engine resets."""
    mu, sigma = stats
    is_ood, ebo, dens, temp = [], [], [], []
    for prepared, records in zip(data.sessions, data.records):
        mask = _population_mask(prepared, records, config)
        history = FeatureHistory()
        rest_run = 0.0
        for i, rec in enumerate(records):
            if rec.decision == engine.NO_ACTION:
                rest_run += config.hop_s
                if rest_run >= config.reset_gap_s:
                    history.clear()
                continue
            rest_run = 0.0
            frame = prepared.feature_frames[i]
            val, _ = score_temporal(frame.features, history, metric)
            history.push(frame.start_s, frame.features)
            if mask[i] and rec.scores is not None:
                is_ood.append(prepared.windows[i].true_state.kind == StateKind.OOD)
                ebo.append(rec.scores["ebo_std"])
                dens.append(rec.scores["dens_std"])
                temp.append((val - mu) / sigma)
    return ScoreTable(
        is_ood=np.asarray(is_ood, dtype=bool),
        std_components={
            "ebo": np.asarray(ebo),
            "dens": np.asarray(dens),
            "temp": np.asarray(temp),
        },
    )


def cmd_ablate(config: RunConfig) -> dict:
    out = Path(config.out)
    ablation_tables: dict[str, list[ScoreTable]] = {}
    sweep_tables: dict[str, dict[str, list[ScoreTable]]] = {
        m: {} for m in evaluation.METRIC_SWEEP_ORDER
    }
    for index in resolve_datasets(config):
        subject_data = _map_subjects(
            config, index.subjects, lambda e: _collect_subject(e, index, config)
        )
        ablation_tables[index.name] = []
        for entry, data in zip(index.subjects, subject_data):
            ablation_tables[index.name].append(_component_table(data, config))
            _, task_model = load_models(config, index.name, entry.subject_id)
            cal_frames = _training_id_frames(entry, config, task_model)
            n_val = max(1, int(round(config.validation_fraction * len(cal_frames))))
            stat_frames = cal_frames[: len(cal_frames) - n_val]
            for metric in evaluation.METRIC_SWEEP_ORDER:
                stats = _temp_stats_for_metric(stat_frames, metric)
                sweep_tables[metric].setdefault(index.name, []).append(
                    _temp_std_for_metric(data, config, metric, stats)
                )

    weights = (config.alpha, config.beta, config.gamma)
    ablation_rows = evaluation.run_ablation(
        {name: _mean_tables(tabs) for name, tabs in ablation_tables.items()}, weights=weights
    )
    sweep_rows = evaluation.run_metric_sweep(
        {
            metric: {name: _mean_tables(tabs) for name, tabs in by_ds.items()}
            for metric, by_ds in sweep_tables.items()
        },
        weights=weights,
    )
    payload = {"ablation": ablation_rows, "metric_sweep": sweep_rows}
    report_dir = out / "reports"
    write_artifact_json(report_dir / "ablate.json", _jsonable(payload), config)
    write_csv(report_dir / "ablation.csv", evaluation.ablation_csv(ablation_rows), config)
    write_csv(report_dir / "metric_sweep.csv", evaluation.metric_sweep_csv(sweep_rows), config)
    return _jsonable(payload)


def _mean_tables(tables: list[ScoreTable]) -> ScoreTable:
    """Concatenate per-subject tables tagged so AUROC averages subject-wise."""
    return _SubjectAveragedTable(tables)


class _SubjectAveragedTable(ScoreTable):
    """Score table whose AUROC is the mean of per-subject AUROCs."""

    def __init__(self, tables: list[ScoreTable]):
        self._tables = tables
        super().__init__(
            is_ood=np.concatenate([t.is_ood for t in tables]),
            std_components={
                name: np.concatenate([t.std_components[name] for t in tables])
                for name in ("ebo", "dens", "temp")
            },
        )

    def auroc_for(self, scores: np.ndarray) -> float:
        vals = []
        offset = 0
        for t in self._tables:
            n = t.is_ood.shape[0]
            sub = scores[offset : offset + n]
            vals.append(evaluation.auroc(sub[~t.is_ood], sub[t.is_ood]))
            offset += n
        return float(np.mean(vals))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
