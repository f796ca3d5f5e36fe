import numpy as np
import pytest

from oodgate.calibration import raw_components
from oodgate.engine import (
    CLASS,
    NO_ACTION,
    REJECT,
    EngineConfig,
    EngineError,
    EngineState,
    GatedFrame,
    records_from_jsonl,
    records_to_jsonl,
    run_stream,
    step,
)
from oodgate.scoring import FeatureHistory, FusionWeights
from oodgate.synthetic import random_policy_stream

from conftest import make_pack


def unit_stats():
    return {"ebo": (0.0, 1.0), "dens": (0.0, 1.0), "temp": (0.0, 1.0)}


def simple_pack(tau=2.0, gate_threshold=0.5, stats=None, rng=None):
    rng = rng or np.random.default_rng(0)
    memory = rng.normal(size=(50, 3))
    return make_pack(
        class_means=[memory[:25].mean(axis=0), memory[25:].mean(axis=0)],
        inv_cov=np.eye(3),
        id_memory=memory,
        score_stats=stats or unit_stats(),
        tau=tau,
        gate_threshold=gate_threshold,
        head_weights=np.zeros((2, 3)),
    )


def frame(start_s, p_task, logits=(0.0, 0.0), features=(0.0, 0.0, 0.0)):
    z = np.asarray(logits, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    return GatedFrame(start_s=start_s, p_task=p_task, stage2=lambda: (z, f))


def boom():
    raise AssertionError("stage2 must not run on rest frames")


class TestStep:
    def test_rest_short_circuits_without_inference(self):
        pack = simple_pack()
        state = EngineState(EngineConfig())
        rec = step(GatedFrame(0.0, 0.2, boom), pack, EngineConfig(), state)
        assert rec.decision == NO_ACTION
        assert rec.scores is None
        assert rec.class_index is None
        assert len(state.history) == 0

    def test_unit_standardized_scores_reject_above_tau(self, rng):
        # engineer a frame whose raw components standardize to exactly (1, 1, 1)
        pack = simple_pack(tau=2.0)
        config = EngineConfig()
        probe = frame(0.0, 1.0, logits=rng.normal(size=2), features=rng.normal(size=3))
        z, f = probe.stage2()
        comp = raw_components(
            type("F", (), {"logits": z, "features": f, "start_s": 0.0})(),
            FeatureHistory(),
            pack.class_means,
            pack.inv_cov,
            pack.id_memory,
            config.weights,
            config.knn_k,
        )
        pack.score_stats = {
            "ebo": (comp["ebo"] - 1.0, 1.0),
            "dens": (comp["dens"] - 1.0, 1.0),
            "temp": (-1.0, 1.0),  # raw temp is 0 on a cold start
        }
        rec = step(probe, pack, config, EngineState(config))
        assert rec.scores["ebo_std"] == pytest.approx(1.0, abs=1e-12)
        assert rec.scores["dens_std"] == pytest.approx(1.0, abs=1e-12)
        assert rec.scores["temp_std"] == pytest.approx(1.0, abs=1e-12)
        assert rec.scores["fused"] == pytest.approx(3.0, abs=1e-12)
        assert rec.decision == REJECT

    def test_fused_exactly_tau_accepts(self):
        pack = simple_pack(tau=0.0)
        config = EngineConfig(weights=FusionWeights(alpha=1.0, beta=0.0, gamma=0.0))
        probe = frame(0.0, 1.0, logits=(0.0, 0.0))
        comp_energy = -np.log(2.0)
        pack.score_stats = {"ebo": (comp_energy, 1.0), "dens": (0.0, 1.0), "temp": (0.0, 1.0)}
        rec = step(probe, pack, config, EngineState(config))
        assert rec.scores["fused"] == 0.0  # equals tau: boundary accepts
        assert rec.decision == CLASS

    def test_argmax_ties_take_lowest_index(self):
        pack = simple_pack(tau=100.0)
        config = EngineConfig()
        rec = step(frame(0.0, 1.0, logits=(1.5, 1.5)), pack, config, EngineState(config))
        assert rec.decision == CLASS
        assert rec.class_index == 0

    def test_fault_maps_to_reject(self):
        pack = simple_pack()
        config = EngineConfig()

        def bad():
            return np.array([np.nan, 0.0]), np.zeros(3)

        rec = step(GatedFrame(0.0, 1.0, bad), pack, config, EngineState(config))
        assert rec.decision == REJECT
        assert rec.fault is not None
        assert rec.scores is None

    def test_out_of_order_frames_rejected(self):
        pack = simple_pack()
        config = EngineConfig()
        state = EngineState(config)
        step(frame(1.0, 0.1), pack, config, state)
        with pytest.raises(EngineError, match="order"):
            step(frame(0.5, 0.1), pack, config, state)


class TestRunStream:
    def test_all_rest_stream(self):
        pack = simple_pack()
        frames = [GatedFrame(i * 0.125, 0.0, boom) for i in range(50)]
        records = run_stream(frames, pack, EngineConfig())
        assert all(r.decision == NO_ACTION for r in records)

    def test_cold_start_immature_then_mature(self, rng):
        pack = simple_pack(tau=1e9)
        frames = [
            frame(i * 0.125, 1.0, rng.normal(size=2), rng.normal(size=3)) for i in range(5)
        ]
        records = run_stream(frames, pack, EngineConfig())
        assert [r.history_mature for r in records] == [False, False, True, True, True]
        # immature frames carry the standardized zero-raw temporal score
        mu, sigma = pack.score_stats["temp"]
        assert records[0].scores["temp_raw"] == 0.0
        assert records[0].scores["temp_std"] == pytest.approx((0.0 - mu) / sigma)

    def test_history_resets_after_rest_gap(self, rng):
        pack = simple_pack(tau=1e9)
        config = EngineConfig(hop_s=0.125, reset_gap_s=1.0)
        frames = []
        t = 0.0
        for i in range(4):  # task burst
            frames.append(frame(t, 1.0, rng.normal(size=2), rng.normal(size=3)))
            t += 0.125
        for _ in range(8):  # exactly 1.0 s of rest: reset fires
            frames.append(GatedFrame(t, 0.0, boom))
            t += 0.125
        for i in range(3):
            frames.append(frame(t, 1.0, rng.normal(size=2), rng.normal(size=3)))
            t += 0.125
        records = run_stream(frames, pack, config)
        post_gap = records[12:]
        assert [r.history_mature for r in post_gap] == [False, False, True]

    def test_short_rest_gap_keeps_history(self, rng):
        pack = simple_pack(tau=1e9)
        config = EngineConfig(hop_s=0.125, reset_gap_s=1.0)
        frames = []
        t = 0.0
        for i in range(4):
            frames.append(frame(t, 1.0, rng.normal(size=2), rng.normal(size=3)))
            t += 0.125
        for _ in range(3):  # 0.375 s of rest: below the reset gap
            frames.append(GatedFrame(t, 0.0, boom))
            t += 0.125
        frames.append(frame(t, 1.0, rng.normal(size=2), rng.normal(size=3)))
        records = run_stream(frames, pack, config)
        assert records[-1].history_mature is True

    def test_permuted_order_rejected(self, rng):
        pack = simple_pack()
        frames = [frame(0.250, 0.3), frame(0.125, 0.3)]
        with pytest.raises(EngineError, match="order"):
            run_stream(frames, pack, EngineConfig())

    def test_partition_and_reject_iff_above_tau(self):
        pack = simple_pack(tau=1.2, gate_threshold=0.5)
        config = EngineConfig()
        frames = random_policy_stream(seed=3, n_steps=2000, d=3, n_classes=2)
        records = run_stream(frames, pack, config)
        counts = {NO_ACTION: 0, CLASS: 0, REJECT: 0}
        for rec, fr in zip(records, frames):
            counts[rec.decision] += 1
            assert (rec.decision == NO_ACTION) == (fr.p_task < 0.5)
            if rec.decision != NO_ACTION:
                assert (rec.decision == REJECT) == (rec.scores["fused"] > pack.tau)
        assert sum(counts.values()) == len(frames)
        assert min(counts.values()) > 0

    def test_energy_only_fusion_matches_standalone_thresholding(self):
        from oodgate.scoring import score_energy

        pack = simple_pack(tau=0.4)
        config = EngineConfig(weights=FusionWeights(alpha=1.0, beta=0.0, gamma=0.0))
        frames = random_policy_stream(seed=11, n_steps=1500, d=3, n_classes=2)
        records = run_stream(frames, pack, config)
        mu, sigma = pack.score_stats["ebo"]
        for rec, fr in zip(records, frames):
            if rec.decision == NO_ACTION:
                continue
            z, _ = fr.stage2()
            standalone = (score_energy(z, 1.0) - mu) / sigma
            assert (rec.decision == REJECT) == (standalone > pack.tau)

    def test_weight_doubling_with_rescaled_tau_is_invariant(self):
        from oodgate.calibration import calibrate_tau

        base = EngineConfig(weights=FusionWeights(alpha=1.0, beta=1.0, gamma=1.0))
        doubled = EngineConfig(weights=FusionWeights(alpha=2.0, beta=2.0, gamma=2.0))
        frames = random_policy_stream(seed=23, n_steps=1200, d=3, n_classes=2)
        pack1 = simple_pack(tau=0.0)
        rec1 = run_stream(frames, pack1, base)
        fused1 = [r.scores["fused"] for r in rec1 if r.scores is not None]
        pack2 = simple_pack(tau=0.0)
        rec2 = run_stream(frames, pack2, doubled)
        fused2 = [r.scores["fused"] for r in rec2 if r.scores is not None]
        tau1 = calibrate_tau(fused1, 0.95)
        tau2 = calibrate_tau(fused2, 0.95)
        assert tau2 == 2.0 * tau1
        assert sum(s > tau1 for s in fused1) == sum(s > tau2 for s in fused2)

    def test_deterministic_jsonl(self):
        pack = simple_pack(tau=1.0)
        config = EngineConfig()
        frames = random_policy_stream(seed=7, n_steps=500, d=3, n_classes=2)
        a = records_to_jsonl(run_stream(frames, pack, config))
        b = records_to_jsonl(run_stream(frames, pack, config))
        assert a.encode("utf-8") == b.encode("utf-8")

    def test_jsonl_roundtrip(self):
        pack = simple_pack(tau=1.0)
        frames = random_policy_stream(seed=9, n_steps=100, d=3, n_classes=2)
        records = run_stream(frames, pack, EngineConfig())
        text = records_to_jsonl(records)
        again = records_from_jsonl(text)
        assert len(again) == len(records)
        assert [r.decision for r in again] == [r.decision for r in records]
        assert records_to_jsonl(again) == text
