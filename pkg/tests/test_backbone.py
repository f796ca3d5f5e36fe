import json

import numpy as np
import pytest
from scipy.linalg import eigh

from oodgate.backbone import (
    COV_SHRINKAGE,
    BackboneError,
    NativeBackboneModel,
    cross_entropy_loss_and_grad,
    csp_from_covariances,
    extract_features,
    fit_csp,
    fit_csp_multiclass,
    infer,
    load_checkpoint,
    read_feature_records,
    replay_provider,
    save_checkpoint,
    train_head,
    write_feature_file,
)
from oodgate.stream_io import ClassRole, EventSpec, SessionManifest, StateKind, WindowFrame

from conftest import ID0, make_frame


def exact_cov_windows(diag, copies=2):
    """Windows whose trace-normalized covariance is exactly diag/ sum(diag)."""
    base = np.array([[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0]])  # rows orthogonal, norm^2 = 4
    window = np.diag(np.sqrt(diag)) @ base
    return [window.copy() for _ in range(copies)]


class TestCsp:
    def test_analytic_two_by_two(self):
        # class covariances diag(2,1) and diag(1,2): generalized eigenvalues of
        # (A, A+B) are {2/3, 1/3}; shrinkage perturbs them by ~5e-4
        wins_a = exact_cov_windows([2.0, 1.0])
        wins_b = exact_cov_windows([1.0, 2.0])
        filters = fit_csp(wins_a, wins_b, n_pairs=1)
        assert filters.shape == (2, 2)
        for row in filters:
            direction = np.abs(row) / np.linalg.norm(row)
            assert max(direction) == pytest.approx(1.0, abs=1e-9)  # axis-aligned

        eps = COV_SHRINKAGE * 0.5  # trace-normalized covariances have trace 1
        cov_a = np.diag([2 / 3 + eps, 1 / 3 + eps])
        cov_b = np.diag([1 / 3 + eps, 2 / 3 + eps])
        _, vals = csp_from_covariances(cov_a, cov_b, 1)
        analytic = np.sort([(2 / 3 + eps) / (1 + 2 * eps), (1 / 3 + eps) / (1 + 2 * eps)])
        np.testing.assert_allclose(np.sort(vals), analytic, atol=1e-12)
        np.testing.assert_allclose(np.sort(vals), [1 / 3, 2 / 3], atol=1e-3)

    def test_identical_distributions_give_half_eigenvalues(self, rng):
        wins = [rng.normal(size=(4, 200)) for _ in range(30)]
        cov = np.mean([w @ w.T / np.trace(w @ w.T) for w in wins], axis=0)
        _, vals = csp_from_covariances(cov, cov.copy(), 2)
        np.testing.assert_allclose(vals, 0.5, atol=1e-12)

    def test_one_window_per_class_rejected(self, rng):
        w = rng.normal(size=(3, 50))
        with pytest.raises(BackboneError, match="at least 2"):
            fit_csp([w], [w, w], n_pairs=1)

    def test_scale_invariance(self, rng):
        wins_a = [rng.normal(size=(5, 100)) for _ in range(6)]
        wins_b = [rng.normal(size=(5, 100)) * 2.0 for _ in range(6)]
        f1 = fit_csp(wins_a, wins_b, n_pairs=2)
        f2 = fit_csp([3.0 * w for w in wins_a], [3.0 * w for w in wins_b], n_pairs=2)
        # trace normalization makes the eigenproblem identical, up to sign
        for r1, r2 in zip(f1, f2):
            sign = np.sign(r1 @ r2)
            np.testing.assert_allclose(r1, sign * r2, atol=1e-9)

    def test_generalized_eigenvalues_match_direct_solver(self, rng):
        wins_a = [rng.normal(size=(4, 80)) for _ in range(5)]
        wins_b = [np.diag([1, 2, 1, 0.5]) @ rng.normal(size=(4, 80)) for _ in range(5)]

        def shrunk_mean(wins):
            covs = [w @ w.T / np.trace(w @ w.T) for w in wins]
            c = np.mean(covs, axis=0)
            return c + COV_SHRINKAGE * (np.trace(c) / 4) * np.eye(4)

        a, b = shrunk_mean(wins_a), shrunk_mean(wins_b)
        _, vals = csp_from_covariances(a, b, 2)
        oracle = np.sort(eigh(a, a + b, eigvals_only=True))[::-1]
        np.testing.assert_allclose(vals, oracle, atol=1e-9)

    def test_multiclass_concatenates_one_vs_rest_banks(self, rng):
        wins = [[rng.normal(size=(4, 60)) for _ in range(4)] for _ in range(3)]
        filters = fit_csp_multiclass(wins, n_pairs=1)
        assert filters.shape == (6, 4)  # 3 classes x 2 filters


class TestFeatures:
    def model(self, filters, k=2):
        filters = np.asarray(filters, dtype=np.float64)
        return NativeBackboneModel(
            csp_filters=filters,
            head_weights=np.zeros((k, filters.shape[0])),
            head_bias=np.zeros(k),
            class_names=["a", "b"],
        )

    def test_unit_variance_noise_identity_filters(self, rng):
        model = self.model(np.eye(3))
        window = rng.normal(size=(3, 20000))
        feats = extract_features(window, model)
        np.testing.assert_allclose(feats, 0.0, atol=0.1)  # log(1) per dimension

    def test_scaling_shifts_by_log4_exactly(self, rng):
        model = self.model(rng.normal(size=(2, 3)))
        window = rng.normal(size=(3, 100))
        base = extract_features(window, model)
        scaled = extract_features(2.0 * window, model)
        np.testing.assert_allclose(scaled - base, np.log(4.0), rtol=1e-12)

    def test_zero_window_names_filter_index(self):
        model = self.model(np.eye(2))
        with pytest.raises(BackboneError, match="filter 0"):
            extract_features(np.zeros((2, 10)), model)

    def test_channel_mismatch(self, rng):
        model = self.model(np.eye(3))
        frame = WindowFrame(0.0, rng.normal(size=(4, 10)), None, 0.0)
        with pytest.raises(BackboneError, match="channels"):
            infer(frame, model)


class TestHead:
    def test_gradient_matches_central_differences(self, rng):
        for _ in range(10):
            n, d, k = 8, 3, 3
            x = rng.normal(size=(n, d))
            y = rng.integers(0, k, size=n)
            w = rng.normal(size=(k, d))
            b = rng.normal(size=k)
            l2 = 1e-3
            _, gw, gb = cross_entropy_loss_and_grad(w, b, x, y, l2)
            eps = 1e-6
            for gi, param in ((gw, w), (gb, b)):
                it = np.nditer(param, flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    orig = param[idx]
                    param[idx] = orig + eps
                    lp, _, _ = cross_entropy_loss_and_grad(w, b, x, y, l2)
                    param[idx] = orig - eps
                    lm, _, _ = cross_entropy_loss_and_grad(w, b, x, y, l2)
                    param[idx] = orig
                    fd = (lp - lm) / (2 * eps)
                    assert gi[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)
                    it.iternext()

    def test_separable_blobs_reach_perfect_accuracy(self, rng):
        n = 60
        x0 = rng.normal(0, 0.4, size=(n, 2)) + np.array([2.0, 2.0])
        x1 = rng.normal(0, 0.4, size=(n, 2)) + np.array([-2.0, -2.0])
        x = np.vstack([x0, x1])
        y = np.array([0] * n + [1] * n)
        w, b = train_head(x, y, epochs=300, lr=0.5, l2=1e-6, rng=rng)
        pred = np.argmax(x @ w.T + b, axis=1)
        assert (pred == y).mean() == 1.0

    def test_zero_learning_rate_keeps_init(self, rng):
        x = rng.normal(size=(10, 2))
        y = np.array([0, 1] * 5)
        w0, b0 = train_head(x, y, epochs=50, lr=0.0, l2=0.0, rng=np.random.default_rng(5))
        w1, b1 = train_head(x, y, epochs=0, lr=0.5, l2=0.0, rng=np.random.default_rng(5))
        np.testing.assert_array_equal(w0, w1)
        np.testing.assert_array_equal(b0, b1)

    def test_single_class_rejected(self, rng):
        with pytest.raises(BackboneError, match="classes"):
            train_head(rng.normal(size=(5, 2)), np.zeros(5, dtype=int), n_classes=2)

    def test_loss_trace_non_increasing(self, rng):
        x = rng.normal(size=(40, 3))
        y = rng.integers(0, 2, size=40)
        trace = []
        train_head(x, y, epochs=200, lr=0.8, l2=1e-4, rng=rng, loss_trace=trace)
        diffs = np.diff(trace)
        assert (diffs <= 1e-9).all()


class TestInfer:
    def test_zero_features_zero_bias_gives_zero_logits(self, rng):
        # identity filters on a unit-variance window give ~log(1)=0 features;
        # use explicit zero weights instead to make the identity exact
        model = NativeBackboneModel(np.eye(2), np.zeros((3, 2)), np.zeros(3), ["a", "b", "c"])
        frame = WindowFrame(0.0, rng.normal(size=(2, 50)), None, 0.0)
        out = infer(frame, model)
        np.testing.assert_array_equal(out.logits, 0.0)

    def test_logits_match_hand_matmul(self, rng):
        filters = rng.normal(size=(3, 4))
        w = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        model = NativeBackboneModel(filters, w, b, ["a", "b"])
        frame = WindowFrame(1.0, rng.normal(size=(4, 64)), ID0, 0.5)
        out = infer(frame, model)
        f = np.log((filters @ frame.samples).var(axis=1))
        oracle = np.array([sum(w[i, j] * f[j] for j in range(3)) + b[i] for i in range(2)])
        np.testing.assert_allclose(out.logits, oracle, rtol=1e-12)
        assert out.true_state == ID0

    def test_pure_function(self, rng):
        filters = rng.normal(size=(2, 3))
        model = NativeBackboneModel(filters, rng.normal(size=(2, 2)), rng.normal(size=2), ["a", "b"])
        frame = WindowFrame(0.0, rng.normal(size=(3, 40)), ID0, 1.0)
        a, b = infer(frame, model), infer(frame, model)
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(a.features, b.features)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        gate = NativeBackboneModel(
            rng.normal(size=(4, 6)), rng.normal(size=(2, 4)), rng.normal(size=2), ["rest", "task"]
        )
        task = NativeBackboneModel(
            rng.normal(size=(6, 6)), rng.normal(size=(2, 6)), rng.normal(size=2), ["l", "r"]
        )
        path = tmp_path / "model.json"
        save_checkpoint(gate, task, path)
        g2, t2 = load_checkpoint(path)
        np.testing.assert_array_equal(g2.csp_filters, gate.csp_filters.astype(np.float32))
        np.testing.assert_array_equal(t2.head_weights, task.head_weights.astype(np.float32))
        assert t2.class_names == ["l", "r"]


class TestReplay:
    def make_manifest(self):
        return SessionManifest(
            subject_id="S1",
            channel_count=2,
            sampling_rate=250.0,
            events=[EventSpec(2.0, 4.0, "left_hand")],
            class_map={"left_hand": ClassRole("id", 0)},
            data_path="raw.f32",
        )

    def test_roundtrip_bit_identical(self, tmp_path, rng):
        frames = [
            make_frame(i * 0.125, rng.normal(size=2), rng.normal(size=4), ID0) for i in range(9)
        ]
        path = tmp_path / "features.bin"
        write_feature_file(path, frames)
        manifest = self.make_manifest()
        replayed = list(replay_provider(path, manifest, n_samples=750))
        assert len(replayed) == 9
        for orig, rep in zip(frames, replayed):
            np.testing.assert_array_equal(rep.logits, orig.logits.astype(np.float32))
            np.testing.assert_array_equal(rep.features, orig.features.astype(np.float32))

    def test_replay_labels_follow_manifest(self, tmp_path, rng):
        frames = [make_frame(i * 0.125, rng.normal(size=2), rng.normal(size=4)) for i in range(33)]
        path = tmp_path / "features.bin"
        write_feature_file(path, frames)
        replayed = list(replay_provider(path, self.make_manifest(), n_samples=1500))
        by_start = {round(f.start_s, 3): f for f in replayed}
        assert by_start[0.0].true_state.kind == StateKind.REST
        assert by_start[2.5].true_state.kind == StateKind.ID

    def test_header_record_shape_mismatch(self, tmp_path):
        path = tmp_path / "bad.bin"
        header = json.dumps({"d": 4, "K": 2, "frame_count": 1})
        path.write_bytes((header + "\n").encode() + np.zeros(7, dtype="<f4").tobytes())
        with pytest.raises(BackboneError, match="payload"):
            read_feature_records(path)

    def test_count_mismatch_against_segmentation(self, tmp_path, rng):
        frames = [make_frame(i * 0.125, rng.normal(size=2), rng.normal(size=4)) for i in range(5)]
        path = tmp_path / "features.bin"
        write_feature_file(path, frames)
        with pytest.raises(BackboneError, match="segmentation"):
            list(replay_provider(path, self.make_manifest(), n_samples=2500))

    def test_empty_file_zero_frames(self, tmp_path):
        path = tmp_path / "empty.bin"
        write_feature_file(path, [])
        assert list(replay_provider(path, self.make_manifest())) == []
