import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import sosfreqz

from oodgate.stream_io import (
    ClassRole,
    EventSpec,
    SessionManifest,
    StateKind,
    StreamIOError,
    bandpass,
    design_bandpass,
    expected_frame_count,
    load_manifest,
    load_session,
    save_manifest,
    segment,
)

CLASS_MAP = {
    "left_hand": ClassRole("id", 0),
    "right_hand": ClassRole("id", 1),
    "feet": ClassRole("ood"),
}


def manifest_with(events, rate=250.0, channels=4, data_path="raw.f32"):
    return SessionManifest(
        subject_id="S1",
        channel_count=channels,
        sampling_rate=rate,
        events=events,
        class_map=dict(CLASS_MAP),
        data_path=data_path,
    )


def write_session(tmp_path, manifest, signal):
    (tmp_path / manifest.data_path).write_bytes(np.asarray(signal, dtype="<f4").tobytes())
    path = tmp_path / "session.json"
    save_manifest(manifest, path)
    return path


class TestLoadSession:
    def test_bnci_geometry_22_channels_250hz(self, tmp_path, rng):
        signal = rng.normal(size=(22, 250 * 4))
        manifest = manifest_with([], rate=250.0, channels=22)
        path = write_session(tmp_path, manifest, signal)
        loaded, raw = load_session(path)
        assert raw.shape == (22, 1000)
        assert loaded.sampling_rate == 250.0
        np.testing.assert_array_equal(raw, signal.astype(np.float32).astype(np.float64))

    def test_empty_events_all_windows_rest(self, tmp_path, rng):
        signal = rng.normal(size=(4, 250 * 6))
        path = write_session(tmp_path, manifest_with([]), signal)
        manifest, raw = load_session(path)
        frames = list(segment(raw, manifest))
        assert frames
        assert all(f.true_state.kind == StateKind.REST for f in frames)
        assert all(f.coverage == 0.0 for f in frames)

    def test_short_file_is_size_mismatch(self, tmp_path, rng):
        signal = rng.normal(size=(4, 100))
        manifest = manifest_with([])
        raw_path = tmp_path / manifest.data_path
        raw_path.write_bytes(np.asarray(signal, dtype="<f4").tobytes()[:-4])
        path = tmp_path / "session.json"
        save_manifest(manifest, path)
        with pytest.raises(StreamIOError, match="multiple"):
            load_session(path)

    def test_non_finite_sample_names_offset(self, tmp_path):
        signal = np.zeros((2, 50), dtype=np.float32)
        signal[1, 3] = np.nan  # flat offset 53
        path = write_session(tmp_path, manifest_with([], channels=2), signal)
        with pytest.raises(StreamIOError, match="offset 53"):
            load_session(path)

    def test_malformed_manifest(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"subject_id": "x"}')
        with pytest.raises(StreamIOError, match="malformed"):
            load_manifest(path)

    def test_event_past_recording_end(self, tmp_path, rng):
        signal = rng.normal(size=(4, 250))
        manifest = manifest_with([EventSpec(0.5, 5.0, "left_hand")])
        path = write_session(tmp_path, manifest, signal)
        with pytest.raises(StreamIOError, match="past"):
            load_session(path)

    def test_overlapping_events_rejected(self):
        with pytest.raises(StreamIOError, match="non-overlapping"):
            manifest_with(
                [EventSpec(0.0, 2.0, "left_hand"), EventSpec(1.0, 2.0, "right_hand")]
            )

    def test_unknown_event_class_rejected(self):
        with pytest.raises(StreamIOError, match="class_map"):
            manifest_with([EventSpec(0.0, 1.0, "tongue")])

    def test_manifest_roundtrip(self, tmp_path):
        manifest = manifest_with([EventSpec(1.0, 2.0, "left_hand")])
        path = tmp_path / "m.json"
        save_manifest(manifest, path)
        again = load_manifest(path)
        assert again.to_dict() == manifest.to_dict()


class TestBandpass:
    def test_constant_signal_decays(self):
        signal = np.ones((2, 2000))
        out = bandpass(signal, 8.0, 30.0, 250.0)
        assert np.abs(out[:, -200:]).max() < 1e-3

    def test_15hz_tone_passes_within_1db(self):
        # oracle: the designed filter's own frequency response at 15 Hz
        rate, f = 250.0, 15.0
        sos = design_bandpass(8.0, 30.0, rate)
        _, h = sosfreqz(sos, worN=[f], fs=rate)
        gain = np.abs(h[0])
        assert abs(20 * math.log10(gain)) < 1.0

        t = np.arange(int(rate) * 8) / rate
        tone = np.sin(2 * np.pi * f * t)[None, :]
        out = bandpass(tone, 8.0, 30.0, rate)[0]
        tail = slice(-int(rate) * 4, None)
        # project the steady-state tail onto the quadrature basis to read amplitude
        a = 2 * np.mean(out[tail] * np.sin(2 * np.pi * f * t[tail]))
        b = 2 * np.mean(out[tail] * np.cos(2 * np.pi * f * t[tail]))
        measured = math.hypot(a, b)
        assert measured == pytest.approx(gain, rel=5e-3)

    def test_inverted_band_edges_rejected(self):
        with pytest.raises(StreamIOError, match="band edges"):
            bandpass(np.zeros((1, 100)), 30.0, 8.0, 250.0)

    def test_dc_attenuation_at_least_40db(self):
        sos = design_bandpass(8.0, 30.0, 250.0)
        _, h = sosfreqz(sos, worN=[1e-6], fs=250.0)
        assert 20 * math.log10(max(np.abs(h[0]), 1e-300)) < -40.0


class TestSegment:
    def test_ten_seconds_default_protocol_gives_65_frames(self):
        # floor((10 - 2) / 0.125) + 1
        assert expected_frame_count(2500, 250.0, 2.0, 0.125) == 65

    def test_window_inside_event_is_full_coverage_id(self, rng):
        manifest = manifest_with([EventSpec(2.0, 4.0, "left_hand")])
        signal = rng.normal(size=(4, 250 * 10))
        frames = list(segment(signal, manifest))
        inside = [f for f in frames if f.start_s == 2.5][0]
        assert inside.coverage == 1.0
        assert inside.true_state.kind == StateKind.ID
        assert inside.true_state.class_index == 0

    def test_window_after_offset_without_task_samples_is_excluded(self, rng):
        manifest = manifest_with([EventSpec(1.0, 1.0, "left_hand")], rate=100.0)
        signal = rng.normal(size=(4, 100 * 8))
        frames = list(segment(signal, manifest, window_len_s=0.5, hop_s=0.1))
        by_start = {round(f.start_s, 3): f for f in frames}
        assert by_start[2.2].true_state.kind == StateKind.EXCLUDED
        assert by_start[2.2].coverage == 0.0
        assert by_start[2.6].true_state.kind == StateKind.REST

    def test_non_integer_window_sample_count_rejected(self, rng):
        manifest = manifest_with([], rate=250.0)
        with pytest.raises(StreamIOError, match="integer"):
            list(segment(rng.normal(size=(4, 2500)), manifest, window_len_s=1.0001))

    def test_majority_event_breaks_ties_to_earlier(self, rng):
        # two adjacent events; a window straddling them equally goes to the first
        manifest = manifest_with(
            [EventSpec(1.0, 1.0, "left_hand"), EventSpec(2.0, 1.0, "feet")], rate=100.0
        )
        signal = rng.normal(size=(4, 100 * 5))
        frames = list(segment(signal, manifest, window_len_s=1.0, hop_s=0.5))
        straddle = [f for f in frames if abs(f.start_s - 1.5) < 1e-9][0]
        assert straddle.true_state.kind == StateKind.ID  # earlier event wins the tie

    def test_deterministic(self, rng):
        manifest = manifest_with([EventSpec(2.0, 3.0, "right_hand")])
        signal = rng.normal(size=(4, 250 * 8))
        a = list(segment(signal, manifest))
        b = list(segment(signal, manifest))
        assert len(a) == len(b)
        for fa, fb in zip(a, b):
            assert fa.start_s == fb.start_s
            assert fa.true_state == fb.true_state
            assert fa.coverage == fb.coverage
            np.testing.assert_array_equal(fa.samples, fb.samples)

    def test_coverage_unimodal_across_single_event(self, rng):
        manifest = manifest_with([EventSpec(3.0, 2.0, "left_hand")])
        signal = rng.normal(size=(4, 250 * 10))
        cov = [f.coverage for f in segment(signal, manifest)]
        peak = int(np.argmax(cov))
        assert all(x <= y + 1e-12 for x, y in zip(cov[: peak + 1], cov[1 : peak + 1]))
        assert all(x >= y - 1e-12 for x, y in zip(cov[peak:], cov[peak + 1 :]))

    def test_rest_iff_zero_coverage_outside_exclusion(self, rng):
        manifest = manifest_with([EventSpec(2.0, 2.0, "feet")])
        signal = rng.normal(size=(4, 250 * 8))
        for frame in segment(signal, manifest):
            if frame.true_state.kind == StateKind.EXCLUDED:
                assert frame.coverage == 0.0
            else:
                assert (frame.coverage == 0.0) == (frame.true_state.kind == StateKind.REST)

    @settings(max_examples=60, deadline=None)
    @given(
        rate=st.sampled_from([100, 200, 250, 500]),
        win_n=st.integers(10, 400),
        hop_n=st.integers(1, 150),
        n=st.integers(0, 5000),
    )
    def test_frame_count_formula(self, rate, win_n, hop_n, n):
        window_len = win_n / rate
        hop = hop_n / rate
        count = expected_frame_count(n, rate, window_len, hop)
        if n < win_n:
            assert count == 0
        else:
            expected = math.floor((Fraction(n, rate) - Fraction(win_n, rate)) / Fraction(hop_n, rate)) + 1
            assert count == expected
