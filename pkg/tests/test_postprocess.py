from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpvad.corpus import LabelVocabulary
from gpvad.errors import ConfigurationError, InvalidArgumentError
from gpvad.model import ProbSequence
from gpvad.postprocess import (
    SpeechSegment,
    ThresholdConfig,
    binary_to_segments,
    double_threshold,
    extract_speech,
    segments_to_frames,
)

probs_strategy = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=60)


class TestThresholdConfig:
    def test_defaults(self):
        cfg = ThresholdConfig()
        assert (cfg.phi_low, cfg.phi_hi) == (0.1, 0.5)

    @pytest.mark.parametrize("low,hi", [(0.6, 0.5), (-0.1, 0.5), (0.1, 1.5)])
    def test_invalid(self, low, hi):
        with pytest.raises(InvalidArgumentError):
            ThresholdConfig(low, hi)


class TestDoubleThreshold:
    def test_hand_trace(self):
        out = double_threshold([0.05, 0.2, 0.6, 0.3, 0.05])
        np.testing.assert_array_equal(out, [0, 1, 1, 1, 0])

    def test_never_reaches_high(self):
        np.testing.assert_array_equal(double_threshold([0.2, 0.4, 0.3]), [0, 0, 0])

    def test_all_zeros(self):
        np.testing.assert_array_equal(double_threshold(np.zeros(7)), np.zeros(7))

    def test_inclusive_boundaries(self):
        # exactly phi_hi seeds a run, exactly phi_low extends it
        np.testing.assert_array_equal(double_threshold([0.0, 0.1, 0.5, 0.1, 0.09]), [0, 1, 1, 1, 0])

    def test_two_runs_one_seeded(self):
        out = double_threshold([0.3, 0.7, 0.0, 0.3, 0.4])
        np.testing.assert_array_equal(out, [1, 1, 0, 0, 0])

    def test_rejects_2d(self):
        with pytest.raises(InvalidArgumentError):
            double_threshold(np.zeros((2, 2)))

    @given(probs_strategy)
    def test_sandwich(self, p):
        p = np.array(p)
        out = double_threshold(p).astype(bool)
        assert np.all(out[p >= 0.5])
        assert not np.any(out[p < 0.1])

    @given(probs_strategy, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    def test_monotone_in_thresholds(self, p, a, b):
        lo, hi = min(a, b), max(a, b)
        base = double_threshold(p, ThresholdConfig(lo, hi)).astype(bool)
        higher_hi = double_threshold(p, ThresholdConfig(lo, min(1.0, hi + 0.1))).astype(bool)
        lower_lo = double_threshold(p, ThresholdConfig(max(0.0, lo - 0.05), hi)).astype(bool)
        assert not np.any(higher_hi & ~base)
        assert not np.any(base & ~lower_lo)

    @given(probs_strategy)
    def test_idempotent(self, p):
        once = double_threshold(p)
        np.testing.assert_array_equal(double_threshold(once), once)


class TestSegments:
    def test_single_run(self):
        assert binary_to_segments([0, 1, 1, 0], 0.02) == [SpeechSegment(0.02, 0.06)]

    def test_all_ones(self):
        (seg,) = binary_to_segments(np.ones(5), 0.02)
        assert seg.onset_s == 0.0
        assert seg.offset_s == pytest.approx(0.10)

    def test_split_runs(self):
        assert len(binary_to_segments([1, 0, 1], 0.02)) == 2

    def test_empty(self):
        assert binary_to_segments([0, 0, 0], 0.02) == []

    def test_frames_use_centres(self):
        # centres 0.01, 0.03, 0.05, 0.07; offsets are exclusive
        np.testing.assert_array_equal(segments_to_frames([(0.025, 0.05)], 4, 0.02), [0, 1, 0, 0])
        np.testing.assert_array_equal(segments_to_frames([(0.031, 0.051)], 4, 0.02), [0, 0, 1, 0])

    @given(st.lists(st.integers(0, 1), min_size=1, max_size=80))
    def test_round_trip(self, bits):
        segs = binary_to_segments(bits, 0.02)
        np.testing.assert_array_equal(segments_to_frames(segs, len(bits), 0.02), bits)
        assert binary_to_segments(segments_to_frames(segs, len(bits), 0.02), 0.02) == segs


class TestExtractSpeech:
    def _seq(self, values, names):
        return ProbSequence(np.asarray(values, dtype=float), 0.02, LabelVocabulary(names))

    def test_non_speech_columns_ignored(self):
        names = ["Dog", "Noise", "Speech"]
        values = np.zeros((10, 3))
        values[:, 0] = 0.99
        assert extract_speech(self._seq(values, names)) == []

    def test_column_independence(self):
        speech = [0.05, 0.2, 0.6, 0.3, 0.05]
        alone = binary_to_segments(double_threshold(speech), 0.02)
        rng = np.random.default_rng(0)
        values = np.column_stack([rng.random(5), speech])
        assert extract_speech(self._seq(values, ["Noise", "Speech"])) == alone
        assert alone == [SpeechSegment(0.02, 0.08)]

    def test_missing_speech(self):
        # LabelVocabulary itself refuses such a list, so use a bare stand-in
        seq = ProbSequence(np.zeros((3, 2)), 0.02, SimpleNamespace(names=("Dog", "Noise")))
        with pytest.raises(ConfigurationError):
            extract_speech(seq)

    def test_optional_smoothing(self):
        values = np.zeros((20, 2))
        values[2:5, 1] = 0.9
        values[6:8, 1] = 0.9
        values[15, 1] = 0.9
        seq = self._seq(values, ["Noise", "Speech"])
        assert len(extract_speech(seq)) == 3
        merged = extract_speech(seq, ThresholdConfig(merge_gap_s=0.03, min_duration_s=0.05))
        assert merged == [SpeechSegment(pytest.approx(0.04), pytest.approx(0.16))]
