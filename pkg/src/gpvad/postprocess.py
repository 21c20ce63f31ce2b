"""Double-threshold (hysteresis) post-processing and frame/segment conversion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np

from .corpus import SPEECH
from .errors import ConfigurationError, InvalidArgumentError


class SpeechSegment(NamedTuple):
    onset_s: float
    offset_s: float


@dataclass(frozen=True)
class ThresholdConfig:
    phi_low: float = 0.1
    phi_hi: float = 0.5
    # optional smoothing, both off by default
    min_duration_s: float = 0.0
    merge_gap_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.phi_low <= self.phi_hi <= 1.0:
            raise InvalidArgumentError(
                f"need 0 <= phi_low <= phi_hi <= 1, got {self.phi_low}, {self.phi_hi}"
            )
        if self.min_duration_s < 0 or self.merge_gap_s < 0:
            raise InvalidArgumentError("smoothing durations must be non-negative")


def _runs(binary: np.ndarray):
    """(start, stop) index pairs of maximal runs of True."""
    b = np.concatenate([[False], np.asarray(binary, dtype=bool), [False]])
    edges = np.flatnonzero(b[1:] != b[:-1])
    return edges[0::2], edges[1::2]


def double_threshold(probs, cfg: ThresholdConfig = ThresholdConfig()) -> np.ndarray:
    """1 on every maximal run of ``p >= phi_low`` that contains some ``p >= phi_hi``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise InvalidArgumentError("expected a 1-D probability sequence")
    out = np.zeros(p.shape, dtype=np.int8)
    starts, stops = _runs(p >= cfg.phi_low)
    high = p >= cfg.phi_hi
    for a, b in zip(starts, stops):
        if high[a:b].any():
            out[a:b] = 1
    return out


def binary_to_segments(binary, frame_hop_s: float) -> List[SpeechSegment]:
    """Maximal runs ``[i, j]`` become ``(i * hop, (j + 1) * hop)``."""
    starts, stops = _runs(np.asarray(binary) > 0)
    return [SpeechSegment(float(a * frame_hop_s), float(b * frame_hop_s)) for a, b in zip(starts, stops)]


def segments_to_frames(segments: Sequence, num_frames: int, frame_hop_s: float) -> np.ndarray:
    """Frame ``i`` is active when its centre ``(i + 0.5) * hop`` lies in some ``[onset, offset)``."""
    centers = (np.arange(num_frames) + 0.5) * frame_hop_s
    out = np.zeros(num_frames, dtype=np.int8)
    for seg in segments:
        onset, offset = seg[0], seg[1]
        out[(centers >= onset) & (centers < offset)] = 1
    return out


def _smooth(segments: List[SpeechSegment], cfg: ThresholdConfig) -> List[SpeechSegment]:
    if cfg.merge_gap_s > 0 and segments:
        merged = [segments[0]]
        for seg in segments[1:]:
            if seg.onset_s - merged[-1].offset_s <= cfg.merge_gap_s:
                merged[-1] = SpeechSegment(merged[-1].onset_s, seg.offset_s)
            else:
                merged.append(seg)
        segments = merged
    if cfg.min_duration_s > 0:
        segments = [s for s in segments if s.offset_s - s.onset_s >= cfg.min_duration_s]
    return segments


def extract_speech(probs, cfg: ThresholdConfig = ThresholdConfig()) -> List[SpeechSegment]:
    """Speech segments from a ProbSequence; every non-speech column is ignored."""
    names = tuple(probs.vocabulary.names)
    if SPEECH not in names:
        raise ConfigurationError(f"vocabulary {names} has no {SPEECH!r} event")
    column = probs.values[:, names.index(SPEECH)]
    segments = binary_to_segments(double_threshold(column, cfg), probs.frame_hop_s)
    return _smooth(segments, cfg)
