"""64-band log-Mel power spectrograms (40 ms Hann window, 20 ms hop, 2048-point FFT).

Conventions: HTK mel scale, fmin 0 Hz, fmax at Nyquist, unnormalised
triangular filters (peak 1.0) and a 1e-10 power floor before the log.
The signal is reflect-padded by ``(win - hop) / 2`` samples on the left, so
frame ``t`` is centred on the middle of the annotation interval
``[t * hop, (t + 1) * hop)`` and ``T = ceil(len / hop)``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import get_window

from .corpus import Waveform, read_wav
from .errors import ConfigurationError, ParseError
from . import tsv

LOG_FLOOR = 1e-10
INDEX_HEADER = ("clip_id", "feature_path", "num_frames")
_MAGIC = b"GPVLMS01"


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 2048
    win_length_s: float = 0.040
    hop_s: float = 0.020
    window: str = "hann"
    mel_bands: int = 64
    fmin: float = 0.0
    fmax: Optional[float] = None  # None means sample_rate / 2

    def win_length(self, sample_rate: int) -> int:
        return int(round(self.win_length_s * sample_rate))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(self.hop_s * sample_rate))

    def upper_freq(self, sample_rate: int) -> float:
        return sample_rate / 2.0 if self.fmax is None else float(self.fmax)

    def validate(self, sample_rate: int) -> None:
        win, hop = self.win_length(sample_rate), self.hop_length(sample_rate)
        if not 1 <= win <= self.n_fft:
            raise ConfigurationError(f"window of {win} samples does not fit n_fft={self.n_fft}")
        if not 1 <= hop <= win:
            raise ConfigurationError(f"hop {hop} must lie in [1, window={win}]")
        if not 0 <= self.fmin < self.upper_freq(sample_rate) <= sample_rate / 2:
            raise ConfigurationError(f"need 0 <= fmin < fmax <= {sample_rate / 2}")
        if self.mel_bands < 1:
            raise ConfigurationError("mel_bands must be >= 1")


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (T, F) natural-log power
    frame_hop_s: float = 0.020
    clip_id: str = ""

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def num_frames(num_samples: int, hop: int) -> int:
    return -(-num_samples // hop)


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    """(T, win) frames of the reflect-padded signal; T = ceil(len / hop)."""
    T = num_frames(x.size, hop)
    left = (win - hop) // 2
    right = max(0, (T - 1) * hop + win - x.size - left)
    padded = np.pad(x, (left, right), mode="reflect")
    return np.lib.stride_tricks.sliding_window_view(padded, win)[::hop][:T]


def stft_power(w: Waveform, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|DFT|^2 of Hann-windowed frames, shape (T, n_fft // 2 + 1)."""
    cfg.validate(w.sample_rate)
    win = cfg.win_length(w.sample_rate)
    hop = cfg.hop_length(w.sample_rate)
    frames = frame_signal(w.samples, win, hop)
    window = get_window(cfg.window, win, fftbins=True)
    spec = np.fft.rfft(frames * window, n=cfg.n_fft, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """Peak frequency (Hz) of each triangular filter."""
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_freq(sample_rate)), cfg.mel_bands + 2)
    )
    return edges[1:-1]


def mel_filterbank(cfg: StftConfig = StftConfig(), sample_rate: int = 16000) -> np.ndarray:
    """(mel_bands, n_fft // 2 + 1) triangular filters with peak 1.0."""
    cfg.validate(sample_rate)
    edges = mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_freq(sample_rate)), cfg.mel_bands + 2)
    )
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, cfg.n_fft // 2 + 1)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (fft_freqs[None, :] - lower) / (center - lower)
    falling = (upper - fft_freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) <= 0)
    if empty.size:
        raise ConfigurationError(
            f"{cfg.mel_bands} mel bands too many for n_fft={cfg.n_fft}: "
            f"bands {empty.tolist()} contain no FFT bin"
        )
    return fb


_FB_CACHE: Dict[Tuple[StftConfig, int], np.ndarray] = {}


def _cached_filterbank(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    key = (cfg, sample_rate)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(cfg, sample_rate)
    return _FB_CACHE[key]


def extract_logmel(w: Waveform, cfg: StftConfig = StftConfig(), clip_id: str = "") -> FeatureMatrix:
    power = stft_power(w, cfg)
    mel = power @ _cached_filterbank(cfg, w.sample_rate).T
    return FeatureMatrix(np.log(np.maximum(mel, LOG_FLOOR)), cfg.hop_s, clip_id)


# -- feature archive -------------------------------------------------------


def write_features(path, fm: FeatureMatrix) -> None:
    """Header (magic, clip_id, T, F, hop) then row-major little-endian float32."""
    values = np.ascontiguousarray(fm.values, dtype="<f4")
    cid = fm.clip_id.encode("utf-8")
    T, F = values.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(cid)))
        fh.write(cid)
        fh.write(struct.pack("<IId", T, F, fm.frame_hop_s))
        fh.write(values.tobytes())


def read_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[: len(_MAGIC)] != _MAGIC:
            raise ValueError("bad magic")
        pos = len(_MAGIC)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        cid = data[pos : pos + n].decode("utf-8")
        pos += n
        T, F, hop = struct.unpack_from("<IId", data, pos)
        pos += struct.calcsize("<IId")
        if len(data) - pos != 4 * T * F:
            raise ValueError(f"payload has {len(data) - pos} bytes, expected {4 * T * F}")
        values = np.frombuffer(data, dtype="<f4", offset=pos).reshape(T, F).astype(np.float32)
    except (ValueError, struct.error, UnicodeDecodeError) as exc:
        raise ParseError(f"corrupt feature file: {exc}", path) from None
    return FeatureMatrix(values, hop, cid)


def write_index(path, rows: List[Tuple[str, str, int]]) -> None:
    tsv._write_table(path, INDEX_HEADER, ((c, p, str(t)) for c, p, t in rows))


def read_index(path) -> Dict[str, Tuple[str, int]]:
    """``{clip_id: (absolute feature path, num_frames)}``."""
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    for lineno, (cid, fpath, frames) in tsv._read_table(path, INDEX_HEADER):
        try:
            out[cid] = (os.path.join(base, fpath), int(frames))
        except ValueError:
            raise ParseError(f"bad num_frames {frames!r}", path, lineno) from None
    return out


def extract_manifest(manifest_path, out_dir, cfg: StftConfig = StftConfig()) -> str:
    """Extract features for every clip of a manifest; returns the index path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for row in tsv.read_manifest(manifest_path):
        w = read_wav(tsv.resolve_audio_path(manifest_path, row.audio_path))
        fm = extract_logmel(w, cfg, row.clip_id)
        name = f"{row.clip_id}.lms"
        write_features(os.path.join(out_dir, name), fm)
        rows.append((row.clip_id, name, fm.num_frames))
    index_path = os.path.join(out_dir, "index.tsv")
    write_index(index_path, rows)
    return index_path
