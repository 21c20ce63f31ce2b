"""Synthetic toy corpus: speech-like bursts, noise-like backgrounds, SNR mixing.

Every clip is an additive mixture ``x = s + g * u`` of a harmonic burst train
``s`` and one background noise ``u``.  Noise-only clips use the same gain rule
(the speech is synthesised to set the noise level, then dropped), so loudness
alone never reveals whether a clip contains speech.

Clip labels are stored with the full toy vocabulary (``Speech`` plus one name
per noise type); :func:`binary_labels` collapses them to the two-class
Speech/Noise bags, in which speech never occurs on its own.
"""
from __future__ import annotations

import logging
import os
import wave
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import tsv
from .errors import DegenerateSignalError, InvalidArgumentError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SPEECH = "Speech"
NOISE = "Noise"
NOISE_KINDS = ("white", "pink", "tone_burst", "amplitude_burst")

# nominal RMS of synthesised noise before mixing
_NOISE_RMS = 0.1
_SPEECH_PEAK = 0.5
_HARMONIC_AMPS = (1.0, 0.5, 0.25)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    clipped: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise InvalidArgumentError("waveform must be 1-D with at least one sample")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidArgumentError(f"bad sample rate {self.sample_rate!r}")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("waveform contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples ** 2)))


@dataclass(frozen=True)
class NoiseType:
    """A named noise source: a generator ``kind`` plus its parameters."""

    name: str
    kind: str
    params: Tuple[Tuple[str, object], ...] = ()

    def synth(self, duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> Waveform:
        return synth_noise(duration_s, self.kind, seed, sample_rate, **dict(self.params))


DEFAULT_NOISE_TYPES: Tuple[NoiseType, ...] = (
    NoiseType("white_noise", "white"),
    NoiseType("pink_noise", "pink"),
    NoiseType("tone_low", "tone_burst", (("f_lo", 1000.0), ("f_hi", 2000.0))),
    NoiseType("tone_mid", "tone_burst", (("f_lo", 2000.0), ("f_hi", 4000.0))),
    NoiseType("tone_high", "tone_burst", (("f_lo", 4000.0), ("f_hi", 7000.0))),
    NoiseType("clicks_white", "amplitude_burst", (("color", "white"), ("burst_s", (0.02, 0.08)))),
    NoiseType("clicks_pink", "amplitude_burst", (("color", "pink"), ("burst_s", (0.02, 0.08)))),
    NoiseType("gusts_white", "amplitude_burst", (("color", "white"), ("burst_s", (0.2, 0.8)))),
    NoiseType("gusts_pink", "amplitude_burst", (("color", "pink"), ("burst_s", (0.2, 0.8)))),
)


@dataclass(frozen=True)
class LabelVocabulary:
    names: Tuple[str, ...]
    speech_label: str = SPEECH

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise InvalidArgumentError("vocabulary needs at least two events")
        if len(set(self.names)) != len(self.names):
            raise InvalidArgumentError("vocabulary names must be unique")
        if self.speech_label not in self.names:
            raise InvalidArgumentError(f"vocabulary lacks {self.speech_label!r}")

    @classmethod
    def from_labels(cls, labels: Iterable[str]) -> "LabelVocabulary":
        return cls(tuple(sorted(set(labels))))

    @classmethod
    def binary(cls) -> "LabelVocabulary":
        return cls((NOISE, SPEECH))

    def __len__(self):
        return len(self.names)

    @property
    def speech_index(self) -> int:
        return self.names.index(self.speech_label)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def multi_hot(self, labels: Iterable[str]) -> np.ndarray:
        vec = np.zeros(len(self.names), dtype=np.float32)
        for name in labels:
            vec[self.index(name)] = 1.0
        return vec


@dataclass
class ClipRecord:
    clip_id: str
    audio_path: str
    clip_labels: FrozenSet[str]
    frame_annotations: List[Tuple[float, float, str]]
    snr_db: Optional[float] = None

    def validate(self, duration_s: float) -> None:
        for onset, offset, _ in self.frame_annotations:
            if not (0.0 <= onset < offset <= duration_s + 1e-9):
                raise InvalidArgumentError(
                    f"{self.clip_id}: segment ({onset}, {offset}) outside [0, {duration_s}]"
                )
        names = {label for _, _, label in self.frame_annotations}
        if names != set(self.clip_labels):
            raise InvalidArgumentError(
                f"{self.clip_id}: clip labels {sorted(self.clip_labels)} do not match "
                f"annotated events {sorted(names)}"
            )


def binary_labels(labels: Iterable[str]) -> FrozenSet[str]:
    """Collapse a full label set to the Speech/Noise bag."""
    out = set()
    for name in labels:
        out.add(SPEECH if name == SPEECH else NOISE)
    return frozenset(out)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _num_samples(duration_s: float, sample_rate: int) -> int:
    if not np.isfinite(duration_s) or duration_s <= 0:
        raise InvalidArgumentError(f"duration must be positive, got {duration_s!r}")
    return max(1, int(round(duration_s * sample_rate)))


# -- speech ---------------------------------------------------------------


class SpeechSynthesis(NamedTuple):
    waveform: Waveform
    intervals: List[Tuple[float, float]]
    gain: np.ndarray


def _burst_plan(total_ms: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    """Millisecond-aligned (start, stop) bursts of 0.3-1.2 s separated by 0.5-2.5 s pauses."""
    bursts = []
    t = int(rng.integers(100, 1000))
    if t >= total_ms:
        t = 0
    while t < total_ms:
        length = min(int(rng.integers(300, 1200)), total_ms - t)
        if length >= 20 or not bursts:
            bursts.append((t, t + length))
        t += length + int(rng.integers(500, 2500))
    return bursts


def synth_speech(duration_s: float, seed: int, sample_rate: int = SAMPLE_RATE) -> SpeechSynthesis:
    """Harmonic burst train standing in for speech.

    Each burst is a 3-harmonic tone (fundamental 100-300 Hz) amplitude
    modulated at 4 Hz, with short fades kept strictly positive so the gain
    signal is non-zero exactly on the returned active intervals.
    """
    n = _num_samples(duration_s, sample_rate)
    rng = _rng(seed)
    total_ms = max(1, (n * 1000) // sample_rate)
    gain = np.zeros(n)
    carrier = np.zeros(n)
    intervals = []
    for start_ms, stop_ms in _burst_plan(total_ms, rng):
        a = start_ms * sample_rate // 1000
        b = min(n, stop_ms * sample_rate // 1000)
        if b <= a:
            continue
        t = np.arange(b - a) / sample_rate
        f0 = rng.uniform(100.0, 300.0)
        phases = rng.uniform(0, 2 * np.pi, size=len(_HARMONIC_AMPS))
        tone = sum(
            amp * np.sin(2 * np.pi * (k + 1) * f0 * t + ph)
            for k, (amp, ph) in enumerate(zip(_HARMONIC_AMPS, phases))
        )
        am = 0.55 + 0.45 * np.sin(2 * np.pi * 4.0 * t + rng.uniform(0, 2 * np.pi))
        ramp_len = min(int(0.01 * sample_rate), (b - a) // 2)
        env = np.ones(b - a)
        if ramp_len > 0:
            ramp = np.sin(0.5 * np.pi * np.arange(1, ramp_len + 1) / (ramp_len + 1)) ** 2
            env[:ramp_len] = ramp
            env[-ramp_len:] = np.minimum(env[-ramp_len:], ramp[::-1])
        gain[a:b] = am * env
        carrier[a:b] = tone / sum(_HARMONIC_AMPS)
        intervals.append((a / sample_rate, b / sample_rate))
    samples = _SPEECH_PEAK * gain * carrier
    return SpeechSynthesis(Waveform(samples, sample_rate), intervals, gain)


# -- noise ----------------------------------------------------------------


def _colored(n: int, color: str, rng: np.random.Generator) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    if color != "pink":
        raise InvalidArgumentError(f"unknown noise color {color!r}")
    spec = np.fft.rfft(white)
    freqs = np.arange(spec.size, dtype=np.float64)
    scale = np.zeros_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    return np.fft.irfft(spec * scale, n=n)


def _gate(n: int, sample_rate: int, rng: np.random.Generator, burst_s, gap_s) -> List[Tuple[int, int]]:
    spans = []
    t = 0
    while t < n:
        length = max(1, int(rng.uniform(*burst_s) * sample_rate))
        spans.append((t, min(n, t + length)))
        t += length + max(1, int(rng.uniform(*gap_s) * sample_rate))
    return spans


def synth_noise(
    duration_s: float,
    kind: str,
    seed: int,
    sample_rate: int = SAMPLE_RATE,
    **params,
) -> Waveform:
    """Deterministic noise of the given kind with RMS 0.1.

    ``tone_burst`` accepts ``f_lo``/``f_hi`` (fundamental range, f_lo >= 1 kHz);
    ``amplitude_burst`` accepts ``color`` and ``burst_s``/``gap_s`` ranges.
    Burst kinds always start with a burst so the RMS is never zero.
    """
    if kind not in NOISE_KINDS:
        raise InvalidArgumentError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    n = _num_samples(duration_s, sample_rate)
    rng = _rng(seed)
    if kind in ("white", "pink"):
        x = _colored(n, kind, rng)
    elif kind == "tone_burst":
        f_lo = float(params.get("f_lo", 1000.0))
        f_hi = float(params.get("f_hi", 4000.0))
        if f_lo < 1000.0 or f_hi < f_lo or f_hi >= sample_rate / 2:
            raise InvalidArgumentError(f"tone_burst range [{f_lo}, {f_hi}] invalid")
        x = np.zeros(n)
        for a, b in _gate(n, sample_rate, rng, params.get("burst_s", (0.1, 0.4)), params.get("gap_s", (0.05, 0.3))):
            t = np.arange(b - a) / sample_rate
            f = rng.uniform(f_lo, f_hi)
            burst = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
            if 2 * f < sample_rate / 2:
                burst += 0.3 * np.sin(2 * np.pi * 2 * f * t)
            x[a:b] = burst * np.hanning(b - a + 2)[1:-1]
    else:
        base = _colored(n, str(params.get("color", "white")), rng)
        env = np.zeros(n)
        for a, b in _gate(n, sample_rate, rng, params.get("burst_s", (0.05, 0.3)), params.get("gap_s", (0.1, 0.6))):
            env[a:b] = np.hanning(b - a + 2)[1:-1] * rng.uniform(0.5, 1.0)
        x = base * env
    rms = np.sqrt(np.mean(x ** 2))
    if rms > 0:
        x = x * (_NOISE_RMS / rms)
    return Waveform(np.clip(x, -1.0, 1.0), sample_rate)


# -- mixing ---------------------------------------------------------------


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def mixing_gain(speech: Waveform, noise: Waveform, snr_db: float) -> float:
    """Noise gain ``g`` such that ``s`` and ``g * u`` are ``snr_db`` apart."""
    if speech.sample_rate != noise.sample_rate:
        raise InvalidArgumentError(
            f"sample rate mismatch: {speech.sample_rate} vs {noise.sample_rate}"
        )
    if not np.isfinite(snr_db):
        raise InvalidArgumentError("snr_db must be finite; pass clean speech unmixed instead")
    if len(noise) < len(speech):
        raise InvalidArgumentError("noise is shorter than speech")
    rms_s = _rms(speech.samples)
    rms_u = _rms(noise.samples[: len(speech)])
    if rms_s == 0.0:
        raise DegenerateSignalError("speech has zero RMS")
    if rms_u == 0.0:
        raise DegenerateSignalError("noise has zero RMS")
    return (rms_s / rms_u) * 10.0 ** (-snr_db / 20.0)


def hard_clip(samples: np.ndarray) -> Tuple[np.ndarray, int]:
    clipped = int(np.count_nonzero(np.abs(samples) > 1.0))
    return np.clip(samples, -1.0, 1.0), clipped


def mix_at_snr(speech: Waveform, noise: Waveform, snr_db: float) -> Waveform:
    """Return ``s + g * u`` (noise truncated to the speech length), hard-clipped.

    The number of clipped samples is reported in ``Waveform.clipped``.
    """
    g = mixing_gain(speech, noise, snr_db)
    mixed, clipped = hard_clip(speech.samples + g * noise.samples[: len(speech)])
    return Waveform(mixed, speech.sample_rate, clipped=clipped)


# -- WAV I/O --------------------------------------------------------------


def write_wav(path, w: Waveform) -> None:
    """16-bit PCM mono."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2:
            raise InvalidArgumentError(f"{path}: only 16-bit PCM is supported")
        channels = fh.getnchannels()
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    if channels > 1:
        data = data.reshape(-1, channels).mean(axis=1)
    return Waveform(data.astype(np.float64) / 32767.0, rate)


# -- corpus ---------------------------------------------------------------


@dataclass
class CorpusConfig:
    num_clips: int = 200
    duration_s: float = 10.0
    snr_low: float = 5.0
    snr_high: float = 15.0
    snr_step: float = 1.0
    heldout_fraction: float = 0.1
    speech_fraction: float = 0.5
    noise_types: Tuple[NoiseType, ...] = DEFAULT_NOISE_TYPES
    seed: int = 42
    sample_rate: int = SAMPLE_RATE
    max_clip_fraction: float = 0.01

    def validate(self) -> None:
        if self.num_clips < 1:
            raise InvalidArgumentError("num_clips must be >= 1")
        if not self.duration_s > 0:
            raise InvalidArgumentError("duration_s must be positive")
        if self.snr_low > self.snr_high:
            raise InvalidArgumentError(f"SNR range [{self.snr_low}, {self.snr_high}] is empty")
        if not self.snr_step > 0:
            raise InvalidArgumentError("snr_step must be positive")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise InvalidArgumentError("heldout_fraction must lie in [0, 1)")
        if not 0.0 <= self.speech_fraction <= 1.0:
            raise InvalidArgumentError("speech_fraction must lie in [0, 1]")
        if not self.noise_types:
            raise InvalidArgumentError("at least one noise type is required")
        names = [nt.name for nt in self.noise_types]
        if len(set(names)) != len(names) or SPEECH in names:
            raise InvalidArgumentError("noise type names must be unique and differ from Speech")

    def snr_grid(self) -> np.ndarray:
        steps = int(np.floor((self.snr_high - self.snr_low) / self.snr_step + 1e-9))
        return self.snr_low + self.snr_step * np.arange(steps + 1)

    def vocabulary(self) -> LabelVocabulary:
        return LabelVocabulary.from_labels([SPEECH] + [nt.name for nt in self.noise_types])


@dataclass
class ClipSynthesis:
    clip_id: str
    speech: Optional[Waveform]
    reference_speech: Waveform
    noise: Waveform
    noise_type: NoiseType
    snr_db: float
    gain: float
    mixture: Waveform
    intervals: List[Tuple[float, float]]

    def record(self, audio_path: str) -> ClipRecord:
        events = [(on, off, SPEECH) for on, off in self.intervals] if self.speech is not None else []
        events.append((0.0, self.mixture.duration, self.noise_type.name))
        return ClipRecord(
            clip_id=self.clip_id,
            audio_path=audio_path,
            clip_labels=frozenset(label for _, _, label in events),
            frame_annotations=events,
            snr_db=self.snr_db,
        )


def clip_id_for(index: int) -> str:
    return f"clip{index:05d}"


def synth_clip(config: CorpusConfig, index: int) -> ClipSynthesis:
    """Synthesise clip ``index``; randomness depends only on (seed, index)."""
    ss = np.random.SeedSequence([int(config.seed), int(index)])
    rng = np.random.default_rng(ss)
    has_speech = bool(rng.random() < config.speech_fraction)
    noise_type = config.noise_types[int(rng.integers(len(config.noise_types)))]
    snr = float(rng.choice(config.snr_grid()))
    speech_seed, noise_seed = (int(s) for s in rng.integers(0, 2**31 - 1, size=2))

    synth = synth_speech(config.duration_s, speech_seed, config.sample_rate)
    noise = noise_type.synth(config.duration_s, noise_seed, config.sample_rate)
    g = mixing_gain(synth.waveform, noise, snr)
    if has_speech:
        mixture = mix_at_snr(synth.waveform, noise, snr)
    else:
        samples, clipped = hard_clip(g * noise.samples[: len(synth.waveform)])
        mixture = Waveform(samples, config.sample_rate, clipped=clipped)
    frac = mixture.clipped / len(mixture)
    if frac > config.max_clip_fraction:
        raise DegenerateSignalError(
            f"clip {index}: {frac:.2%} of samples clipped (limit {config.max_clip_fraction:.0%})"
        )
    return ClipSynthesis(
        clip_id=clip_id_for(index),
        speech=synth.waveform if has_speech else None,
        reference_speech=synth.waveform,
        noise=noise,
        noise_type=noise_type,
        snr_db=snr,
        gain=g,
        mixture=mixture,
        intervals=synth.intervals if has_speech else [],
    )


def balanced_split(
    clip_labels: Mapping[str, Iterable[str]], heldout_fraction: float, seed: int
) -> Dict[str, str]:
    """Label-balanced train/held-out split by per-label round-robin dealing.

    Labels are visited rarest first.  Each label's still-unassigned clips are
    shuffled and dealt so that the label's held-out share tracks
    ``heldout_fraction`` (rounded, at least one clip once a label has 10).
    This is a simplification of iterative stratification.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5B11]))
    labels_of = {cid: frozenset(ls) for cid, ls in clip_labels.items()}
    by_label: Dict[str, List[str]] = {}
    for cid, ls in labels_of.items():
        for name in ls:
            by_label.setdefault(name, []).append(cid)
    assignment: Dict[str, str] = {}
    for name in sorted(by_label, key=lambda k: (len(by_label[k]), k)):
        members = by_label[name]
        target = int(np.floor(len(members) * heldout_fraction + 0.5))
        if heldout_fraction > 0 and len(members) >= 10:
            target = max(target, 1)
        target = min(target, len(members) - 1) if len(members) > 1 else target
        have = sum(1 for cid in members if assignment.get(cid) == "heldout")
        pending = [cid for cid in members if cid not in assignment]
        rng.shuffle(pending)
        need = max(0, target - have)
        # deal held-out slots evenly through the shuffled order
        for k, cid in enumerate(pending):
            due = int(np.floor((k + 1) * need / len(pending))) - int(np.floor(k * need / len(pending)))
            assignment[cid] = "heldout" if due else "train"
    for cid in labels_of:
        assignment.setdefault(cid, "train")
    return {cid: assignment[cid] for cid in clip_labels}


@dataclass
class CorpusSummary:
    out_dir: str
    manifest_path: str
    annotations_path: str
    split_path: str
    num_clips: int
    num_train: int
    num_heldout: int
    label_counts: Dict[str, int] = field(default_factory=dict)

    def lines(self) -> List[str]:
        return [
            f"manifest\t{self.manifest_path}",
            f"annotations\t{self.annotations_path}",
            f"split\t{self.split_path}",
            f"clips\t{self.num_clips}\ttrain\t{self.num_train}\theldout\t{self.num_heldout}",
        ]


def _synth_and_write(args):
    config, index, audio_dir = args
    clip = synth_clip(config, index)
    write_wav(os.path.join(audio_dir, clip.clip_id + ".wav"), clip.mixture)
    return clip.record(f"audio/{clip.clip_id}.wav"), clip.mixture.duration


def build_corpus(config: CorpusConfig, out_dir, workers: int = 1) -> CorpusSummary:
    """Write WAVs, ``manifest.tsv``, ``annotations.tsv`` and ``split.tsv``."""
    config.validate()
    out_dir = os.fspath(out_dir)
    audio_dir = os.path.join(out_dir, "audio")
    os.makedirs(audio_dir, exist_ok=True)
    jobs = [(config, i, audio_dir) for i in range(config.num_clips)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_synth_and_write, jobs))
    else:
        results = [_synth_and_write(j) for j in jobs]

    records = []
    for record, duration in results:
        record.validate(duration)
        records.append(record)

    split = balanced_split(
        {r.clip_id: r.clip_labels for r in records}, config.heldout_fraction, config.seed
    )
    manifest_path = os.path.join(out_dir, "manifest.tsv")
    annotations_path = os.path.join(out_dir, "annotations.tsv")
    split_path = os.path.join(out_dir, "split.tsv")
    tsv.write_manifest(
        manifest_path,
        (tsv.ManifestRow(r.clip_id, r.audio_path, tuple(r.clip_labels), r.snr_db) for r in records),
    )
    tsv.write_annotations(
        annotations_path,
        {r.clip_id: sorted(r.frame_annotations, key=lambda e: (e[0], e[1], e[2])) for r in records},
    )
    tsv.write_split(split_path, split)

    counts: Dict[str, int] = {}
    for r in records:
        for name in r.clip_labels:
            counts[name] = counts.get(name, 0) + 1
    n_held = sum(1 for v in split.values() if v == "heldout")
    logger.info("wrote %d clips to %s", len(records), out_dir)
    return CorpusSummary(
        out_dir=out_dir,
        manifest_path=manifest_path,
        annotations_path=annotations_path,
        split_path=split_path,
        num_clips=len(records),
        num_train=len(records) - n_held,
        num_heldout=n_held,
        label_counts=dict(sorted(counts.items())),
    )


def load_records(manifest_path, annotations_path) -> List[ClipRecord]:
    """Join a manifest with its annotation file."""
    events = tsv.read_annotations(annotations_path)
    out = []
    for row in tsv.read_manifest(manifest_path):
        out.append(
            ClipRecord(
                clip_id=row.clip_id,
                audio_path=tsv.resolve_audio_path(manifest_path, row.audio_path),
                clip_labels=frozenset(row.labels),
                frame_annotations=list(events.get(row.clip_id, [])),
                snr_db=row.snr_db,
            )
        )
    return out
