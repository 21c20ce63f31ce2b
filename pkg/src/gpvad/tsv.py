"""Tab-separated file formats shared across the pipeline.

Three DCASE-style tables are used:

* clip manifest: ``clip_id  audio_path  labels  snr_db`` (labels ``;``-joined)
* event annotations: ``clip_id  onset  offset  event_label`` (seconds, 3 decimals)
* split file: ``clip_id  split``

Annotation rows are also the prediction format, with the label fixed to Speech.
"""
from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .errors import ParseError

MANIFEST_HEADER = ("clip_id", "audio_path", "labels", "snr_db")
ANNOTATION_HEADER = ("clip_id", "onset", "offset", "event_label")
SPLIT_HEADER = ("clip_id", "split")
LABEL_SEP = ";"

Event = Tuple[float, float, str]


@dataclass
class ManifestRow:
    clip_id: str
    audio_path: str
    labels: Tuple[str, ...]
    snr_db: Optional[float]


def format_time(t: float) -> str:
    return f"{t:.3f}"


def format_snr(snr: Optional[float]) -> str:
    if snr is None:
        return "nan"
    return f"{snr:g}"


def _write_table(path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    # newline="\n" keeps files byte-identical across platforms
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")


def _read_table(path, header: Sequence[str]) -> List[Tuple[int, List[str]]]:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            first = next(reader)
        except StopIteration:
            raise ParseError("empty file, expected a header", path, 1)
        if tuple(first) != tuple(header):
            raise ParseError(
                f"bad header {first!r}, expected {list(header)!r}", path, 1
            )
        for lineno, fields in enumerate(reader, start=2):
            if not fields:
                continue
            if len(fields) != len(header):
                raise ParseError(
                    f"expected {len(header)} fields, got {len(fields)}", path, lineno
                )
            rows.append((lineno, fields))
    return rows


def _parse_float(text: str, path, lineno: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} {text!r}", path, lineno) from None
    return value


# -- clip manifest ---------------------------------------------------------


def write_manifest(path, rows: Iterable[ManifestRow]) -> None:
    _write_table(
        path,
        MANIFEST_HEADER,
        (
            (r.clip_id, r.audio_path, LABEL_SEP.join(sorted(r.labels)), format_snr(r.snr_db))
            for r in rows
        ),
    )


def read_manifest(path) -> List[ManifestRow]:
    out = []
    for lineno, (clip_id, audio_path, labels, snr) in _read_table(path, MANIFEST_HEADER):
        snr_value = _parse_float(snr, path, lineno, "snr_db")
        out.append(
            ManifestRow(
                clip_id=clip_id,
                audio_path=audio_path,
                labels=tuple(l for l in labels.split(LABEL_SEP) if l),
                snr_db=None if math.isnan(snr_value) else snr_value,
            )
        )
    return out


def resolve_audio_path(manifest_path, audio_path: str) -> str:
    """Manifest audio paths are relative to the manifest's directory."""
    if os.path.isabs(audio_path):
        return audio_path
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), audio_path)


# -- event annotations -----------------------------------------------------


def write_annotations(path, events: Dict[str, Sequence[Event]]) -> None:
    """Write ``{clip_id: [(onset, offset, label), ...]}`` in insertion order."""
    rows = []
    for clip_id, evs in events.items():
        for onset, offset, label in evs:
            rows.append((clip_id, format_time(onset), format_time(offset), label))
    _write_table(path, ANNOTATION_HEADER, rows)


def read_annotations(path) -> "OrderedDict[str, List[Event]]":
    out: "OrderedDict[str, List[Event]]" = OrderedDict()
    for lineno, (clip_id, onset, offset, label) in _read_table(path, ANNOTATION_HEADER):
        on = _parse_float(onset, path, lineno, "onset")
        off = _parse_float(offset, path, lineno, "offset")
        if not (0.0 <= on < off):
            raise ParseError(f"invalid segment ({on}, {off})", path, lineno)
        out.setdefault(clip_id, []).append((on, off, label))
    return out


# -- split file ------------------------------------------------------------


def write_split(path, split: Dict[str, str]) -> None:
    _write_table(path, SPLIT_HEADER, ((k, v) for k, v in split.items()))


def read_split(path) -> "OrderedDict[str, str]":
    out: "OrderedDict[str, str]" = OrderedDict()
    for _, (clip_id, name) in _read_table(path, SPLIT_HEADER):
        out[clip_id] = name
    return out


# -- per-frame score dump ----------------------------------------------------

SCORES_HEADER = ("clip_id", "frame", "speech_prob")


def write_scores(path, scores: Dict[str, Sequence[float]]) -> None:
    rows = []
    for clip_id, values in scores.items():
        for i, v in enumerate(values):
            rows.append((clip_id, str(i), f"{float(v):.6f}"))
    _write_table(path, SCORES_HEADER, rows)


def read_scores(path) -> "OrderedDict[str, List[float]]":
    out: "OrderedDict[str, List[float]]" = OrderedDict()
    for lineno, (clip_id, frame, prob) in _read_table(path, SCORES_HEADER):
        values = out.setdefault(clip_id, [])
        if frame != str(len(values)):
            raise ParseError(f"frame index {frame!r} out of order", path, lineno)
        value = _parse_float(prob, path, lineno, "speech_prob")
        if not 0.0 <= value <= 1.0:
            raise ParseError(f"probability {value} outside [0, 1]", path, lineno)
        values.append(value)
    return out
