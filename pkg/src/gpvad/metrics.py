"""Frame-level (F1-macro/micro, AUC, FER) and segment-level (Event-F1) VAD metrics.

Frames are a binary speech/non-speech task.  Corpus results pool every
clip's frames and every clip's event counts before computing a score.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata

from .corpus import SPEECH
from .errors import InvalidArgumentError, UndefinedMetricError
from .postprocess import segments_to_frames

logger = logging.getLogger(__name__)

COLLAR_S = 0.2
DURATION_TOLERANCE = 0.2


def _pair(reference, predictions):
    ref = np.asarray(reference).astype(bool).ravel()
    pred = np.asarray(predictions).astype(bool).ravel()
    if ref.size != pred.size:
        raise InvalidArgumentError(f"length mismatch: {ref.size} reference vs {pred.size} predicted frames")
    if ref.size == 0:
        raise InvalidArgumentError("no frames to evaluate")
    return ref, pred


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def frame_f1(reference, predictions) -> Tuple[float, float]:
    """(F1-macro, F1-micro) in percent over the classes {speech, non-speech}."""
    ref, pred = _pair(reference, predictions)
    tp = int(np.count_nonzero(ref & pred))
    tn = int(np.count_nonzero(~ref & ~pred))
    fp = int(np.count_nonzero(~ref & pred))
    fn = int(np.count_nonzero(ref & ~pred))
    speech = _f1(tp, fp, fn)
    nonspeech = _f1(tn, fn, fp)
    # pooled over both classes every error is one FP and one FN
    micro = _f1(tp + tn, fp + fn, fn + fp)
    return 100.0 * (speech + nonspeech) / 2.0, 100.0 * micro


def frame_fer(reference, predictions) -> float:
    ref, pred = _pair(reference, predictions)
    return 100.0 * np.count_nonzero(ref != pred) / ref.size


def frame_auc(reference, scores) -> float:
    """ROC AUC in percent via the Mann-Whitney U statistic (ties count 1/2)."""
    ref = np.asarray(reference).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if ref.size != s.size:
        raise InvalidArgumentError("reference and scores differ in length")
    n_pos = int(ref.sum())
    n_neg = ref.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both speech and non-speech reference frames")
    ranks = rankdata(s, method="average")
    u = math.fsum(ranks[ref]) - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u / (n_pos * n_neg)


# -- Event-F1 ------------------------------------------------------------------


def compatible(ref, pred, collar_s: float = COLLAR_S, dur_tolerance: float = DURATION_TOLERANCE) -> bool:
    """Onset within the collar, offset within max(collar, tolerance * reference duration)."""
    r_on, r_off = ref[0], ref[1]
    p_on, p_off = pred[0], pred[1]
    off_tol = max(collar_s, dur_tolerance * (r_off - r_on))
    # tiny slack so decimal boundaries such as 0.2 are not lost to rounding
    eps = 1e-9
    return abs(p_on - r_on) <= collar_s + eps and abs(p_off - r_off) <= off_tol + eps


def _compat_matrix(refs, preds, collar_s, dur_tolerance) -> np.ndarray:
    return np.array(
        [[compatible(r, p, collar_s, dur_tolerance) for p in preds] for r in refs], dtype=bool
    ).reshape(len(refs), len(preds))


def greedy_matches(refs, preds, collar_s=COLLAR_S, dur_tolerance=DURATION_TOLERANCE) -> List[Tuple[int, int]]:
    """References in onset order each take the earliest-onset unmatched compatible prediction."""
    r_order = sorted(range(len(refs)), key=lambda i: (refs[i][0], refs[i][1]))
    p_order = sorted(range(len(preds)), key=lambda j: (preds[j][0], preds[j][1]))
    used = set()
    pairs = []
    for i in r_order:
        for j in p_order:
            if j not in used and compatible(refs[i], preds[j], collar_s, dur_tolerance):
                used.add(j)
                pairs.append((i, j))
                break
    return pairs


def optimal_match_count(refs, preds, collar_s=COLLAR_S, dur_tolerance=DURATION_TOLERANCE) -> int:
    """Size of a maximum bipartite matching over the compatibility graph."""
    if not refs or not preds:
        return 0
    C = _compat_matrix(refs, preds, collar_s, dur_tolerance)
    rows, cols = linear_sum_assignment(C.astype(np.float64), maximize=True)
    return int(C[rows, cols].sum())


def event_counts(refs, preds, collar_s=COLLAR_S, dur_tolerance=DURATION_TOLERANCE,
                 matching: str = "greedy") -> Tuple[int, int, int]:
    """(TP, FP, FN) for one clip."""
    if matching == "greedy":
        tp = len(greedy_matches(refs, preds, collar_s, dur_tolerance))
    elif matching == "optimal":
        tp = optimal_match_count(refs, preds, collar_s, dur_tolerance)
    else:
        raise InvalidArgumentError(f"unknown matching {matching!r}")
    return tp, len(preds) - tp, len(refs) - tp


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """Percent F1; two empty segment lists agree perfectly (100)."""
    if tp + fp + fn == 0:
        return 100.0
    return 100.0 * _f1(tp, fp, fn)


def event_f1(reference_segments, predicted_segments, collar_s: float = COLLAR_S,
             dur_tolerance: float = DURATION_TOLERANCE, matching: str = "greedy") -> float:
    return f1_from_counts(*event_counts(list(reference_segments), list(predicted_segments),
                                        collar_s, dur_tolerance, matching))


# -- corpus evaluation ---------------------------------------------------------------


@dataclass
class EvalReport:
    f1_macro: float
    f1_micro: float
    auc: Optional[float]
    fer: float
    event_f1: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


TABLE_COLUMNS = ("F1-macro(%)", "F1-micro(%)", "AUC(%)", "FER(%)", "Event-F1(%)")


def render_table(rows: Sequence[Tuple[str, EvalReport]]) -> str:
    """Plain-text table in the five-metric layout, two decimals per cell."""
    name_w = max([len("Model")] + [len(n) for n, _ in rows])
    header = "Model".ljust(name_w) + " | " + " | ".join(TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for name, r in rows:
        cells = [r.f1_macro, r.f1_micro, r.auc, r.fer, r.event_f1]
        text = [("n/a" if v is None else f"{v:.2f}").rjust(len(c)) for v, c in zip(cells, TABLE_COLUMNS)]
        lines.append(name.ljust(name_w) + " | " + " | ".join(text))
    return "\n".join(lines)


def speech_segments(events: Iterable) -> List[Tuple[float, float]]:
    return sorted((e[0], e[1]) for e in events if len(e) < 3 or e[2] == SPEECH)


def evaluate(reference: Mapping[str, Sequence], predictions: Mapping[str, Sequence],
             num_frames: Mapping[str, int], scores: Optional[Mapping[str, Sequence[float]]] = None,
             frame_hop_s: float = 0.020, collar_s: float = COLLAR_S,
             dur_tolerance: float = DURATION_TOLERANCE, matching: str = "greedy") -> EvalReport:
    """Score predictions against reference annotations over a whole corpus.

    ``reference`` and ``predictions`` map clip ids to event tuples
    ``(onset, offset[, label])``; only Speech events count.  Every reference
    clip is scored; a clip with no predicted segments counts as all
    non-speech.  ``num_frames`` gives each clip's frame count; with ``scores``
    present, AUC is computed from the pooled frame scores.
    """
    unknown = [c for c in predictions if c not in reference]
    if unknown:
        raise InvalidArgumentError(f"predicted clips missing from the reference: {unknown[:5]}")
    refs_all, preds_all, scores_all = [], [], []
    tp = fp = fn = 0
    for clip_id in sorted(reference):
        if clip_id not in num_frames:
            raise InvalidArgumentError(f"no frame count for clip {clip_id!r}")
        T = int(num_frames[clip_id])
        ref_segs = speech_segments(reference[clip_id])
        pred_segs = speech_segments(predictions.get(clip_id, ()))
        if scores is not None and clip_id not in scores and clip_id not in predictions:
            logger.warning("clip %s has no prediction; scored as non-speech", clip_id)
        refs_all.append(segments_to_frames(ref_segs, T, frame_hop_s))
        preds_all.append(segments_to_frames(pred_segs, T, frame_hop_s))
        if scores is not None:
            s = np.asarray(scores.get(clip_id, np.zeros(T)), dtype=np.float64)
            if s.size != T:
                raise InvalidArgumentError(f"clip {clip_id}: {s.size} scores for {T} frames")
            scores_all.append(s)
        a, b, c = event_counts(ref_segs, pred_segs, collar_s, dur_tolerance, matching)
        tp, fp, fn = tp + a, fp + b, fn + c
    if not refs_all:
        raise InvalidArgumentError("empty reference")
    ref = np.concatenate(refs_all)
    pred = np.concatenate(preds_all)
    macro, micro = frame_f1(ref, pred)
    auc = None
    if scores is not None:
        try:
            auc = frame_auc(ref, np.concatenate(scores_all))
        except UndefinedMetricError:
            logger.warning("AUC undefined: reference frames contain a single class")
    return EvalReport(
        f1_macro=macro,
        f1_micro=micro,
        auc=auc,
        fer=frame_fer(ref, pred),
        event_f1=f1_from_counts(tp, fp, fn),
    )
