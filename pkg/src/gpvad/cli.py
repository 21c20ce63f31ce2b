"""Command-line entry point: synth, extract, train, infer, eval, plot.

Exit codes: 0 success, 2 usage or input error, 3 corrupt data or model,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import corpus, features, metrics, model, postprocess, training, tsv
from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    DegenerateBatchError,
    DegenerateSignalError,
    InvalidArgumentError,
    NumericFailure,
    ParseError,
    UndefinedMetricError,
)

logger = logging.getLogger("gpvad")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_NUMERIC = 4

DEFAULT_SEED = 42
SEED_ENV = "GPVAD_SEED"

MODELS = {
    # model name -> (regime, binary vocabulary)
    "gpvb": (training.CLIP_LEVEL, True),
    "gpvf": (training.CLIP_LEVEL, False),
    "vadc": (training.FRAME_LEVEL, True),
}
REGIMES = {"clip": training.CLIP_LEVEL, "frame": training.FRAME_LEVEL}


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def read_config_file(path) -> Dict[str, str]:
    """Flat ``key = value`` text; blank lines and ``#`` comments are ignored."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected key = value", path, lineno)
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ParseError("empty key", path, lineno)
            values[key] = value
    return values


def parse_snr_range(text: str):
    """``low:high:step`` in dB."""
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected low:high:step, e.g. 5:15:1")
    try:
        low, high, step = (float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad SNR range {text!r}") from None
    return low, high, step


def _require_file(path, what: str) -> None:
    if not path or not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


# -- synth / extract -------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else default_seed()
    low, high, step = args.snr
    cfg = corpus.CorpusConfig(
        num_clips=args.clips, duration_s=args.duration, snr_low=low, snr_high=high,
        snr_step=step, heldout_fraction=args.heldout, seed=seed,
    )
    if os.path.exists(args.out) and not os.path.isdir(args.out):
        raise UsageError(f"output path is not a directory: {args.out}")
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {args.out}: {exc}") from None
    summary = corpus.build_corpus(cfg, args.out, workers=args.workers)
    print("\n".join(summary.lines()))
    return EXIT_OK


def cmd_extract(args) -> int:
    _require_file(args.manifest, "manifest")
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), "features")
    index = features.extract_manifest(args.manifest, out)
    print(f"index\t{index}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------


def _load_items(records, index_path, vocabulary, binary) -> Dict[str, training.TrainingItem]:
    index = features.read_index(index_path)
    items = {}
    for rec in records:
        if rec.clip_id not in index:
            raise InvalidArgumentError(f"clip {rec.clip_id} missing from feature index")
        fm = features.read_features(index[rec.clip_id][0])
        items[rec.clip_id] = training.make_item(rec, fm.values, vocabulary, binary, fm.frame_hop_s)
    return items


def _corpus_file(args, attr: str, name: str) -> str:
    path = getattr(args, attr) or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), name)
    _require_file(path, name)
    return path


def cmd_train(args) -> int:
    regime, binary = MODELS[args.model]
    if args.regime is not None and REGIMES[args.regime] != regime:
        raise UsageError(f"model {args.model} requires --regime "
                         f"{'clip' if regime == training.CLIP_LEVEL else 'frame'}")
    _require_file(args.manifest, "manifest")
    _require_file(args.index, "feature index")
    annotations = _corpus_file(args, "annotations", "annotations.tsv")
    split_path = _corpus_file(args, "split", "split.tsv")

    options: Dict[str, object] = {}
    if args.config:
        _require_file(args.config, "config file")
        options.update(read_config_file(args.config))
    options["regime"] = regime
    for key in ("batch_size", "optimizer", "learning_rate", "max_epochs", "early_stop_patience"):
        value = getattr(args, key)
        if value is not None:
            options[key] = value
    if args.seed is not None:
        options["seed"] = args.seed
    elif "seed" not in options:
        options["seed"] = default_seed()
    if args.freeze_bn:
        options["freeze_bn"] = True
    cfg = training.TrainConfig.from_mapping(options)

    records = corpus.load_records(args.manifest, annotations)
    vocabulary = training.vocabulary_for(records, binary)
    items = _load_items(records, args.index, vocabulary, binary)
    split = tsv.read_split(split_path)
    train_items = [items[c] for c in items if split.get(c) == "train"]
    held_items = [items[c] for c in items if split.get(c) == "heldout"]

    os.makedirs(args.out, exist_ok=True)
    ckpt = os.path.join(args.out, "model.ckpt")
    log_path = os.path.join(args.out, "train_log.jsonl")
    crnn = model.CrnnModel(model.CrnnConfig(num_events=len(vocabulary)), vocabulary, seed=cfg.seed)
    logger.info("training %s (%s, E=%d) on %d clips, %d held out",
                args.model, cfg.regime, len(vocabulary), len(train_items), len(held_items))
    result = training.train(crnn, train_items, held_items, cfg, log_path=log_path, checkpoint_path=ckpt)
    print(f"checkpoint\t{ckpt}")
    print(f"log\t{log_path}")
    print(f"best_epoch\t{result.best_epoch}")
    return EXIT_OK


# -- infer ---------------------------------------------------------------------


def _infer_one(job):
    crnn, clip_id, feature_path, audio_path, thresholds = job
    if feature_path is not None:
        fm = features.read_features(feature_path)
    else:
        fm = features.extract_logmel(corpus.read_wav(audio_path), clip_id=clip_id)
    probs, _ = model.forward(crnn, fm)
    segments = postprocess.extract_speech(probs, thresholds)
    return clip_id, probs.column(corpus.SPEECH), segments


def _select(clip_ids: Sequence[str], split_path: Optional[str], subset: Optional[str]) -> List[str]:
    if subset is None:
        return sorted(clip_ids)
    if not split_path:
        raise UsageError("--subset needs --split")
    _require_file(split_path, "split file")
    split = tsv.read_split(split_path)
    return sorted(c for c in clip_ids if split.get(c) == subset)


def cmd_infer(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    thresholds = postprocess.ThresholdConfig(phi_low=args.phi_low, phi_hi=args.phi_high)
    crnn = model.load_checkpoint(args.checkpoint)
    if corpus.SPEECH not in crnn.vocabulary.names:
        raise ConfigurationError("checkpoint vocabulary has no Speech event")
    if args.index:
        _require_file(args.index, "feature index")
        index = features.read_index(args.index)
        sources = {c: (p, None) for c, (p, _) in index.items()}
    elif args.manifest:
        _require_file(args.manifest, "manifest")
        sources = {r.clip_id: (None, tsv.resolve_audio_path(args.manifest, r.audio_path))
                   for r in tsv.read_manifest(args.manifest)}
    else:
        raise UsageError("give --index or --manifest")
    clip_ids = _select(list(sources), args.split, args.subset)
    jobs = [(crnn, c, sources[c][0], sources[c][1], thresholds) for c in clip_ids]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_infer_one, jobs))
    else:
        results = [_infer_one(j) for j in jobs]

    events = {cid: [(s.onset_s, s.offset_s, corpus.SPEECH) for s in segs] for cid, _, segs in results}
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    tsv.write_annotations(args.out, events)
    print(f"predictions\t{args.out}")
    if args.scores_out:
        tsv.write_scores(args.scores_out, {cid: scores for cid, scores, _ in results})
        print(f"scores\t{args.scores_out}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------


def cmd_eval(args) -> int:
    _require_file(args.reference, "reference annotations")
    _require_file(args.predictions, "predictions")
    reference = tsv.read_annotations(args.reference)
    predictions = tsv.read_annotations(args.predictions)
    scores = None
    if args.scores:
        if os.path.isfile(args.scores):
            scores = tsv.read_scores(args.scores)
        else:
            logger.warning("scores file %s not found; AUC will be null", args.scores)
    clip_ids = _select(list(reference), args.split, args.subset)
    reference = {c: reference[c] for c in clip_ids}

    if args.index:
        _require_file(args.index, "feature index")
        num_frames = {c: t for c, (_, t) in features.read_index(args.index).items()}
    elif scores is not None:
        num_frames = {c: len(v) for c, v in scores.items()}
    else:
        raise UsageError("frame counts unknown: give --index or --scores")
    report = metrics.evaluate(reference, predictions, num_frames, scores, matching=args.matching)
    print(report.to_json())
    print(metrics.render_table([(args.name, report)]))
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json() + "\n")
    return EXIT_OK


# -- plot ----------------------------------------------------------------------


def render_svg(times: np.ndarray, probs: np.ndarray, regions, phi_low: float, phi_high: float,
               title: str, width: int = 800, height: int = 300) -> str:
    """Probability curve with shaded reference speech and both threshold lines."""
    left, right, top, bottom = 50, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    t_max = float(times[-1] + (times[1] - times[0] if len(times) > 1 else 0.02)) if len(times) else 1.0

    def x(t):
        return left + pw * t / t_max

    def y(p):
        return top + ph * (1.0 - p)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="white" stroke="black"/>',
    ]
    for on, off in regions:
        parts.append(f'<rect class="reference" x="{x(on):.2f}" y="{top}" '
                     f'width="{max(x(off) - x(on), 0):.2f}" height="{ph}" fill="#cfe8cf"/>')
    points = " ".join(f"{x(t):.2f},{y(p):.2f}" for t, p in zip(times, probs))
    parts.append(f'<polyline id="speech_prob" points="{points}" fill="none" stroke="#1f4e9c"/>')
    for name, label, value in (("phi_low", "φ_low", phi_low), ("phi_high", "φ_high", phi_high)):
        yy = y(value)
        parts.append(f'<line id="{name}" x1="{left}" y1="{yy:.2f}" x2="{left + pw}" y2="{yy:.2f}" '
                     f'stroke="#c0392b" stroke-dasharray="4 3"/>')
        parts.append(f'<text id="{name}_label" x="{left + pw - 4}" y="{yy - 3:.2f}" '
                     f'text-anchor="end" font-size="11">{label} = {value:g}</text>')
    parts.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle" '
                 f'font-size="12">time (s)</text>')
    parts.append(f'<text x="12" y="{top + ph / 2}" font-size="12" '
                 f'transform="rotate(-90 12 {top + ph / 2})" text-anchor="middle">P(speech)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    _require_file(args.scores, "scores file")
    _require_file(args.reference, "reference annotations")
    scores = tsv.read_scores(args.scores)
    if args.clip not in scores:
        raise UsageError(f"clip {args.clip!r} not in {args.scores}")
    probs = np.asarray(scores[args.clip])
    hop = args.frame_hop
    times = np.arange(len(probs)) * hop
    regions = metrics.speech_segments(tsv.read_annotations(args.reference).get(args.clip, []))
    ref_frames = postprocess.segments_to_frames(regions, len(probs), hop)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_svg(times, probs, regions, args.phi_low, args.phi_high, args.clip))
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_s", "speech_prob", "reference"])
        for t, p, r in zip(times, probs, ref_frames):
            writer.writerow([f"{t:.3f}", f"{p:.6f}", int(r)])
    print(f"svg\t{args.out}")
    print(f"csv\t{csv_path}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpvad", description="Weakly supervised voice activity detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesise the toy speech/noise corpus")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--clips", type=int, default=200)
    s.add_argument("--duration", type=float, default=10.0, help="clip length in seconds")
    s.add_argument("--snr", type=parse_snr_range, default=(5.0, 15.0, 1.0), help="low:high:step in dB")
    s.add_argument("--heldout", type=float, default=0.1, help="held-out fraction")
    s.add_argument("--seed", type=int, default=None, help=f"default ${SEED_ENV} or {DEFAULT_SEED}")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="compute log-Mel features for a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default=None, help="feature directory (default: <manifest dir>/features)")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="train a CRNN from clip- or frame-level labels")
    s.add_argument("--manifest", required=True)
    s.add_argument("--index", required=True, help="feature index from 'extract'")
    s.add_argument("--annotations", default=None, help="default: annotations.tsv next to the manifest")
    s.add_argument("--split", default=None, help="default: split.tsv next to the manifest")
    s.add_argument("--model", choices=sorted(MODELS), default="gpvb")
    s.add_argument("--regime", choices=sorted(REGIMES), default=None,
                   help="must agree with --model (gpvb/gpvf: clip, vadc: frame)")
    s.add_argument("--config", default=None, help="flat key = value file of training options")
    s.add_argument("--out", required=True, help="output directory for model.ckpt and train_log.jsonl")
    s.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    s.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    s.add_argument("--lr", dest="learning_rate", type=float, default=None)
    s.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    s.add_argument("--patience", dest="early_stop_patience", type=int, default=None)
    s.add_argument("--freeze-bn", action="store_true", help="keep batch-norm running statistics fixed")
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="predict speech segments (batch size 1)")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--index", default=None, help="feature index")
    src.add_argument("--manifest", default=None, help="audio manifest (features computed on the fly)")
    s.add_argument("--split", default=None)
    s.add_argument("--subset", default=None, help="only clips with this split name, e.g. heldout")
    s.add_argument("--out", required=True, help="prediction TSV")
    s.add_argument("--scores-out", dest="scores_out", default=None, help="per-frame speech probability TSV")
    s.add_argument("--phi-low", dest="phi_low", type=float, default=0.1)
    s.add_argument("--phi-high", "--phi-hi", dest="phi_high", type=float, default=0.5)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against reference annotations")
    s.add_argument("--reference", required=True)
    s.add_argument("--predictions", required=True)
    s.add_argument("--scores", default=None, help="per-frame scores TSV (enables AUC)")
    s.add_argument("--index", default=None, help="feature index, for frame counts")
    s.add_argument("--split", default=None)
    s.add_argument("--subset", default=None)
    s.add_argument("--matching", choices=("greedy", "optimal"), default="greedy")
    s.add_argument("--name", default="model", help="row label in the table")
    s.add_argument("--json-out", dest="json_out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", help="SVG of one clip's speech probability with thresholds")
    s.add_argument("--scores", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--clip", required=True)
    s.add_argument("--out", required=True, help="SVG path; a .csv twin is written beside it")
    s.add_argument("--phi-low", dest="phi_low", type=float, default=0.1)
    s.add_argument("--phi-high", "--phi-hi", dest="phi_high", type=float, default=0.5)
    s.add_argument("--frame-hop", dest="frame_hop", type=float, default=0.020)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, InvalidArgumentError, ConfigurationError, DegenerateSignalError,
            DegenerateBatchError, UndefinedMetricError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointFormatError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
