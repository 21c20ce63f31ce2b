"""Cross-entropy training from clip-level (MIL) or frame-level labels.

Clip-level training pools frame probabilities with linear softmax and
compares the clip vector with multi-hot clip labels.  Frame-level training
compares every valid frame with its frame labels; padded frames are masked
out of the loss.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import ClipRecord, LabelVocabulary, NOISE, SPEECH, binary_labels
from .errors import DegenerateBatchError, InvalidArgumentError, NumericFailure
from .model import CrnnModel, save_checkpoint
from .postprocess import segments_to_frames

logger = logging.getLogger(__name__)

CLIP_LEVEL = "clip_level"
FRAME_LEVEL = "frame_level"
BCE_EPS = 1e-7


@dataclass
class TrainConfig:
    regime: str = CLIP_LEVEL
    batch_size: Optional[int] = None  # 64 clip-level, 20 frame-level
    optimizer: Optional[str] = None  # adam clip-level, sgd frame-level
    learning_rate: Optional[float] = None  # 1e-4 adam, 1e-5 sgd
    early_stop_patience: int = 7
    max_epochs: int = 100
    seed: int = 42
    freeze_bn: bool = False
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.regime not in (CLIP_LEVEL, FRAME_LEVEL):
            raise InvalidArgumentError(f"unknown regime {self.regime!r}")
        clip = self.regime == CLIP_LEVEL
        if self.batch_size is None:
            self.batch_size = 64 if clip else 20
        if self.optimizer is None:
            self.optimizer = "adam" if clip else "sgd"
        if self.learning_rate is None:
            self.learning_rate = 1e-4 if self.optimizer == "adam" else 1e-5
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidArgumentError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidArgumentError("learning_rate must be non-negative")
        if self.early_stop_patience < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("patience and max_epochs must be >= 1")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "TrainConfig":
        """Build from flat key/value strings (e.g. a config file)."""
        kinds = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in kinds:
                raise InvalidArgumentError(f"unknown training option {key!r}")
            kwargs[key] = _coerce(key, raw)
        return cls(**kwargs)


_INT_KEYS = {"batch_size", "early_stop_patience", "max_epochs", "seed"}
_FLOAT_KEYS = {"learning_rate", "adam_eps"}


def _coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    if key in _INT_KEYS:
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "freeze_bn":
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if key == "adam_betas":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw.strip()


# -- loss ----------------------------------------------------------------------


def bce_loss_and_grad(targets, predictions, mask=None) -> Tuple[float, np.ndarray]:
    """Mean binary cross-entropy over unmasked terms and its gradient wrt predictions.

    ``mask`` broadcasts against the predictions (e.g. (B, T, 1) frame validity).
    Predictions are clamped to [1e-7, 1 - 1e-7]; the clamp passes no gradient.
    """
    y_hat = np.asarray(targets, dtype=np.float64)
    y_raw = np.asarray(predictions)
    if y_hat.shape != y_raw.shape:
        raise InvalidArgumentError(f"shape mismatch {y_hat.shape} vs {y_raw.shape}")
    y = np.clip(y_raw.astype(np.float64), BCE_EPS, 1.0 - BCE_EPS)
    w = np.ones_like(y) if mask is None else np.broadcast_to(np.asarray(mask, dtype=np.float64), y.shape)
    n = float(w.sum())
    if n <= 0:
        raise DegenerateBatchError("every loss term is masked")
    terms = -(y_hat * np.log(y) + (1.0 - y_hat) * np.log1p(-y))
    loss = float((terms * w).sum() / n)
    inside = (y_raw > BCE_EPS) & (y_raw < 1.0 - BCE_EPS)
    grad = -(y_hat / y - (1.0 - y_hat) / (1.0 - y)) * w * inside / n
    return loss, grad.astype(y_raw.dtype if y_raw.dtype.kind == "f" else np.float64)


def bce_loss(targets, predictions, mask=None) -> float:
    return bce_loss_and_grad(targets, predictions, mask)[0]


# -- optimizers ----------------------------------------------------------------


def _check_grads(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFailure(f"non-finite gradient for parameter {name}", where=name)


def sgd_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
    """In place: ``theta <- theta - lr * g``."""
    _check_grads(grads)
    for name, g in grads.items():
        params[name] -= np.asarray(lr * g, dtype=params[name].dtype)


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction."""
    _check_grads(grads)
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name], dtype=np.float64)
            state.v[name] = np.zeros_like(params[name], dtype=np.float64)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params[name] -= update.astype(params[name].dtype)


# -- batching ------------------------------------------------------------------


def balanced_draws(clip_labels: Mapping[str, Iterable[str]], batch_size: int, seed: int,
                   epoch: int = 0, num_batches: Optional[int] = None) -> Iterator[List[Tuple[str, str]]]:
    """Batches of ``(label, clip_id)`` draws, cycling through labels round-robin.

    Each label keeps its own shuffled clip queue (reshuffled when exhausted),
    so within a batch any two labels are drawn a number of times differing by
    at most one.  An epoch has ``ceil(num_clips / batch_size)`` batches.
    """
    if not clip_labels:
        raise InvalidArgumentError("empty manifest")
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    members: Dict[str, List[str]] = {}
    for cid, labels in clip_labels.items():
        for name in labels:
            members.setdefault(name, []).append(cid)
    if not members:
        raise InvalidArgumentError("no labelled clips")
    labels = sorted(members)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    queues: Dict[str, List[str]] = {}

    def take(name: str) -> str:
        if not queues.get(name):
            order = list(members[name])
            rng.shuffle(order)
            queues[name] = order
        return queues[name].pop()

    if num_batches is None:
        num_batches = -(-len(clip_labels) // batch_size)
    slot = 0
    for _ in range(num_batches):
        batch = []
        for _ in range(batch_size):
            name = labels[slot % len(labels)]
            slot += 1
            batch.append((name, take(name)))
        yield batch


def balanced_batch_sampler(clip_labels: Mapping[str, Iterable[str]], batch_size: int, seed: int,
                           epoch: int = 0, num_batches: Optional[int] = None) -> Iterator[List[str]]:
    """Clip-id batches with evenly distributed labels (see :func:`balanced_draws`)."""
    for batch in balanced_draws(clip_labels, batch_size, seed, epoch, num_batches):
        yield [cid for _, cid in batch]


# -- data ----------------------------------------------------------------------


@dataclass
class TrainingItem:
    clip_id: str
    features: np.ndarray  # (T, n_mels)
    clip_target: np.ndarray  # (E,)
    frame_target: np.ndarray  # (T, E)
    labels: Tuple[str, ...]  # manifest labels, used for balanced sampling


def vocabulary_for(records: Sequence[ClipRecord], binary: bool) -> LabelVocabulary:
    if binary:
        return LabelVocabulary.binary()
    labels = set()
    for r in records:
        labels.update(r.clip_labels)
    labels.add(SPEECH)
    return LabelVocabulary.from_labels(labels)


def make_item(record: ClipRecord, features: np.ndarray, vocabulary: LabelVocabulary,
              binary: bool, frame_hop_s: float = 0.020) -> TrainingItem:
    T = features.shape[0]
    frame_target = np.zeros((T, len(vocabulary)), dtype=np.float32)
    for onset, offset, label in record.frame_annotations:
        name = (SPEECH if label == SPEECH else NOISE) if binary else label
        col = vocabulary.index(name)
        frame_target[:, col] = np.maximum(
            frame_target[:, col], segments_to_frames([(onset, offset)], T, frame_hop_s))
    targets = binary_labels(record.clip_labels) if binary else frozenset(record.clip_labels)
    return TrainingItem(
        clip_id=record.clip_id,
        features=np.asarray(features, dtype=np.float32),
        clip_target=vocabulary.multi_hot(targets),
        frame_target=frame_target,
        labels=tuple(sorted(record.clip_labels)),
    )


@dataclass
class Batch:
    features: np.ndarray  # (B, T_max, n_mels), zero padded
    lengths: np.ndarray  # (B,)
    clip_targets: np.ndarray  # (B, E)
    frame_targets: np.ndarray  # (B, T_max, E)
    mask: np.ndarray  # (B, T_max) bool, False on padding


def pad_batch(items: Sequence[TrainingItem], pad_to: Optional[int] = None) -> Batch:
    lengths = np.array([it.features.shape[0] for it in items])
    T = int(max(lengths.max(), pad_to or 0))
    B, F = len(items), items[0].features.shape[1]
    E = items[0].clip_target.shape[0]
    feats = np.zeros((B, T, F), dtype=np.float32)
    frames = np.zeros((B, T, E), dtype=np.float32)
    for b, it in enumerate(items):
        feats[b, : lengths[b]] = it.features
        frames[b, : lengths[b]] = it.frame_target
    mask = np.arange(T)[None, :] < lengths[:, None]
    return Batch(feats, lengths, np.stack([it.clip_target for it in items]), frames, mask)


def batch_loss_and_grads(model: CrnnModel, batch: Batch, regime: str, training: bool = True,
                         bn_momentum: Optional[float] = None):
    """Forward, loss and parameter gradients for one padded batch."""
    probs, clip = model.forward_batch(batch.features, batch.lengths, training=training,
                                      bn_momentum=bn_momentum)
    if regime == CLIP_LEVEL:
        loss, dclip = bce_loss_and_grad(batch.clip_targets, clip)
        grads = model.backward(dclip=dclip)
    else:
        loss, dprobs = bce_loss_and_grad(batch.frame_targets, probs, batch.mask[:, :, None])
        grads = model.backward(dprobs=dprobs)
    return loss, grads


def heldout_loss(model: CrnnModel, items: Sequence[TrainingItem], regime: str) -> float:
    """Criterion on held-out clips: eval mode, batch size 1, all terms pooled."""
    total, count = 0.0, 0
    for it in items:
        probs, clip = model.forward_batch(it.features[None], training=False)
        if regime == CLIP_LEVEL:
            loss = bce_loss(it.clip_target[None], clip)
            n = clip.size
        else:
            loss = bce_loss(it.frame_target[None], probs)
            n = probs.size
        total += loss * n
        count += n
    return total / count


# -- early stopping ------------------------------------------------------------


class EarlyStopping:
    """Stop once the held-out loss has not strictly decreased for ``patience`` epochs."""

    def __init__(self, patience: int = 7):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def simulate_early_stopping(losses: Sequence[float], patience: int = 7) -> Tuple[int, int]:
    """(last epoch run, best epoch) for a sequence of held-out losses, epochs 1-based."""
    stopper = EarlyStopping(patience)
    epoch = 0
    for epoch, loss in enumerate(losses, start=1):
        if stopper.update(epoch, loss):
            break
    return epoch, stopper.best_epoch


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    model: CrnnModel
    log: List[dict]
    best_epoch: int
    stopped_early: bool


def train(model: CrnnModel, train_items: Sequence[TrainingItem], heldout_items: Sequence[TrainingItem],
          cfg: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    """Train ``model`` in place and return the best-held-out copy.

    Batches come from :func:`balanced_batch_sampler` over each item's labels.
    The training log (one dict per epoch) is also written as JSON lines to
    ``log_path`` when given; the best model is saved to ``checkpoint_path``.
    """
    if not train_items or not heldout_items:
        raise InvalidArgumentError("training needs non-empty train and held-out splits")
    by_id = {it.clip_id: it for it in train_items}
    clip_labels = {it.clip_id: it.labels for it in train_items}
    stopper = EarlyStopping(cfg.early_stop_patience)
    adam = AdamState()
    bn_momentum = 0.0 if cfg.freeze_bn else None
    best = model.copy()
    log: List[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8", newline="\n") if log_path else None
    stopped = False
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            started = time.perf_counter()
            losses = []
            for ids in balanced_batch_sampler(clip_labels, cfg.batch_size, cfg.seed, epoch):
                batch = pad_batch([by_id[c] for c in ids])
                try:
                    loss, grads = batch_loss_and_grads(model, batch, cfg.regime, True, bn_momentum)
                    if not math.isfinite(loss):
                        raise NumericFailure("training loss is not finite", where="loss")
                    if cfg.optimizer == "adam":
                        adam_step(model.params, grads, adam, cfg.learning_rate, cfg.adam_betas, cfg.adam_eps)
                    else:
                        sgd_step(model.params, grads, cfg.learning_rate)
                except NumericFailure as exc:
                    if checkpoint_path:
                        save_checkpoint(best, checkpoint_path)
                    raise NumericFailure(f"training diverged in epoch {epoch}: {exc}",
                                         where=exc.where, model=best) from exc
                losses.append(loss)
            held = heldout_loss(model, heldout_items, cfg.regime)
            if not math.isfinite(held):
                if checkpoint_path:
                    save_checkpoint(best, checkpoint_path)
                raise NumericFailure(f"held-out loss diverged in epoch {epoch}", where="heldout", model=best)
            stop = stopper.update(epoch, held)
            if stopper.best_epoch == epoch:
                best = model.copy()
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "heldout_loss": float(held),
                "lr": cfg.learning_rate,
                "seconds": round(time.perf_counter() - started, 3),
            }
            log.append(record)
            logger.info("epoch %d train %.5f heldout %.5f", epoch, record["train_loss"], held)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if stop:
                stopped = True
                break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(best, checkpoint_path)
    return TrainResult(best, log, stopper.best_epoch, stopped)
