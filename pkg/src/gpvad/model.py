"""CRNN for weakly supervised VAD.

Layout: ``n`` conv blocks (batch norm -> zero-padded 3x3 conv -> leaky ReLU
(0.1) -> L^p pooling, p=4), frequency flattened into channels, a
bidirectional GRU, a per-frame linear projection with a sigmoid, and an
upsampling step back to the input frame rate.  Clip probabilities come from
linear softmax pooling of the frame probabilities.

Forward and backward are written out in numpy; ``backward`` returns exact
gradients of the cached forward pass.
"""
from __future__ import annotations

import copy
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import layers
from .corpus import LabelVocabulary
from .errors import CheckpointFormatError, InvalidArgumentError, NumericFailure, StateError
from .features import FeatureMatrix

FORMAT_VERSION = 1
_MAGIC = b"GPVADCKP"
N_MELS = 64


@dataclass
class CrnnConfig:
    num_events: int = 2
    conv_channels: Tuple[int, ...] = (32, 64, 128)
    temporal_pool_strides: Tuple[int, ...] = (2, 2, 1)
    freq_pool_strides: Tuple[int, ...] = (4, 4, 2)
    leaky_slope: float = 0.1
    pool_p: float = 4.0
    gru_hidden: int = 128
    bidirectional: bool = True
    upsample: str = "nearest"
    n_mels: int = N_MELS

    def __post_init__(self):
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        self.temporal_pool_strides = tuple(int(s) for s in self.temporal_pool_strides)
        self.freq_pool_strides = tuple(int(s) for s in self.freq_pool_strides)
        self.validate()

    def validate(self) -> None:
        n = len(self.conv_channels)
        if n < 1 or len(self.temporal_pool_strides) != n or len(self.freq_pool_strides) != n:
            raise InvalidArgumentError("need one temporal and one frequency stride per conv block")
        if math.prod(self.temporal_pool_strides) != 4:
            raise InvalidArgumentError("temporal pool strides must multiply to 4")
        if min(self.temporal_pool_strides + self.freq_pool_strides) < 1:
            raise InvalidArgumentError("all strides must be >= 1")
        if self.num_events < 2:
            raise InvalidArgumentError("need at least two events")
        if self.pool_p < 1:
            raise InvalidArgumentError("pool_p must be >= 1")
        if self.upsample not in ("nearest", "linear"):
            raise InvalidArgumentError(f"unknown upsample mode {self.upsample!r}")

    @property
    def time_factor(self) -> int:
        return math.prod(self.temporal_pool_strides)

    def freq_out(self) -> int:
        f = self.n_mels
        for s in self.freq_pool_strides:
            f = -(-f // s)
        return f

    def gru_input(self) -> int:
        return self.freq_out() * self.conv_channels[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("conv_channels", "temporal_pool_strides", "freq_pool_strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrnnConfig":
        return cls(**d)


class ProbSequence(NamedTuple):
    values: np.ndarray  # (T, E)
    frame_hop_s: float
    vocabulary: LabelVocabulary

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.vocabulary.index(name)]


class ClipProb(NamedTuple):
    values: np.ndarray  # (E,)
    vocabulary: LabelVocabulary


def init_parameters(config: CrnnConfig, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Uniform fan-in init for conv/projection, orthogonal GRU recurrences, zero biases."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    c_in = 1
    for k, c_out in enumerate(config.conv_channels):
        pre = f"blocks.{k}"
        params[f"{pre}.bn.gamma"] = np.ones(c_in)
        params[f"{pre}.bn.beta"] = np.zeros(c_in)
        params[f"{pre}.bn.running_mean"] = np.zeros(c_in)
        params[f"{pre}.bn.running_var"] = np.ones(c_in)
        bound = 1.0 / math.sqrt(9 * c_in)
        params[f"{pre}.conv.weight"] = rng.uniform(-bound, bound, (3, 3, c_in, c_out))
        params[f"{pre}.conv.bias"] = rng.uniform(-bound, bound, c_out)
        c_in = c_out
    D, H = config.gru_input(), config.gru_hidden
    for direction in ("fwd", "bwd") if config.bidirectional else ("fwd",):
        pre = f"gru.{direction}"
        bound = 1.0 / math.sqrt(D)
        params[f"{pre}.w_ih"] = rng.uniform(-bound, bound, (3 * H, D))
        blocks = []
        for _ in range(3):
            q, r = np.linalg.qr(rng.standard_normal((H, H)))
            blocks.append(q * np.sign(np.diag(r)))
        params[f"{pre}.w_hh"] = np.concatenate(blocks, axis=0)
        params[f"{pre}.b_ih"] = np.zeros(3 * H)
        params[f"{pre}.b_hh"] = np.zeros(3 * H)
    width = H * (2 if config.bidirectional else 1)
    bound = 1.0 / math.sqrt(width)
    params["out.weight"] = rng.uniform(-bound, bound, (config.num_events, width))
    params["out.bias"] = np.zeros(config.num_events)
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericFailure(f"non-finite activation in {where}", where=where)


class CrnnModel:
    """Parameters, config and vocabulary of one CRNN.

    ``forward_batch``/``backward`` operate on padded batches; the module-level
    :func:`forward` handles a single :class:`FeatureMatrix`.
    """

    def __init__(self, config: CrnnConfig, vocabulary: Optional[LabelVocabulary] = None,
                 params: Optional[Dict[str, np.ndarray]] = None, seed: int = 0,
                 dtype=np.float32):
        if vocabulary is None:
            vocabulary = LabelVocabulary.binary() if config.num_events == 2 else None
        if vocabulary is None or len(vocabulary) != config.num_events:
            raise InvalidArgumentError("vocabulary size must equal num_events")
        self.config = config
        self.vocabulary = vocabulary
        self.params = params if params is not None else init_parameters(config, seed, dtype)
        self._cache = None

    @property
    def dtype(self):
        return self.params["out.weight"].dtype

    def trainable_names(self) -> List[str]:
        return [k for k in self.params if not k.endswith(("running_mean", "running_var"))]

    def copy(self) -> "CrnnModel":
        return CrnnModel(self.config, self.vocabulary, copy.deepcopy(self.params))

    def astype(self, dtype) -> "CrnnModel":
        return CrnnModel(self.config, self.vocabulary,
                         {k: v.astype(dtype) for k, v in self.params.items()})

    # -- forward ---------------------------------------------------------

    def forward_batch(self, x: np.ndarray, lengths: Optional[Sequence[int]] = None,
                      training: bool = False, bn_momentum: Optional[float] = None):
        """x (B, T, n_mels) zero-padded; returns frame probs (B, T, E) and clip probs (B, E).

        Entries past each item's length are 0 in the frame output.
        ``bn_momentum`` overrides the running-statistics momentum in training
        mode (0 freezes them).
        """
        cfg, P = self.config, self.params
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 3 or x.shape[2] != cfg.n_mels:
            raise InvalidArgumentError(f"expected (B, T, {cfg.n_mels}) features, got {x.shape}")
        B, T, _ = x.shape
        if T < 1:
            raise InvalidArgumentError("need at least one frame")
        lengths = np.full(B, T) if lengths is None else np.asarray(lengths, dtype=int)
        if lengths.shape != (B,) or lengths.min() < 1 or lengths.max() > T:
            raise InvalidArgumentError(f"lengths {lengths} invalid for T={T}")
        mask0 = np.arange(T)[None, :] < lengths[:, None]

        caches = {"blocks": [], "lengths": lengths, "mask0": mask0, "T": T, "training": training}
        h, mask = x[..., None], mask0
        for k in range(len(cfg.conv_channels)):
            pre = f"blocks.{k}"
            bn_out, bn_c = layers.batchnorm_forward(
                h, mask, P[f"{pre}.bn.gamma"], P[f"{pre}.bn.beta"],
                P[f"{pre}.bn.running_mean"], P[f"{pre}.bn.running_var"], training,
                momentum=0.1 if bn_momentum is None else bn_momentum)
            conv_out, conv_c = layers.conv3x3_forward(bn_out, P[f"{pre}.conv.weight"], P[f"{pre}.conv.bias"])
            pooled, new_mask, pool_c = layers.leaky_lp_pool_forward(
                conv_out, mask, cfg.temporal_pool_strides[k], cfg.freq_pool_strides[k],
                cfg.pool_p, cfg.leaky_slope)
            del conv_out
            _check_finite(pooled, f"{pre}")
            caches["blocks"].append((bn_c, conv_c, pool_c))
            h, mask = pooled, new_mask

        Bq, Tq, Fq, Cq = h.shape
        seq = h.reshape(Bq, Tq, Fq * Cq)
        outs = []
        caches["gru"] = {}
        for direction in ("fwd", "bwd") if cfg.bidirectional else ("fwd",):
            pre = f"gru.{direction}"
            hs, gc = layers.gru_forward(seq, mask, P[f"{pre}.w_ih"], P[f"{pre}.w_hh"],
                                        P[f"{pre}.b_ih"], P[f"{pre}.b_hh"], reverse=direction == "bwd")
            caches["gru"][direction] = gc
            outs.append(hs)
        g = np.concatenate(outs, axis=2) if len(outs) > 1 else outs[0]
        _check_finite(g, "gru")
        logits = g @ P["out.weight"].T + P["out.bias"]
        sub = layers.sigmoid(logits).astype(self.dtype, copy=False)
        _check_finite(sub, "output")

        sub_lengths = mask.sum(axis=1)
        probs = np.zeros((B, T, cfg.num_events), dtype=self.dtype)
        ups = []
        for b in range(B):
            M = layers.upsample_matrix(int(sub_lengths[b]), int(lengths[b]), cfg.time_factor,
                                       cfg.upsample).astype(self.dtype)
            probs[b, : lengths[b]] = M @ sub[b, : sub_lengths[b]]
            ups.append(M)
        clip, pool_c = layers.linear_softmax_forward(probs, mask0)

        caches.update(seq_shape=h.shape, seq=seq, mask_seq=mask, g=g, sub=sub,
                      ups=ups, sub_lengths=sub_lengths, pool=pool_c)
        self._cache = caches
        return probs, clip

    # -- backward --------------------------------------------------------

    def backward(self, dprobs: Optional[np.ndarray] = None,
                 dclip: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
        """Gradients of every trainable parameter given upstream gradients.

        ``dprobs`` is dL/d(frame probs) (B, T, E), ``dclip`` is dL/d(clip probs) (B, E);
        either may be omitted.  Uses (and consumes) the cache of the last forward.
        """
        c = self._cache
        if c is None:
            raise StateError("backward called without a cached forward pass")
        self._cache = None
        cfg, P = self.config, self.params
        B, T = c["mask0"].shape
        E = cfg.num_events
        dt = self.dtype
        dp = np.zeros((B, T, E), dtype=dt)
        if dprobs is not None:
            dp += np.asarray(dprobs, dtype=dt) * c["mask0"][:, :, None]
        if dclip is not None:
            dp += layers.linear_softmax_backward(np.asarray(dclip, dtype=dt), c["pool"])

        grads: Dict[str, np.ndarray] = {}
        sub = c["sub"]
        dsub = np.zeros_like(sub)
        for b in range(B):
            L, Ls = c["lengths"][b], c["sub_lengths"][b]
            dsub[b, :Ls] = c["ups"][b].T @ dp[b, :L]
        dlogits = dsub * sub * (1.0 - sub)
        g = c["g"]
        grads["out.weight"] = dlogits.reshape(-1, E).T @ g.reshape(-1, g.shape[2])
        grads["out.bias"] = dlogits.sum(axis=(0, 1))
        dg = dlogits @ P["out.weight"]

        H = cfg.gru_hidden
        dseq = None
        for i, direction in enumerate(("fwd", "bwd") if cfg.bidirectional else ("fwd",)):
            pre = f"gru.{direction}"
            dx, dw_ih, dw_hh, db_ih, db_hh = layers.gru_backward(
                np.ascontiguousarray(dg[:, :, i * H:(i + 1) * H]), c["gru"][direction])
            grads[f"{pre}.w_ih"], grads[f"{pre}.w_hh"] = dw_ih, dw_hh
            grads[f"{pre}.b_ih"], grads[f"{pre}.b_hh"] = db_ih, db_hh
            dseq = dx if dseq is None else dseq + dx

        dh = dseq.reshape(c["seq_shape"])
        for k in range(len(cfg.conv_channels) - 1, -1, -1):
            pre = f"blocks.{k}"
            bn_c, conv_c, pool_c = c["blocks"][k]
            dconv = layers.leaky_lp_pool_backward(dh, pool_c)
            # bn.gamma/beta of block 0 only need dL/d(bn output), not the input gradient
            dbn, grads[f"{pre}.conv.weight"], grads[f"{pre}.conv.bias"] = layers.conv3x3_backward(dconv, conv_c)
            dh, grads[f"{pre}.bn.gamma"], grads[f"{pre}.bn.beta"] = layers.batchnorm_backward(
                dbn, bn_c, need_dx=k > 0)
        return {k: grads[k].astype(dt, copy=False) for k in self.trainable_names()}


def linear_softmax_pool(y) -> np.ndarray:
    """Clip probability per event: ``sum_t y_t^2 / sum_t y_t`` (0 when the sum < 1e-7).

    Accepts a :class:`ProbSequence` or a (T, E) / (T,) array.
    """
    values = y.values if isinstance(y, ProbSequence) else np.asarray(y, dtype=np.float64)
    squeeze = values.ndim == 1
    arr = values[:, None] if squeeze else values
    if arr.shape[0] < 1:
        raise InvalidArgumentError("need at least one frame")
    out, _ = layers.linear_softmax_forward(arr[None], np.ones((1, arr.shape[0]), bool))
    return out[0, 0] if squeeze else out[0]


def forward(model: CrnnModel, feats, training: bool = False) -> Tuple[ProbSequence, ClipProb]:
    """Run one clip (batch size 1, no padding)."""
    values = feats.values if isinstance(feats, FeatureMatrix) else np.asarray(feats)
    hop = feats.frame_hop_s if isinstance(feats, FeatureMatrix) else 0.020
    probs, clip = model.forward_batch(values[None], training=training)
    return ProbSequence(probs[0], hop, model.vocabulary), ClipProb(clip[0], model.vocabulary)


def backward(model: CrnnModel, feats=None, dprobs=None, dclip=None) -> Dict[str, np.ndarray]:
    """Parameter gradients for the model's last forward pass.

    ``feats`` is accepted for symmetry with :func:`forward` but the cached
    activations are what is differentiated.
    """
    return model.backward(dprobs, dclip)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(model: CrnnModel, path) -> None:
    """Header (magic, version, JSON block) then concatenated little-endian float32 arrays."""
    manifest = []
    offset = 0
    blobs = []
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += len(data)
        blobs.append(data)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "vocabulary": list(model.vocabulary.names),
        "speech_label": model.vocabulary.speech_label,
        "parameters": manifest,
        "payload_bytes": offset,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> CrnnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        if data[: len(_MAGIC)] != _MAGIC:
            raise CheckpointFormatError("not a gpvad checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<II", data, len(_MAGIC))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        start = len(_MAGIC) + 8
        if len(data) < start + hlen:
            raise CheckpointFormatError("truncated checkpoint header")
        header = json.loads(data[start:start + hlen].decode("utf-8"))
        payload = data[start + hlen:]
        if len(payload) != header["payload_bytes"]:
            raise CheckpointFormatError(
                f"payload has {len(payload)} bytes, header promises {header['payload_bytes']}")
        config = CrnnConfig.from_dict(header["config"])
        vocab = LabelVocabulary(tuple(header["vocabulary"]), header.get("speech_label", "Speech"))
        expected = init_parameters(config, 0, np.float32)
        params = {}
        for entry in header["parameters"]:
            name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
            if name not in expected:
                raise CheckpointFormatError(f"unexpected parameter {name!r}")
            if expected[name].shape != shape:
                raise CheckpointFormatError(
                    f"{name}: shape {shape} does not match config {expected[name].shape}")
            count = int(np.prod(shape))
            if off < 0 or off + 4 * count > len(payload):
                raise CheckpointFormatError(f"{name}: data out of bounds")
            params[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)
        missing = set(expected) - set(params)
        if missing:
            raise CheckpointFormatError(f"missing parameters {sorted(missing)}")
        if len(vocab) != config.num_events:
            raise CheckpointFormatError("vocabulary size disagrees with num_events")
        params = {k: params[k] for k in expected}
        return CrnnModel(config, vocab, params)
    except CheckpointFormatError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from None
