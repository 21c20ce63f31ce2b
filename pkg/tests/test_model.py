import json
import struct

import numpy as np
import pytest

from gpvad.corpus import LabelVocabulary
from gpvad.errors import CheckpointFormatError, InvalidArgumentError, NumericFailure, StateError
from gpvad.features import FeatureMatrix
from gpvad.model import (
    CrnnConfig,
    CrnnModel,
    forward,
    linear_softmax_pool,
    load_checkpoint,
    save_checkpoint,
)

SMALL = dict(conv_channels=(4, 8), temporal_pool_strides=(2, 2), freq_pool_strides=(8, 8), gru_hidden=6)
TINY = dict(conv_channels=(8,), temporal_pool_strides=(4,), freq_pool_strides=(16,), gru_hidden=4)


def feats(T, seed=0):
    return FeatureMatrix(np.random.default_rng(seed).standard_normal((T, 64)).astype(np.float32))


def tiny_loss(model, x, lengths, targets):
    _, clip = model.forward_batch(x, lengths, training=True)
    c = np.clip(clip, 1e-7, 1 - 1e-7)
    loss = -np.mean(targets * np.log(c) + (1 - targets) * np.log(1 - c))
    return loss, -(targets / c - (1 - targets) / (1 - c)) / targets.size


class TestConfig:
    def test_defaults(self):
        cfg = CrnnConfig()
        assert cfg.conv_channels == (32, 64, 128)
        assert cfg.freq_out() == 2
        assert cfg.gru_input() == 256

    @pytest.mark.parametrize("kw", [
        dict(temporal_pool_strides=(2, 2, 2)),
        dict(num_events=1),
        dict(freq_pool_strides=(4, 4)),
        dict(upsample="cubic"),
        dict(pool_p=0.5),
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            CrnnConfig(**kw)

    def test_dict_round_trip(self):
        cfg = CrnnConfig(num_events=10, **SMALL)
        assert CrnnConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.fixture(scope="module")
def model():
    return CrnnModel(CrnnConfig(**SMALL), seed=1)


class TestForward:
    @pytest.mark.parametrize("T", [1, 7, 50, 499])
    def test_temporal_contract(self, model, T):
        probs, clip = forward(model, feats(T))
        assert probs.values.shape == (T, 2)
        assert clip.values.shape == (2,)
        assert np.all((probs.values >= 0) & (probs.values <= 1))
        assert probs.frame_hop_s == 0.02

    def test_clip_is_linear_softmax_of_frames(self, model):
        probs, clip = forward(model, feats(40))
        np.testing.assert_allclose(clip.values, linear_softmax_pool(probs.values), rtol=1e-5)

    def test_default_model_shapes(self):
        model = CrnnModel(CrnnConfig(), seed=0)
        probs, clip = forward(model, feats(50))
        assert probs.values.shape == (50, 2) and clip.values.shape == (2,)
        assert model.params["out.weight"].shape == (2, 256)

    def test_deterministic(self):
        a = CrnnModel(CrnnConfig(**SMALL), seed=3)
        b = CrnnModel(CrnnConfig(**SMALL), seed=3)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        np.testing.assert_array_equal(forward(a, feats(30))[0].values, forward(b, feats(30))[0].values)

    def test_padding_does_not_leak(self, model):
        a, b = feats(23, 1).values, feats(17, 2).values
        x = np.zeros((2, 23, 64), np.float32)
        x[0], x[1, :17] = a, b
        x[1, 17:] = 50.0  # garbage in the padding
        probs, clip = model.forward_batch(x, [23, 17])
        alone_p, alone_c = model.forward_batch(b[None])
        np.testing.assert_allclose(probs[1, :17], alone_p[0], atol=1e-6)
        np.testing.assert_allclose(clip[1], alone_c[0], atol=1e-6)
        assert not probs[1, 17:].any()

    def test_bad_input(self, model):
        with pytest.raises(InvalidArgumentError):
            model.forward_batch(np.zeros((1, 5, 40)))
        with pytest.raises(InvalidArgumentError):
            model.forward_batch(np.zeros((1, 5, 64)), [6])

    def test_non_finite_names_layer(self):
        model = CrnnModel(CrnnConfig(**SMALL), seed=1)
        model.params["blocks.1.conv.weight"][:] = np.nan
        with pytest.raises(NumericFailure, match="blocks.1"):
            forward(model, feats(12))

    def test_vocabulary_size(self):
        with pytest.raises(InvalidArgumentError):
            CrnnModel(CrnnConfig(num_events=3, **SMALL))
        v = LabelVocabulary(("Noise", "Speech", "tone"))
        assert CrnnModel(CrnnConfig(num_events=3, **SMALL), v).vocabulary == v

    def test_linear_upsampling_flag(self):
        model = CrnnModel(CrnnConfig(upsample="linear", **SMALL), seed=1)
        probs, _ = forward(model, feats(13))
        assert probs.values.shape == (13, 2)


class TestLinearSoftmaxPool:
    def test_values(self):
        assert linear_softmax_pool(np.array([0.2, 0.8])) == pytest.approx(0.68)
        assert linear_softmax_pool(np.full(9, 0.4)) == pytest.approx(0.4)
        assert linear_softmax_pool(np.zeros(4)) == 0.0

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            y = rng.random(int(rng.integers(2, 30)))
            v = linear_softmax_pool(y)
            assert y.mean() < v < y.max()


class TestBackward:
    def test_requires_cache(self):
        model = CrnnModel(CrnnConfig(**SMALL), seed=0)
        with pytest.raises(StateError):
            model.backward(dclip=np.zeros((1, 2)))
        model.forward_batch(feats(8).values[None], training=True)
        model.backward(dclip=np.zeros((1, 2)))
        with pytest.raises(StateError):
            model.backward(dclip=np.zeros((1, 2)))

    def test_zero_upstream(self):
        model = CrnnModel(CrnnConfig(**SMALL), seed=0)
        model.forward_batch(feats(12).values[None], training=True)
        grads = model.backward(dprobs=np.zeros((1, 12, 2)), dclip=np.zeros((1, 2)))
        assert set(grads) == set(model.trainable_names())
        assert all(not g.any() for g in grads.values())

    def test_gradcheck_float32(self):
        """2-frame, 1-block model: the 32-bit backward pass is within 1e-3 of central differences.

        Differences are taken on a 64-bit copy of the same weights; float32
        round-off in the loss would otherwise swamp any step size.
        """
        model = CrnnModel(CrnnConfig(**TINY), seed=0, dtype=np.float32)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 64)).astype(np.float32)
        targets = np.array([[1.0, 0.0]], np.float32)
        _, dclip = tiny_loss(model, x, None, targets)
        grads = model.backward(dclip=dclip.astype(np.float32))
        ref, x64 = model.astype(np.float64), x.astype(np.float64)
        for name in model.trainable_names():
            assert grads[name].dtype == np.float32
            p = ref.params[name]
            num = np.zeros(p.shape)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + 1e-3
                lp, _ = tiny_loss(ref, x64, None, targets)
                p[idx] = old - 1e-3
                lm, _ = tiny_loss(ref, x64, None, targets)
                p[idx] = old
                num[idx] = (lp - lm) / 2e-3
            g = grads[name].astype(np.float64)
            rel = np.linalg.norm(g - num) / max(np.linalg.norm(g), np.linalg.norm(num), 1e-12)
            assert rel < 1e-3, name


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = CrnnModel(CrnnConfig(num_events=3, **SMALL), LabelVocabulary(("Noise", "Speech", "x")), seed=4)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt")
        assert back.config == model.config and back.vocabulary == model.vocabulary
        for k in model.params:
            np.testing.assert_array_equal(back.params[k], model.params[k])
        np.testing.assert_array_equal(forward(back, feats(21))[0].values, forward(model, feats(21))[0].values)

    def test_truncated(self, tmp_path):
        save_checkpoint(CrnnModel(CrnnConfig(**SMALL)), tmp_path / "m.ckpt")
        data = (tmp_path / "m.ckpt").read_bytes()
        for cut in (5, 20, len(data) - 1):
            (tmp_path / "t.ckpt").write_bytes(data[:cut])
            with pytest.raises(CheckpointFormatError):
                load_checkpoint(tmp_path / "t.ckpt")

    def _rewrite_header(self, src, dst, edit):
        data = src.read_bytes()
        _, hlen = struct.unpack_from("<II", data, 8)
        header = json.loads(data[16:16 + hlen])
        edit(header)
        hb = json.dumps(header).encode()
        dst.write_bytes(data[:8] + struct.pack("<II", 1, len(hb)) + hb + data[16 + hlen:])

    def test_event_count_mismatch(self, tmp_path):
        save_checkpoint(CrnnModel(CrnnConfig(**SMALL)), tmp_path / "m.ckpt")

        def edit(h):
            h["config"]["num_events"] = 3
            h["vocabulary"] = ["Noise", "Speech", "x"]

        self._rewrite_header(tmp_path / "m.ckpt", tmp_path / "bad.ckpt", edit)
        with pytest.raises(CheckpointFormatError, match="out.weight"):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_version_mismatch(self, tmp_path):
        save_checkpoint(CrnnModel(CrnnConfig(**SMALL)), tmp_path / "m.ckpt")
        data = bytearray((tmp_path / "m.ckpt").read_bytes())
        data[8:12] = struct.pack("<I", 99)
        (tmp_path / "v.ckpt").write_bytes(bytes(data))
        with pytest.raises(CheckpointFormatError, match="version"):
            load_checkpoint(tmp_path / "v.ckpt")

    def test_saving_is_deterministic(self, tmp_path):
        model = CrnnModel(CrnnConfig(**SMALL), seed=2)
        save_checkpoint(model, tmp_path / "a.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "a.ckpt"), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
