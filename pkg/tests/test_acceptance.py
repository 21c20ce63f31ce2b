"""Acceptance criteria 1-10.

Every test prints one ``criterion N: PASS|FAIL`` line with the measured
value next to its tolerance.  Criteria 6 and 7 train the full-size CRNN on
the 200-clip toy corpus and take several minutes each on one core.
"""
import logging
import math
import time

import numpy as np
import pytest

from gpvad import cli, corpus, features, metrics, model, postprocess, training, tsv
from gpvad.corpus import SPEECH, Waveform
from gpvad.layers import lp_pool
from gpvad.postprocess import ThresholdConfig, double_threshold

logger = logging.getLogger("acceptance")

GPVB_MAX_EPOCHS = 40
VADC_LEARNING_RATE = 0.05
VADC_MAX_EPOCHS = 20


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


# -- 1. complement identity --------------------------------------------------------


def random_corpus(rng):
    reference, predictions, num_frames, scores = {}, {}, {}, {}
    for i in range(int(rng.integers(1, 5))):
        T = int(rng.integers(5, 200))
        clip = f"c{i}"
        num_frames[clip] = T
        for target in (reference, predictions):
            segs, t = [], 0.0
            while True:
                t += float(rng.uniform(0.0, 1.0))
                length = float(rng.uniform(0.02, 1.0))
                if t + length > T * 0.02:
                    break
                segs.append((round(t, 2), round(t + length, 2), SPEECH))
                t += length
            target[clip] = segs
        scores[clip] = rng.random(T)
    return reference, predictions, num_frames, scores


def test_criterion_1_complement_identity(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        rep = metrics.evaluate(*random_corpus(rng))
        worst = max(worst, abs(rep.f1_micro + rep.fer - 100.0))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 1.0
    report(1, ok, f"max |f1_micro + fer - 100| = {worst:.2e} (tol 1e-9), {elapsed:.2f} s (< 1 s)")
    assert ok


# -- 2. gradient correctness --------------------------------------------------------


def test_criterion_2_gradcheck(report):
    cfg = model.CrnnConfig(conv_channels=(8,), temporal_pool_strides=(4,), freq_pool_strides=(16,),
                           gru_hidden=4, num_events=2)
    net = model.CrnnModel(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(2)
    lengths = [8, 6, 8, 7]
    x = rng.standard_normal((4, 8, 64))
    targets = np.array([[1, 1], [1, 0], [0, 1], [1, 0]], dtype=np.float64)

    def loss():
        _, clip = net.forward_batch(x, lengths, training=True, bn_momentum=0.0)
        return training.bce_loss(targets, clip)

    start = time.perf_counter()
    _, clip = net.forward_batch(x, lengths, training=True, bn_momentum=0.0)
    _, dclip = training.bce_loss_and_grad(targets, clip)
    grads = net.backward(dclip=dclip)
    h = 1e-3
    worst, worst_name = 0.0, ""
    for name in net.trainable_names():
        p = net.params[name]
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(grads[name]), np.linalg.norm(num), 1e-12)
        rel = np.linalg.norm(grads[name] - num) / denom
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 30
    report(2, ok, f"max relative error {worst:.2e} at {worst_name} (tol 1e-5), {elapsed:.1f} s (< 30 s)")
    assert ok


# -- 3. pooling properties ----------------------------------------------------------


def test_criterion_3_pooling(report):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    failures = 0
    for trial in range(1000):
        T = int(rng.integers(1, 50))
        y = np.full(T, rng.random()) if trial % 10 == 0 else rng.random(T)
        v = model.linear_softmax_pool(y)
        lo, hi = y.mean(), y.max()
        constant = np.ptp(y) == 0
        if not (lo - 1e-12 <= v <= hi + 1e-12):
            failures += 1
        elif constant != (math.isclose(v, lo, rel_tol=0, abs_tol=1e-12) or math.isclose(v, hi, rel_tol=0, abs_tol=1e-12)):
            failures += 1
        x = rng.standard_normal(int(rng.integers(1, 30)))
        lp = lp_pool(x[:, None], x.size, 1)[0, 0]
        a = np.abs(x)
        if not (a.mean() - 1e-12 <= lp <= a.max() + 1e-12):
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 1.0
    report(3, ok, f"{failures} violations in 1000 trials, {elapsed:.2f} s (< 1 s)")
    assert ok


# -- 4. double-threshold invariants -----------------------------------------------------


def test_criterion_4_double_threshold(report):
    rng = np.random.default_rng(4)
    start = time.perf_counter()
    failures = 0
    default = ThresholdConfig()
    for _ in range(1000):
        p = rng.random(int(rng.integers(1, 60)))
        out = double_threshold(p, default).astype(bool)
        failures += not (np.all(out <= (p >= 0.1)) and np.all((p >= 0.5) <= out))
        lo, hi = sorted(rng.random(2))
        base = double_threshold(p, ThresholdConfig(lo, hi)).astype(bool)
        higher = double_threshold(p, ThresholdConfig(lo, (hi + 1.0) / 2)).astype(bool)
        lower = double_threshold(p, ThresholdConfig(lo / 2, hi)).astype(bool)
        failures += not (np.all(higher <= base) and np.all(base <= lower))
        again = double_threshold(out.astype(float), default)
        failures += not np.array_equal(again.astype(bool), out)
    fixtures = [
        ([0.05, 0.2, 0.6, 0.3, 0.05], [0, 1, 1, 1, 0]),
        ([0.2, 0.4, 0.3], [0, 0, 0]),
    ]
    for probs, expected in fixtures:
        failures += not np.array_equal(double_threshold(probs), expected)
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 1.0
    report(4, ok, f"{failures} violations (3 x 1000 trials + 2 fixtures), {elapsed:.2f} s (< 1 s)")
    assert ok


# -- 5. Event-F1 oracle ---------------------------------------------------------------


def random_segments(rng, n):
    segs = []
    for _ in range(n):
        on = round(float(rng.uniform(0, 3.0)), 2)
        segs.append((on, round(on + float(rng.uniform(0.05, 1.5)), 2)))
    return sorted(segs)


def test_criterion_5_event_f1_oracle(report):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    agree, trials = 0, 500
    for _ in range(trials):
        refs = random_segments(rng, int(rng.integers(0, 6)))
        preds = random_segments(rng, int(rng.integers(0, 6)))
        greedy = len(metrics.greedy_matches(refs, preds))
        best = metrics.optimal_match_count(refs, preds)
        if greedy == best:
            agree += 1
        else:
            logger.warning("greedy %d vs optimal %d: refs=%s preds=%s", greedy, best, refs, preds)
    hand = [
        metrics.event_f1([(1.0, 2.0)], [(1.1, 2.1)]) == 100.0,
        metrics.event_f1([(0.5, 1.0), (2.0, 3.5)], [(0.5, 1.0), (2.0, 3.5)]) == 100.0,
        metrics.event_f1([(1.0, 2.0)], [(1.35, 2.0)]) == 0.0,
    ]
    elapsed = time.perf_counter() - start
    rate = agree / trials
    ok = rate >= 0.98 and all(hand) and elapsed < 5.0
    report(5, ok, f"greedy = optimal in {rate:.1%} of {trials} cases (>= 98%), "
                  f"hand examples {sum(hand)}/3, {elapsed:.2f} s (< 5 s)")
    assert ok


# -- 6 and 7. toy-scale training -------------------------------------------------------


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    summary = corpus.build_corpus(corpus.CorpusConfig(num_clips=200, duration_s=10.0, snr_low=5, snr_high=15), root)
    index = features.read_index(features.extract_manifest(summary.manifest_path, root / "features"))
    records = corpus.load_records(summary.manifest_path, summary.annotations_path)
    split = tsv.read_split(summary.split_path)
    vocab = corpus.LabelVocabulary.binary()
    items = {r.clip_id: training.make_item(r, features.read_features(index[r.clip_id][0]).values, vocab, True)
             for r in records}
    train_items = [items[c] for c in sorted(items) if split[c] == "train"]
    held_items = [items[c] for c in sorted(items) if split[c] == "heldout"]
    reference = {r.clip_id: r.frame_annotations for r in records if split[r.clip_id] == "heldout"}
    return train_items, held_items, reference


def heldout_report(net, held_items, reference):
    predictions, scores, num_frames = {}, {}, {}
    for item in held_items:
        probs, _ = model.forward(net, features.FeatureMatrix(item.features))
        scores[item.clip_id] = probs.column(SPEECH)
        num_frames[item.clip_id] = len(scores[item.clip_id])
        predictions[item.clip_id] = [(s.onset_s, s.offset_s, SPEECH) for s in postprocess.extract_speech(probs)]
    return metrics.evaluate(reference, predictions, num_frames, scores)


@pytest.fixture(scope="module")
def gpvb_run(toy_corpus):
    train_items, held_items, reference = toy_corpus
    cfg = training.TrainConfig(regime=training.CLIP_LEVEL, max_epochs=GPVB_MAX_EPOCHS)
    assert (cfg.optimizer, cfg.learning_rate, cfg.batch_size, cfg.early_stop_patience) == ("adam", 1e-4, 64, 7)
    start = time.perf_counter()
    net = model.CrnnModel(model.CrnnConfig(num_events=2), seed=cfg.seed)
    result = training.train(net, train_items, held_items, cfg)
    elapsed = time.perf_counter() - start
    return heldout_report(result.model, held_items, reference), result, elapsed


@pytest.fixture(scope="module")
def vadc_run(toy_corpus):
    train_items, held_items, reference = toy_corpus
    cfg = training.TrainConfig(regime=training.FRAME_LEVEL, learning_rate=VADC_LEARNING_RATE,
                               max_epochs=VADC_MAX_EPOCHS)
    logger.warning("VAD-C learning rate raised from 1e-5 to %g for toy scale", cfg.learning_rate)
    start = time.perf_counter()
    net = model.CrnnModel(model.CrnnConfig(num_events=2), seed=cfg.seed)
    result = training.train(net, train_items, held_items, cfg)
    elapsed = time.perf_counter() - start
    return heldout_report(result.model, held_items, reference), result, elapsed


def test_criterion_6_mil_emergence(report, gpvb_run):
    rep, result, elapsed = gpvb_run
    ok = rep.auc is not None and rep.auc >= 90.0 and rep.event_f1 > 0.0
    report(6, ok, f"GPV-B held-out AUC {rep.auc:.2f} (>= 90), Event-F1 {rep.event_f1:.2f} (> 0), "
                  f"{len(result.log)} epochs (best {result.best_epoch}), {elapsed:.0f} s")
    assert ok


def test_criterion_7_frame_supervised_baseline(report, gpvb_run, vadc_run):
    rep, result, elapsed = vadc_run
    table = metrics.render_table([("GPV-B (toy)", gpvb_run[0]), ("VAD-C (toy)", rep)])
    ok = rep.fer <= 10.0
    report(7, ok, f"VAD-C held-out FER {rep.fer:.2f} (<= 10), lr {VADC_LEARNING_RATE:g}, "
                  f"{len(result.log)} epochs (best {result.best_epoch}), {elapsed:.0f} s\n{table}")
    assert table.splitlines()[0].split(" | ")[1:] == list(metrics.TABLE_COLUMNS)
    assert ok


# -- 8. DSP fixtures ---------------------------------------------------------------


def test_criterion_8_dsp(report):
    start = time.perf_counter()
    sr = 16000
    t = np.arange(sr) / sr
    peak = int(np.argmax(features.stft_power(Waveform(np.sin(2 * np.pi * 1000 * t))).mean(axis=0)))
    frames = features.extract_logmel(Waveform(np.zeros(10 * sr))).num_frames
    w = corpus.synth_noise(2.0, "pink", 8)
    a = features.extract_logmel(w).values
    b = features.extract_logmel(Waveform(2 * w.samples)).values
    valid = a > math.log(features.LOG_FLOOR) + 1.0
    shift = float(np.max(np.abs(b - a - math.log(4))[valid]))
    elapsed = time.perf_counter() - start
    ok = peak == 128 and frames == 500 and shift <= 1e-6 and elapsed < 5.0
    report(8, ok, f"1 kHz peak bin {peak} (128), 10 s -> {frames} frames (500), "
                  f"x2 shift error {shift:.1e} (tol 1e-6), {elapsed:.2f} s (< 5 s)")
    assert ok


# -- 9. SNR fidelity -----------------------------------------------------------------


def test_criterion_9_snr_fidelity(report):
    rng = np.random.default_rng(9)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(800, 4000))
        s = Waveform(rng.standard_normal(n) * rng.uniform(0.01, 0.2))
        u = Waveform(rng.standard_normal(n + int(rng.integers(0, 100))) * rng.uniform(0.01, 0.2))
        snr = float(rng.uniform(-5, 25))
        g = corpus.mixing_gain(s, u, snr)
        noise = g * u.samples[:n]
        measured = 20 * math.log10(np.sqrt(np.mean(s.samples ** 2)) / np.sqrt(np.mean(noise ** 2)))
        mixed = corpus.mix_at_snr(s, u, snr).samples
        if not np.allclose(mixed, np.clip(s.samples + noise, -1, 1), rtol=0, atol=1e-12):
            worst = math.inf
        worst = max(worst, abs(measured - snr))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 1.0
    report(9, ok, f"max SNR error {worst:.1e} dB over 100 pairs (tol 1e-6), {elapsed:.2f} s (< 1 s)")
    assert ok


# -- 10. reproducibility -------------------------------------------------------------


def cli_pipeline(root):
    c = root / "corpus"
    steps = [
        ["synth", "--out", c, "--clips", "12", "--duration", "2", "--seed", "5"],
        ["extract", "--manifest", c / "manifest.tsv"],
        ["train", "--manifest", c / "manifest.tsv", "--index", c / "features" / "index.tsv",
         "--out", root / "model", "--max-epochs", "2", "--batch-size", "4", "--seed", "5"],
        ["infer", "--checkpoint", root / "model" / "model.ckpt", "--index", c / "features" / "index.tsv",
         "--out", root / "pred.tsv", "--scores-out", root / "scores.tsv"],
        ["eval", "--reference", c / "annotations.tsv", "--predictions", root / "pred.tsv",
         "--scores", root / "scores.tsv", "--json-out", root / "report.json"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0
    outputs = ["corpus/manifest.tsv", "corpus/annotations.tsv", "corpus/split.tsv", "corpus/features/index.tsv",
               "model/model.ckpt", "pred.tsv", "scores.tsv", "report.json"]
    return {name: (root / name).read_bytes() for name in outputs}


def test_criterion_10_reproducibility(report, tmp_path, capsys):
    first = cli_pipeline(tmp_path / "a")
    second = cli_pipeline(tmp_path / "b")
    capsys.readouterr()
    differing = [name for name in first if first[name] != second[name]]
    ok = not differing
    report(10, ok, f"{len(first) - len(differing)}/{len(first)} pipeline outputs byte-identical"
                   + (f"; differ: {differing}" if differing else ""))
    assert ok
