"""Desk-scale acceptance suite: one pass/fail line per criterion (see the summary section)."""

import filecmp
import math
from pathlib import Path

import numpy as np
import pytest
import torch

from irisstyle import cli
from irisstyle.backbone import STYLE_TAPS, TAP_CHANNELS
from irisstyle.data import substream
from irisstyle.features import (CNN_KIND, STYLE_KIND, ChannelStats, channel_stats, channel_stats_t,
                                cnn_feature, style_feature, style_vector)
from irisstyle.gaze import angular_error
from irisstyle.harness import SweepSpec, iou_per_class, robustness_sweep, stylize_samples
from irisstyle.imaging import extract_iris, reinsert
from irisstyle.recognition import evaluate, far_experiment, metrics_from_confusion
from irisstyle.transfer import (TransferConfig, content_loss, content_loss_t, style_loss, style_loss_t,
                                transfer)

DESK = dict(input_size=64)


def _brute_stats(fmap, eps=1e-8):
    n, h, w = fmap.shape
    mus, sds = [], []
    for c in range(n):
        total = 0.0
        for i in range(h):
            for j in range(w):
                total += float(fmap[c, i, j])
        mu = total / (h * w)
        sq = 0.0
        for i in range(h):
            for j in range(w):
                sq += (float(fmap[c, i, j]) - mu) ** 2
        mus.append(mu)
        sds.append(math.sqrt(sq / (h * w) + eps))
    return np.array(mus), np.array(sds)


def test_01_statistics_oracle(verdict):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n, h, w = rng.integers(1, 9), rng.integers(1, 17), rng.integers(1, 17)
        fmap = rng.normal(0, 3, size=(n, h, w)) + rng.normal(0, 5)
        stats = channel_stats(fmap)
        mu, sd = _brute_stats(fmap)
        worst = max(worst, np.abs(stats.mean - mu).max(), np.abs(stats.std - sd).max())
    hand = channel_stats(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
    exact = hand.mean[0] == 4.0 and hand.std[0] == math.sqrt(5.0 + 1e-8)
    ok = worst <= 1e-6 and exact and abs(hand.std[0] - math.sqrt(5)) <= 1e-5
    verdict(1, "statistics oracle", ok,
            f"max abs err {worst:.2e} over 100 maps; hand case mu={hand.mean[0]}, sigma={hand.std[0]:.8f}")


def test_02_permutation_invariance(verdict):
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(50):
        maps = {}
        for tap in STYLE_TAPS:
            h, w = rng.integers(2, 12, size=2)
            maps[tap] = np.maximum(rng.normal(size=(TAP_CHANNELS[tap], h, w)), 0).astype(np.float32)
        shuffled = {}
        for tap, m in maps.items():
            c, h, w = m.shape
            perm = rng.permutation(h * w)
            shuffled[tap] = m.reshape(c, -1)[:, perm].reshape(c, h, w)
        mismatches += int(not np.array_equal(style_vector(maps), style_vector(shuffled)))
    verdict(2, "permutation invariance", mismatches == 0, f"{mismatches}/50 trials differ")


def test_03_dimensionality(verdict, backbone):
    rng = np.random.default_rng(3)
    lengths = {}
    for shape in [(64, 64), (150, 150), (300, 280)]:
        lengths[shape] = style_feature(backbone, rng.uniform(size=shape).astype(np.float32)).size
    cnn_len = cnn_feature(backbone, rng.uniform(size=(224, 224)).astype(np.float32)).size
    ok = all(v == 1920 for v in lengths.values()) and cnn_len == 25088
    verdict(3, "dimensionality", ok, f"style {sorted(set(lengths.values()))}, cnn {cnn_len}")


def test_04_loss_identities(verdict):
    rng = np.random.default_rng(4)
    f = rng.normal(size=(8, 5, 5))
    stats = [channel_stats(rng.normal(size=(4, 3, 3))) for _ in range(3)]
    zero_c = content_loss(f, f)
    zero_s = style_loss(stats, stats)
    mse = content_loss(np.zeros((1, 2, 2)), np.ones((1, 2, 2)))
    hand = style_loss([ChannelStats(np.array([1.0]), np.array([2.0]))],
                      [ChannelStats(np.array([3.0]), np.array([2.0]))], [1.0])
    ok = zero_c == 0.0 and zero_s == 0.0 and abs(mse - 1.0) <= 1e-9 and abs(hand - 4.0) <= 1e-9
    verdict(4, "loss identities", ok, f"content(F,F)={zero_c}, style(S,S)={zero_s}, mse={mse}, style={hand}")


def test_05_gradient_check(verdict, backbone):
    bb = backbone.to(torch.float64)
    gen = torch.Generator().manual_seed(5)
    x = torch.rand(3, 64, 64, generator=gen, dtype=torch.float64)
    c_ref = torch.rand(3, 64, 64, generator=gen, dtype=torch.float64)
    s_ref = torch.rand(3, 64, 64, generator=gen, dtype=torch.float64)
    taps = list(STYLE_TAPS) + ["relu4_2"]
    with torch.no_grad():
        fc = bb.forward_taps(c_ref, ["relu4_2"])["relu4_2"]
        acts_s = bb.forward_taps(s_ref, list(STYLE_TAPS))
        ss = [channel_stats_t(acts_s[t]) for t in STYLE_TAPS]
    weights = [0.25] * 4

    def total(inp):
        acts = bb.forward_taps(inp, taps)
        return content_loss_t(fc, acts["relu4_2"]) + style_loss_t(ss, [channel_stats_t(acts[t]) for t in STYLE_TAPS],
                                                                   weights)

    xg = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(total(xg), xg)
    rng = np.random.default_rng(5)
    # steps of 1e-3 straddle ReLU / max-pool kinks of the 20-layer stack; 1e-5 stays inside one linear piece
    worst, h = 0.0, 1e-5
    with torch.no_grad():
        for _ in range(20):
            c, i, j = int(rng.integers(3)), int(rng.integers(64)), int(rng.integers(64))
            xp, xm = x.clone(), x.clone()
            xp[c, i, j] += h
            xm[c, i, j] -= h
            fd = (float(total(xp)) - float(total(xm))) / (2 * h)
            an = float(grad[c, i, j])
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-300))
    verdict(5, "gradient check", worst <= 1e-3, f"max rel err {worst:.2e} at 20 pixels (float64, step {h:g})")


def test_06_transfer_fixed_points(verdict, backbone, corpus, crops):
    a = crops[corpus.samples[0].record_id]
    b = crops[corpus.samples[10].record_id]
    r0 = transfer(backbone, a, b, TransferConfig(beta=0.0, epochs=10, **DESK))
    d0 = float(np.abs(r0.stylized.pixels - a.pixels).max())
    r1 = transfer(backbone, a, a, TransferConfig(alpha=1.0, beta=1.0, epochs=10, **DESK))
    d1 = float(np.abs(r1.stylized.pixels - a.pixels).max())
    r2 = transfer(backbone, a, b, TransferConfig(beta=1.0, epochs=30, **DESK))
    r3 = transfer(backbone, a, b, TransferConfig(beta=1e4, epochs=30, **DESK))
    runs = [r0, r1, r2, r3]
    descent = all(r.final_loss[0] <= r.initial_loss[0] + 1e-9 for r in runs)
    monotone = all(np.all(np.diff(np.r_[r.initial_loss[0], r.loss_trace[:, 0]]) <= 1e-12) for r in runs)
    ok = d0 <= 1e-6 and d1 <= 1e-6 and descent and monotone
    verdict(6, "transfer fixed points", ok,
            f"beta=0 diff {d0:.1e}, style==content diff {d1:.1e}, final<=initial on {len(runs)} runs: {descent}")


def test_07_roundtrip(verdict, corpus, crops):
    exact = sum(np.array_equal(reinsert(s.pixels, crops[s.record_id], s.mask), s.pixels) for s in corpus.samples)
    glints = sum(len(crops[s.record_id].glints) > 0 for s in corpus.samples)
    verdict(7, "roundtrip", exact == 100, f"{exact}/100 bit-exact ({glints} eyes with glints)")


def test_08_recognition_feasibility(verdict, corpus, features, style_head):
    from conftest import _train
    head, history = style_head
    head2, history2 = _train(corpus, features[STYLE_KIND])
    acc = history.records[-1].test_acc
    first = next((r.epoch for r in history.records if r.test_acc >= 0.95), None)
    same = head.checksum() == head2.checksum() and history.rows() == history2.rows()
    ok = acc >= 0.95 and same
    verdict(8, "recognition feasibility", ok,
            f"test acc {acc:.3f} after 100 epochs (>=0.95 from epoch {first}); deterministic: {same}")


def test_09_robustness_ordering(verdict, backbone, test_samples, style_head, cnn_head):
    heads = {STYLE_KIND: style_head[0], CNN_KIND: cnn_head[0]}
    res = robustness_sweep(SweepSpec("rotation", [90.0], [STYLE_KIND, CNN_KIND], 42), heads, test_samples, backbone)
    s, c = res.accuracy(90.0, STYLE_KIND), res.accuracy(90.0, CNN_KIND)
    verdict(9, "robustness ordering", s >= c - 0.02, f"rotation 90: style {s:.3f} vs cnn {c:.3f}")


@pytest.fixture(scope="module")
def stylized_test(backbone, corpus, test_samples):
    cfg = TransferConfig(beta=1.0, epochs=50, **DESK)
    donors, images = stylize_samples(test_samples, corpus.samples, backbone, cfg, seed=42)
    return donors, [shots[50] for shots in images]


def test_10_privacy(verdict, backbone, test_samples, style_head, stylized_test):
    head = style_head[0]
    labels = [s.label for s in test_samples]
    before = evaluate(head, [style_feature(backbone, extract_iris(s.pixels, s.mask)) for s in test_samples], labels)
    after = evaluate(head, [style_feature(backbone, extract_iris(img, s.mask))
                            for img, s in zip(stylized_test[1], test_samples)], labels)
    drop = before.accuracy - after.accuracy
    verdict(10, "privacy", drop >= 0.30,
            f"style acc {before.accuracy:.3f} -> {after.accuracy:.3f} (drop {drop:.3f}; beta=1, 50 epochs, 64x64)")


def test_11_metric_oracles(verdict):
    pred = np.zeros((3, 4), dtype=np.uint8)
    truth = np.zeros((3, 4), dtype=np.uint8)
    pred[[0, 1]] = 2
    truth[[1, 2]] = 2
    iou = iou_per_class(pred, truth, 2)
    angles = (angular_error([0, 0, 1], [0, 0, 1]), angular_error([1, 0, 0], [1, 1, 0]),
              angular_error([1, 0, 0], [0, 1, 0]))
    m = metrics_from_confusion(np.array([[2, 0, 0], [0, 1, 1], [0, 0, 2]]))
    ok = (abs(iou - 1 / 3) <= 1e-6 and all(abs(a - e) <= 1e-6 for a, e in zip(angles, (0, 45, 90)))
          and abs(m.accuracy - 5 / 6) <= 1e-6 and abs(m.macro_f1 - 37 / 45) <= 1e-6
          and abs(m.mcc - 18 / math.sqrt(528)) <= 1e-6)
    verdict(11, "metric oracles", ok,
            f"IoU {iou:.6f}, angles {[round(a, 6) for a in angles]}, acc {m.accuracy:.6f}, "
            f"F1 {m.macro_f1:.6f}, MCC {m.mcc:.6f}")


def test_12_far(verdict, backbone, corpus, test_samples, style_head):
    head = style_head[0]
    feature_fn = lambda s: style_feature(backbone, extract_iris(s.pixels, s.mask))
    perfect = evaluate(head, [feature_fn(s) for s in test_samples], [s.label for s in test_samples]).accuracy
    index = {u: i for i, u in enumerate(corpus.classes)}
    pre = far_experiment(head, test_samples, feature_fn, substream(42, "far"), None, index)
    cfg = TransferConfig(beta=1.0, epochs=50, **DESK)

    def stylize(sample, donor):
        res = transfer(backbone, extract_iris(sample.pixels, sample.mask), extract_iris(donor.pixels, donor.mask), cfg)
        return reinsert(sample.pixels, res.stylized, sample.mask)

    post = far_experiment(head, test_samples, feature_fn, substream(42, "far"), stylize, index)
    ok = perfect == 1.0 and pre.far == 0.0 and 0.0 <= post.far <= 0.5
    verdict(12, "FAR sanity", ok, f"head acc {perfect:.3f}; FAR pre {pre.far:.3f}, post {post.far:.3f}")


def _pipeline(root: Path) -> None:
    corpus, out = root / "corpus", root / "run"
    img, lab = corpus / "images", corpus / "labels"
    common = ["--data", str(corpus), "--out", str(out)]
    styl = ["--transfer-size", "64"]
    steps = [
        ["synth", "--users", "4", "--samples", "4", "--size", "120", "192", "--out", str(corpus)],
        ["extract", "--feature", "both", *common],
        ["train", "--feature", "style", "--epochs", "10", *common],
        ["train", "--feature", "cnn", "--epochs", "3", *common],
        ["eval", *common],
        ["sweep", "--variation", "rotation", "--degrees", "0", "90", *common],
        ["sweep", "--variation", "perspective", "--degrees", "0.2", *common],
        ["heatmap", "--betas", "1e-4", "1", "--epoch-counts", "1", "3", "--limit", "2", *styl, *common],
        ["seg-impact", "--epochs", "3", "--limit", "2", *styl, *common],
        ["far", "--feature", "style", "--epochs", "3", "--limit", "4", *styl, *common],
        ["gaze-eval", "--kind", "model", "--gaze-epochs", "5", *common],
        ["transfer", "--content", str(img / "u0_000.png"), "--content-mask", str(lab / "u0_000.png"),
         "--style", str(img / "u1_000.png"), "--style-mask", str(lab / "u1_000.png"), "--beta", "1",
         "--epochs", "5", *styl, "--out", str(out / "transfer" / "stylized.png")],
        ["report", "--out", str(out)],
    ]
    for argv in steps:
        code = cli.main(argv)
        assert code == 0, f"{argv[0]} exited with {code}"


def test_13_determinism(verdict, tmp_path):
    _pipeline(tmp_path / "a")
    _pipeline(tmp_path / "b")
    a, b = tmp_path / "a" / "run", tmp_path / "b" / "run"
    names = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    other = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    same = [n for n in names if filecmp.cmp(a / n, b / n, shallow=False)]
    ok = names == other and len(names) >= 10 and len(same) == len(names)
    verdict(13, "determinism", ok, f"{len(same)}/{len(names)} CSV reports byte-identical across two runs")
