"""Command-line entry point: ``irisstyle <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import harness
from .backbone import load_backbone
from .cache import FeatureCache
from .config import ConfigError, RunConfig, write_manifest
from .data import (Sample, generate_synthetic_corpus, substream, load_gaze_dataset, load_recognition_dataset,
                   read_gray, read_mask, test_count, write_gaze_layout, write_gray,
                   write_recognition_layout)
from .features import CNN_KIND, STYLE_KIND, extract_features
from .gaze import GazeTrainConfig, evaluate_gaze, train_gaze_estimator
from .imaging import extract_iris, reinsert
from .recognition import (TrainConfig, evaluate, far_experiment, load_head, save_head,
                          train_classifier)
from .segmentation import make_provider
from .transfer import TransferConfig, transfer

log = logging.getLogger("irisstyle")

KINDS = {"style": STYLE_KIND, "cnn": CNN_KIND}


# --- shared plumbing --------------------------------------------------------------


def _overrides(args) -> dict:
    keys = {
        "data": "data.root", "out": "out_dir", "seed": "seed", "weights": "backbone.weights",
        "input_size": "backbone.input_size", "glint_threshold": "glint.threshold",
        "alpha": "transfer.alpha", "beta": "transfer.beta", "transfer_epochs": "transfer.epochs",
        "transfer_size": "transfer.input_size", "train_epochs": "train.epochs", "lr": "train.lr",
        "batch": "train.batch", "gaze_epochs": "gaze.epochs", "gaze_lr": "gaze.lr",
    }
    return {dotted: getattr(args, name) for name, dotted in keys.items() if getattr(args, name, None) is not None}


def _transfer_config(cfg: RunConfig) -> TransferConfig:
    return TransferConfig(alpha=cfg["transfer.alpha"], beta=cfg["transfer.beta"], epochs=cfg["transfer.epochs"],
                          input_size=cfg["transfer.input_size"], seed=cfg["seed"])


def _backbone(cfg: RunConfig):
    return load_backbone(cfg["backbone.weights"], cfg["backbone.input_size"], cfg["seed"])


def _require_data(cfg: RunConfig) -> Path:
    if cfg["data.root"] is None:
        raise ConfigError("no dataset given: pass --data DIR or set data.root")
    return Path(cfg["data.root"])


def _recognition_samples(cfg: RunConfig) -> list[Sample]:
    if cfg["data.kind"] == "gaze":
        manifest = load_gaze_dataset(_require_data(cfg))
    elif cfg["data.kind"] == "recognition":
        manifest = load_recognition_dataset(_require_data(cfg), cfg["data.test_fraction"], cfg["seed"])
    else:
        raise ConfigError(f"data.kind must be 'recognition' or 'gaze', not {cfg['data.kind']!r}")
    return manifest.load_samples()


def _features(samples: Sequence[Sample], kinds: Sequence[str], cfg: RunConfig, backbone=None,
              dump_crops: Optional[Path] = None) -> dict[str, np.ndarray]:
    """Feature matrices in sample order, served from and written to ``out_dir/cache``."""
    cache = FeatureCache(Path(cfg["out_dir"]) / "cache")
    missing = {s.record_id for s in samples if any((s.record_id, k, "") not in cache for k in kinds)}
    if missing or dump_crops is not None:
        backbone = backbone or _backbone(cfg)
        for s in samples:
            if s.record_id not in missing and dump_crops is None:
                continue
            crop = extract_iris(s.pixels, s.mask, cfg["glint.threshold"])
            if dump_crops is not None:
                write_gray(dump_crops / f"{s.record_id.replace('/', '_')}.png",
                           np.rint(np.clip(crop.pixels, 0, 1) * 255))
            if s.record_id in missing:
                feats = extract_features(backbone, crop, kinds)
                for k in kinds:
                    cache.put(s.record_id, k, "", feats[k])
        cache.flush()
    return {k: np.stack([cache.get(s.record_id, k) for s in samples]) for k in kinds}


def _head_path(cfg: RunConfig, kind: str) -> Path:
    return Path(cfg["out_dir"]) / f"head_{kind}.pt"


def _load_heads(cfg: RunConfig, kinds: Sequence[str]) -> dict:
    heads = {}
    for k in kinds:
        path = _head_path(cfg, k)
        if not path.exists():
            raise FileNotFoundError(f"no trained head at {path}; run `irisstyle train --feature "
                                    f"{'style' if k == STYLE_KIND else 'cnn'}` first")
        heads[k] = load_head(path)
    return heads


def _split(samples, name):
    return [s for s in samples if s.split == name]


# --- subcommands ------------------------------------------------------------------


def cmd_synth(args, cfg: RunConfig) -> dict:
    out = Path(cfg["out_dir"])
    corpus = generate_synthetic_corpus(args.users, args.samples, tuple(args.size), cfg["seed"],
                                       cfg["data.test_fraction"])
    write_recognition_layout(corpus.samples, out)
    # gaze layout under gaze/: one sequence per user, the last users held out
    users = sorted({s.user_id for s in corpus.samples})
    n_test = test_count(len(users), cfg["data.test_fraction"])
    write_gaze_layout(corpus.samples, out / "gaze", {u: "test" for u in users[len(users) - n_test:]})
    log.info("wrote %d images of %d users to %s", len(corpus.samples), len(users), out)
    return {"images": len(corpus.samples), "users": len(users)}


def cmd_extract(args, cfg: RunConfig) -> dict:
    samples = _recognition_samples(cfg)
    kinds = [STYLE_KIND, CNN_KIND] if args.feature == "both" else [KINDS[args.feature]]
    dump = Path(args.dump_crops) if args.dump_crops else None
    feats = _features(samples, kinds, cfg, dump_crops=dump)
    for k, m in feats.items():
        log.info("%s: %d vectors of length %d", k, *m.shape)
    return {k: list(m.shape) for k, m in feats.items()}


def cmd_train(args, cfg: RunConfig) -> dict:
    kind = KINDS[args.feature]
    samples = _recognition_samples(cfg)
    train, test = _split(samples, "train"), _split(samples, "test")
    feats = _features(train + test, [kind], cfg)[kind]
    tc = TrainConfig(cfg["train.batch"], cfg["train.lr"], cfg["train.epochs"], cfg["seed"])
    k = len({s.user_id for s in samples})
    head, history = train_classifier(feats[:len(train)], [s.label for s in train], tc,
                                     feats[len(train):], [s.label for s in test], num_classes=k)
    save_head(head, _head_path(cfg, kind))
    paths = harness.emit_report([harness.HistoryResult(kind, history.rows())], cfg["out_dir"])
    last = history.records[-1]
    log.info("%s head: test accuracy %.4f after %d epochs", kind, last.test_acc, last.epoch)
    return {"head": str(_head_path(cfg, kind)), "csv": [str(p) for p in paths]}


def cmd_eval(args, cfg: RunConfig) -> dict:
    kinds = [KINDS[f] for f in args.feature]
    test = _split(_recognition_samples(cfg), "test")
    heads = _load_heads(cfg, kinds)
    feats = _features(test, kinds, cfg)
    res = harness.MetricsResult()
    for k in kinds:
        m = evaluate(heads[k], feats[k], [s.label for s in test])
        res.rows.append((k, "test", m.accuracy, m.macro_f1, m.mcc))
        log.info("%s: accuracy %.4f f1 %.4f mcc %.4f", k, m.accuracy, m.macro_f1, m.mcc)
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])]}


def cmd_sweep(args, cfg: RunConfig) -> dict:
    kinds = [KINDS[f] for f in args.feature]
    degrees = args.degrees or (harness.ROTATION_DEGREES if args.variation == "rotation"
                               else harness.PERSPECTIVE_DEGREES)
    spec = harness.SweepSpec(args.variation, [float(d) for d in degrees], kinds, cfg["seed"])
    test = _split(_recognition_samples(cfg), "test")
    res = harness.robustness_sweep(spec, _load_heads(cfg, kinds), test, _backbone(cfg), cfg["glint.threshold"])
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])]}


def cmd_transfer(args, cfg: RunConfig) -> dict:
    content, content_mask = read_gray(Path(args.content)), read_mask(Path(args.content_mask))
    style, style_mask = read_gray(Path(args.style)), read_mask(Path(args.style_mask))
    thr = cfg["glint.threshold"]
    c_crop, s_crop = extract_iris(content, content_mask, thr), extract_iris(style, style_mask, thr)
    result = transfer(_backbone(cfg), c_crop, s_crop, _transfer_config(cfg))
    out = Path(args.out_png)
    write_gray(out, reinsert(content, result.stylized, content_mask))
    trace = out.with_name(out.stem + "_trace.csv")
    with trace.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "total", "content", "style"])
        writer.writerows([i + 1, *(f"{v:.6e}" for v in row)] for i, row in enumerate(result.loss_trace))
    log.info("loss %.6g -> %.6g", result.initial_loss[0], result.final_loss[0])
    return {"image": str(out), "trace": str(trace)}


def cmd_heatmap(args, cfg: RunConfig) -> dict:
    kinds = [KINDS[f] for f in args.feature]
    spec = harness.HeatmapSpec(args.betas or harness.HEATMAP_BETAS, args.epoch_counts or harness.HEATMAP_EPOCHS,
                               cfg["transfer.alpha"])
    samples = _recognition_samples(cfg)
    test = _split(samples, "test")[: args.limit]
    res = harness.privacy_heatmap(spec, _load_heads(cfg, kinds), test, samples, _backbone(cfg),
                                  _transfer_config(cfg), cfg["seed"], cfg["glint.threshold"])
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])]}


def cmd_seg_impact(args, cfg: RunConfig) -> dict:
    samples = _recognition_samples(cfg)
    test = _split(samples, "test")[: args.limit]
    res = harness.segmentation_impact(test, make_provider(args.provider), _backbone(cfg), _transfer_config(cfg),
                                      samples, cfg["seed"], cfg["glint.threshold"])
    log.info("mIoU %.4f -> %.4f", res.miou("pre"), res.miou("post"))
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])]}


def cmd_gaze_eval(args, cfg: RunConfig) -> dict:
    root = _require_data(cfg)
    if not (root / "sequences").is_dir() and (root / "gaze" / "sequences").is_dir():
        root = root / "gaze"  # corpus root written by `synth`
    samples = load_gaze_dataset(root).load_samples()
    train, test = _split(samples, "train"), _split(samples, "test")[: args.limit]
    if not test:
        raise ValueError("gaze dataset has no test sequences (see splits.csv)")
    provider = make_provider(args.provider) if args.kind == "model" else None
    gc = GazeTrainConfig(cfg["gaze.lr"], cfg["gaze.batch"], cfg["gaze.epochs"], cfg["seed"])
    estimator = train_gaze_estimator(args.kind, train, gc, mask_provider=provider)
    transform = None
    if args.transform == "stylize":
        backbone, tcfg, thr = _backbone(cfg), _transfer_config(cfg), cfg["glint.threshold"]
        if any(s.mask is None for s in samples):
            raise ValueError("stylization needs segmentation masks for every gaze frame")
        donors = dict(zip([s.record_id for s in test], harness.assign_donors(test, samples, cfg["seed"])))

        def transform(sample):
            donor = samples[donors[sample.record_id]]
            res = transfer(backbone, extract_iris(sample.pixels, sample.mask, thr),
                           extract_iris(donor.pixels, donor.mask, thr), tcfg)
            return reinsert(sample.pixels, res.stylized, sample.mask)

    ev = evaluate_gaze(estimator, test, transform)
    res = harness.GazeResult(args.kind, args.transform, list(zip(ev.record_ids, map(float, ev.errors))))
    log.info("%s gaze, %s: mean angular error %.3f deg", args.kind, args.transform, ev.mean_error)
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])], "mean_error": ev.mean_error}


def cmd_far(args, cfg: RunConfig) -> dict:
    kinds = [KINDS[f] for f in args.feature]
    samples = _recognition_samples(cfg)
    test = _split(samples, "test")[: args.limit]
    heads = _load_heads(cfg, kinds)
    backbone, tcfg, thr = _backbone(cfg), _transfer_config(cfg), cfg["glint.threshold"]
    index = {u: i for i, u in enumerate(sorted({s.user_id for s in samples}))}
    stylized: dict = {}

    def stylize(sample, donor):
        key = (sample.record_id, donor.record_id)
        if key not in stylized:
            res = transfer(backbone, extract_iris(sample.pixels, sample.mask, thr),
                           extract_iris(donor.pixels, donor.mask, thr), tcfg)
            stylized[key] = reinsert(sample.pixels, res.stylized, sample.mask)
        return stylized[key]

    res = harness.FarResult()
    for k in kinds:
        feature_fn = (lambda s, _k=k: extract_features(backbone, extract_iris(s.pixels, s.mask, thr),
                                                                [_k])[_k])
        for phase, fn in (("pre", None), ("post", stylize)):
            outcome = far_experiment(heads[k], test, feature_fn, substream(cfg["seed"], "far"),
                                     fn, index)
            res.rows.append((k, phase, outcome.far))
            log.info("%s FAR %s-transfer: %.4f (%d/%d)", k, phase, outcome.far, outcome.accepted, outcome.attempts)
    return {"csv": [str(p) for p in harness.emit_report(res, cfg["out_dir"])]}


def cmd_report(args, cfg: RunConfig) -> dict:
    """Re-render plots from the CSVs in out_dir and write a short summary."""
    out = Path(cfg["out_dir"])
    results = []
    for path in sorted(out.glob("sweep_*.csv")):
        rows = _read_rows(path)
        results.append(harness.SweepResult(path.stem[len("sweep_"):],
                                           [(float(r[0]), r[1], float(r[2]), float(r[3]), float(r[4])) for r in rows]))
    if (out / "heatmap.csv").exists():
        rows = _read_rows(out / "heatmap.csv")
        results.append(harness.HeatmapResult([(float(r[0]), int(r[1]), r[2], float(r[3])) for r in rows]))
    written = harness.emit_report(results, out) if results else []
    lines = ["# irisstyle report", ""]
    for path in sorted(out.glob("*.csv")):
        rows = _read_rows(path)
        lines.append(f"- {path.name}: {len(rows)} rows")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return {"files": [str(p) for p in written] + [str(out / "report.md")]}


def _read_rows(path: Path) -> list[list[str]]:
    with path.open(newline="") as fh:
        return list(csv.reader(fh))[1:]


# --- argument parsing -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file of dotted keys (e.g. transfer.beta: 1.0)")
    common.add_argument("--data", help="dataset root (data.root)")
    common.add_argument("--seed", type=int)
    common.add_argument("--weights", help="VGG19 weights file (backbone.weights; falls back to $ISL_WEIGHTS)")
    common.add_argument("--input-size", type=int, help="backbone input size S")
    common.add_argument("--glint-threshold", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    outp = argparse.ArgumentParser(add_help=False)
    outp.add_argument("--out", help="output directory (out_dir)")

    styl = argparse.ArgumentParser(add_help=False)
    styl.add_argument("--alpha", type=float)
    styl.add_argument("--beta", type=float)
    styl.add_argument("--epochs", dest="transfer_epochs", type=int, help="transfer epochs")
    styl.add_argument("--transfer-size", type=int, help="network resolution used during transfer")

    feat = argparse.ArgumentParser(add_help=False)
    feat.add_argument("--feature", nargs="+", choices=sorted(KINDS), default=["style", "cnn"])

    limit = argparse.ArgumentParser(add_help=False)
    limit.add_argument("--limit", type=int, help="use only the first N test images")

    p = argparse.ArgumentParser(prog="irisstyle", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", parents=[common, outp], help="generate the synthetic eye corpus")
    s.add_argument("--users", type=int, default=10)
    s.add_argument("--samples", type=int, default=10)
    s.add_argument("--size", type=int, nargs=2, default=(200, 320), metavar=("H", "W"))
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", parents=[common, outp], help="compute and cache feature vectors")
    s.add_argument("--feature", choices=["style", "cnn", "both"], default="style")
    s.add_argument("--dump-crops", metavar="DIR", help="also write every iris crop as PNG")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", parents=[common, outp], help="train an identity classifier head")
    s.add_argument("--feature", choices=sorted(KINDS), default="style")
    s.add_argument("--epochs", dest="train_epochs", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, outp, feat], help="test-split accuracy, F1 and MCC")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common, outp, feat], help="robustness sweep over a geometric variation")
    s.add_argument("--variation", choices=["rotation", "perspective"], default="rotation")
    s.add_argument("--degrees", type=float, nargs="+")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("transfer", parents=[common, styl], help="stylize one eye image with a donor's iris style")
    s.add_argument("--content", required=True)
    s.add_argument("--content-mask", required=True)
    s.add_argument("--style", required=True)
    s.add_argument("--style-mask", required=True)
    s.add_argument("--out", dest="out_png", required=True, help="output PNG; the loss trace goes next to it")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("heatmap", parents=[common, outp, styl, feat, limit], help="privacy grid over beta and epochs")
    s.add_argument("--betas", type=float, nargs="+")
    s.add_argument("--epoch-counts", type=int, nargs="+")
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("seg-impact", parents=[common, outp, styl, limit], help="per-class IoU before/after stylization")
    s.add_argument("--provider", default="threshold", help="mask provider: truth or threshold")
    s.set_defaults(func=cmd_seg_impact)

    s = sub.add_parser("gaze-eval", parents=[common, outp, styl, limit], help="gaze angular error with or without transfer")
    s.add_argument("--kind", choices=["model", "appearance"], default="model")
    s.add_argument("--transform", choices=["none", "stylize"], default="none")
    s.add_argument("--provider", default="truth", help="mask provider for the model-based estimator")
    s.add_argument("--gaze-epochs", type=int)
    s.add_argument("--gaze-lr", type=float)
    s.set_defaults(func=cmd_gaze_eval)

    s = sub.add_parser("far", parents=[common, outp, styl, feat, limit], help="false acceptance before/after transfer")
    s.set_defaults(func=cmd_far)

    s = sub.add_parser("report", parents=[common, outp], help="re-plot CSVs in out_dir and write a summary")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        if args.command == "transfer":
            cfg.update({"out_dir": str(Path(args.out_png).parent)})
        outputs = args.func(args, cfg)
        write_manifest(cfg["out_dir"], cfg, args.command, outputs)
    except ConfigError as exc:
        print(f"irisstyle: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit 1
        log.debug("failure", exc_info=True)
        print(f"irisstyle {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
