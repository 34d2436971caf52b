"""Experiment orchestration: robustness sweeps, privacy heatmap, IoU impact, reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backbone import Backbone
from .data import Sample, substream
from .features import extract_features
from .imaging import DEFAULT_GLINT_THRESHOLD, apply_variation, extract_iris, reinsert
from .recognition import ClassifierHead, draw_donors, metrics, predict
from .segmentation import ProviderError
from .transfer import TransferConfig, transfer

log = logging.getLogger(__name__)

ROTATION_DEGREES = (5, 10, 20, 30, 45, 60, 90, 120, 150, 180)
PERSPECTIVE_DEGREES = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
HEATMAP_BETAS = (1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4)
HEATMAP_EPOCHS = (1, 5, 10, 20, 50, 100, 150, 200)
SEG_CLASSES = (0, 1, 2, 3)


@dataclass
class SweepSpec:
    variation: str
    degrees: Sequence[float]
    feature_kinds: Sequence[str] = ("style-default", "cnn-224")
    seed: int = 42

    def __post_init__(self):
        if self.variation not in ("rotation", "perspective"):
            raise ValueError("variation must be 'rotation' or 'perspective'")
        d = list(self.degrees)
        if not d:
            raise ValueError("degrees must be nonempty")
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("degrees must be strictly increasing")


@dataclass
class HeatmapSpec:
    betas: Sequence[float] = HEATMAP_BETAS
    epoch_counts: Sequence[int] = HEATMAP_EPOCHS
    alpha: float = 1.0

    def __post_init__(self):
        if not self.betas or any(b <= 0 for b in self.betas):
            raise ValueError("betas must be positive")
        if not self.epoch_counts or any(int(e) != e or e < 1 for e in self.epoch_counts):
            raise ValueError("epoch counts must be positive integers")


@dataclass
class SweepResult:
    variation: str
    rows: list[tuple[float, str, float, float, float]] = field(default_factory=list)

    def accuracy(self, degree: float, kind: str) -> float:
        return next(r[2] for r in self.rows if r[0] == degree and r[1] == kind)


@dataclass
class HeatmapResult:
    rows: list[tuple[float, int, str, float]] = field(default_factory=list)

    def accuracy(self, beta: float, epochs: int, kind: str) -> float:
        return next(r[3] for r in self.rows if r[0] == beta and r[1] == epochs and r[2] == kind)


@dataclass
class IoUResult:
    rows: list[tuple[str, int, float]] = field(default_factory=list)

    def iou(self, phase: str, class_id: int) -> float:
        return next(r[2] for r in self.rows if r[0] == phase and r[1] == class_id)

    def miou(self, phase: str) -> float:
        return float(np.mean([r[2] for r in self.rows if r[0] == phase]))


@dataclass
class MetricsResult:
    rows: list[tuple[str, str, float, float, float]] = field(default_factory=list)  # (kind, phase, acc, f1, mcc)


@dataclass
class GazeResult:
    kind: str
    phase: str
    rows: list[tuple[str, float]] = field(default_factory=list)

    @property
    def mean_error(self) -> float:
        return float(np.mean([r[1] for r in self.rows]))


@dataclass
class FarResult:
    rows: list[tuple[str, str, float]] = field(default_factory=list)  # (kind, phase, far)


@dataclass
class HistoryResult:
    kind: str
    rows: list[tuple] = field(default_factory=list)


def _checksums(heads: Mapping[str, ClassifierHead]) -> dict[str, str]:
    return {k: h.checksum() for k, h in heads.items()}


def _assert_frozen(before: dict[str, str], heads: Mapping[str, ClassifierHead]) -> None:
    if _checksums(heads) != before:
        raise RuntimeError("a frozen classifier head changed during the experiment")


def feature_rows(backbone: Backbone, crops, kinds: Sequence[str]) -> dict[str, np.ndarray]:
    feats: dict[str, list] = {k: [] for k in kinds}
    for crop in crops:
        f = extract_features(backbone, crop, kinds)
        for k in kinds:
            feats[k].append(f[k])
    return {k: np.stack(v) for k, v in feats.items()}


def evaluate_heads(heads: Mapping[str, ClassifierHead], feats: Mapping[str, np.ndarray],
                   labels) -> dict[str, tuple[float, float, float]]:
    out = {}
    for kind, head in heads.items():
        m = metrics(predict(head, feats[kind]).argmax(1), labels, head.num_classes)
        out[kind] = (m.accuracy, m.macro_f1, m.mcc)
    return out


def robustness_sweep(spec: SweepSpec, heads: Mapping[str, ClassifierHead], samples: Sequence[Sample],
                     backbone: Backbone, glint_threshold: float = DEFAULT_GLINT_THRESHOLD) -> SweepResult:
    """Accuracy/F1/MCC of frozen heads on test crops varied once per (record, degree)."""
    kinds = [k for k in spec.feature_kinds if k in heads]
    before = _checksums(heads)
    crops = [extract_iris(s.pixels, s.mask, glint_threshold) for s in samples]
    labels = [s.label for s in samples]
    result = SweepResult(spec.variation)
    for degree in spec.degrees:
        varied = [apply_variation(c, spec.variation, degree,
                                  substream(spec.seed, "variation", s.record_id, spec.variation, float(degree)))
                  for c, s in zip(crops, samples)]
        scores = evaluate_heads({k: heads[k] for k in kinds}, feature_rows(backbone, varied, kinds), labels)
        for kind in kinds:
            result.rows.append((float(degree), kind, *scores[kind]))
        log.info("%s %.3g: %s", spec.variation, degree,
                 ", ".join(f"{k}={scores[k][0]:.3f}" for k in kinds))
    _assert_frozen(before, heads)
    return result


def assign_donors(samples: Sequence[Sample], pool: Sequence[Sample], seed: int) -> list[int]:
    """Seeded uniform donor (index into ``pool``) of another user for every sample."""
    return draw_donors([s.user_id for s in samples], [p.user_id for p in pool], substream(seed, "donor"))


def stylize_samples(samples: Sequence[Sample], pool: Sequence[Sample], backbone: Backbone,
                    config: TransferConfig, seed: int = 42,
                    glint_threshold: float = DEFAULT_GLINT_THRESHOLD,
                    snapshots: Sequence[int] = ()) -> tuple[list[int], list[dict[int, np.ndarray]]]:
    """Stylize every sample with a seeded other-user donor.

    Returns the donor indices and, per sample, the reinserted image after
    each epoch count in ``snapshots`` (the final epoch is always included).
    """
    donors = assign_donors(samples, pool, seed)
    epochs = sorted(set(snapshots) | {config.epochs})
    images = []
    for sample, d in zip(samples, donors):
        donor = pool[d]
        content = extract_iris(sample.pixels, sample.mask, glint_threshold)
        style = extract_iris(donor.pixels, donor.mask, glint_threshold)
        shots: dict[int, np.ndarray] = {}

        def keep(epoch, crop, _shots=shots, _sample=sample):
            if epoch in epochs:
                _shots[epoch] = reinsert(_sample.pixels, crop, _sample.mask)

        transfer(backbone, content, style, config, on_epoch=keep)
        images.append(shots)
    return donors, images


def privacy_heatmap(spec: HeatmapSpec, heads: Mapping[str, ClassifierHead], samples: Sequence[Sample],
                    pool: Sequence[Sample], backbone: Backbone, base_config: TransferConfig = TransferConfig(),
                    seed: int = 42, glint_threshold: float = DEFAULT_GLINT_THRESHOLD) -> HeatmapResult:
    """Re-classification accuracy over a (beta x epochs) grid of stylized test images.

    Each beta runs one transfer per image for the largest epoch count; the
    smaller counts are read from the same trajectory.
    """
    before = _checksums(heads)
    kinds = list(heads)
    labels = [s.label for s in samples]
    epochs = sorted(int(e) for e in spec.epoch_counts)
    result = HeatmapResult()
    for beta in spec.betas:
        cfg = replace(base_config, alpha=spec.alpha, beta=float(beta), epochs=epochs[-1])
        _, images = stylize_samples(samples, pool, backbone, cfg, seed, glint_threshold, epochs)
        for e in spec.epoch_counts:
            crops = [extract_iris(shots[int(e)], s.mask, glint_threshold) for shots, s in zip(images, samples)]
            scores = evaluate_heads(heads, feature_rows(backbone, crops, kinds), labels)
            for kind in kinds:
                result.rows.append((float(beta), int(e), kind, scores[kind][0]))
        log.info("heatmap beta=%g done", beta)
    _assert_frozen(before, heads)
    return result


def iou_per_class(pred, truth, class_id: int) -> float:
    """Intersection over union of one class; 1.0 when the class is absent from both."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    p, t = pred == class_id, truth == class_id
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def miou(pred, truth, classes: Iterable[int] = SEG_CLASSES) -> float:
    return float(np.mean([iou_per_class(pred, truth, c) for c in classes]))


def segmentation_impact(samples: Sequence[Sample], provider: Optional[Callable], backbone: Backbone,
                        config: TransferConfig, pool: Optional[Sequence[Sample]] = None, seed: int = 42,
                        glint_threshold: float = DEFAULT_GLINT_THRESHOLD) -> IoUResult:
    """Mean per-class IoU of ``provider`` before and after stylization."""
    if provider is None:
        raise ProviderError("no mask provider configured: pass 'truth', 'threshold' "
                            "or a callable sample -> label map (see segmentation.make_provider)")
    pool = list(pool) if pool is not None else list(samples)
    _, images = stylize_samples(samples, pool, backbone, config, seed, glint_threshold)
    pre = np.zeros(len(SEG_CLASSES))
    post = np.zeros(len(SEG_CLASSES))
    for sample, shots in zip(samples, images):
        stylized = sample.with_pixels(shots[config.epochs])
        pre += [iou_per_class(provider(sample), sample.mask, c) for c in SEG_CLASSES]
        post += [iou_per_class(provider(stylized), sample.mask, c) for c in SEG_CLASSES]
    n = len(samples)
    rows = [("pre", c, float(pre[i] / n)) for i, c in enumerate(SEG_CLASSES)]
    rows += [("post", c, float(post[i] / n)) for i, c in enumerate(SEG_CLASSES)]
    return IoUResult(rows)


# --- reports ---------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def emit_report(results, out_dir, plots: bool = True) -> list[Path]:
    """Write one CSV per result (plus plots) with deterministic file names."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"report directory {out} is not writable: {exc}") from exc
    if not isinstance(results, (list, tuple)):
        results = [results]
    written: list[Path] = []
    for res in results:
        if isinstance(res, SweepResult):
            path = _write_csv(out / f"sweep_{res.variation}.csv",
                              ["degree", "feature_kind", "accuracy", "f1", "mcc"], res.rows)
            written.append(path)
            if plots:
                written.append(_plot_sweep(res, out / f"sweep_{res.variation}.png"))
        elif isinstance(res, HeatmapResult):
            written.append(_write_csv(out / "heatmap.csv", ["beta", "epochs", "feature_kind", "accuracy"], res.rows))
            if plots:
                written += _plot_heatmap(res, out)
        elif isinstance(res, IoUResult):
            written.append(_write_csv(out / "iou.csv", ["phase", "class_id", "iou"], res.rows))
        elif isinstance(res, MetricsResult):
            written.append(_write_csv(out / "metrics.csv", ["feature_kind", "phase", "accuracy", "f1", "mcc"],
                                      res.rows))
        elif isinstance(res, GazeResult):
            written.append(_write_csv(out / f"gaze_{res.kind}_{res.phase}.csv", ["record_id", "error_deg"],
                                      res.rows))
        elif isinstance(res, FarResult):
            written.append(_write_csv(out / "far.csv", ["feature_kind", "phase", "far"], res.rows))
        elif isinstance(res, HistoryResult):
            written.append(_write_csv(out / f"history_{res.kind}.csv",
                                      ["epoch", "train_loss", "test_loss", "test_acc", "test_f1", "test_mcc"],
                                      res.rows))
        else:
            raise TypeError(f"cannot report results of type {type(res).__name__}")
    return written


def _plot_sweep(res: SweepResult, path: Path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in sorted({r[1] for r in res.rows}):
        pts = [(r[0], r[2]) for r in res.rows if r[1] == kind]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=kind)
    ax.set_xlabel(f"{res.variation} degree")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def _plot_heatmap(res: HeatmapResult, out: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    betas = sorted({r[0] for r in res.rows})
    epochs = sorted({r[1] for r in res.rows})
    for kind in sorted({r[2] for r in res.rows}):
        grid = np.array([[res.accuracy(b, e, kind) for e in epochs] for b in betas])
        fig, ax = plt.subplots(figsize=(6, 4.5))
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(epochs)), [str(e) for e in epochs])
        ax.set_yticks(range(len(betas)), [f"{b:g}" for b in betas])
        ax.set_xlabel("transfer epochs")
        ax.set_ylabel("style weight beta")
        ax.set_title(kind)
        for i in range(len(betas)):
            for j in range(len(epochs)):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        path = out / f"heatmap_{kind}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
