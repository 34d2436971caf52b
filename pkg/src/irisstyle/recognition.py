"""Identity classifier heads, training, metrics and the false-acceptance experiment."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

log = logging.getLogger(__name__)

HIDDEN = 4096


class RecognitionError(ValueError):
    pass


class ClassifierHead(nn.Module):
    """VGG-style projection head: two 4096-wide ReLU layers with dropout.

    Inputs are standardized with training-set statistics stored as buffers.
    """

    def __init__(self, input_dim: int, num_classes: int, hidden: int = HIDDEN, dropout: float = 0.5):
        super().__init__()
        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden = int(hidden)
        self.register_buffer("feat_mean", torch.zeros(input_dim))
        self.register_buffer("feat_std", torch.ones(input_dim))
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden), nn.ReLU(inplace=True), nn.Dropout(dropout),
            nn.Linear(hidden, hidden), nn.ReLU(inplace=True), nn.Dropout(dropout),
            nn.Linear(hidden, num_classes),
        )
        self.seed: Optional[int] = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net((x - self.feat_mean) / self.feat_std)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-5
    epochs: int = 100
    seed: int = 42

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.epochs <= 0:
            raise RecognitionError("batch_size, learning_rate and epochs must be positive")


@dataclass
class RecognitionMetrics:
    accuracy: float
    macro_f1: float
    mcc: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float = float("nan")
    test_acc: float = float("nan")
    test_f1: float = float("nan")
    test_mcc: float = float("nan")


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [(r.epoch, r.train_loss, r.test_loss, r.test_acc, r.test_f1, r.test_mcc) for r in self.records]


def _as_matrix(features) -> np.ndarray:
    rows = [np.asarray(f, dtype=np.float32).ravel() for f in features]
    if not rows:
        raise RecognitionError("no feature vectors given")
    dims = {r.size for r in rows}
    if len(dims) != 1:
        raise RecognitionError(f"inconsistent feature dimensions: {sorted(dims)}")
    return np.stack(rows)


def train_classifier(features, labels, config: TrainConfig = TrainConfig(),
                     test_features=None, test_labels=None,
                     num_classes: Optional[int] = None) -> tuple[ClassifierHead, TrainHistory]:
    """Cross-entropy training with Adam; deterministic for a given seed."""
    x = _as_matrix(features)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise RecognitionError("need at least 2 classes to train a classifier")
    k = int(num_classes or y.max() + 1)
    xt = yt = None
    if test_features is not None:
        xt = torch.from_numpy(_as_matrix(test_features))
        yt = np.asarray(test_labels, dtype=np.int64)
        if xt.shape[1] != x.shape[1]:
            raise RecognitionError("train and test features differ in dimension")

    history = TrainHistory()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = ClassifierHead(x.shape[1], k)
        head.seed = config.seed
        head.feat_mean.copy_(torch.from_numpy(x.mean(0)))
        head.feat_std.copy_(torch.from_numpy(x.std(0) + 1e-6))
        opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
        xs, ys = torch.from_numpy(x), torch.from_numpy(y)
        gen = torch.Generator().manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            head.train()
            perm = torch.randperm(len(ys), generator=gen)
            total, count = 0.0, 0
            for i in range(0, len(perm), config.batch_size):
                idx = perm[i:i + config.batch_size]
                opt.zero_grad()
                loss = F.cross_entropy(head(xs[idx]), ys[idx])
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            rec = EpochRecord(epoch, total / count)
            if xt is not None:
                head.eval()
                with torch.no_grad():
                    logits = head(xt)
                    rec.test_loss = float(F.cross_entropy(logits, torch.from_numpy(yt)))
                m = metrics(logits.argmax(1).numpy(), yt, k)
                rec.test_acc, rec.test_f1, rec.test_mcc = m.accuracy, m.macro_f1, m.mcc
            history.records.append(rec)
    head.eval()
    return head, history


def predict(head: ClassifierHead, feature) -> np.ndarray:
    """Class probabilities for one vector (1-D) or a batch (2-D)."""
    x = np.asarray(feature, dtype=np.float32)
    single = x.ndim == 1
    x2 = x[None] if single else x
    if x2.shape[1] != head.input_dim:
        raise RecognitionError(f"feature length {x2.shape[1]} != head input_dim {head.input_dim}")
    was_training = head.training
    head.eval()
    with torch.no_grad():
        p = torch.softmax(head(torch.from_numpy(x2)).double(), dim=1).numpy()
    head.train(was_training)
    return p[0] if single else p


def confusion_matrix(pred, truth, num_classes: Optional[int] = None) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    k = int(num_classes or max(pred.max(initial=0), truth.max(initial=0)) + 1)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (truth, pred), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray) -> RecognitionMetrics:
    """Accuracy, macro F1 (over classes present in truth or prediction) and multiclass MCC."""
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    tp = np.diag(cm)
    support = cm.sum(1)
    predicted = cm.sum(0)
    present = (support + predicted) > 0
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    macro_f1 = float(f1[present].mean()) if present.any() else 0.0
    c = tp.sum()
    cov = c * n - float(support @ predicted)
    norm = np.sqrt(n * n - float(predicted @ predicted)) * np.sqrt(n * n - float(support @ support))
    mcc = float(cov / norm) if norm > 0 else 0.0
    return RecognitionMetrics(float(c / n) if n else 0.0, macro_f1, mcc)


def metrics(pred, truth, num_classes: Optional[int] = None) -> RecognitionMetrics:
    return metrics_from_confusion(confusion_matrix(pred, truth, num_classes))


def evaluate(head: ClassifierHead, features, labels) -> RecognitionMetrics:
    probs = predict(head, _as_matrix(features))
    return metrics(probs.argmax(1), labels, head.num_classes)


def save_head(head: ClassifierHead, path) -> None:
    torch.save({"input_dim": head.input_dim, "num_classes": head.num_classes, "hidden": head.hidden,
                "seed": head.seed, "state_dict": head.state_dict()}, Path(path))


def load_head(path) -> ClassifierHead:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=True)
    head = ClassifierHead(ckpt["input_dim"], ckpt["num_classes"], ckpt.get("hidden", HIDDEN))
    head.load_state_dict(ckpt["state_dict"])
    head.seed = ckpt.get("seed")
    return head.eval()


# --- false acceptance ---------------------------------------------------------


def draw_donors(user_ids: Sequence[str], pool_users: Sequence[str], rng: np.random.Generator) -> list[int]:
    """For each entry of ``user_ids`` pick an index into ``pool_users`` of a different user."""
    pool = np.asarray(pool_users)
    donors = []
    for user in user_ids:
        candidates = np.flatnonzero(pool != user)
        if candidates.size == 0:
            raise RecognitionError("no donor from another user available")
        donors.append(int(candidates[rng.integers(candidates.size)]))
    return donors


@dataclass
class FarOutcome:
    far: float
    attempts: int
    accepted: int
    donors: list[int]


def far_experiment(head: ClassifierHead, samples, feature_fn: Callable, rng: np.random.Generator,
                   stylize_fn: Optional[Callable] = None, class_index: Optional[dict] = None) -> FarOutcome:
    """Fraction of imposter attempts classified as the style donor.

    For each sample of user A a donor sample of a uniformly drawn other user B
    is picked; ``stylize_fn(sample, donor) -> pixels`` transfers B's style
    into A's image (``None`` means no transfer). An attempt is accepted when
    the head's top-1 class is B.
    """
    samples = list(samples)
    users = [s.user_id for s in samples]
    if len(set(users)) < 2:
        raise RecognitionError("FAR needs a dataset with at least 2 users")
    index = class_index or {u: i for i, u in enumerate(sorted(set(users)))}
    donors = draw_donors(users, users, rng)
    before = head.checksum()
    accepted = 0
    for sample, d in zip(samples, donors):
        donor = samples[d]
        pixels = stylize_fn(sample, donor) if stylize_fn is not None else sample.pixels
        probs = predict(head, feature_fn(sample.with_pixels(pixels)))
        accepted += int(np.argmax(probs) == index[donor.user_id])
    if head.checksum() != before:
        raise RuntimeError("classifier parameters changed during FAR experiment")
    return FarOutcome(accepted / len(samples), len(samples), accepted, donors)
