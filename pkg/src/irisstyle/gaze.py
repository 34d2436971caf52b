"""Gaze estimators used to measure the utility of stylized eye images."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .imaging import IRIS, PUPIL, SCLERA

log = logging.getLogger(__name__)

N_LANDMARKS = 19
LANDMARK_NAMES = (
    "pupil_cx", "pupil_cy", "pupil_a", "pupil_b", "pupil_theta", "pupil_area",
    "iris_cx", "iris_cy", "iris_a", "iris_b", "iris_theta", "iris_area",
    "pupil_iris_dx", "pupil_iris_dy",
    "corner_left_x", "corner_left_y", "corner_right_x", "corner_right_y",
    "sclera_area",
)


class GazeError(ValueError):
    pass


def angular_error(pred, truth) -> float:
    """Angle in degrees between two 3-D direction vectors."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    np_, nt = np.linalg.norm(p), np.linalg.norm(t)
    if np_ == 0 or nt == 0:
        raise GazeError("angular error is undefined for a zero vector")
    cos = np.clip(np.dot(p / np_, t / nt), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def angular_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    p = pred / np.linalg.norm(pred, axis=1, keepdims=True)
    t = truth / np.linalg.norm(truth, axis=1, keepdims=True)
    return np.degrees(np.arccos(np.clip((p * t).sum(1), -1.0, 1.0)))


# --- ellipse fitting ---------------------------------------------------------


@dataclass
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float
    residual: float = 0.0


def fit_ellipse(points) -> Ellipse:
    """Direct least-squares ellipse fit (Halir-Flusser formulation).

    ``residual`` is the RMS Sampson distance of the points to the fitted conic.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 5:
        raise GazeError(f"need at least 5 points to fit an ellipse, got {len(pts)}")
    mean = pts.mean(0)
    scale = np.sqrt(((pts - mean) ** 2).sum(1).mean())
    if not scale > 0:
        raise GazeError("degenerate point set")
    x, y = ((pts - mean) / scale).T

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError as exc:
        raise GazeError("degenerate point set (collinear?)") from exc
    m = s1 + s2 @ t
    m = np.array([m[2] / 2, -m[1], m[0] / 2])
    evals, evecs = np.linalg.eig(m)
    evecs = np.real(evecs)
    cond = 4 * evecs[0] * evecs[2] - evecs[1] ** 2
    ok = np.flatnonzero(cond > 0)
    if ok.size == 0:
        raise GazeError("no ellipse fits the points")
    a1 = evecs[:, ok[0]]
    coef = np.concatenate([a1, t @ a1])

    ell = _conic_to_ellipse(coef)
    cx, cy = ell.cx * scale + mean[0], ell.cy * scale + mean[1]
    fitted = Ellipse(cx, cy, ell.a * scale, ell.b * scale, ell.theta)
    fitted.residual = _sampson_rms(coef, x, y) * scale
    return fitted


def _conic_to_ellipse(coef: np.ndarray) -> Ellipse:
    A, B, C, D, E, Fc = coef
    M = np.array([[2 * A, B], [B, 2 * C]])
    try:
        cx, cy = np.linalg.solve(M, [-D, -E])
    except np.linalg.LinAlgError as exc:
        raise GazeError("degenerate conic") from exc
    f0 = A * cx * cx + B * cx * cy + C * cy * cy + D * cx + E * cy + Fc
    q = np.array([[A, B / 2], [B / 2, C]])
    lam, vec = np.linalg.eigh(q)
    axes_sq = -f0 / lam
    if np.any(axes_sq <= 0) or not np.all(np.isfinite(axes_sq)):
        raise GazeError("fitted conic is not a real ellipse")
    # smaller eigenvalue -> longer axis
    a, b = np.sqrt(axes_sq[0]), np.sqrt(axes_sq[1])
    major = vec[:, 0]
    if b > a:
        a, b = b, a
        major = vec[:, 1]
    theta = float(np.mod(np.arctan2(major[1], major[0]), np.pi))
    return Ellipse(float(cx), float(cy), float(a), float(b), theta)


def _sampson_rms(coef, x, y) -> float:
    A, B, C, D, E, Fc = coef
    alg = A * x * x + B * x * y + C * y * y + D * x + E * y + Fc
    gx = 2 * A * x + B * y + D
    gy = B * x + 2 * C * y + E
    return float(np.sqrt(np.mean(alg ** 2 / np.maximum(gx ** 2 + gy ** 2, 1e-300))))


# --- landmarks -----------------------------------------------------------------


def boundary_points(region: np.ndarray, touching: Optional[np.ndarray] = None) -> np.ndarray:
    """(x, y) of region pixels with a 4-neighbour outside the region."""
    pad = np.pad(region, 1, constant_values=False)
    inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    edge = region & ~inner
    if touching is not None:
        tp = np.pad(touching, 1, constant_values=False)
        near = tp[:-2, 1:-1] | tp[2:, 1:-1] | tp[1:-1, :-2] | tp[1:-1, 2:]
        edge = edge & near
    rows, cols = np.nonzero(edge)
    return np.column_stack([cols, rows]).astype(np.float64)


def extract_landmarks(mask) -> np.ndarray:
    """Fixed 19-value landmark vector (see ``LANDMARK_NAMES``), normalized by image size."""
    labels = np.asarray(getattr(mask, "labels", mask))
    h, w = labels.shape
    pupil = labels == PUPIL
    iris_disc = (labels == IRIS) | pupil
    sclera = labels == SCLERA
    if not pupil.any() or not (labels == IRIS).any():
        raise GazeError("landmarks need both pupil and iris classes in the mask")

    pupil_ell = _region_ellipse(pupil, boundary_points(pupil))
    limbus = boundary_points(iris_disc, touching=sclera)
    if len(limbus) < 12:
        limbus = boundary_points(iris_disc)
    iris_ell = _region_ellipse(iris_disc, limbus)

    if sclera.any():
        cols = np.flatnonzero(sclera.any(0))
        lx, rx = cols[0], cols[-1]
        ly = np.flatnonzero(sclera[:, lx]).mean()
        ry = np.flatnonzero(sclera[:, rx]).mean()
    else:
        lx = ly = rx = ry = 0.0
    area = float(h * w)
    vec = np.array([
        pupil_ell.cx / w, pupil_ell.cy / h, pupil_ell.a / w, pupil_ell.b / w, pupil_ell.theta / np.pi,
        pupil.sum() / area,
        iris_ell.cx / w, iris_ell.cy / h, iris_ell.a / w, iris_ell.b / w, iris_ell.theta / np.pi,
        (labels == IRIS).sum() / area,
        (pupil_ell.cx - iris_ell.cx) / w, (pupil_ell.cy - iris_ell.cy) / h,
        lx / w, ly / h, rx / w, ry / h,
        sclera.sum() / area,
    ], dtype=np.float64)
    return vec


def _region_ellipse(region: np.ndarray, pts: np.ndarray) -> Ellipse:
    """Ellipse fit to boundary points; tiny or degenerate regions fall back to moments."""
    if len(pts) >= 5:
        try:
            return fit_ellipse(pts)
        except GazeError:
            pass
    rows, cols = np.nonzero(region)
    r = np.sqrt(region.sum() / np.pi)
    return Ellipse(float(cols.mean()), float(rows.mean()), float(r), float(r), 0.0)


# --- estimators ------------------------------------------------------------------


@dataclass
class GazeTrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 128
    epochs: int = 100
    seed: int = 42
    hidden: tuple[int, ...] = (4096, 4096)
    dropout: float = 0.5


class RegressionHead(nn.Module):
    """MLP regressor emitting unit 3-D gaze vectors."""

    def __init__(self, input_dim: int, hidden: Sequence[int] = (4096, 4096), dropout: float = 0.5):
        super().__init__()
        self.register_buffer("feat_mean", torch.zeros(input_dim))
        self.register_buffer("feat_std", torch.ones(input_dim))
        layers: list[nn.Module] = []
        prev = input_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU(inplace=True), nn.Dropout(dropout)]
            prev = width
        layers.append(nn.Linear(prev, 3))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net((x - self.feat_mean) / self.feat_std), dim=1)


class AppearanceExtractor(nn.Module):
    """Frozen convolutional encoder of the whole eye image.

    With ``resnet_weights`` it loads a torchvision ResNet-50 state dict and
    uses its pooled 2048-d output; otherwise a small seeded random encoder
    with a coarse spatial grid stands in.
    """

    def __init__(self, seed: int = 42, resnet_weights=None, input_hw: tuple[int, int] = (64, 96)):
        super().__init__()
        self.input_hw = input_hw
        if resnet_weights is not None:
            from torchvision.models import resnet50
            net = resnet50(weights=None)
            net.load_state_dict(torch.load(resnet_weights, map_location="cpu", weights_only=True))
            net.fc = nn.Identity()
            self.body = net
            self.grayscale_to_rgb = True
        else:
            gen = torch.Generator().manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(1, 16, 5, stride=2, padding=2), nn.ReLU(),
                nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.ReLU(),
                nn.AdaptiveAvgPool2d((4, 6)), nn.Flatten(),
            )
            with torch.no_grad():
                for m in self.body:
                    if isinstance(m, nn.Conv2d):
                        fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                        m.weight.normal_(0.0, np.sqrt(2.0 / fan_in), generator=gen)
                        m.bias.zero_()
            self.grayscale_to_rgb = False
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, pixels: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(np.asarray(pixels), dtype=torch.float32)[None, None] / 255.0
        x = F.interpolate(x, size=self.input_hw, mode="bilinear", align_corners=False)
        if self.grayscale_to_rgb:
            x = x.expand(1, 3, *self.input_hw)
        with torch.no_grad():
            return self.body(x)[0].numpy().astype(np.float64)


@dataclass
class GazeEstimator:
    kind: str
    head: RegressionHead
    featurize: Callable
    history: list[float] = field(default_factory=list)

    def features(self, sample) -> np.ndarray:
        return self.featurize(sample)

    def predict(self, samples) -> np.ndarray:
        x = torch.as_tensor(np.stack([self.featurize(s) for s in samples]), dtype=torch.float32)
        self.head.eval()
        with torch.no_grad():
            return self.head(x).double().numpy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.head.state_dict().items():
            h.update(name.encode())
            h.update(t.contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


def make_featurizer(kind: str, mask_provider=None, extractor: Optional[AppearanceExtractor] = None,
                    seed: int = 42) -> Callable:
    if kind in ("model_based", "model"):
        if mask_provider is None:
            raise GazeError("model-based estimation needs a mask provider")
        return lambda sample: extract_landmarks(mask_provider(sample))
    if kind in ("appearance_based", "appearance"):
        ext = extractor or AppearanceExtractor(seed)
        return lambda sample: ext(sample.pixels)
    raise GazeError(f"unknown estimator kind {kind!r}")


def train_gaze_estimator(kind: str, samples, config: GazeTrainConfig = GazeTrainConfig(),
                         mask_provider=None, extractor: Optional[AppearanceExtractor] = None) -> GazeEstimator:
    """Fit a regression head over landmark (model-based) or encoder (appearance-based) features."""
    samples = [s for s in samples]
    if not samples:
        raise GazeError("cannot train a gaze estimator on an empty dataset")
    if any(s.gaze is None for s in samples):
        raise GazeError("every training sample needs a gaze label")
    featurize = make_featurizer(kind, mask_provider, extractor, config.seed)
    x = np.stack([featurize(s) for s in samples]).astype(np.float32)
    y = np.stack([s.gaze for s in samples]).astype(np.float32)

    losses = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        head = RegressionHead(x.shape[1], config.hidden, config.dropout)
        head.feat_mean.copy_(torch.from_numpy(x.mean(0)))
        head.feat_std.copy_(torch.from_numpy(x.std(0) + 1e-6))
        opt = torch.optim.Adam(head.parameters(), lr=config.learning_rate)
        xs, ys = torch.from_numpy(x), torch.from_numpy(y)
        gen = torch.Generator().manual_seed(config.seed)
        for _ in range(config.epochs):
            head.train()
            perm = torch.randperm(len(ys), generator=gen)
            total = 0.0
            for i in range(0, len(perm), config.batch_size):
                idx = perm[i:i + config.batch_size]
                opt.zero_grad()
                loss = ((head(xs[idx]) - ys[idx]) ** 2).sum(1).mean()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            losses.append(total / len(ys))
    head.eval()
    canonical = "model_based" if kind in ("model_based", "model") else "appearance_based"
    return GazeEstimator(canonical, head, featurize, losses)


@dataclass
class GazeEvaluation:
    record_ids: list[str]
    errors: np.ndarray

    @property
    def mean_error(self) -> float:
        return float(self.errors.mean())


def evaluate_gaze(estimator: GazeEstimator, samples, transform: Optional[Callable] = None) -> GazeEvaluation:
    """Mean and per-sample angular error, optionally after ``transform(sample) -> pixels``."""
    samples = list(samples)
    before = estimator.checksum()
    if transform is not None:
        samples = [s.with_pixels(transform(s)) for s in samples]
    pred = estimator.predict(samples)
    truth = np.stack([s.gaze for s in samples])
    errors = angular_errors(pred, truth)
    if estimator.checksum() != before:
        raise RuntimeError("gaze estimator parameters changed during evaluation")
    return GazeEvaluation([s.record_id for s in samples], errors)


def constant_baseline_error(train_samples, test_samples) -> float:
    """Mean angular error of always predicting the mean training gaze direction."""
    mean = np.mean([s.gaze for s in train_samples], axis=0)
    truth = np.stack([s.gaze for s in test_samples])
    return float(angular_errors(np.repeat(mean[None], len(truth), 0), truth).mean())
