"""Dataset manifests, loaders, deterministic splits and the synthetic eye corpus."""

from __future__ import annotations

import csv
import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .imaging import IRIS, PUPIL, SCLERA, SKIN

log = logging.getLogger(__name__)

GAZE_NORM_TOL = 1e-4


class DatasetError(ValueError):
    pass


def stable_hash(*parts) -> int:
    """Platform-independent 32-bit hash of the string forms of ``parts``."""
    text = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(text).digest()[:4], "little")


def substream(seed: int, name: str, *extra) -> np.random.Generator:
    """Named random stream derived from the global seed."""
    return np.random.default_rng([int(seed), stable_hash(name, *extra)])


def normalize_gaze(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).reshape(3)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise DatasetError(f"gaze vector {v.tolist()} cannot be normalized")
    return v / n


@dataclass
class Record:
    record_id: str
    user_id: str
    image_path: Optional[Path] = None
    mask_path: Optional[Path] = None
    gaze: Optional[np.ndarray] = None
    split: str = "train"
    label: int = -1


@dataclass
class Sample:
    """An eye image with its mask, identity and optional gaze label."""

    record_id: str
    user_id: str
    pixels: np.ndarray
    mask: Optional[np.ndarray] = None
    gaze: Optional[np.ndarray] = None
    split: str = "train"
    label: int = -1

    def with_pixels(self, pixels: np.ndarray) -> "Sample":
        return replace(self, pixels=pixels)


@dataclass
class DatasetManifest:
    records: list[Record]
    classes: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def load_samples(self, split: Optional[str] = None) -> list[Sample]:
        records = self.records if split is None else self.split(split)
        return [load_sample(r) for r in records]


def read_gray(path: Path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("L", "I;16", "I"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8)


def write_gray(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(path)


def read_mask(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        labels = np.load(path)
    else:
        labels = np.asarray(Image.open(path), dtype=np.uint8)
    labels = labels.astype(np.uint8)
    if labels.size and labels.max() > PUPIL:
        raise DatasetError(f"{path}: label values must lie in 0..3")
    return labels


def load_sample(record: Record) -> Sample:
    if record.image_path is None:
        raise DatasetError(f"record {record.record_id} has no image path")
    pixels = read_gray(record.image_path)
    mask = read_mask(record.mask_path) if record.mask_path is not None else None
    return Sample(record.record_id, record.user_id, pixels, mask, record.gaze, record.split, record.label)


# --- splitting --------------------------------------------------------------


def test_count(n: int, test_fraction: float) -> int:
    """Per-user test share: round half up, at least one test and one train sample."""
    k = int(np.floor(test_fraction * n + 0.5))
    return min(max(k, 1), n - 1)


def assign_splits(records: Sequence[Record], test_fraction: float, seed: int) -> DatasetManifest:
    """Drop users with < 2 samples, label users lexicographically, split per user."""
    if not 0.0 < test_fraction < 1.0:
        raise DatasetError("test_fraction must lie in (0, 1)")
    by_user: dict[str, list[Record]] = defaultdict(list)
    for r in records:
        by_user[r.user_id].append(r)
    dropped = sorted(u for u, rs in by_user.items() if len(rs) < 2)
    if dropped:
        log.info("dropping %d user(s) with fewer than 2 samples: %s", len(dropped), dropped)
    users = sorted(u for u, rs in by_user.items() if len(rs) >= 2)
    if len(users) < 2:
        raise DatasetError(f"need at least 2 users with >= 2 samples, found {len(users)}")

    rng = substream(seed, "split")
    out: list[Record] = []
    for label, user in enumerate(users):
        rs = sorted(by_user[user], key=lambda r: r.record_id)
        order = rng.permutation(len(rs))
        n_test = test_count(len(rs), test_fraction)
        test_idx = set(order[:n_test].tolist())
        for i, r in enumerate(rs):
            out.append(replace(r, label=label, split="test" if i in test_idx else "train"))
    return DatasetManifest(out, users)


def load_recognition_dataset(root, test_fraction: float = 0.2, seed: int = 42) -> DatasetManifest:
    """Read ``root/images/*.png`` with masks in ``root/labels/`` (same stem).

    User identity comes from ``root/meta.csv`` (``stem,user_id``) when present,
    otherwise from the stem prefix before the first underscore.
    """
    root = Path(root)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise DatasetError(f"no images found under {root / 'images'}")
    users: dict[str, str] = {}
    meta = root / "meta.csv"
    if meta.exists():
        with meta.open(newline="") as fh:
            for row in csv.DictReader(fh):
                users[row["stem"]] = row["user_id"]

    records = []
    for img in images:
        stem = img.stem
        mask = next((p for p in (root / "labels" / f"{stem}.npy", root / "labels" / f"{stem}.png") if p.exists()), None)
        if mask is None:
            raise DatasetError(f"record {stem}: missing segmentation mask in {root / 'labels'}")
        user = users.get(stem, stem.split("_")[0])
        records.append(Record(stem, user, img, mask))
    return assign_splits(records, test_fraction, seed)


def load_gaze_dataset(root) -> DatasetManifest:
    """Read ``root/sequences/<seq>/*.png`` with ``root/labels/<seq>.txt`` gaze files.

    Optional ``root/splits.csv`` (``seq_id,split``) keeps the original partition,
    optional ``root/meta.csv`` (``seq_id,user_id``) names users, and optional
    ``root/masks/<seq>/<frame>.png`` supplies segmentation masks.
    """
    root = Path(root)
    seq_dirs = sorted(p for p in (root / "sequences").glob("*") if p.is_dir()) if (root / "sequences").is_dir() else []
    if not seq_dirs:
        raise DatasetError(f"no sequences found under {root / 'sequences'}")
    splits = _read_pairs(root / "splits.csv", "seq_id", "split")
    users = _read_pairs(root / "meta.csv", "seq_id", "user_id")

    records = []
    for seq in seq_dirs:
        split = splits.get(seq.name, "train")
        labels = {}
        label_file = root / "labels" / f"{seq.name}.txt"
        if label_file.exists():
            for line in label_file.read_text().splitlines():
                parts = line.split()
                if len(parts) == 4:
                    labels[parts[0]] = normalize_gaze([float(v) for v in parts[1:]])
        for frame in sorted(seq.glob("*.png")):
            if frame.stem not in labels:
                raise DatasetError(f"sequence {seq.name} frame {frame.stem}: no gaze vector in split {split!r}")
            mask = root / "masks" / seq.name / f"{frame.stem}.png"
            records.append(Record(f"{seq.name}/{frame.stem}", users.get(seq.name, seq.name), frame,
                                  mask if mask.exists() else None, labels[frame.stem], split))
    if not records:
        raise DatasetError(f"no frames found under {root / 'sequences'}")
    classes = sorted({r.user_id for r in records})
    index = {u: i for i, u in enumerate(classes)}
    return DatasetManifest([replace(r, label=index[r.user_id]) for r in records], classes)


def _read_pairs(path: Path, key: str, value: str) -> dict[str, str]:
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        return {row[key]: row[value] for row in csv.DictReader(fh)}


# --- synthetic corpus ------------------------------------------------------


@dataclass
class IrisSignature:
    """Per-user procedural texture parameters."""

    radial_freq: np.ndarray
    angular_freq: np.ndarray
    phase: np.ndarray
    amplitude: np.ndarray
    noise: np.ndarray  # smooth field on the normalized (radius, angle) grid
    base: float
    glint_angles: np.ndarray
    pupil_ratio: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "IrisSignature":
        k = int(rng.integers(3, 7))
        noise = rng.normal(size=(12, 48))
        # wrap-around smoothing along the angle axis, plain along the radius
        for _ in range(2):
            noise = (np.roll(noise, 1, axis=1) + noise + np.roll(noise, -1, axis=1)) / 3.0
            noise[1:-1] = (noise[:-2] + noise[1:-1] + noise[2:]) / 3.0
        noise /= noise.std() + 1e-12
        return cls(
            radial_freq=rng.uniform(2.0, 14.0, size=k),
            angular_freq=rng.integers(0, 24, size=k).astype(np.float64),
            phase=rng.uniform(0, 2 * np.pi, size=k),
            amplitude=rng.uniform(0.3, 1.0, size=k),
            noise=noise,
            base=float(rng.uniform(0.25, 0.75)),
            glint_angles=rng.uniform(0, 2 * np.pi, size=2),
            pupil_ratio=float(rng.uniform(0.3, 0.42)),
        )

    def texture(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Texture in [0, 1] at normalized radius ``rho`` in [0,1] and angle ``theta``."""
        t = np.zeros_like(rho)
        for f, n, ph, a in zip(self.radial_freq, self.angular_freq, self.phase, self.amplitude):
            t += a * np.sin(2 * np.pi * f * rho + n * theta + ph)
        t /= self.amplitude.sum()
        nr, na = self.noise.shape
        ri = np.clip(rho, 0, 1) * (nr - 1)
        ai = (np.mod(theta, 2 * np.pi) / (2 * np.pi)) * na
        r0 = np.floor(ri).astype(int)
        a0 = np.floor(ai).astype(int)
        fr, fa = ri - r0, ai - a0
        r1 = np.minimum(r0 + 1, nr - 1)
        a0 %= na
        a1 = (a0 + 1) % na
        n = ((1 - fr) * (1 - fa) * self.noise[r0, a0] + fr * (1 - fa) * self.noise[r1, a0]
             + (1 - fr) * fa * self.noise[r0, a1] + fr * fa * self.noise[r1, a1])
        return np.clip(self.base + 0.28 * t + 0.12 * n, 0.0, 1.0)


# intensity bands; brightness jitter keeps them separable for threshold segmentation
PUPIL_LEVEL = (8, 20)
IRIS_LEVEL = (45, 105)
SKIN_LEVEL = (135, 160)
SCLERA_LEVEL = (205, 230)
GLINT_VALUE = 255
GLINT_RADIUS = 2.2
MAX_GAZE_DEG = 25.0
DILATION_JITTER = 0.08
BRIGHTNESS_JITTER = 0.04


@dataclass
class SyntheticCorpus:
    samples: list[Sample]
    classes: list[str]

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def manifest(self) -> DatasetManifest:
        return DatasetManifest(
            [Record(s.record_id, s.user_id, gaze=s.gaze, split=s.split, label=s.label) for s in self.samples],
            list(self.classes))


def gaze_from_angles(yaw_deg: float, pitch_deg: float) -> np.ndarray:
    yaw, pitch = np.deg2rad(yaw_deg), np.deg2rad(pitch_deg)
    return normalize_gaze([np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])


def render_eye(signature: IrisSignature, size: tuple[int, int], rng: np.random.Generator,
               gaze: np.ndarray, dilation: float, brightness: float) -> tuple[np.ndarray, np.ndarray]:
    """Render one eye image and its exact label map."""
    h, w = size
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    iris_r = 0.22 * h
    # gaze moves the iris across the eye opening
    icx = cx + gaze[0] * 0.55 * w * 0.5
    icy = cy - gaze[1] * 0.55 * h * 0.5
    pupil_r = iris_r * signature.pupil_ratio * dilation

    eye_a, eye_b = 0.42 * w, 0.36 * h
    opening = ((xs - cx) / eye_a) ** 2 + ((ys - cy) / eye_b) ** 2 <= 1.0
    dist = np.hypot(xs - icx, ys - icy)
    labels = np.full((h, w), SKIN, dtype=np.uint8)
    labels[opening] = SCLERA
    labels[opening & (dist <= iris_r)] = IRIS
    labels[opening & (dist <= pupil_r)] = PUPIL

    skin = SKIN_LEVEL[0] + (SKIN_LEVEL[1] - SKIN_LEVEL[0]) * (0.5 + 0.5 * np.sin(xs / 9.0) * np.cos(ys / 13.0))
    sclera = SCLERA_LEVEL[0] + (SCLERA_LEVEL[1] - SCLERA_LEVEL[0]) * (0.5 + 0.5 * np.cos((xs - cx) / (0.3 * w)))
    rho = np.clip((dist - pupil_r) / max(iris_r - pupil_r, 1e-6), 0.0, 1.0)
    theta = np.arctan2(ys - icy, xs - icx)
    iris = IRIS_LEVEL[0] + (IRIS_LEVEL[1] - IRIS_LEVEL[0]) * signature.texture(rho, theta)
    pupil = np.full((h, w), float(np.mean(PUPIL_LEVEL)))

    img = np.select([labels == PUPIL, labels == IRIS, labels == SCLERA], [pupil, iris, sclera], skin)
    img = img * brightness + rng.normal(0.0, 1.5, size=(h, w))
    img = np.clip(np.rint(img), 0, 245)

    # glints sit in the outer iris annulus, at user-specific angles
    glint_r = pupil_r + 0.6 * (iris_r - pupil_r)
    for ang in signature.glint_angles:
        gx, gy = icx + glint_r * np.cos(ang), icy + glint_r * np.sin(ang)
        disc = (np.hypot(xs - gx, ys - gy) <= GLINT_RADIUS) & (labels == IRIS)
        img[disc] = GLINT_VALUE
    return img.astype(np.uint8), labels


def generate_synthetic_corpus(n_users: int = 10, samples_per_user: int = 10,
                              image_size: tuple[int, int] = (200, 320), seed: int = 42,
                              test_fraction: float = 0.2) -> SyntheticCorpus:
    """Procedural eye corpus with per-user iris signatures, masks and gaze labels."""
    if n_users < 2:
        raise DatasetError("synthetic corpus needs n_users >= 2")
    if samples_per_user < 2:
        raise DatasetError("synthetic corpus needs samples_per_user >= 2")
    h, w = image_size
    if h < 32 or w < 32:
        raise DatasetError("image_size must be at least 32x32")

    width = len(str(n_users - 1))
    samples = []
    for u in range(n_users):
        user_id = f"u{u:0{width}d}"
        signature = IrisSignature.draw(substream(seed, "signature", u))
        rng = substream(seed, "samples", u)
        for s in range(samples_per_user):
            yaw, pitch = rng.uniform(-MAX_GAZE_DEG, MAX_GAZE_DEG, size=2)
            gaze = gaze_from_angles(yaw, pitch)
            dilation = 1.0 + rng.uniform(-DILATION_JITTER, DILATION_JITTER)
            brightness = 1.0 + rng.uniform(-BRIGHTNESS_JITTER, BRIGHTNESS_JITTER)
            pixels, mask = render_eye(signature, (h, w), rng, gaze, dilation, brightness)
            samples.append(Sample(f"{user_id}_{s:03d}", user_id, pixels, mask, gaze))

    records = [Record(s.record_id, s.user_id) for s in samples]
    manifest = assign_splits(records, test_fraction, seed)
    info = {r.record_id: r for r in manifest.records}
    samples = [replace(s, split=info[s.record_id].split, label=info[s.record_id].label) for s in samples]
    return SyntheticCorpus(samples, manifest.classes)


def write_recognition_layout(samples: Iterable[Sample], root) -> None:
    """Write ``images/``, ``labels/`` and ``meta.csv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    rows = []
    for s in samples:
        write_gray(root / "images" / f"{s.record_id}.png", s.pixels)
        if s.mask is not None:
            write_gray(root / "labels" / f"{s.record_id}.png", s.mask)
        rows.append((s.record_id, s.user_id))
    with (root / "meta.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stem", "user_id"])
        writer.writerows(rows)


def write_gaze_layout(samples: Iterable[Sample], root, splits: Optional[dict[str, str]] = None) -> None:
    """Write one sequence per user with gaze label files, masks and split table."""
    root = Path(root)
    by_seq: dict[str, list[Sample]] = defaultdict(list)
    for s in samples:
        by_seq[s.user_id].append(s)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for seq, items in sorted(by_seq.items()):
        lines = []
        for i, s in enumerate(items):
            frame = f"{i:04d}"
            write_gray(root / "sequences" / seq / f"{frame}.png", s.pixels)
            if s.mask is not None:
                write_gray(root / "masks" / seq / f"{frame}.png", s.mask)
            g = s.gaze
            lines.append(f"{frame} {g[0]:.8f} {g[1]:.8f} {g[2]:.8f}")
        (root / "labels" / f"{seq}.txt").write_text("\n".join(lines) + "\n")
    with (root / "splits.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seq_id", "split"])
        for seq in sorted(by_seq):
            writer.writerow([seq, (splits or {}).get(seq, "train")])
