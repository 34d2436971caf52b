"""Iris region extraction, recomposition and geometric variations.

Segmentation labels follow the OpenEDS convention: 0 skin/background,
1 sclera, 2 iris, 3 pupil.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

SKIN, SCLERA, IRIS, PUPIL = 0, 1, 2, 3
MIN_IRIS_PIXELS = 64
DEFAULT_GLINT_THRESHOLD = 250


class IrisRegionError(ValueError):
    pass


@dataclass
class GlintMap:
    """Glint pixel coordinates (crop frame) and their original 8-bit values."""

    rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cols: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint8))

    def __len__(self) -> int:
        return int(self.rows.size)

    def as_mask(self, shape: tuple[int, int]) -> np.ndarray:
        out = np.zeros(shape, dtype=bool)
        out[self.rows, self.cols] = True
        return out


@dataclass
class IrisCrop:
    """Float iris texture cut out of an eye image.

    ``pixels`` is h x w in [0, 1]; ``bbox`` is (row0, col0, h, w) in the
    source image; ``validity`` marks iris pixels that are not glints.
    """

    pixels: np.ndarray
    bbox: tuple[int, int, int, int]
    validity: np.ndarray
    glints: GlintMap = field(default_factory=GlintMap)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @property
    def iris(self) -> np.ndarray:
        """Boolean map of every iris-class pixel in the crop, glints included."""
        return self.validity | self.glints.as_mask(self.shape)

    def with_pixels(self, pixels: np.ndarray) -> "IrisCrop":
        return replace(self, pixels=np.asarray(pixels, dtype=np.float32))


def _as_pixels(image) -> np.ndarray:
    px = getattr(image, "pixels", image)
    px = np.asarray(px)
    if px.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {px.shape}")
    return px


def _as_labels(mask) -> np.ndarray:
    return np.asarray(getattr(mask, "labels", mask))


def iris_bbox(mask) -> tuple[int, int, int, int]:
    """Tight bounding box (row0, col0, h, w) of the iris class."""
    labels = _as_labels(mask)
    rows = np.flatnonzero((labels == IRIS).any(axis=1))
    cols = np.flatnonzero((labels == IRIS).any(axis=0))
    if rows.size == 0:
        raise IrisRegionError("mask contains no iris pixels")
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    return r0, c0, r1 - r0, c1 - c0


def extract_iris(image, mask, glint_threshold: float = DEFAULT_GLINT_THRESHOLD) -> IrisCrop:
    """Mask out non-iris pixels, trim to the iris bounding box and remove glints.

    Glint pixels (intensity >= ``glint_threshold`` on the iris) are remembered
    in the crop's :class:`GlintMap` and in-painted with the median of the
    remaining iris pixels so that activation statistics see no saturation.
    """
    pixels = _as_pixels(image)
    labels = _as_labels(mask)
    if labels.shape != pixels.shape:
        raise ValueError(f"mask shape {labels.shape} != image shape {pixels.shape}")
    if not 0 < glint_threshold <= 255:
        raise ValueError("glint_threshold must lie in (0, 255]")
    n_iris = int((labels == IRIS).sum())
    if n_iris == 0:
        raise IrisRegionError("mask contains no iris pixels")
    if n_iris < MIN_IRIS_PIXELS:
        raise IrisRegionError(f"iris region too small ({n_iris} < {MIN_IRIS_PIXELS} pixels)")

    r0, c0, h, w = iris_bbox(labels)
    sub = pixels[r0:r0 + h, c0:c0 + w]
    iris = labels[r0:r0 + h, c0:c0 + w] == IRIS
    glint = iris & (sub >= glint_threshold)
    valid = iris & ~glint

    crop = np.where(iris, sub, 0).astype(np.float32) / np.float32(255.0)
    if glint.any():
        fill = np.median(crop[valid]) if valid.any() else 0.0
        crop[glint] = fill
    g_rows, g_cols = np.nonzero(glint)
    glints = GlintMap(g_rows, g_cols, sub[g_rows, g_cols].astype(np.uint8))
    return IrisCrop(crop, (r0, c0, h, w), valid, glints)


def reinsert(original, stylized: IrisCrop, mask) -> np.ndarray:
    """Paste a (stylized) iris crop back into ``original``; glints are restored.

    Returns a new uint8 image. Pixels outside the iris class are untouched.
    """
    pixels = _as_pixels(original)
    labels = _as_labels(mask)
    bbox = iris_bbox(labels)
    if tuple(stylized.bbox) != bbox:
        raise ValueError(f"crop bbox {tuple(stylized.bbox)} does not match mask bbox {bbox}")
    r0, c0, h, w = bbox
    if stylized.pixels.shape != (h, w):
        raise ValueError(f"crop shape {stylized.pixels.shape} != bbox size {(h, w)}")

    out = pixels.astype(np.uint8, copy=True)
    region = out[r0:r0 + h, c0:c0 + w]
    iris = labels[r0:r0 + h, c0:c0 + w] == IRIS
    values = np.clip(np.rint(stylized.pixels.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    region[iris] = values[iris]
    g = stylized.glints
    region[g.rows, g.cols] = g.values
    return out


# --- geometric variations --------------------------------------------------


def _sample(img: np.ndarray, src_x: np.ndarray, src_y: np.ndarray, order: int) -> np.ndarray:
    """Sample ``img`` at float source coordinates; outside samples are 0."""
    h, w = img.shape
    if order == 0:
        xi = np.rint(src_x).astype(np.int64)
        yi = np.rint(src_y).astype(np.int64)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        out = np.zeros(src_x.shape, dtype=img.dtype)
        out[inside] = img[yi[inside], xi[inside]]
        return out

    x0 = np.floor(src_x).astype(np.int64)
    y0 = np.floor(src_y).astype(np.int64)
    fx = (src_x - x0).astype(np.float64)
    fy = (src_y - y0).astype(np.float64)
    out = np.zeros(src_x.shape, dtype=np.float64)
    # a sample is "inside" iff its coordinate falls in the pixel-centre hull
    inside = (src_x >= -1e-9) & (src_x <= w - 1 + 1e-9) & (src_y >= -1e-9) & (src_y <= h - 1 + 1e-9)
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xs = np.clip(x0 + dx, 0, w - 1)
        ys = np.clip(y0 + dy, 0, h - 1)
        out += wt * img[ys, xs]
    out[~inside] = 0.0
    return out.astype(img.dtype)


def warp(img: np.ndarray, inverse: np.ndarray, order: int = 1) -> np.ndarray:
    """Warp ``img`` with a 3x3 matrix mapping output coords (x, y, 1) to source."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(h * w)])
    src = inverse @ pts
    src_x = (src[0] / src[2]).reshape(h, w)
    src_y = (src[1] / src[2]).reshape(h, w)
    return _sample(img, src_x, src_y, order)


def _warp_crop(crop: IrisCrop, forward: np.ndarray) -> IrisCrop:
    if np.allclose(forward, np.eye(3), rtol=0.0, atol=1e-12):
        return crop.with_pixels(crop.pixels.copy())
    inverse = np.linalg.inv(forward)
    pixels = warp(crop.pixels.astype(np.float64), inverse, order=1).astype(np.float32)
    validity = warp(crop.validity, inverse, order=0)
    # glints were already in-painted; their coordinates do not survive a warp
    return IrisCrop(pixels, crop.bbox, validity, GlintMap())


def rotation_matrix(theta_deg: float, h: int, w: int) -> np.ndarray:
    """Forward rotation about the crop centre, in (x, y) pixel coordinates."""
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = np.deg2rad(theta_deg)
    c, s = np.cos(t), np.sin(t)
    to_origin = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    back = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    return back @ rot @ to_origin


def random_rotation(crop: IrisCrop, d: float, rng: np.random.Generator) -> IrisCrop:
    """Rotate by an angle drawn uniformly from (-d, +d) degrees."""
    if d < 0:
        raise ValueError("rotation degree must be >= 0")
    theta = float(rng.uniform(-d, d)) if d > 0 else 0.0
    h, w = crop.shape
    return _warp_crop(crop, rotation_matrix(theta, h, w))


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 homography mapping four ``src`` (x, y) points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def perspective_corners(h: int, w: int, p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Original and inward-displaced corners (TL, TR, BR, BL) for degree ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("perspective degree must lie in [0, 1]")
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], dtype=np.float64)
    shifts = np.zeros((4, 2))
    for i in range(4):
        dx = rng.uniform(0, p * w / 2) if p > 0 else 0.0
        dy = rng.uniform(0, p * h / 2) if p > 0 else 0.0
        shifts[i] = dx, dy
    return src, src + inward * shifts


def random_perspective(crop: IrisCrop, p: float, rng: np.random.Generator) -> IrisCrop:
    """Warp by the homography of randomly inward-shifted corners."""
    h, w = crop.shape
    src, dst = perspective_corners(h, w, p, rng)
    return _warp_crop(crop, homography(src, dst))


def apply_variation(crop: IrisCrop, kind: str, degree: float, rng: np.random.Generator) -> IrisCrop:
    if kind == "rotation":
        return random_rotation(crop, degree, rng)
    if kind == "perspective":
        return random_perspective(crop, degree, rng)
    raise ValueError(f"unknown variation {kind!r}")
