"""Mask providers: ground truth and an intensity-threshold stand-in segmenter.

A provider is any callable ``provider(sample) -> label map``; it sees the
sample's (possibly stylized) pixels.
"""

from __future__ import annotations

import numpy as np

from .imaging import IRIS, PUPIL, SCLERA, SKIN


class ProviderError(RuntimeError):
    pass


class GroundTruthProvider:
    """Returns the annotated mask regardless of pixel content."""

    name = "truth"

    def __call__(self, sample) -> np.ndarray:
        if sample.mask is None:
            raise ProviderError(f"record {sample.record_id} has no ground-truth mask")
        return sample.mask


class ThresholdSegmenter:
    """Intensity bands of the synthetic eye renderer; near-saturated pixels count as iris glints."""

    name = "threshold"

    def __init__(self, pupil_max: int = 30, iris_max: int = 119, skin_max: int = 180, glint_min: int = 248):
        self.pupil_max = pupil_max
        self.iris_max = iris_max
        self.skin_max = skin_max
        self.glint_min = glint_min

    def __call__(self, sample) -> np.ndarray:
        px = np.asarray(getattr(sample, "pixels", sample))
        labels = np.full(px.shape, SCLERA, dtype=np.uint8)
        labels[px < self.skin_max] = SKIN
        labels[px < self.iris_max] = IRIS
        labels[px < self.pupil_max] = PUPIL
        labels[px >= self.glint_min] = IRIS
        return labels


def make_provider(name: str):
    if name == "truth":
        return GroundTruthProvider()
    if name == "threshold":
        return ThresholdSegmenter()
    raise ProviderError(
        f"unknown mask provider {name!r}; use 'truth' (annotated masks) or 'threshold' "
        "(synthetic-corpus stand-in), or pass a callable sample -> label map")
