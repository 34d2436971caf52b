"""Frozen VGG19 feature network with named post-activation taps.

Weights mapping: the network is ``torchvision.models.vgg19().features``.
A weights file may hold either a full torchvision VGG19 state dict
(``features.<i>.weight`` / ``features.<i>.bias``; classifier keys are
ignored) or a features-only dict (``<i>.weight`` / ``<i>.bias``). Without a
weights file, :func:`init_backbone` builds a seeded, deterministic
initialization of the same topology.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import vgg19

log = logging.getLogger(__name__)

DEFAULT_INPUT_SIZE = 224
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

# tap name -> index of the producing module in vgg19().features
TAP_INDEX: dict[str, int] = {
    "relu1_1": 1, "relu1_2": 3,
    "relu2_1": 6, "relu2_2": 8,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17,
    "relu4_1": 20, "relu4_2": 22, "relu4_3": 24, "relu4_4": 26,
    "relu5_1": 29, "relu5_2": 31, "relu5_3": 33, "relu5_4": 35,
    "final_encoding": 36,
}
TAP_CHANNELS: dict[str, int] = {
    name: (64 if name.startswith("relu1") else 128 if name.startswith("relu2") else
           256 if name.startswith("relu3") else 512)
    for name in TAP_INDEX
}
STYLE_TAPS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1")
CONTENT_TAP = "relu4_2"


class BackboneError(ValueError):
    pass


@dataclass(frozen=True)
class ActivationTap:
    name: str
    channels: int

    def spatial(self, height: int, width: int) -> tuple[int, int]:
        """Spatial size of this tap for an input of ``height`` x ``width``."""
        pools = sum(1 for i in _POOL_INDICES if i < TAP_INDEX[self.name])
        if self.name == "final_encoding":
            pools = len(_POOL_INDICES)
        for _ in range(pools):
            height, width = height // 2, width // 2
        return height, width

    def flat_length(self, height: int, width: int) -> int:
        h, w = self.spatial(height, width)
        return self.channels * h * w


_POOL_INDICES = (4, 9, 18, 27, 36)


def _expected_shapes() -> dict[str, tuple[int, ...]]:
    return {k: tuple(v.shape) for k, v in vgg19(weights=None).features.state_dict().items()}


class Backbone:
    """Immutable handle around the VGG19 convolutional stack."""

    def __init__(self, features: nn.Sequential, input_size: int = DEFAULT_INPUT_SIZE):
        if input_size < 32:
            raise BackboneError("input size must be >= 32")
        self.features = features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        self.input_size = int(input_size)
        self.checksum = weights_checksum(self.features)
        self.taps = {name: ActivationTap(name, ch) for name, ch in TAP_CHANNELS.items()}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.features.parameters()).dtype

    def to(self, dtype: torch.dtype) -> "Backbone":
        """A copy of this handle in another floating dtype (e.g. float64 for gradient checks)."""
        clone = vgg19(weights=None).features
        clone.load_state_dict(self.features.state_dict())
        return Backbone(clone.to(dtype), self.input_size)

    def check_taps(self, taps: Iterable[str]) -> list[str]:
        taps = list(taps)
        unknown = [t for t in taps if t not in TAP_INDEX]
        if unknown:
            raise BackboneError(f"unknown tap(s) {unknown}; available: {sorted(TAP_INDEX)}")
        return taps

    def forward_taps(self, x: torch.Tensor, taps: Sequence[str]) -> dict[str, torch.Tensor]:
        """Run the stack up to the deepest requested tap; differentiable in ``x``."""
        taps = self.check_taps(taps)
        wanted = {TAP_INDEX[t]: t for t in taps}
        last = max(wanted)
        out: dict[str, torch.Tensor] = {}
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        for i, layer in enumerate(self.features):
            if i > last:
                break
            x = layer(x)
            if i in wanted:
                out[wanted[i]] = x[0] if squeeze else x
        return out


def weights_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def init_backbone(seed: int = 42, input_size: int = DEFAULT_INPUT_SIZE) -> Backbone:
    """Seeded He-normal initialization of the VGG19 stack (no pre-trained weights)."""
    gen = torch.Generator().manual_seed(int(seed))
    features = vgg19(weights=None).features
    with torch.no_grad():
        for layer in features:
            if isinstance(layer, nn.Conv2d):
                fan_out = layer.out_channels * layer.kernel_size[0] * layer.kernel_size[1]
                layer.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
                layer.bias.zero_()
    return Backbone(features, input_size)


def load_backbone(weights_path=None, input_size: int = DEFAULT_INPUT_SIZE, seed: int = 42) -> Backbone:
    """Load VGG19 weights from ``weights_path`` (or ``$ISL_WEIGHTS``).

    With neither available, falls back to :func:`init_backbone` and logs a warning.
    """
    if weights_path is None:
        weights_path = os.environ.get("ISL_WEIGHTS") or None
    if weights_path is None:
        log.warning("no backbone weights configured; using seeded random initialization (seed=%d)", seed)
        return init_backbone(seed, input_size)
    path = Path(weights_path)
    if not path.exists():
        raise BackboneError(f"weights file not found: {path}")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # truncated or foreign files surface here
        raise BackboneError(f"cannot read weights file {path}: {exc}") from exc
    if not isinstance(state, Mapping):
        raise BackboneError(f"{path} does not contain a state dict")
    if any(k.startswith("features.") for k in state):
        state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}

    expected = _expected_shapes()
    found = {k: tuple(v.shape) for k, v in state.items()}
    if found != expected:
        lines = [f"  {k}: expected {expected.get(k)}, found {found.get(k)}"
                 for k in sorted(set(expected) | set(found)) if expected.get(k) != found.get(k)]
        raise BackboneError("weights do not match the VGG19 topology:\n" + "\n".join(lines))
    features = vgg19(weights=None).features
    features.load_state_dict({k: v.float() for k, v in state.items()})
    return Backbone(features, input_size)


def save_backbone(handle: Backbone, path) -> None:
    torch.save({f"features.{k}": v for k, v in handle.features.state_dict().items()}, Path(path))


def prepare_tensor(crop_pixels: torch.Tensor, size: int) -> torch.Tensor:
    """h x w grayscale tensor in [0,1] -> normalized 3 x S x S network input (differentiable)."""
    if size < 32:
        raise BackboneError("input size must be >= 32")
    x = crop_pixels.unsqueeze(0).unsqueeze(0)
    if tuple(x.shape[-2:]) != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    x = x.expand(1, 3, size, size)
    mean = torch.tensor(IMAGENET_MEAN, dtype=x.dtype).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, dtype=x.dtype).view(1, 3, 1, 1)
    return ((x - mean) / std)[0]


def prepare_input(crop, size: int = DEFAULT_INPUT_SIZE, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Replicate a grayscale crop into 3 channels, stretch to S x S, normalize."""
    pixels = getattr(crop, "pixels", crop)
    pixels = torch.as_tensor(np.asarray(pixels), dtype=dtype)
    if pixels.numel() == 0:
        raise BackboneError("empty crop")
    return prepare_tensor(pixels, size)


def activations(handle: Backbone, prepared: torch.Tensor, taps: Sequence[str]) -> dict[str, torch.Tensor]:
    """Tap name -> N x H x W activations (no gradient tracking)."""
    with torch.no_grad():
        return handle.forward_taps(prepared.to(handle.dtype), taps)


Objective = Callable[[Mapping[str, torch.Tensor]], torch.Tensor]


def input_gradient(handle: Backbone, prepared: torch.Tensor, objective: Objective,
                   taps: Sequence[str]) -> torch.Tensor:
    """Gradient of ``objective(activations)`` with respect to the prepared input."""
    handle.check_taps(taps)
    x = prepared.detach().to(handle.dtype).clone().requires_grad_(True)
    acts = handle.forward_taps(x, taps)
    value = objective(acts)
    if not value.requires_grad:
        return torch.zeros_like(x)
    (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad
