"""Style statistics and feed-forward embeddings of iris crops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .backbone import STYLE_TAPS, TAP_CHANNELS, Backbone, BackboneError, activations, prepare_input

EPS = 1e-8
CNN_SIZE = 224
STYLE_KIND = "style-default"
CNN_KIND = "cnn-224"


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray


def channel_stats_t(fmap: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and population std of an (..., N, H, W) tensor; differentiable."""
    flat = fmap.flatten(-2)
    mu = flat.mean(-1)
    var = ((flat - mu.unsqueeze(-1)) ** 2).mean(-1)
    return mu, torch.sqrt(var + eps)


def _sorted_stats(f: torch.Tensor, eps: float = EPS) -> tuple[torch.Tensor, torch.Tensor]:
    # values are sorted per channel first so the float sums do not depend on pixel order
    # and laid out contiguously, since strided inputs change the reduction order
    flat = torch.sort(f.detach().double().contiguous().flatten(-2), dim=-1).values.contiguous()
    mu = flat.mean(-1)
    var = ((flat - mu.unsqueeze(-1)) ** 2).mean(-1)
    return mu, torch.sqrt(var + eps)


def channel_stats(fmap, eps: float = EPS) -> ChannelStats:
    """Per-channel statistics in float64; exactly invariant to spatial permutations."""
    f = torch.as_tensor(np.asarray(fmap, dtype=np.float64))
    if f.dim() != 3 or f.shape[1] * f.shape[2] < 1:
        raise ValueError(f"expected an N x H x W map, got shape {tuple(f.shape)}")
    mu, sigma = _sorted_stats(f, eps)
    return ChannelStats(mu.numpy(), sigma.numpy())


def style_vector(maps: Mapping[str, object], taps: Sequence[str] = STYLE_TAPS) -> np.ndarray:
    """Concatenate [mean, std] of each tap, in tap order, from given activation maps."""
    parts = []
    for tap in taps:
        fmap = maps[tap]
        f = fmap if isinstance(fmap, torch.Tensor) else torch.as_tensor(np.asarray(fmap))
        mu, sigma = _sorted_stats(f)
        parts += [mu.numpy(), sigma.numpy()]
    return np.concatenate(parts).astype(np.float32)


def style_dim(taps: Sequence[str] = STYLE_TAPS) -> int:
    return sum(2 * TAP_CHANNELS[t] for t in taps)


def style_feature(handle: Backbone, crop, taps: Sequence[str] = STYLE_TAPS, size: int | None = None) -> np.ndarray:
    """Style descriptor of a crop (length 1,920 for the default taps)."""
    taps = list(taps)
    if not taps:
        raise BackboneError("style feature needs at least one tap")
    x = prepare_input(crop, size or handle.input_size)
    return style_vector(activations(handle, x, taps), taps)


def cnn_feature(handle: Backbone, crop, size: int = CNN_SIZE) -> np.ndarray:
    """Flattened final-encoding activations (channel, row, column order)."""
    x = prepare_input(crop, size)
    return activations(handle, x, ["final_encoding"])["final_encoding"].reshape(-1).numpy().astype(np.float32)


def extract_features(handle: Backbone, crop, kinds: Sequence[str] = (STYLE_KIND, CNN_KIND),
                     taps: Sequence[str] = STYLE_TAPS) -> dict[str, np.ndarray]:
    """Both descriptors from one forward pass when sizes coincide."""
    kinds = list(kinds)
    out: dict[str, np.ndarray] = {}
    if CNN_KIND in kinds and handle.input_size == CNN_SIZE:
        x = prepare_input(crop, CNN_SIZE)
        acts = activations(handle, x, list(taps) + ["final_encoding"])
        out[CNN_KIND] = acts["final_encoding"].reshape(-1).numpy().astype(np.float32)
        if STYLE_KIND in kinds:
            out[STYLE_KIND] = style_vector(acts, taps)
        return out
    if STYLE_KIND in kinds:
        out[STYLE_KIND] = style_feature(handle, crop, taps)
    if CNN_KIND in kinds:
        out[CNN_KIND] = cnn_feature(handle, crop)
    return out
