"""Iris style transfer by quasi-Newton optimization of crop pixels.

The objective is ``alpha * content + beta * style`` where the content term is
the MSE between activations at one tap and the style term matches per-channel
means and standard deviations over several taps. Only iris pixels of the
content crop are optimized; everything else in the crop stays at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import CONTENT_TAP, STYLE_TAPS, Backbone, prepare_tensor
from .features import ChannelStats, channel_stats_t
from .imaging import DEFAULT_GLINT_THRESHOLD, IrisCrop, extract_iris, reinsert

log = logging.getLogger(__name__)

INIT_MODES = ("clone_content", "random_noise")


class TransferDivergedError(RuntimeError):
    """Raised when the objective becomes non-finite; carries the last finite state."""

    def __init__(self, epoch: int, last_pixels: np.ndarray, message: str = ""):
        super().__init__(message or f"non-finite loss at epoch {epoch}")
        self.epoch = epoch
        self.last_pixels = last_pixels


@dataclass(frozen=True)
class TransferConfig:
    alpha: float = 1.0
    beta: float = 1.0
    epochs: int = 200
    content_tap: str = CONTENT_TAP
    style_taps: tuple[str, ...] = STYLE_TAPS
    style_weights: Optional[tuple[float, ...]] = None
    step_size: float = 1.0
    max_inner_evals: int = 20
    history_size: int = 100
    init: str = "clone_content"
    input_size: Optional[int] = None
    seed: int = 42

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("need alpha >= 0, beta >= 0 and alpha + beta > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.init not in INIT_MODES:
            raise ValueError(f"init must be one of {INIT_MODES}")
        if not self.style_taps:
            raise ValueError("at least one style tap is required")
        if self.style_weights is not None:
            if len(self.style_weights) != len(self.style_taps):
                raise ValueError("one weight per style tap required")
            if any(w < 0 for w in self.style_weights):
                raise ValueError("style tap weights must be >= 0")
        if self.max_inner_evals < 1:
            raise ValueError("max_inner_evals must be >= 1")

    @property
    def weights(self) -> tuple[float, ...]:
        if self.style_weights is None:
            n = len(self.style_taps)
            return tuple(1.0 / n for _ in range(n))
        total = sum(self.style_weights)
        return tuple(w / total for w in self.style_weights) if total > 0 else tuple(self.style_weights)


@dataclass
class TransferResult:
    stylized: IrisCrop
    loss_trace: np.ndarray  # epochs x (total, content, style)
    initial_loss: tuple[float, float, float]
    evaluations: int = 0

    @property
    def final_loss(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.loss_trace[-1])  # type: ignore[return-value]


# --- losses -----------------------------------------------------------------


def content_loss_t(fc: torch.Tensor, fx: torch.Tensor) -> torch.Tensor:
    if fc.shape != fx.shape:
        raise ValueError(f"feature map shapes differ: {tuple(fc.shape)} vs {tuple(fx.shape)}")
    return ((fc - fx) ** 2).mean()


def style_loss_t(stats_s: Sequence[tuple[torch.Tensor, torch.Tensor]],
                 stats_x: Sequence[tuple[torch.Tensor, torch.Tensor]],
                 weights: Sequence[float]) -> torch.Tensor:
    if not (len(stats_s) == len(stats_x) == len(weights)):
        raise ValueError("stats and weights must have one entry per tap")
    total = None
    for (mu_s, sd_s), (mu_x, sd_x), w in zip(stats_s, stats_x, weights):
        if mu_s.shape != mu_x.shape:
            raise ValueError(f"channel counts differ: {mu_s.numel()} vs {mu_x.numel()}")
        term = w * (((mu_s - mu_x) ** 2) + ((sd_s - sd_x) ** 2)).mean()
        total = term if total is None else total + term
    return total


def content_loss(fc, fx) -> float:
    """Mean squared error between two feature maps of identical shape."""
    a = torch.as_tensor(np.asarray(fc, dtype=np.float64))
    b = torch.as_tensor(np.asarray(fx, dtype=np.float64))
    return float(content_loss_t(a, b))


def style_loss(stats_s: Sequence[ChannelStats], stats_x: Sequence[ChannelStats],
               weights: Optional[Sequence[float]] = None) -> float:
    """Weighted sum over taps of the mean squared mean/std mismatch (equal weights summing to 1 by default)."""
    if weights is None:
        weights = [1.0 / len(stats_s)] * len(stats_s)

    def as_t(s: ChannelStats):
        return (torch.as_tensor(np.asarray(s.mean, dtype=np.float64)),
                torch.as_tensor(np.asarray(s.std, dtype=np.float64)))

    return float(style_loss_t([as_t(s) for s in stats_s], [as_t(s) for s in stats_x], list(weights)))


# --- objective ----------------------------------------------------------------


class TransferObjective:
    """Frozen content activations and style statistics; evaluates losses of a crop."""

    def __init__(self, handle: Backbone, content: IrisCrop, style: IrisCrop, config: TransferConfig):
        self.handle = handle
        self.config = config
        self.size = config.input_size or handle.input_size
        self.dtype = handle.dtype
        self.weights = config.weights
        self.need_content = config.alpha > 0
        taps = list(config.style_taps) if config.beta > 0 else []
        if self.need_content:
            taps.append(config.content_tap)
        self.taps = handle.check_taps(dict.fromkeys(taps))
        with torch.no_grad():
            if self.need_content:
                acts_c = handle.forward_taps(self._prepare(content.pixels), [config.content_tap])
                self.content_target = acts_c[config.content_tap].detach()
            if config.beta > 0:
                acts_s = handle.forward_taps(self._prepare(style.pixels), list(config.style_taps))
                self.style_target = [tuple(t.detach() for t in channel_stats_t(acts_s[t]))
                                     for t in config.style_taps]

    def _prepare(self, pixels) -> torch.Tensor:
        return prepare_tensor(torch.as_tensor(np.asarray(pixels), dtype=self.dtype), self.size)

    def terms(self, pixels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        cfg = self.config
        acts = self.handle.forward_taps(prepare_tensor(pixels, self.size), self.taps)
        zero = pixels.new_zeros(())
        c = content_loss_t(self.content_target, acts[cfg.content_tap]) if self.need_content else zero
        if cfg.beta > 0:
            stats = [channel_stats_t(acts[t]) for t in cfg.style_taps]
            s = style_loss_t(self.style_target, stats, self.weights)
        else:
            s = zero
        return cfg.alpha * c + cfg.beta * s, c, s

    def value_and_grad(self, pixels: torch.Tensor) -> tuple[float, float, float, torch.Tensor]:
        x = pixels.detach().clone().requires_grad_(True)
        total, c, s = self.terms(x)
        (grad,) = torch.autograd.grad(total, x)
        return float(total.detach()), float(c.detach()), float(s.detach()), grad


# --- optimizer ----------------------------------------------------------------


class ProjectedLBFGS:
    """L-BFGS over a box-constrained subset of pixels.

    One call to :meth:`step` is one epoch: a two-loop-recursion direction and
    a backtracking search on the clamped path that accepts only points with a
    strictly lower objective. Failed searches leave the iterate unchanged and
    drop the curvature history.
    """

    c1 = 1e-4

    def __init__(self, fn: Callable[[torch.Tensor], tuple[float, float, float, torch.Tensor]],
                 x0: torch.Tensor, free: torch.Tensor, step_size: float = 1.0,
                 max_evals: int = 20, history_size: int = 100):
        self.fn = fn
        self.free = free
        self.x = x0.clone()
        self.step_size = step_size
        self.max_evals = max_evals
        self.history_size = history_size
        self.s_hist: list[torch.Tensor] = []
        self.y_hist: list[torch.Tensor] = []
        self.evals = 0
        self.f, self.fc, self.fs, self.g = self._eval(self.x)

    def _eval(self, x):
        f, c, s, g = self.fn(x)
        self.evals += 1
        return f, c, s, g * self.free

    def _direction(self) -> torch.Tensor:
        q = -self.g.clone()
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / float((y * s).sum())
            a = rho * float((s * q).sum())
            alphas.append((a, rho, s, y))
            q -= a * y
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            q *= float((s * y).sum()) / float((y * y).sum())
        for a, rho, s, y in reversed(alphas):
            b = rho * float((y * q).sum())
            q += (a - b) * s
        return q

    def step(self) -> bool:
        """Run one outer iteration; return True if the iterate moved."""
        if not np.isfinite(self.f):
            return False
        gmax = float(self.g.abs().max())
        if gmax == 0.0:
            return False
        d = self._direction()
        if float((d * self.g).sum()) >= 0:
            self.s_hist.clear()
            self.y_hist.clear()
            d = -self.g.clone()
        if self.s_hist:
            t = self.step_size
        else:
            t = min(1.0, 1.0 / float(self.g.abs().sum())) * self.step_size
        for _ in range(self.max_evals):
            x_new = (self.x + t * d).clamp_(0.0, 1.0) * self.free + self.x * (1 - self.free)
            f_new, c_new, s_new, g_new = self._eval(x_new)
            if not np.isfinite(f_new):
                raise FloatingPointError("non-finite objective")
            decrease = float((self.g * (x_new - self.x)).sum())
            if f_new < self.f and f_new <= self.f + self.c1 * decrease:
                s_vec, y_vec = x_new - self.x, g_new - self.g
                ys = float((s_vec * y_vec).sum())
                # scale-free curvature test: tiny losses from untrained weights must still build history
                if ys > 1e-10 * float(s_vec.norm() * y_vec.norm()):
                    self.s_hist.append(s_vec)
                    self.y_hist.append(y_vec)
                    if len(self.s_hist) > self.history_size:
                        self.s_hist.pop(0)
                        self.y_hist.pop(0)
                self.x, self.f, self.fc, self.fs, self.g = x_new, f_new, c_new, s_new, g_new
                return True
            t *= 0.5
        self.s_hist.clear()
        self.y_hist.clear()
        return False


def _initial_pixels(content: IrisCrop, config: TransferConfig, rng: Optional[np.random.Generator]) -> np.ndarray:
    if config.init == "clone_content":
        return content.pixels.astype(np.float64)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    noise = rng.uniform(0.0, 1.0, size=content.shape)
    return np.where(content.iris, noise, content.pixels)


def transfer(handle: Backbone, content: IrisCrop, style: IrisCrop, config: TransferConfig = TransferConfig(),
             rng: Optional[np.random.Generator] = None,
             on_epoch: Optional[Callable[[int, IrisCrop], None]] = None) -> TransferResult:
    """Optimize the content crop's iris pixels towards the style crop's statistics.

    ``on_epoch(epoch, crop)`` is called after every epoch (1-based); a run of
    E epochs therefore also yields the exact results of every shorter run.
    """
    if content.pixels.size == 0 or style.pixels.size == 0:
        raise ValueError("empty crop")
    objective = TransferObjective(handle, content, style, config)
    dtype = handle.dtype
    free = torch.as_tensor(content.iris, dtype=dtype)
    x0 = torch.as_tensor(_initial_pixels(content, config, rng), dtype=dtype)
    opt = ProjectedLBFGS(objective.value_and_grad, x0, free, config.step_size,
                         config.max_inner_evals, config.history_size)
    if not np.isfinite(opt.f):
        raise TransferDivergedError(0, x0.numpy().astype(np.float32))
    initial = (opt.f, opt.fc, opt.fs)
    trace = np.zeros((config.epochs, 3))
    for epoch in range(1, config.epochs + 1):
        last = opt.x.clone()
        try:
            opt.step()
        except FloatingPointError as exc:
            raise TransferDivergedError(epoch, last.numpy().astype(np.float32)) from exc
        trace[epoch - 1] = opt.f, opt.fc, opt.fs
        if on_epoch is not None:
            on_epoch(epoch, content.with_pixels(opt.x.numpy()))
    log.debug("transfer: loss %.6g -> %.6g in %d evaluations", initial[0], opt.f, opt.evals)
    return TransferResult(content.with_pixels(opt.x.numpy()), trace, initial, opt.evals)


def stylize_eye(handle: Backbone, content_image, content_mask, donor_image, donor_mask,
                glint_threshold: float = DEFAULT_GLINT_THRESHOLD,
                config: TransferConfig = TransferConfig()) -> np.ndarray:
    """Replace the iris texture of ``content_image`` with one carrying the donor's style."""
    content = extract_iris(content_image, content_mask, glint_threshold)
    donor = extract_iris(donor_image, donor_mask, glint_threshold)
    result = transfer(handle, content, donor, config)
    return reinsert(content_image, result.stylized, content_mask)


def reconstruct_style(handle: Backbone, style: IrisCrop, tap: str, epochs: int,
                      rng: np.random.Generator, config: Optional[TransferConfig] = None) -> TransferResult:
    """Synthesize a texture from noise that matches ``style`` at a single tap."""
    base = config or TransferConfig()
    cfg = replace(base, alpha=0.0, beta=1.0, epochs=epochs, style_taps=(tap,), style_weights=None,
                  init="random_noise")
    return transfer(handle, style, style, cfg, rng=rng)
