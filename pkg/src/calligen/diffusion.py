"""Noise schedule, forward noising, epsilon loss and reverse samplers.

Forward process (variance preserving):

    x_t = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps

Reverse DDPM step with fixed variance sigma_t^2 = beta_t:

    x_{t-1} = 1/sqrt(alpha_t) * (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) + sigma_t * z

Timesteps are 0-indexed: ``t`` runs over ``0 .. T-1`` and step ``t = 0`` is the
last denoising step (no noise added).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F

from calligen.labels import LabelTriple

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta / alpha / cumulative-alpha tables, float64."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T})")
        return t


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def _coef(values: np.ndarray, t: Union[int, torch.Tensor], like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t]`` and broadcast against ``like`` (batch-first when t is a tensor)."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        out = table[t.long()]
        return out.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t)]


def _check_range(t: Union[int, torch.Tensor], schedule: NoiseSchedule) -> None:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= schedule.T):
            raise ValueError(f"timesteps outside [0, {schedule.T})")
    else:
        schedule.check_t(int(t))


def q_sample(
    x0: torch.Tensor,
    t: Union[int, torch.Tensor],
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    variance_preserving: bool = True,
) -> torch.Tensor:
    """Noise ``x0`` to step ``t`` with caller-supplied ``eps``.

    ``variance_preserving=False`` evaluates the un-square-rooted variant
    ``abar_t * x0 + sqrt(1 - abar_t) * eps``. It is kept for comparison only;
    training and sampling always use the variance-preserving form.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    _check_range(t, schedule)
    abar = _coef(schedule.alpha_bars, t, x0)
    signal = abar.sqrt() if variance_preserving else abar
    return signal * x0 + (1.0 - abar).sqrt() * eps


def predict_x0(x_t: torch.Tensor, t: Union[int, torch.Tensor], eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate."""
    _check_range(t, schedule)
    abar = _coef(schedule.alpha_bars, t, x_t)
    return (x_t - (1.0 - abar).sqrt() * eps_hat) / abar.sqrt()


def training_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise (mean over all elements)."""
    if eps_hat.shape != eps.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != eps shape {tuple(eps.shape)}")
    return F.mse_loss(eps_hat, eps, reduction="mean")


def p_mean(eps_hat: torch.Tensor, x_t: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    t = schedule.check_t(t)
    beta = schedule.betas[t]
    coef = beta / math.sqrt(1.0 - schedule.alpha_bars[t])
    return (x_t - coef * eps_hat) / math.sqrt(schedule.alphas[t])


def p_step(
    eps_hat: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """One ancestral DDPM step ``x_t -> x_{t-1}``; ``noise`` is ignored at t = 0."""
    t = schedule.check_t(t)
    if eps_hat.shape != x_t.shape:
        raise ValueError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    mean = p_mean(eps_hat, x_t, t, schedule)
    if t == 0:
        return mean
    if noise is None:
        raise ValueError(f"noise is required for t={t} > 0")
    if noise.shape != x_t.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x_t shape {tuple(x_t.shape)}")
    return mean + math.sqrt(schedule.betas[t]) * noise


@dataclass(frozen=True)
class SampleRequest:
    """What to sample: one label triple (or a batch of them), latent shape and seed."""

    labels: Union[LabelTriple, Sequence[LabelTriple]]
    shape: tuple[int, int, int]
    seed: int = 0

    @property
    def batched(self) -> bool:
        return not isinstance(self.labels, LabelTriple)

    def label_tensor(self) -> torch.Tensor:
        triples = list(self.labels) if self.batched else [self.labels]
        if not triples:
            raise ValueError("empty label batch")
        return torch.tensor([tuple(tr) for tr in triples], dtype=torch.long)


def _call_denoiser(denoiser: Denoiser, x: torch.Tensor, t: int, labels: torch.Tensor) -> torch.Tensor:
    tt = torch.full((x.shape[0],), t, dtype=torch.long)
    eps_hat = denoiser(x, tt, labels)
    if eps_hat.shape != x.shape:
        raise ValueError(f"denoiser returned shape {tuple(eps_hat.shape)}, expected {tuple(x.shape)}")
    return eps_hat


def _start(request: SampleRequest, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Generator]:
    labels = request.label_tensor()
    gen = torch.Generator().manual_seed(int(request.seed))
    x = torch.randn((labels.shape[0], *request.shape), generator=gen, dtype=dtype)
    return x, labels, gen


def _finish(x: torch.Tensor, request: SampleRequest) -> torch.Tensor:
    return x if request.batched else x[0]


@torch.no_grad()
def ddpm_sample(
    denoiser: Denoiser,
    request: SampleRequest,
    schedule: NoiseSchedule,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Ancestral sampling from seeded x_T through t = T-1 .. 0.

    Returns a tensor of ``request.shape`` (or ``(B, *shape)`` for a batch of labels).
    """
    x, labels, gen = _start(request, dtype)
    for t in range(schedule.T - 1, -1, -1):
        eps_hat = _call_denoiser(denoiser, x, t, labels)
        noise = torch.randn(x.shape, generator=gen, dtype=dtype) if t > 0 else None
        x = p_step(eps_hat, x, t, schedule, noise)
    return _finish(x, request)


def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly spaced descending sub-schedule that always starts at T-1."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    return [int(v) for v in np.round(np.linspace(T - 1, 0, num_steps))]


def ddim_step(
    eps_hat: torch.Tensor,
    x_t: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float,
) -> tuple[torch.Tensor, float]:
    """Mean and standard deviation of the DDIM transition ``t -> t_prev`` (t_prev = -1 means x_0)."""
    abar = schedule.alpha_bars[t]
    abar_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
    x0_hat = (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)
    var = eta**2 * (1.0 - abar_prev) / (1.0 - abar) * (1.0 - abar / abar_prev)
    var = max(var, 0.0)
    dir_coef = math.sqrt(max(1.0 - abar_prev - var, 0.0))
    mean = math.sqrt(abar_prev) * x0_hat + dir_coef * eps_hat
    return mean, math.sqrt(var)


@torch.no_grad()
def ddim_sample(
    denoiser: Denoiser,
    request: SampleRequest,
    schedule: NoiseSchedule,
    num_steps: int = 50,
    eta: float = 0.0,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")
    steps = ddim_timesteps(schedule.T, num_steps)
    x, labels, gen = _start(request, dtype)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        eps_hat = _call_denoiser(denoiser, x, t, labels)
        mean, std = ddim_step(eps_hat, x, t, t_prev, schedule, eta)
        if std > 0.0:
            x = mean + std * torch.randn(x.shape, generator=gen, dtype=dtype)
        else:
            x = mean
    return _finish(x, request)
