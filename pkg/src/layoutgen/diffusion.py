"""Noise schedule, forward process, x0 estimation, and DDIM sampling.

Timesteps are 1-based: t ranges over [1, T] and alpha_bar[t-1] stores the
cumulative product through step t. The sampler walks a strictly increasing
subsequence of timesteps in reverse and is deterministic for eta = 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch

from .core import ConditionBundle, Layout, decode_layout, encode_layout
from .errors import ConfigError, NumericalError


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    ddim_steps: int = 100
    eta: float = 0.0
    refine_start_fraction: float = 0.1


class EpsModel(Protocol):
    """What the sampler needs from a denoiser (the real model or a mock)."""

    n_slots: int
    n_categories: int
    state_dim: int

    def predict_eps(self, x_t: torch.Tensor, t: torch.Tensor,
                    conds: Sequence[ConditionBundle]) -> torch.Tensor:
        """(B, N, D) noisy state + (B,) timesteps -> (B, N, D) noise estimate."""
        ...


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear variance schedule with derived alpha and alpha_bar tables."""
    if steps <= 0:
        raise ConfigError(f"schedule needs at least one step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"invalid beta range [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(steps=steps, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _alpha_bar_at(sched: NoiseSchedule, t, dtype, extra_dims: int) -> torch.Tensor:
    t_idx = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t_idx < 1) or torch.any(t_idx > sched.steps):
        raise ConfigError(f"timestep out of range [1, {sched.steps}]")
    ab = torch.from_numpy(np.array(sched.alpha_bar)).to(dtype)[t_idx - 1]
    return ab.reshape(ab.shape + (1,) * extra_dims)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward sample x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if eps.shape != x0.shape:
        raise ConfigError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    extra = x0.dim() - (1 if np.ndim(t) > 0 else 0)
    ab = _alpha_bar_at(sched, t, x0.dtype, extra_dims=extra)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def estimate_x0(x_t: torch.Tensor, eps_pred: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process around a noise estimate."""
    extra = x_t.dim() - (1 if np.ndim(t) > 0 else 0)
    ab = _alpha_bar_at(sched, t, x_t.dtype, extra_dims=extra)
    return (x_t - torch.sqrt(1.0 - ab) * eps_pred) / torch.sqrt(ab)


def ddim_timesteps(total_steps: int, ddim_steps: int) -> list[int]:
    """Strictly increasing subsequence of [1, T] with uniform stride, ending at T."""
    if not (1 <= ddim_steps <= total_steps):
        raise ConfigError(f"ddim_steps must be in [1, {total_steps}], got {ddim_steps}")
    ts = np.unique(np.round(np.linspace(1, total_steps, ddim_steps)).astype(int))
    return [int(t) for t in ts]


def ddim_reverse(eps_fn, x_start: torch.Tensor, timesteps: Sequence[int],
                 sched: NoiseSchedule, eta: float = 0.0,
                 generator: torch.Generator | None = None) -> torch.Tensor:
    """Run the DDIM update from x at timesteps[-1] down to 0, returning x0.

    ``eps_fn(x, t_batch)`` returns the noise estimate for the whole batch at
    a shared timestep. With eta = 0 the trajectory is deterministic.
    """
    x = x_start
    ts = list(timesteps)
    ab = sched.alpha_bar
    for k in range(len(ts) - 1, -1, -1):
        t = ts[k]
        t_batch = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = eps_fn(x, t_batch)
        if not torch.isfinite(eps).all():
            raise NumericalError(f"non-finite noise prediction at timestep {t}")
        ab_t = float(ab[t - 1])
        ab_prev = float(ab[ts[k - 1] - 1]) if k > 0 else 1.0
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        if eta > 0.0 and k > 0:
            sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
            noise = torch.randn(x.shape, dtype=x.dtype, generator=generator)
            x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0)) * eps + sigma * noise
        else:
            x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    return x


def ddim_sample_batch(model: EpsModel, conds: Sequence[ConditionBundle],
                      sampler: SamplerConfig, sched: NoiseSchedule,
                      seeds: Sequence[int]) -> list[Layout]:
    """Sample one layout per condition bundle, each from its own seed.

    Noise is drawn per sample so results do not depend on how bundles are
    batched together.
    """
    if len(seeds) != len(conds):
        raise ConfigError("one seed per condition bundle required")
    dtype = torch.float64
    inits = []
    for seed in seeds:
        gen = torch.Generator().manual_seed(int(seed))
        inits.append(torch.randn((model.n_slots, model.state_dim), dtype=dtype, generator=gen))
    x = torch.stack(inits)
    ts = ddim_timesteps(sched.steps, sampler.ddim_steps)
    noise_gen = torch.Generator().manual_seed(int(seeds[0]) ^ 0x5EED) if sampler.eta > 0 else None

    def eps_fn(x_t, t_batch):
        with torch.no_grad():
            return model.predict_eps(x_t, t_batch, conds)

    x0 = ddim_reverse(eps_fn, x, ts, sched, eta=sampler.eta, generator=noise_gen)
    return [decode_layout(x0[b].numpy(), model.n_categories) for b in range(x0.shape[0])]


def ddim_sample(model: EpsModel, cond: ConditionBundle, sampler: SamplerConfig,
                sched: NoiseSchedule, seed: int) -> Layout:
    """Single-sample convenience wrapper around :func:`ddim_sample_batch`."""
    return ddim_sample_batch(model, [cond], sampler, sched, [seed])[0]


def refine(noisy_layout: Layout, model: EpsModel, cond: ConditionBundle,
           sampler: SamplerConfig, sched: NoiseSchedule) -> Layout:
    """Denoise an existing layout by running only the low-noise DDIM tail.

    The encoded layout is treated as the state at t* = round(fraction * T)
    and walked down to 0 along the sampler's timestep ladder.
    """
    if not (0.0 < sampler.refine_start_fraction <= 1.0):
        raise ConfigError(f"refine_start_fraction must be in (0, 1], got {sampler.refine_start_fraction}")
    t_star = max(1, round(sampler.refine_start_fraction * sched.steps))
    ladder = ddim_timesteps(sched.steps, sampler.ddim_steps)
    tail = [t for t in ladder if t < t_star] + [t_star]
    x = torch.from_numpy(encode_layout(noisy_layout, model.n_categories, model.n_slots)).unsqueeze(0)

    def eps_fn(x_t, t_batch):
        with torch.no_grad():
            return model.predict_eps(x_t, t_batch, [cond])

    x0 = ddim_reverse(eps_fn, x, tail, sched, eta=0.0)
    return decode_layout(x0[0].numpy(), model.n_categories)
