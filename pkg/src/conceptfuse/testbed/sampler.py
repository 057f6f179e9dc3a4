"""Deterministic DDIM (eta = 0) sampler with per-step intervention points."""

from __future__ import annotations

from typing import Callable

import torch

from .model import LATENT_CHANNELS, LATENT_SIZE, Testbed

TRAIN_TIMESTEPS = 1000
SAMPLE_HOOKS = ("pre_step", "cross_attn", "self_attn", "post_step")


class NoiseSchedule:
    """Scaled-linear betas (linear in sqrt(beta)), as used by latent diffusion."""

    def __init__(self, n: int = TRAIN_TIMESTEPS, beta_start: float = 0.00085, beta_end: float = 0.012):
        self.n = n
        betas = torch.linspace(beta_start ** 0.5, beta_end ** 0.5, n, dtype=torch.float64) ** 2
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0).float()

    def add_noise(self, z0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        a = self.alphas_cumprod[t].view(-1, 1, 1, 1)
        return a.sqrt() * z0 + (1 - a).sqrt() * noise

    def timesteps(self, steps: int) -> list[int]:
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return torch.linspace(self.n - 1, 0, steps).round().long().tolist()

    def ddim_step(self, z: torch.Tensor, eps: torch.Tensor, t: int, t_prev: int | None) -> torch.Tensor:
        a_t = self.alphas_cumprod[t]
        a_prev = self.alphas_cumprod[t_prev] if t_prev is not None else torch.tensor(1.0)
        x0 = (z - (1 - a_t).sqrt() * eps) / a_t.sqrt()
        return a_prev.sqrt() * x0 + (1 - a_prev).sqrt() * eps


def initial_latent(seed: int, batch: int = 1) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE, generator=gen)


def sample(model: Testbed, prompt, steps: int = 20, seed: int = 0,
           interventions: dict[str, Callable] | None = None,
           schedule: NoiseSchedule | None = None) -> list[torch.Tensor]:
    """Run the sampler and return the latent trajectory ``[z_T, ..., z_0]``.

    ``interventions`` keys:

    * ``pre_step(i, t, z) -> z``         adjust the latent before the denoiser call
    * ``cross_attn(i, meta, probs)``     observe cross-attention maps
    * ``self_attn(i, meta, x, q, k, v)`` optionally return replacement values
    * ``post_step(i, t, z_next, eps)``   observe the update
    """
    interventions = interventions or {}
    unknown = set(interventions) - set(SAMPLE_HOOKS)
    if unknown:
        raise KeyError(f"unknown hook point(s) {sorted(unknown)}")
    schedule = schedule or NoiseSchedule()
    ts = schedule.timesteps(steps)
    with torch.no_grad():
        context, _ = model.context([prompt])
    z = initial_latent(seed)
    traj = [z]
    for i, t in enumerate(ts):
        if "pre_step" in interventions:
            z = interventions["pre_step"](i, t, z)
        hooks = {
            name: (lambda fn, i=i: lambda *a: fn(i, *a))(interventions[name])
            for name in ("cross_attn", "self_attn") if name in interventions
        }
        with torch.no_grad():
            eps = model.denoiser(z, torch.tensor(t), context, hooks or None)
            z_next = schedule.ddim_step(z, eps, t, ts[i + 1] if i + 1 < len(ts) else None)
        if "post_step" in interventions:
            interventions["post_step"](i, t, z_next, eps)
        z = z_next
        traj.append(z)
    return traj
