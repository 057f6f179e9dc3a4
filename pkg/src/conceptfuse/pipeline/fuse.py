"""Merge several single-concept adapter checkpoints into one fused update set."""

from __future__ import annotations

import logging

import torch

from ..concepts import ConceptError
from ..fusion import FusionError, FusionProblem, collect_activations, fuse_layers
from ..testbed.model import LATENT_CHANNELS, LATENT_SIZE, Testbed
from ..testbed.sampler import NoiseSchedule
from .checkpoint import AdapterCheckpoint, FusedCheckpoint

logger = logging.getLogger(__name__)

PROBE_TEMPLATES = ("a photo of <{}>", "a photo of <{}> on the grass", "a photo of <{}> on the beach")


def probe_prompts(name: str) -> list[str]:
    return [t.format(name) for t in PROBE_TEMPLATES]


def concept_activations(model: Testbed, prompts: list[str], timesteps: int = 4,
                        seed: int = 0) -> dict[str, torch.Tensor]:
    """Layer inputs of ``model`` on probe prompts at evenly spaced timesteps.

    Latents are pure Gaussian probes drawn from ``seed``; no dataset is needed.
    Each layer yields ``len(prompts) * timesteps * locations`` columns.
    """
    if not prompts:
        raise FusionError("empty probe prompt set")
    if timesteps < 1:
        raise FusionError("need at least one probe timestep")
    ts = probe_timesteps(timesteps)
    with torch.no_grad():
        ctx, _ = model.context(prompts)
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(len(prompts), LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE, generator=gen)

    def run():
        for t in ts:
            model.denoiser(z, torch.full((len(prompts),), t, dtype=torch.long), ctx)

    return collect_activations(model.denoiser, model.denoiser.attention_linears(), run)


def probe_timesteps(n: int) -> list[int]:
    """``n`` evenly spaced timesteps strictly inside the training range."""
    sched = NoiseSchedule()
    return [int(round((i + 0.5) * sched.n / n)) for i in range(n)]


def fuse_model(checkpoints: list[AdapterCheckpoint], base: Testbed, mu: float | None = None,
               n_probe_timesteps: int = 4, seed: int = 0, workers: int = 1) -> FusedCheckpoint:
    if not checkpoints:
        raise ValueError("need at least one checkpoint to fuse")
    concepts = [c for ck in checkpoints for c in ck.concepts]
    names = [c.name for c in concepts]
    if len(set(names)) != len(names):
        raise ConceptError(f"duplicate concept names across checkpoints: {names}")
    deltas, acts = [], []
    for ck in checkpoints:
        deltas.append(ck.deltas(base))
        model = ck.materialize(base)
        acts.append(concept_activations(model, probe_prompts(ck.concepts[0].name), n_probe_timesteps, seed))
    problems = {lid: FusionProblem([d[lid] for d in deltas], [a[lid] for a in acts], mu) for lid in deltas[0]}
    result = fuse_layers(problems, workers=workers)
    worst = max(max(r) for r in result.residuals.values())
    logger.info("fused %d concepts over %d layers, worst relative residual %.3e", len(checkpoints),
                len(problems), worst)
    meta = {"n_concepts": len(checkpoints), "mu": "default" if mu is None else repr(mu),
            "probe_timesteps": n_probe_timesteps, "probe_seed": seed}
    return FusedCheckpoint(result.deltas, concepts, result.residuals, {k: str(v) for k, v in meta.items()})
