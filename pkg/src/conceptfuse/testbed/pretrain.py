"""Short deterministic pretraining of the base model on generic captioned scenes."""

from __future__ import annotations

import logging
import random
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .data import generic_scene
from .model import Testbed, build_testbed, encode_images
from .sampler import NoiseSchedule

logger = logging.getLogger(__name__)


def pretrain_base(seed: int = 0, steps: int = 400, batch: int = 16, lr: float = 2e-3,
                  n_scenes: int = 512) -> Testbed:
    tb = build_testbed(seed)
    table = torch.nn.Parameter(tb.registry.base_embeddings.clone())
    modules = (tb.denoiser, tb.text_encoder)
    for mod in modules:
        mod.requires_grad_(True)
        mod.train()
    params = [table, *tb.denoiser.parameters(), *tb.text_encoder.parameters()]
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=0.0)
    rng = random.Random(seed)
    scenes = [generic_scene(rng) for _ in range(n_scenes)]
    latents = encode_images(np.stack([s[0] for s in scenes]))
    ids, _ = tb.registry.encode([s[1] for s in scenes])
    sched = NoiseSchedule()
    gen = torch.Generator().manual_seed(seed + 1)
    for step in range(steps):
        idx = torch.randint(0, n_scenes, (batch,), generator=gen)
        t = torch.randint(0, sched.n, (batch,), generator=gen)
        noise = torch.randn(latents[idx].shape, generator=gen)
        zt = sched.add_noise(latents[idx], noise, t)
        emb = table[ids[idx]]
        pred = tb.denoiser(zt, t, tb.text_encoder(emb))
        loss = F.mse_loss(pred, noise)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0 or step == steps - 1:
            logger.info("pretrain step %d loss %.4f", step, loss.item())
    tb.registry.base_embeddings = table.detach().clone()
    return tb.freeze()


def base_state(tb: Testbed) -> dict[str, torch.Tensor]:
    out = {"base_embeddings": tb.registry.base_embeddings.contiguous()}
    for prefix, mod in (("denoiser", tb.denoiser), ("text", tb.text_encoder), ("image", tb.image_encoder)):
        for k, v in mod.state_dict().items():
            out[f"{prefix}.{k}"] = v.contiguous()
    return out


def load_base_state(tb: Testbed, state: dict[str, torch.Tensor]) -> Testbed:
    tb.registry.base_embeddings = state["base_embeddings"].clone()
    for prefix, mod in (("denoiser", tb.denoiser), ("text", tb.text_encoder), ("image", tb.image_encoder)):
        sub = {k[len(prefix) + 1:]: v for k, v in state.items() if k.startswith(prefix + ".")}
        mod.load_state_dict(sub)
    return tb.freeze()


def load_or_build_base(seed: int = 0, steps: int = 400, cache_dir: str | Path | None = None) -> Testbed:
    """Pretrained base model, cached on disk under ``cache_dir`` when given."""
    if cache_dir is None:
        return pretrain_base(seed, steps)
    path = Path(cache_dir) / f"base_seed{seed}_steps{steps}.safetensors"
    if path.exists():
        return load_base_state(build_testbed(seed), load_file(path))
    tb = pretrain_base(seed, steps)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(base_state(tb), path, metadata={"seed": str(seed), "steps": str(steps)})
    return tb
