"""Training objectives for single-concept personalization.

Disentangled learning uses two conditionings: the text feature sequence
``f_s`` and an image feature ``f_i`` produced by a trainable image adapter.
The full conditioning is ``f_s + f_i`` broadcast over tokens; the weak pass
uses ``f_s`` alone, and it is the only pass whose cross-attention maps feed
the attention regularizer.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .testbed.model import AttnMeta

logger = logging.getLogger(__name__)

Predictor = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class LossWeights:
    lambda_attn: float = 0.001
    lambda_w: float = 0.01
    lambda_con: float = 0.001
    swap_masks: bool = False

    def __post_init__(self):
        for name in ("lambda_attn", "lambda_w", "lambda_con"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class TrainingBatch:
    latents: torch.Tensor  # clean z0, (N, 4, H, W)
    masks: torch.Tensor  # (N, H, W) in [0, 1]
    timesteps: torch.Tensor  # (N,)
    noise: torch.Tensor  # (N, 4, H, W)
    noisy: torch.Tensor  # z_{i, t_i}


@dataclass
class ConditionFeatures:
    f_s: torch.Tensor  # (N, L, E)
    f_i: torch.Tensor  # (N, E)
    pooled_s: torch.Tensor  # (N, E), text feature at the end-of-sequence token

    def full(self) -> torch.Tensor:
        return self.f_s + self.f_i[:, None, :]


class AttentionMapSet:
    """Cross-attention probabilities recorded during one forward pass.

    Each recorded entry is ``(B, H*W, L)`` averaged over heads.  Create one
    instance per pass; :meth:`hook` is what gets handed to the denoiser.
    """

    def __init__(self):
        self.maps: dict[str, tuple[int, torch.Tensor]] = {}

    def hook(self, meta: AttnMeta, probs: torch.Tensor) -> None:
        self.maps[meta.name] = (meta.res, probs)

    def __len__(self) -> int:
        return len(self.maps)

    def token_maps(self, positions, res: int = 16, max_res: int = 16) -> torch.Tensor:
        """Mean over layers (res <= ``max_res``) on a ``res`` grid: (B, res, res).

        ``positions`` is an int or a list of ints (maps averaged over those
        tokens), or a LongTensor (B,) giving one position per sample.
        """
        per_sample = isinstance(positions, torch.Tensor)
        if isinstance(positions, int):
            positions = [positions]
        layers = [(r, p) for r, p in self.maps.values() if r <= max_res]
        if not layers:
            raise ValueError("no cross-attention maps recorded")
        out = []
        for r, probs in layers:
            top = int(positions.max()) if per_sample else max(positions)
            if top >= probs.shape[-1]:
                raise IndexError(f"token position {top} outside sequence of length {probs.shape[-1]}")
            if per_sample:
                m = probs[torch.arange(probs.shape[0]), :, positions]
            else:
                m = probs[:, :, list(positions)].mean(dim=-1)
            out.append(resize_map(m.reshape(-1, 1, r, r), res)[:, 0])
        return torch.stack(out).mean(dim=0)


def resize_map(m: torch.Tensor, res: int) -> torch.Tensor:
    """Area-average down, nearest up.  ``m`` is (B, C, r, r)."""
    r = m.shape[-1]
    if r == res:
        return m
    if r > res:
        if r % res:
            raise ValueError(f"cannot area-average {r} onto {res}")
        return F.avg_pool2d(m, r // res)
    return F.interpolate(m, size=(res, res), mode="nearest")


def prepare_masks(masks: torch.Tensor, res: int, threshold: float = 0.5) -> torch.Tensor:
    """Area-average masks (N, H, W) onto ``res`` and binarize."""
    m = resize_map(masks[:, None].float(), res)[:, 0]
    return (m >= threshold).to(masks.dtype if masks.is_floating_point() else torch.float32)


def denoise_loss(predictor: Predictor, batch: TrainingBatch, features: ConditionFeatures) -> torch.Tensor:
    pred = predictor(batch.noisy, batch.timesteps, features.full())
    return F.mse_loss(pred, batch.noise)


def weak_denoise_loss(predictor: Predictor, batch: TrainingBatch, features: ConditionFeatures,
                      lambda_w: float) -> torch.Tensor:
    pred = predictor(batch.noisy, batch.timesteps, features.f_s)
    return lambda_w * F.mse_loss(pred, batch.noise)


def contrastive_loss(f_i: torch.Tensor, pooled_s: torch.Tensor, lambda_con: float, eps: float = 1e-8) -> torch.Tensor:
    """``lambda_con`` times the batch-mean cosine similarity; zero-norm rows contribute 0."""
    f_i = torch.atleast_2d(f_i)
    pooled_s = torch.atleast_2d(pooled_s)
    ni = torch.linalg.vector_norm(f_i, dim=-1)
    ns = torch.linalg.vector_norm(pooled_s, dim=-1)
    ok = (ni > eps) & (ns > eps)
    if not bool(ok.all()):
        warnings.warn("zero-norm feature in contrastive loss, term set to 0", RuntimeWarning, stacklevel=2)
    cos = (f_i * pooled_s).sum(-1) / (ni * ns).clamp_min(eps)
    return lambda_con * torch.where(ok, cos, torch.zeros_like(cos)).mean()


def attention_reg_loss(ca_rand: torch.Tensor, ca_class: torch.Tensor, masks: torch.Tensor,
                       lambda_attn: float, swap_masks: bool = False) -> torch.Tensor:
    """Mask-deviation penalty on the two concept-token maps, all of shape (N, h, w).

    Default: ``V_rand`` is penalized outside the mask, ``V_class`` inside it.
    ``swap_masks`` exchanges the two gates.
    """
    if not (ca_rand.shape == ca_class.shape == masks.shape):
        raise ValueError(
            f"map/mask resolution mismatch: {tuple(ca_rand.shape)}, {tuple(ca_class.shape)}, {tuple(masks.shape)}"
        )
    gate_rand, gate_class = 1 - masks, masks
    if swap_masks:
        gate_rand, gate_class = gate_class, gate_rand
    per_image = 0.5 * ((ca_rand * gate_rand).pow(2).sum(dim=(-2, -1)) + (ca_class * gate_class).pow(2).sum(dim=(-2, -1)))
    return lambda_attn * per_image.sum()


@dataclass
class LossTerms:
    denoise: torch.Tensor
    w_denoise: torch.Tensor
    con: torch.Tensor
    attn: torch.Tensor
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> torch.Tensor:
        return self.denoise + self.w_denoise + self.con + self.attn

    def as_floats(self) -> dict[str, float]:
        return {"denoise": self.denoise.item(), "w_denoise": self.w_denoise.item(), "con": self.con.item(),
                "attn": self.attn.item(), "total": self.total.item()}


def total_loss(predictor: Callable, batch: TrainingBatch, features: ConditionFeatures,
               positions: tuple[int, int], weights: LossWeights, res: int = 16) -> LossTerms:
    """All four terms.  ``predictor(z, t, ctx, hooks)``; maps come from the weak pass only.

    ``positions`` are the sequence positions of ``(V_rand, V_class)``.
    """
    l_den = denoise_loss(lambda z, t, c: predictor(z, t, c, None), batch, features)
    maps = AttentionMapSet()
    l_weak = weak_denoise_loss(lambda z, t, c: predictor(z, t, c, {"cross_attn": maps.hook}), batch, features,
                               weights.lambda_w)
    l_con = contrastive_loss(features.f_i, features.pooled_s, weights.lambda_con)
    if weights.lambda_attn > 0:
        masks = prepare_masks(batch.masks, res)
        ca_rand = maps.token_maps(positions[0], res)
        ca_class = maps.token_maps(positions[1], res)
        l_attn = attention_reg_loss(ca_rand, ca_class, masks, weights.lambda_attn, weights.swap_masks)
    else:
        l_attn = torch.zeros((), dtype=l_den.dtype)
    return LossTerms(l_den, l_weak, l_con, l_attn, extra={"maps": maps})
