"""Tiny text-conditioned denoiser with real self/cross attention.

Layout of the denoiser (latent 16x16x4):

    conv_in -> down16 (res + transformer) -> downsample -> mid8 (res + transformer)
            -> upsample + skip -> up16 (res + transformer) -> conv_out

Each transformer holds a self-attention (``attn1``), a cross-attention
(``attn2``) and a feed-forward.  Hooks are passed per call as a dict, so two
concurrent forward passes never share capture state.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..adapters import AdaptedLinear
from ..concepts import ConceptRegistry, Vocabulary

LATENT_CHANNELS = 4
LATENT_SIZE = 16
HOOK_POINTS = ("cross_attn", "self_attn")
_ADAPTER_LEAVES = {"kron_A", "kron_B", "lora_A", "lora_B", "m"}


@dataclass(frozen=True)
class AttnMeta:
    name: str
    res: int
    is_cross: bool
    is_decoder: bool


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int):
    """Scaled dot-product attention over ``(B, N, C)`` tensors.  Returns output and probs."""
    B, Nq, C = q.shape
    d = C // heads
    qh = q.view(B, Nq, heads, d).transpose(1, 2)
    kh = k.view(B, k.shape[1], heads, d).transpose(1, 2)
    vh = v.view(B, v.shape[1], heads, v.shape[2] // heads).transpose(1, 2)
    probs = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(d), dim=-1)
    out = (probs @ vh).transpose(1, 2).reshape(B, Nq, -1)
    return out, probs


class Attention(nn.Module):
    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 2):
        super().__init__()
        self.heads = heads
        context_dim = context_dim or dim
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, meta: AttnMeta | None = None, hooks: dict | None = None):
        ctx = x if context is None else context
        q, k, v = self.to_q(x), self.to_k(ctx), self.to_v(ctx)
        if hooks and meta is not None and not meta.is_cross and "self_attn" in hooks:
            replaced = hooks["self_attn"](meta, x, q, k, v)
            if replaced is not None:
                v = replaced
        out, probs = attention(q, k, v, self.heads)
        if hooks and meta is not None and meta.is_cross and "cross_attn" in hooks:
            hooks["cross_attn"](meta, probs.mean(dim=1))
        return self.to_out(out)


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, context_dim: int, res: int, name: str, heads: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn1 = Attention(dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.attn2 = Attention(dim, context_dim, heads=heads)
        self.norm3 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(), nn.Linear(dim * 2, dim))
        is_dec = name.startswith("up")
        self.meta_self = AttnMeta(f"{name}.attn1", res, False, is_dec)
        self.meta_cross = AttnMeta(f"{name}.attn2", res, True, is_dec)

    def forward(self, x, context, hooks=None):
        B, C, H, W = x.shape
        h = x.flatten(2).transpose(1, 2)
        h = h + self.attn1(self.norm1(h), meta=self.meta_self, hooks=hooks)
        h = h + self.attn2(self.norm2(h), context, meta=self.meta_cross, hooks=hooks)
        h = h + self.ff(self.norm3(h))
        return h.transpose(1, 2).reshape(B, C, H, W)


class ResBlock(nn.Module):
    def __init__(self, ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, ch)
        self.norm2 = nn.GroupNorm(8, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ToyDenoiser(nn.Module):
    def __init__(self, ch: int = 32, mid_ch: int = 64, context_dim: int = 32, heads: int = 2):
        super().__init__()
        self.ch = ch
        temb_dim = ch * 2
        self.time_mlp = nn.Sequential(nn.Linear(ch, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, ch, 3, padding=1)
        self.down_res = ResBlock(ch, temb_dim)
        self.down16 = TransformerBlock(ch, context_dim, 16, "down16", heads)
        self.downsample = nn.Conv2d(ch, mid_ch, 3, stride=2, padding=1)
        self.mid_res = ResBlock(mid_ch, temb_dim)
        self.mid8 = TransformerBlock(mid_ch, context_dim, 8, "mid8", heads)
        self.up_conv = nn.Conv2d(mid_ch, ch, 3, padding=1)
        self.skip_conv = nn.Conv2d(2 * ch, ch, 1)
        self.up_res = ResBlock(ch, temb_dim)
        self.up16 = TransformerBlock(ch, context_dim, 16, "up16", heads)
        self.norm_out = nn.GroupNorm(8, ch)
        self.conv_out = nn.Conv2d(ch, LATENT_CHANNELS, 3, padding=1)

    def forward(self, z, t, context, hooks: dict[str, Callable] | None = None):
        if hooks:
            unknown = set(hooks) - set(HOOK_POINTS)
            if unknown:
                raise KeyError(f"unknown hook point(s) {sorted(unknown)}")
        if t.ndim == 0:
            t = t.expand(z.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.ch))
        h0 = self.conv_in(z)
        h = self.down16(self.down_res(h0, temb), context, hooks)
        skip = h
        h = self.downsample(h)
        h = self.mid8(self.mid_res(h, temb), context, hooks)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.skip_conv(torch.cat([self.up_conv(h), skip], dim=1))
        h = self.up16(self.up_res(h, temb), context, hooks)
        return self.conv_out(F.silu(self.norm_out(h)))

    def attention_blocks(self) -> dict[str, TransformerBlock]:
        return {"down16": self.down16, "mid8": self.mid8, "up16": self.up16}

    def attention_linears(self) -> dict[str, nn.Module]:
        """Every linear sublayer of every attention module, keyed by layer id."""
        out = {}
        for bname, block in self.attention_blocks().items():
            for aname in ("attn1", "attn2"):
                attn = getattr(block, aname)
                for lname in ("to_q", "to_k", "to_v", "to_out"):
                    out[f"{bname}.{aname}.{lname}"] = getattr(attn, lname)
        return out

    def set_linear(self, layer_id: str, module: nn.Module) -> None:
        bname, aname, lname = layer_id.split(".")
        setattr(getattr(self.attention_blocks()[bname], aname), lname, module)


class TextEncoder(nn.Module):
    """Positional embedding + two causal self-attention layers over token embeddings."""

    def __init__(self, width: int = 32, max_len: int = 16, layers: int = 2, heads: int = 2):
        super().__init__()
        self.max_len = max_len
        self.heads = heads
        self.pos = nn.Parameter(torch.randn(max_len, width) * 0.02)
        self.layers = nn.ModuleList()
        for _ in range(layers):
            self.layers.append(nn.ModuleDict(dict(
                norm1=nn.LayerNorm(width), qkv=nn.Linear(width, 3 * width), proj=nn.Linear(width, width),
                norm2=nn.LayerNorm(width), mlp=nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(),
                                                             nn.Linear(2 * width, width)),
            )))
        self.norm = nn.LayerNorm(width)
        mask = torch.triu(torch.full((max_len, max_len), float("-inf")), diagonal=1)
        self.register_buffer("causal", mask, persistent=False)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        B, L, C = emb.shape
        h = emb + self.pos[:L]
        d = C // self.heads
        for layer in self.layers:
            q, k, v = layer["qkv"](layer["norm1"](h)).chunk(3, dim=-1)
            q, k, v = (x.view(B, L, self.heads, d).transpose(1, 2) for x in (q, k, v))
            att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d) + self.causal[:L, :L], dim=-1)
            h = h + layer["proj"]((att @ v).transpose(1, 2).reshape(B, L, C))
            h = h + layer["mlp"](layer["norm2"](h))
        return self.norm(h)


class ImageEncoder(nn.Module):
    """Frozen stand-in for a pretrained image encoder: pooled pixels through a fixed projection."""

    def __init__(self, width: int = 32, pool: int = 4):
        super().__init__()
        self.pool = pool
        self.proj = nn.Linear(LATENT_CHANNELS * pool * pool, width)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(z, self.pool).flatten(1)
        return torch.tanh(self.proj(pooled))


# Fixed orthonormal-column RGB -> latent map (first three Hadamard columns / 2).
_CODEC = torch.tensor([[1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [1.0, 1.0, -1.0], [1.0, -1.0, -1.0]]) / 2.0


def encode_images(images: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W, 3) -> latent (N, 4, H, W)."""
    x = torch.from_numpy(np.asarray(images)).float() / 127.5 - 1.0
    return torch.einsum("lc,nhwc->nlhw", _CODEC, x)


def decode_latents(z: torch.Tensor) -> np.ndarray:
    """Latent (N, 4, H, W) -> uint8 (N, H, W, 3)."""
    x = torch.einsum("lc,nlhw->nhwc", _CODEC, z.detach().float())
    return ((x.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()


@dataclass
class Testbed:
    """Base model bundle (the frozen ``theta0``) plus the concept registry."""

    denoiser: ToyDenoiser
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    registry: ConceptRegistry

    def context(self, prompts) -> tuple[torch.Tensor, list]:
        ids, specs = self.registry.encode(prompts)
        return self.text_encoder(self.registry.embed(ids)), specs

    def freeze(self) -> "Testbed":
        for mod in (self.denoiser, self.text_encoder, self.image_encoder):
            mod.requires_grad_(False)
            mod.eval()
        return self

    def base_hash(self) -> str:
        """Digest of every base parameter and buffer (adapters excluded)."""
        h = hashlib.sha256()
        for prefix, mod in (("den", self.denoiser), ("txt", self.text_encoder), ("img", self.image_encoder)):
            entries = {}
            for name, t in mod.state_dict().items():
                parent, _, leaf = name.rpartition(".")
                if leaf in _ADAPTER_LEAVES:
                    continue
                entries[f"{parent}.weight" if leaf == "W0" else name] = t
            for name, t in sorted(entries.items()):
                h.update(f"{prefix}.{name}".encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        h.update(self.registry.base_embeddings.numpy().tobytes())
        return h.hexdigest()


def build_testbed(seed: int = 0, width: int = 32, max_len: int = 16) -> Testbed:
    torch.manual_seed(seed)
    vocab = Vocabulary()
    table = torch.randn(vocab.base_size, width) * 0.5
    text = TextEncoder(width, max_len)
    den = ToyDenoiser(context_dim=width)
    img = ImageEncoder(width)
    registry = ConceptRegistry(table, vocab, max_len=max_len)
    return Testbed(den, text, img, registry).freeze()


def wrap_adapters(denoiser: ToyDenoiser, kind: str = "krona_wed", factor: int = 16, rank: int = 4,
                  seed: int = 0, detach_norm: bool = False) -> dict[str, AdaptedLinear]:
    """Replace every attention linear with an :class:`AdaptedLinear`; returns them by layer id."""
    adapters = {}
    for i, (lid, lin) in enumerate(sorted(denoiser.attention_linears().items())):
        if isinstance(lin, AdaptedLinear):
            raise ValueError(f"layer {lid} is already adapted")
        ad = AdaptedLinear(lin, kind, factor, rank, seed=seed * 1000 + i, layer_id=lid, detach_norm=detach_norm)
        denoiser.set_linear(lid, ad)
        adapters[lid] = ad
    return adapters


def unwrap_adapters(denoiser: ToyDenoiser, merge: bool = False) -> None:
    """Undo :func:`wrap_adapters`; with ``merge`` the adapted weight is baked into a plain linear."""
    for lid, mod in denoiser.attention_linears().items():
        if not isinstance(mod, AdaptedLinear):
            continue
        if merge:
            lin = mod.to_linear()
        else:
            lin = nn.Linear(mod.in_features, mod.out_features, bias=mod.bias is not None)
            with torch.no_grad():
                lin.weight.copy_(mod.W0)
                if mod.bias is not None:
                    lin.bias.copy_(mod.bias)
            lin.requires_grad_(False)
        denoiser.set_linear(lid, lin)
