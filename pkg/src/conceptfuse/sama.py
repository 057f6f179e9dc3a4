"""Subject-adaptive matching attention.

Target and reference branches are matched per concept through a cosine cost
volume over decoder descriptors.  Reference self-attention values are then
gathered along the argmax flow, gated by the concept mask and composited
over the target values before the usual attention product.

All fields are flattened over space: descriptors ``(H*W, C)``, masks
``(H*W,)``, flows ``(H*W,)`` of reference indices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .objectives import AttentionMapSet
from .testbed.model import attention

EPS = 1e-8


@dataclass
class ConceptMatch:
    mask: torch.Tensor
    cost: torch.Tensor
    flow: torch.Tensor
    warped: torch.Tensor


@dataclass
class SamaValues:
    v_w: torch.Tensor
    matches: list[ConceptMatch] = field(default_factory=list)


def minmax_normalize(m: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Per-sample min-max over the trailing two dims; flat maps become all-zero."""
    flat = m.flatten(-2)
    lo = flat.amin(dim=-1, keepdim=True)
    hi = flat.amax(dim=-1, keepdim=True)
    span = hi - lo
    out = torch.where(span > eps, (flat - lo) / span.clamp_min(eps), torch.zeros_like(flat))
    return out.view_as(m)


def concept_mask(maps: AttentionMapSet, positions, res: int = 16) -> torch.Tensor:
    """Foreground mask in [0, 1] from a token's mean cross-attention, shape (B, res, res)."""
    if positions is None or len(positions) == 0:
        raise ValueError("concept token is not present in the target prompt")
    return minmax_normalize(maps.token_maps(list(positions), res))


def cost_volume(psi_trg: torch.Tensor, psi_ref: torch.Tensor, mask: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Cosine similarity between masked target descriptors (rows) and reference descriptors (cols)."""
    if psi_trg.shape != psi_ref.shape:
        raise ValueError(f"descriptor grids differ: {tuple(psi_trg.shape)} vs {tuple(psi_ref.shape)}")
    if mask.shape != psi_trg.shape[:1]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match {psi_trg.shape[0]} locations")
    t = psi_trg * mask[:, None]
    nt = torch.linalg.vector_norm(t, dim=-1)
    nr = torch.linalg.vector_norm(psi_ref, dim=-1)
    sim = (t @ psi_ref.T) / (nt[:, None] * nr[None, :]).clamp_min(eps)
    valid = (nt[:, None] >= eps) & (nr[None, :] >= eps)
    return torch.where(valid, sim, torch.zeros_like(sim)).clamp(-1.0, 1.0)


def semantic_flow(cost: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, which is the lowest-index tie-break
    return cost.argmax(dim=-1)


def warp_values(v_ref: torch.Tensor, flow: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return v_ref[flow] * mask[:, None]


def aggregate_values(warped: list[torch.Tensor], v_trg: torch.Tensor, masks: list[torch.Tensor]) -> torch.Tensor:
    if len(warped) != len(masks):
        raise ValueError("need one mask per warped field")
    if not warped:
        return v_trg
    for w, m in zip(warped, masks):
        if w.shape != v_trg.shape or m.shape != v_trg.shape[:1]:
            raise ValueError("warped fields and masks must share the target value grid")
    coverage = torch.stack(masks).sum(dim=0).clamp(0.0, 1.0)
    out = v_trg * (1.0 - coverage)[:, None]
    for w in warped:
        out = out + w
    return out


def sama_attention(q: torch.Tensor, k: torch.Tensor, v_w: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d)) V_W``; accepts (N, C) or (B, N, C)."""
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v_w = q[None], k[None], v_w[None]
    if q.shape[-1] != k.shape[-1] or k.shape[1] != v_w.shape[1]:
        raise ValueError(f"shape mismatch q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v_w.shape)}")
    out, _ = attention(q, k, v_w, heads)
    return out[0] if squeeze else out


def compose_values(v_trg: torch.Tensor, psi_trg: torch.Tensor, refs: list[tuple[torch.Tensor, torch.Tensor]],
                   masks: list[torch.Tensor]) -> SamaValues:
    """Full matching pipeline for one target: ``refs`` holds ``(psi_ref_k, v_ref_k)`` per concept."""
    matches, warped = [], []
    for (psi_ref, v_ref), m in zip(refs, masks):
        c = cost_volume(psi_trg, psi_ref, m)
        fl = semantic_flow(c)
        w = warp_values(v_ref, fl, m)
        matches.append(ConceptMatch(m, c, fl, w))
        warped.append(w)
    return SamaValues(aggregate_values(warped, v_trg, masks), matches)
