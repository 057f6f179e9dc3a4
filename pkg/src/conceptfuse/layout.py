"""Layout-consistency guidance on the target latent."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import torch

logger = logging.getLogger(__name__)

EPS = 1e-8


@dataclass
class GuidanceState:
    lam: float = 0.1
    tau: float = 0.3
    phi0: float = 10.0
    total_steps: int = 20
    anchors: list[torch.Tensor] | None = None
    log: list[dict] = field(default_factory=list)

    def capture_anchor(self, maps: list[torch.Tensor]) -> None:
        if self.anchors is not None:
            raise RuntimeError("anchor maps already captured")
        self.anchors = [refine_activation(m.detach(), self.lam, self.tau) for m in maps]


def refine_activation(M: torch.Tensor, lam: float, tau: float) -> torch.Tensor:
    A = torch.where(M > tau, M + lam, M - lam)
    return A.clamp(0.0, 1.0)


def soft_iou(a: torch.Tensor, b: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``sum(a*b) / sum(max(a, b))``; an all-zero pair counts as a perfect match."""
    union = torch.maximum(a, b).sum()
    if float(union.detach()) < eps:
        logger.debug("empty soft-IoU pair, treated as perfect match")
        return torch.ones((), dtype=a.dtype)
    return (a * b).sum() / union.clamp_min(eps)


def layout_loss(current: list[torch.Tensor], anchors: list[torch.Tensor], eps: float = EPS) -> torch.Tensor:
    if len(current) == 0 or len(current) != len(anchors):
        raise ValueError("need K >= 1 matching map pairs")
    total = torch.zeros((), dtype=current[0].dtype)
    for a_t, a_T in zip(current, anchors):
        if a_t.shape != a_T.shape:
            raise ValueError(f"grid mismatch {tuple(a_t.shape)} vs {tuple(a_T.shape)}")
        total = total + (1.0 - soft_iou(a_t, a_T, eps))
    return total


def guidance_step(z: torch.Tensor, grad: torch.Tensor, phi: float) -> torch.Tensor:
    if not bool(torch.isfinite(grad).all()):
        warnings.warn("non-finite layout gradient, guidance update skipped", RuntimeWarning, stacklevel=2)
        return z
    return z - phi * grad


def decay_schedule(step_index: int, total_steps: int, phi0: float) -> float:
    if not 0 <= step_index < total_steps:
        raise ValueError(f"step {step_index} outside [0, {total_steps})")
    return phi0 * (1.0 - step_index / total_steps)
