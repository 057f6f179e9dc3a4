"""Gradient fusion of per-concept weight updates.

For one layer with concept updates ``dW_n`` and input activations ``X_n``
(``k x n_samples``), the fused update minimizes

    sum_n || dW X_n - dW_n X_n ||_F^2 + mu || dW ||_F^2

whose normal equations give ``dW (sum_n X_n X_n^T + mu I) = sum_n dW_n X_n X_n^T``.
Everything is solved in float64.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import torch
from torch import nn

logger = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass
class FusionProblem:
    deltas: list[torch.Tensor]  # each d x k
    activations: list[torch.Tensor]  # each k x n_samples
    mu: float | None = None

    def validate(self) -> None:
        if not self.deltas or len(self.deltas) != len(self.activations):
            raise FusionError("need one activation matrix per update, and at least one update")
        d, k = self.deltas[0].shape
        for dw, x in zip(self.deltas, self.activations):
            if dw.shape != (d, k):
                raise FusionError(f"update shapes differ: {tuple(dw.shape)} vs {(d, k)}")
            if x.ndim != 2 or x.shape[0] != k:
                raise FusionError(f"activation matrix {tuple(x.shape)} must have {k} rows")
            if x.shape[1] < k:
                logger.debug("only %d samples for a %d-wide layer", x.shape[1], k)


def gram(x: torch.Tensor) -> torch.Tensor:
    x = x.double()
    return x @ x.T


def default_mu(activations: list[torch.Tensor]) -> float:
    k = activations[0].shape[0]
    return 1e-4 * float(sum(torch.trace(gram(x)) for x in activations)) / k


def fuse_layer(problem: FusionProblem) -> torch.Tensor:
    problem.validate()
    mu = default_mu(problem.activations) if problem.mu is None else float(problem.mu)
    if mu < 0:
        raise FusionError("mu must be >= 0")
    grams = [gram(x) for x in problem.activations]
    k = grams[0].shape[0]
    lhs = sum(grams) + mu * torch.eye(k, dtype=torch.float64)
    rhs = sum(dw.double() @ g for dw, g in zip(problem.deltas, grams))
    if mu == 0 and int(torch.linalg.matrix_rank(lhs)) < k:
        raise FusionError("activation Gram matrix is singular with mu=0; use mu > 0")
    # lhs is symmetric, so dW lhs = rhs  <=>  lhs dW^T = rhs^T
    try:
        chol = torch.linalg.cholesky(lhs)
        sol = torch.cholesky_solve(rhs.T, chol)
    except RuntimeError:
        sol = torch.linalg.solve(lhs, rhs.T)
    return sol.T.contiguous()


def fusion_objective(dw: torch.Tensor, problem: FusionProblem) -> float:
    return float(sum(((dw.double() - dn.double()) @ x.double()).pow(2).sum()
                     for dn, x in zip(problem.deltas, problem.activations)))


def relative_residuals(dw: torch.Tensor, problem: FusionProblem) -> list[float]:
    out = []
    for dn, x in zip(problem.deltas, problem.activations):
        target = dn.double() @ x.double()
        denom = float(torch.linalg.norm(target))
        num = float(torch.linalg.norm((dw.double() - dn.double()) @ x.double()))
        out.append(num / denom if denom > 0 else 0.0)
    return out


@dataclass
class FusionResult:
    deltas: dict[str, torch.Tensor]
    residuals: dict[str, list[float]] = field(default_factory=dict)


def fuse_layers(problems: dict[str, FusionProblem], workers: int = 1, exact_single: bool = True) -> FusionResult:
    """Fuse every layer; layers are independent and may run on a thread pool.

    With ``exact_single`` a one-concept problem returns its update unchanged,
    which is an exact minimizer of the data term.
    """
    def one(item):
        lid, prob = item
        if exact_single and len(prob.deltas) == 1:
            prob.validate()
            dw = prob.deltas[0].double().clone()
        else:
            dw = fuse_layer(prob)
        return lid, dw, relative_residuals(dw, prob)

    items = sorted(problems.items())
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            done = list(pool.map(one, items))
    else:
        done = [one(it) for it in items]
    return FusionResult({lid: dw for lid, dw, _ in done}, {lid: r for lid, _, r in done})


def format_residuals(residuals: dict[str, list[float]], concepts: list[str]) -> str:
    lines = ["layer\tconcept\trelative_residual"]
    for lid in sorted(residuals):
        for name, r in zip(concepts, residuals[lid]):
            lines.append(f"{lid}\t{name}\t{r:.6e}")
    return "\n".join(lines) + "\n"


def collect_activations(denoiser: nn.Module, linears: dict[str, nn.Module], run) -> dict[str, torch.Tensor]:
    """Inputs seen by each linear while ``run()`` drives ``denoiser``, as ``k x n_samples`` float64.

    Every spatial location (or context token) of every forward call becomes
    one column.
    """
    store: dict[str, list[torch.Tensor]] = {lid: [] for lid in linears}
    handles = []
    for lid, mod in linears.items():
        def pre(_mod, args, lid=lid):
            x = args[0].detach()
            store[lid].append(x.reshape(-1, x.shape[-1]).double().T)
        handles.append(mod.register_forward_pre_hook(pre))
    try:
        with torch.no_grad():
            run()
    finally:
        for h in handles:
            h.remove()
    missing = [lid for lid, xs in store.items() if not xs]
    if missing:
        raise FusionError(f"no activations reached {missing}")
    return {lid: torch.cat(xs, dim=1) for lid, xs in store.items()}
