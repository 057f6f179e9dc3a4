"""Weight-update parameterizations for attention linears.

Three kinds are supported:

* ``lora``       W' = W0 + B A
* ``krona``      W' = W0 + A (x) B
* ``krona_wed``  W' = m * (W0 + A (x) B) / ||W0 + A (x) B||_c

Matrices follow the math convention: ``W0`` is ``d x k`` and acts on column
vectors of length ``k``.  This is the same layout as ``nn.Linear.weight``
(out_features x in_features), so column norms here are norms over dim 0.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

NORM_EPS = 1e-8
ADAPTER_KINDS = ("lora", "krona", "krona_wed")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BaseWeight:
    W0: torch.Tensor
    layer_id: str = ""

    def __post_init__(self):
        if self.W0.ndim != 2 or min(self.W0.shape) < 1:
            raise ShapeError(f"W0 must be a non-empty matrix, got shape {tuple(self.W0.shape)}")

    @property
    def d(self) -> int:
        return self.W0.shape[0]

    @property
    def k(self) -> int:
        return self.W0.shape[1]


@dataclass
class LoraFactors:
    B: torch.Tensor  # d x r
    A: torch.Tensor  # r x k

    @property
    def r(self) -> int:
        return self.A.shape[0]


@dataclass
class KronFactors:
    A: torch.Tensor  # a1 x a2
    B: torch.Tensor  # b1 x b2
    f: int

    @property
    def shapes(self) -> tuple[int, int, int, int]:
        return (*self.A.shape, *self.B.shape)


@dataclass
class DecomposedAdapter:
    base: BaseWeight
    kron: KronFactors
    m: torch.Tensor  # length k

    def n_trainable(self) -> int:
        return self.kron.A.numel() + self.kron.B.numel() + self.m.numel()


def kron_product(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    """Kronecker product; block ``(i, j)`` of the result is ``A[i, j] * B``."""
    a1, a2 = A.shape
    b1, b2 = B.shape
    # (a1, 1, a2, 1) * (1, b1, 1, b2) -> (a1, b1, a2, b2)
    out = A[:, None, :, None] * B[None, :, None, :]
    return out.reshape(a1 * b1, a2 * b2)


def largest_divisor_at_most(n: int, f: int) -> int:
    for cand in range(min(n, f), 0, -1):
        if n % cand == 0:
            return cand
    return 1


def choose_factors(d: int, k: int, f: int, fallback: bool = False, layer_id: str = "") -> tuple[int, int, int, int]:
    """Single-factor Kronecker shapes ``(a1, a2, b1, b2)`` for a ``d x k`` weight.

    With ``fallback`` a dimension that ``f`` does not divide uses its largest
    divisor not exceeding ``f`` instead of raising.
    """
    if f < 1:
        raise ShapeError(f"factor must be >= 1, got {f}")
    a1, a2 = f, f
    for name, dim in (("d", d), ("k", k)):
        if dim % f == 0:
            continue
        if not fallback:
            raise ShapeError(f"factor f={f} does not divide {name}={dim}")
        sub = largest_divisor_at_most(dim, f)
        logger.info("layer %s: f=%d does not divide %s=%d, using %d", layer_id or "?", f, name, dim, sub)
        if name == "d":
            a1 = sub
        else:
            a2 = sub
    return a1, a2, d // a1, k // a2


def column_norm(W: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    return torch.linalg.vector_norm(W, dim=0).clamp_min(eps)


def init_krona_wed(base: BaseWeight, f: int, seed: int | None = None, fallback: bool = False) -> DecomposedAdapter:
    a1, a2, b1, b2 = choose_factors(base.d, base.k, f, fallback=fallback, layer_id=base.layer_id)
    gen = torch.Generator().manual_seed(0 if seed is None else seed)
    dtype = base.W0.dtype
    # He init, fan-in taken as the input-side width of A
    A = torch.randn(a1, a2, generator=gen, dtype=dtype) * math.sqrt(2.0 / a2)
    B = torch.zeros(b1, b2, dtype=dtype)
    m = torch.linalg.vector_norm(base.W0, dim=0)
    return DecomposedAdapter(base=base, kron=KronFactors(A=A, B=B, f=f), m=m)


def wed_weight(W0: torch.Tensor, delta: torch.Tensor, m: torch.Tensor, eps: float = NORM_EPS,
               detach_norm: bool = False) -> torch.Tensor:
    V = W0 + delta
    norm = column_norm(V, eps)
    if detach_norm:
        norm = norm.detach()
    # scale first: at init m and norm are bitwise equal, so scale == 1.0 and W' == W0 exactly
    scale = m / norm
    return V * scale[None, :]


def effective_weight(adapter: DecomposedAdapter, eps: float = NORM_EPS) -> torch.Tensor:
    delta = kron_product(adapter.kron.A, adapter.kron.B)
    return wed_weight(adapter.base.W0, delta, adapter.m, eps)


def lora_effective_weight(base: BaseWeight, lora: LoraFactors) -> torch.Tensor:
    if lora.B.shape[0] != base.d or lora.A.shape[1] != base.k or lora.B.shape[1] != lora.A.shape[0]:
        raise ShapeError(
            f"LoRA factors B{tuple(lora.B.shape)} A{tuple(lora.A.shape)} do not fit W0{tuple(base.W0.shape)}"
        )
    return base.W0 + lora.B @ lora.A


def adapter_forward(adapter: DecomposedAdapter, x: torch.Tensor) -> torch.Tensor:
    if x.shape[-1] != adapter.base.k:
        raise ShapeError(f"input length {x.shape[-1]} != k={adapter.base.k}")
    return x @ effective_weight(adapter).T


class AdaptedLinear(nn.Module):
    """Drop-in replacement for a bias-free ``nn.Linear`` carrying a trainable update.

    ``W0`` is held as a buffer and never receives gradients.
    """

    def __init__(self, base: nn.Linear, kind: str = "krona_wed", factor: int = 16, rank: int = 4,
                 seed: int = 0, layer_id: str = "", detach_norm: bool = False):
        super().__init__()
        if kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {kind!r}")
        self.kind = kind
        self.layer_id = layer_id
        self.detach_norm = detach_norm
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.register_buffer("W0", base.weight.detach().clone())
        self.bias = None if base.bias is None else nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        d, k = self.W0.shape
        gen = torch.Generator().manual_seed(seed)
        if kind == "lora":
            if not 1 <= rank <= min(d, k):
                raise ShapeError(f"rank {rank} out of range for {d}x{k} layer {layer_id}")
            self.lora_A = nn.Parameter(torch.randn(rank, k, generator=gen) * math.sqrt(2.0 / k))
            self.lora_B = nn.Parameter(torch.zeros(d, rank))
            self.factor = None
        else:
            a1, a2, b1, b2 = choose_factors(d, k, factor, fallback=True, layer_id=layer_id)
            self.factor = factor
            self.kron_A = nn.Parameter(torch.randn(a1, a2, generator=gen) * math.sqrt(2.0 / a2))
            self.kron_B = nn.Parameter(torch.zeros(b1, b2))
            if kind == "krona_wed":
                self.m = nn.Parameter(torch.linalg.vector_norm(self.W0, dim=0))

    def delta(self) -> torch.Tensor:
        if self.kind == "lora":
            return self.lora_B @ self.lora_A
        return kron_product(self.kron_A, self.kron_B)

    def weight(self) -> torch.Tensor:
        if self.kind == "krona_wed":
            return wed_weight(self.W0, self.delta(), self.m, detach_norm=self.detach_norm)
        return self.W0 + self.delta()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.weight(), self.bias)

    def to_linear(self) -> nn.Linear:
        lin = nn.Linear(self.in_features, self.out_features, bias=self.bias is not None)
        with torch.no_grad():
            lin.weight.copy_(self.weight())
            if self.bias is not None:
                lin.bias.copy_(self.bias)
        lin.requires_grad_(False)
        return lin

    def state_arrays(self) -> dict[str, torch.Tensor]:
        if self.kind == "lora":
            return {"lora.A": self.lora_A.detach(), "lora.B": self.lora_B.detach()}
        out = {"kron.A": self.kron_A.detach(), "kron.B": self.kron_B.detach()}
        if self.kind == "krona_wed":
            out["m"] = self.m.detach()
        return out

    def load_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for key, value in arrays.items():
                param = {"lora.A": "lora_A", "lora.B": "lora_B", "kron.A": "kron_A", "kron.B": "kron_B", "m": "m"}[key]
                getattr(self, param).copy_(value)

    def n_trainable(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)

    def extra_repr(self) -> str:
        return f"{self.kind}, in={self.in_features}, out={self.out_features}, layer={self.layer_id}"


def lora_param_count(d: int, k: int, r: int) -> int:
    return r * (d + k)


def krona_wed_param_count(d: int, k: int, f: int) -> int:
    a1, a2, b1, b2 = choose_factors(d, k, f)
    return a1 * a2 + b1 * b2 + k
