"""Named-array archives for adapters and fused updates.

Arrays live in a safetensors file; the manifest (format version, kind,
factor, layer shapes, concept records) is kept in its string key-value
header, so a checkpoint is one self-describing file.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import save_file

from ..adapters import AdaptedLinear
from ..concepts import ConceptRegistry
from ..testbed.model import Testbed, wrap_adapters

FORMAT_VERSION = "1"


class CheckpointError(ValueError):
    pass


@dataclass
class ConceptRecord:
    name: str
    class_word: str
    v_rand: torch.Tensor
    v_class: torch.Tensor


def _read(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        with safe_open(str(path), framework="pt") as fh:
            meta = fh.metadata() or {}
            arrays = {k: fh.get_tensor(k) for k in fh.keys()}
    except (SafetensorError, OSError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {meta.get('format_version')!r}")
    return arrays, meta


def _concept_arrays(concepts: list[ConceptRecord]) -> dict[str, torch.Tensor]:
    out = {}
    for c in concepts:
        out[f"concepts.{c.name}.v_rand"] = c.v_rand.detach().contiguous()
        out[f"concepts.{c.name}.v_class"] = c.v_class.detach().contiguous()
    return out


def _concepts_from(arrays, meta) -> list[ConceptRecord]:
    return [ConceptRecord(r["name"], r["class_word"], arrays[f"concepts.{r['name']}.v_rand"],
                          arrays[f"concepts.{r['name']}.v_class"]) for r in json.loads(meta["concepts"])]


def registry_with(base: Testbed, concepts: list[ConceptRecord]) -> ConceptRegistry:
    reg = ConceptRegistry(base.registry.base_embeddings, max_len=base.registry.max_len)
    for c in concepts:
        reg.add_pair(c.name, c.class_word, c.v_rand, c.v_class)
    return reg


@dataclass
class AdapterCheckpoint:
    kind: str
    factor: int
    rank: int
    layers: dict[str, dict[str, torch.Tensor]]
    layer_shapes: dict[str, tuple[int, int]]
    concepts: list[ConceptRecord]
    image_adapter: dict[str, torch.Tensor] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_modules(cls, adapters: dict[str, AdaptedLinear], registry: ConceptRegistry,
                     image_adapter: torch.nn.Module | None = None, meta: dict | None = None) -> "AdapterCheckpoint":
        first = next(iter(adapters.values()))
        return cls(
            kind=first.kind, factor=first.factor or 0, rank=first.lora_A.shape[0] if first.kind == "lora" else 0,
            layers={lid: {k: v.clone() for k, v in ad.state_arrays().items()} for lid, ad in adapters.items()},
            layer_shapes={lid: (ad.out_features, ad.in_features) for lid, ad in adapters.items()},
            concepts=[ConceptRecord(c.name, c.class_word, c.v_rand.detach().clone(), c.v_class.detach().clone())
                      for c in registry.concepts.values()],
            image_adapter={k: v.detach().clone() for k, v in (image_adapter.state_dict().items()
                                                              if image_adapter is not None else [])},
            meta={k: str(v) for k, v in (meta or {}).items()},
        )

    def save(self, path: str | Path) -> None:
        arrays = {f"{lid}.{k}": v.contiguous() for lid, d in self.layers.items() for k, v in d.items()}
        arrays.update(_concept_arrays(self.concepts))
        arrays.update({f"image_adapter.{k}": v.contiguous() for k, v in self.image_adapter.items()})
        header = {
            "format_version": FORMAT_VERSION, "type": "adapter", "kind": self.kind,
            "f": str(self.factor), "rank": str(self.rank),
            "layer_shapes": json.dumps({k: list(v) for k, v in sorted(self.layer_shapes.items())}),
            "concepts": json.dumps([{"name": c.name, "class_word": c.class_word} for c in self.concepts]),
            **{f"meta.{k}": v for k, v in self.meta.items()},
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_file(arrays, str(path), metadata=header)

    @classmethod
    def load(cls, path: str | Path) -> "AdapterCheckpoint":
        arrays, meta = _read(path)
        if meta.get("type") != "adapter":
            raise CheckpointError(f"{path} is not an adapter checkpoint")
        shapes = {k: tuple(v) for k, v in json.loads(meta["layer_shapes"]).items()}
        layers = {}
        for lid in shapes:
            layers[lid] = {k[len(lid) + 1:]: v for k, v in arrays.items() if k.startswith(lid + ".")}
        return cls(
            kind=meta["kind"], factor=int(meta["f"]), rank=int(meta["rank"]), layers=layers, layer_shapes=shapes,
            concepts=_concepts_from(arrays, meta),
            image_adapter={k[len("image_adapter."):]: v for k, v in arrays.items() if k.startswith("image_adapter.")},
            meta={k[5:]: v for k, v in meta.items() if k.startswith("meta.")},
        )

    def attach(self, base: Testbed) -> tuple[Testbed, dict[str, AdaptedLinear]]:
        """Copy of ``base`` with live adapters loaded from this checkpoint."""
        tb = copy.deepcopy(base)
        adapters = wrap_adapters(tb.denoiser, self.kind, self.factor or 16, self.rank or 4)
        if set(adapters) != set(self.layers):
            raise CheckpointError("checkpoint layer set does not match the base model")
        for lid, ad in adapters.items():
            ad.load_arrays(self.layers[lid])
            ad.requires_grad_(False)
        tb.registry = registry_with(base, self.concepts)
        return tb, adapters

    def materialize(self, base: Testbed) -> Testbed:
        """Copy of ``base`` with every adapted layer baked into a plain linear."""
        tb, adapters = self.attach(base)
        for lid, ad in adapters.items():
            tb.denoiser.set_linear(lid, ad.to_linear())
        return tb

    def deltas(self, base: Testbed) -> dict[str, torch.Tensor]:
        """Effective float64 update ``W' - W0`` per layer."""
        _, adapters = self.attach(base)
        with torch.no_grad():
            return {lid: ad.weight().double() - ad.W0.double() for lid, ad in adapters.items()}


@dataclass
class FusedCheckpoint:
    deltas: dict[str, torch.Tensor]  # float64, d x k
    concepts: list[ConceptRecord]
    residuals: dict[str, list[float]] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def concept_names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def save(self, path: str | Path) -> None:
        arrays = {f"{lid}.delta": v.contiguous() for lid, v in self.deltas.items()}
        arrays.update(_concept_arrays(self.concepts))
        header = {
            "format_version": FORMAT_VERSION, "type": "fused",
            "layer_shapes": json.dumps({k: list(v.shape) for k, v in sorted(self.deltas.items())}),
            "concepts": json.dumps([{"name": c.name, "class_word": c.class_word} for c in self.concepts]),
            "residuals": json.dumps(self.residuals, sort_keys=True),
            **{f"meta.{k}": v for k, v in self.meta.items()},
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_file(arrays, str(path), metadata=header)

    @classmethod
    def load(cls, path: str | Path) -> "FusedCheckpoint":
        arrays, meta = _read(path)
        if meta.get("type") != "fused":
            raise CheckpointError(f"{path} is not a fused checkpoint")
        shapes = json.loads(meta["layer_shapes"])
        return cls(
            deltas={lid: arrays[f"{lid}.delta"] for lid in shapes},
            concepts=_concepts_from(arrays, meta),
            residuals=json.loads(meta.get("residuals", "{}")),
            meta={k[5:]: v for k, v in meta.items() if k.startswith("meta.")},
        )

    def materialize(self, base: Testbed) -> Testbed:
        tb = copy.deepcopy(base)
        linears = tb.denoiser.attention_linears()
        if set(linears) != set(self.deltas):
            raise CheckpointError("fused layer set does not match the base model")
        with torch.no_grad():
            for lid, lin in linears.items():
                w = (lin.weight.double() + self.deltas[lid].double()).to(lin.weight.dtype)
                lin.weight.copy_(w)
        tb.registry = registry_with(base, self.concepts)
        return tb
