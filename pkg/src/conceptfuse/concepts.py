"""Decomposed concept tokens and prompt handling.

A concept ``dogA`` is represented by two new vocabulary entries,
``<dogA_rand>`` and ``<dogA_class>``.  In raw prompt text the placeholder
``<dogA>`` expands to that two-token sequence.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

import torch
from torch import nn

logger = logging.getLogger(__name__)

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# Shared by the toy text encoder, the synthetic dataset and the prompt tests.
BASE_WORDS = (
    "a", "an", "the", "photo", "of", "and", "with", "on", "in", "at", "next", "to", "near", "by",
    "holding", "advertising", "wearing", "playing", "sitting", "standing",
    "dog", "cat", "clock", "man", "woman", "toy", "ball", "cup", "house", "car", "bird", "flower",
    "red", "green", "blue", "yellow", "purple", "orange", "white", "black", "striped", "dotted",
    "beach", "grass", "snow", "street", "room", "sky", "background",
)

_TOKEN_RE = re.compile(r"<[^<>\s]+>|[A-Za-z]+")


class ConceptError(ValueError):
    pass


class Vocabulary:
    def __init__(self, words=BASE_WORDS):
        self._ids: dict[str, int] = {}
        self._tokens: list[str] = []
        for tok in (*SPECIAL_TOKENS, *words):
            self._add(tok)
        self.base_size = len(self._tokens)

    def _add(self, token: str) -> int:
        if token in self._ids:
            raise ConceptError(f"token {token!r} already in vocabulary")
        self._ids[token] = len(self._tokens)
        self._tokens.append(token)
        return self._ids[token]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids[token]

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    @property
    def pad_id(self) -> int:
        return self._ids["<pad>"]

    @property
    def bos_id(self) -> int:
        return self._ids["<bos>"]

    @property
    def eos_id(self) -> int:
        return self._ids["<eos>"]

    @property
    def unk_id(self) -> int:
        return self._ids["<unk>"]


@dataclass
class ConceptTokenPair:
    name: str
    class_word: str
    v_rand: nn.Parameter
    v_class: nn.Parameter
    rand_id: int
    class_id: int

    @property
    def rand_token(self) -> str:
        return f"<{self.name}_rand>"

    @property
    def class_token(self) -> str:
        return f"<{self.name}_class>"

    @property
    def composite(self) -> str:
        return f"{self.rand_token} {self.class_token}"

    def parameters(self) -> list[nn.Parameter]:
        return [self.v_rand, self.v_class]


@dataclass(frozen=True)
class ConceptRef:
    """A concept occurrence in an encoded prompt; positions index the padded sequence."""

    name: str
    rand_pos: int
    class_pos: int

    @property
    def positions(self) -> tuple[int, int]:
        return (self.rand_pos, self.class_pos)


@dataclass
class PromptSpec:
    template: str
    bound_concepts: list[ConceptTokenPair] = field(default_factory=list)
    tokens: list[str] = field(default_factory=list)
    ids: list[int] = field(default_factory=list)

    @property
    def text(self) -> str:
        return " ".join(t for t in self.tokens if t not in SPECIAL_TOKENS)


class ConceptRegistry:
    """Vocabulary plus learnable concept embeddings layered over a frozen base table."""

    def __init__(self, base_embeddings: torch.Tensor, vocab: Vocabulary | None = None, max_len: int = 16):
        self.vocab = vocab or Vocabulary()
        if base_embeddings.shape[0] != self.vocab.base_size:
            raise ConceptError(
                f"base table has {base_embeddings.shape[0]} rows, vocabulary has {self.vocab.base_size}"
            )
        self.base_embeddings = base_embeddings.detach()
        self.max_len = max_len
        self.concepts: dict[str, ConceptTokenPair] = {}

    @property
    def width(self) -> int:
        return self.base_embeddings.shape[1]

    def register_concept(self, name: str, class_word: str, seed: int = 0, noise_std: float = 0.01) -> ConceptTokenPair:
        if name in self.concepts:
            raise ConceptError(f"concept {name!r} already registered")
        if class_word not in self.vocab or self.vocab.id(class_word) >= self.vocab.base_size:
            raise ConceptError(f"class word {class_word!r} is not in the base vocabulary")
        if not re.fullmatch(r"[A-Za-z0-9]+", name):
            raise ConceptError(f"concept name {name!r} must be alphanumeric")
        base = self.base_embeddings[self.vocab.id(class_word)]
        gen = torch.Generator().manual_seed(seed)
        v_class = nn.Parameter(base.clone())
        v_rand = nn.Parameter(base + noise_std * torch.randn(base.shape, generator=gen, dtype=base.dtype))
        pair = ConceptTokenPair(
            name=name, class_word=class_word, v_rand=v_rand, v_class=v_class,
            rand_id=self.vocab._add(f"<{name}_rand>"), class_id=self.vocab._add(f"<{name}_class>"),
        )
        self.concepts[name] = pair
        return pair

    def add_pair(self, name: str, class_word: str, v_rand: torch.Tensor, v_class: torch.Tensor) -> ConceptTokenPair:
        """Register a concept with known embeddings (checkpoint loading, fusion)."""
        pair = self.register_concept(name, class_word)
        with torch.no_grad():
            pair.v_rand.copy_(v_rand)
            pair.v_class.copy_(v_class)
        return pair

    def get(self, name: str) -> ConceptTokenPair:
        try:
            return self.concepts[name]
        except KeyError:
            raise ConceptError(f"unknown concept {name!r}") from None

    def parameters(self) -> list[nn.Parameter]:
        return [p for c in self.concepts.values() for p in c.parameters()]

    def tokenize(self, text: str) -> list[str]:
        tokens: list[str] = []
        for raw in _TOKEN_RE.findall(text):
            if raw.startswith("<"):
                inner = raw[1:-1]
                if inner in self.concepts:
                    tokens.extend(self.concepts[inner].composite.split())
                elif raw in self.vocab and raw not in SPECIAL_TOKENS:
                    tokens.append(raw)
                else:
                    raise ConceptError(f"unknown concept {inner!r} in prompt")
            else:
                word = raw.lower()
                if word not in self.vocab:
                    logger.warning("word %r not in vocabulary, mapped to <unk>", word)
                    word = "<unk>"
                tokens.append(word)
        return tokens

    def bind(self, text: str) -> PromptSpec:
        words = self.tokenize(text)
        if len(words) > self.max_len - 2:
            logger.warning("prompt %r truncated to %d tokens", text, self.max_len - 2)
            words = words[: self.max_len - 2]
        tokens = ["<bos>", *words, "<eos>"]
        tokens += ["<pad>"] * (self.max_len - len(tokens))
        ids = [self.vocab.id(t) for t in tokens]
        bound = []
        for t in words:
            if t.endswith("_class>"):
                bound.append(self.concepts[t[1:-len("_class>")]])
        return PromptSpec(template=text, bound_concepts=bound, tokens=tokens, ids=ids)

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        """Token embeddings for ``ids`` of shape (B, L); concept rows are differentiable."""
        base_size = self.vocab.base_size
        out = self.base_embeddings[ids.clamp_max(base_size - 1)]
        is_concept = ids >= base_size
        if not bool(is_concept.any()):
            return out
        rows = [None] * (len(self.vocab) - base_size)
        for c in self.concepts.values():
            rows[c.rand_id - base_size] = c.v_rand
            rows[c.class_id - base_size] = c.v_class
        table = torch.stack(rows)
        extra = table[(ids - base_size).clamp_min(0)]
        return torch.where(is_concept[..., None], extra, out)

    def encode(self, prompts) -> tuple[torch.Tensor, list[PromptSpec]]:
        specs = [p if isinstance(p, PromptSpec) else self.bind(p) for p in prompts]
        return torch.tensor([s.ids for s in specs], dtype=torch.long), specs

    def extract_concept_tokens(self, prompt: PromptSpec) -> list[ConceptRef]:
        return extract_concept_tokens(prompt, self)

    def make_reference_prompt(self, name: str) -> PromptSpec:
        return make_reference_prompt(name, self)


def extract_concept_tokens(prompt: PromptSpec, registry: ConceptRegistry) -> list[ConceptRef]:
    """Concept occurrences in order of appearance, with their sequence positions."""
    refs = []
    for pos, tok in enumerate(prompt.tokens):
        if not tok.endswith("_rand>"):
            continue
        name = tok[1:-len("_rand>")]
        pair = registry.concepts.get(name)
        if pair is None:
            continue
        if pos + 1 < len(prompt.tokens) and prompt.tokens[pos + 1] == pair.class_token:
            refs.append(ConceptRef(name=name, rand_pos=pos, class_pos=pos + 1))
    return refs


def make_reference_prompt(name: str, registry: ConceptRegistry) -> PromptSpec:
    pair = registry.get(name)
    return registry.bind(f"a photo of {pair.composite}")


def merge_registries(registries: list[ConceptRegistry]) -> ConceptRegistry:
    """Concatenate concept tokens from several registries over one base table."""
    first = registries[0]
    merged = ConceptRegistry(first.base_embeddings, max_len=first.max_len)
    for reg in registries:
        if not torch.equal(reg.base_embeddings, first.base_embeddings):
            raise ConceptError("registries are built on different base embedding tables")
        for c in reg.concepts.values():
            merged.add_pair(c.name, c.class_word, c.v_rand.detach(), c.v_class.detach())
    return merged
