"""Evaluation arithmetic and a pluggable embedding interface.

The identity score (DINO) and prompt-alignment score (CLIP-T) come from
external networks in practice.  Here they sit behind a backend registry
whose default is a seed-pinned stub, so reports stay hermetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

CLIP_T_SCALE = 2.5


def f1_score(dino: float, clip_t: float) -> float:
    """Harmonic mean of ``dino`` and ``2.5 * clip_t``; 0 when both vanish."""
    a, b = float(dino), CLIP_T_SCALE * float(clip_t)
    if a + b == 0:
        return 0.0
    return 2 * a * b / (a + b)


def dino_multi_average(per_concept) -> float:
    values = [float(v) for v in per_concept]
    if not values:
        raise ValueError("need at least one per-concept identity score")
    return sum(values) / len(values)


# ---- embedding backends -------------------------------------------------------------

_BACKENDS: dict[str, Callable[[object], np.ndarray]] = {}


def register_backend(name: str, fn: Callable[[object], np.ndarray]) -> None:
    _BACKENDS[name] = fn


def embed_backend(x, backend: str = "stub") -> np.ndarray:
    try:
        fn = _BACKENDS[backend]
    except KeyError:
        raise KeyError(f"embedding backend {backend!r} is not registered; have {sorted(_BACKENDS)}") from None
    return np.asarray(fn(x), dtype=np.float64)


STUB_DIM = 64
STUB_SEED = 1234
_GRID = 4


def _image_stats(img: np.ndarray) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64) / 255.0
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {x.shape}")
    h, w, _ = x.shape
    cells = x[: h - h % _GRID, : w - w % _GRID].reshape(_GRID, h // _GRID, _GRID, w // _GRID, 3)
    means = cells.mean(axis=(1, 3)).ravel()
    stds = cells.std(axis=(1, 3)).ravel()
    hist = np.concatenate([np.histogram(x[..., c], bins=8, range=(0, 1))[0] / (h * w) for c in range(3)])
    return np.concatenate([means, stds, hist])


def _text_stats(text: str) -> np.ndarray:
    # hashed bag of tokens with a stable (non-salted) hash
    out = np.zeros(128)
    for tok in text.lower().split():
        out[sum(ord(ch) * 31 ** i for i, ch in enumerate(tok)) % 128] += 1.0
    return out


def _projection(n_in: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng([STUB_SEED, tag, n_in])
    return rng.standard_normal((STUB_DIM, n_in)) / math.sqrt(n_in)


def _stub(x) -> np.ndarray:
    if isinstance(x, str):
        s, tag = _text_stats(x), 1
    else:
        s, tag = _image_stats(x), 0
    s = s - s.mean()
    return _projection(len(s), tag) @ s


register_backend("stub", _stub)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def dino_score(generated, references, backend: str = "stub") -> float:
    """Mean cosine between each generated image and each reference image."""
    g = [embed_backend(x, backend) for x in generated]
    r = [embed_backend(x, backend) for x in references]
    if not g or not r:
        raise ValueError("need generated and reference images")
    return float(np.mean([cosine(a, b) for a in g for b in r]))


def clip_t_score(images, prompts, backend: str = "stub") -> float:
    """Mean image/prompt cosine, clipped at 0 as CLIP-T is."""
    if len(images) != len(prompts) or not images:
        raise ValueError("need one prompt per image")
    return float(np.mean([max(cosine(embed_backend(i, backend), embed_backend(p, backend)), 0.0)
                          for i, p in zip(images, prompts)]))


# ---- reports --------------------------------------------------------------------------

@dataclass
class MetricReport:
    dino: dict[str, float]
    clip_t: float
    face: float | None = None
    notes: dict[str, str] = field(default_factory=dict)

    @property
    def dino_mean(self) -> float:
        return dino_multi_average(self.dino.values())

    @property
    def scaled_clip_t(self) -> float:
        return CLIP_T_SCALE * self.clip_t

    @property
    def f1(self) -> float:
        return f1_score(self.dino_mean, self.clip_t)

    def to_text(self) -> str:
        rows = [("metric", "value")]
        rows += [(f"dino[{k}]", repr(v)) for k, v in sorted(self.dino.items())]
        rows += [("dino_mean", repr(self.dino_mean)), ("clip_t", repr(self.clip_t)),
                 ("clip_t_scaled", repr(self.scaled_clip_t)), ("f1", repr(self.f1))]
        if self.face is not None:
            rows.append(("face", repr(self.face)))
        rows += [(f"note[{k}]", v) for k, v in sorted(self.notes.items())]
        return "\n".join(f"{a}\t{b}" for a, b in rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        dino, notes, clip_t, face, derived = {}, {}, None, None, {}
        for line in text.strip().splitlines()[1:]:
            key, value = line.split("\t", 1)
            if key.startswith("dino["):
                dino[key[5:-1]] = float(value)
            elif key.startswith("note["):
                notes[key[5:-1]] = value
            elif key == "clip_t":
                clip_t = float(value)
            elif key == "face":
                face = float(value)
            else:
                derived[key] = float(value)
        if clip_t is None or not dino:
            raise ValueError("report lacks identity or alignment scores")
        report = cls(dino, clip_t, face, notes)
        if "f1" in derived and abs(derived["f1"] - report.f1) > 1e-12:
            raise ValueError("stored F1 disagrees with its components")
        return report
