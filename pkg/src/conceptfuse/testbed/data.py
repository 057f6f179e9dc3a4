"""Synthetic concept images with exact foreground masks.

Everything is rendered directly on the 16x16 latent grid with hard edges, so
a pixel is either background (exactly the background colour) or foreground.
"""

from __future__ import annotations

import logging
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SIZE = 16

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 70, 220),
    "yellow": (235, 210, 40),
    "purple": (140, 50, 170),
    "orange": (240, 130, 20),
    "white": (245, 245, 245),
    "black": (15, 15, 15),
}

BACKGROUNDS = {
    "beach": (225, 200, 150),
    "grass": (90, 150, 70),
    "snow": (230, 235, 240),
    "street": (90, 90, 95),
    "room": (170, 160, 150),
    "sky": (140, 190, 235),
}

# class word -> generic shape used when pretraining the base model
CLASS_SHAPES = {
    "dog": "circle",
    "cat": "triangle",
    "clock": "square",
    "man": "bar",
    "toy": "diamond",
    "ball": "ring",
    "cup": "cross",
}

SHAPES = ("circle", "square", "triangle", "diamond", "bar", "ring", "cross")
PATTERNS = ("solid", "stripes", "dots", "checker")


class DatasetError(ValueError):
    pass


def shape_mask(shape: str, cy: float, cx: float, r: float, size: int = SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if shape == "circle":
        m = dy**2 + dx**2 <= r**2
    elif shape == "square":
        m = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    elif shape == "diamond":
        m = np.abs(dy) + np.abs(dx) <= r
    elif shape == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif shape == "bar":
        m = (np.abs(dy) <= r) & (np.abs(dx) <= r * 0.45)
    elif shape == "ring":
        d2 = dy**2 + dx**2
        m = (d2 <= r**2) & (d2 >= (r * 0.5) ** 2)
    elif shape == "cross":
        m = ((np.abs(dy) <= r) & (np.abs(dx) <= r * 0.35)) | ((np.abs(dx) <= r) & (np.abs(dy) <= r * 0.35))
    else:
        raise DatasetError(f"unknown shape {shape!r}")
    return m


def pattern_mask(pattern: str, size: int = SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if pattern == "solid":
        return np.zeros((size, size), dtype=bool)
    if pattern == "stripes":
        return (yy % 2) == 0
    if pattern == "dots":
        return ((yy % 3) == 1) & ((xx % 3) == 1)
    if pattern == "checker":
        return ((yy + xx) % 2) == 0
    raise DatasetError(f"unknown pattern {pattern!r}")


def render(objects, background, size: int = SIZE) -> tuple[np.ndarray, list[np.ndarray]]:
    """Paint ``objects`` (later ones on top) and return the image and per-object visible masks."""
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:] = background
    owner = np.full((size, size), -1)
    for idx, obj in enumerate(objects):
        m = shape_mask(obj["shape"], obj["cy"], obj["cx"], obj["r"], size)
        pat = pattern_mask(obj.get("pattern", "solid"), size) & m
        img[m] = obj["color"]
        img[pat] = obj.get("pattern_color", obj["color"])
        owner[m] = idx
    return img, [owner == i for i in range(len(objects))]


@dataclass
class ConceptSpec:
    name: str
    class_word: str
    shape: str
    color: tuple[int, int, int]
    pattern: str = "solid"
    pattern_color: tuple[int, int, int] = (0, 0, 0)
    n_images: int = 5
    radius: tuple[float, float] = (4.0, 5.5)

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise DatasetError(f"unknown shape {self.shape!r}")
        if self.pattern not in PATTERNS:
            raise DatasetError(f"unknown pattern {self.pattern!r}")
        if self.n_images < 1:
            raise DatasetError("n_images must be >= 1")
        if not 1.0 <= self.radius[0] <= self.radius[1] <= SIZE / 2:
            raise DatasetError(f"bad radius range {self.radius}")
        for c in (self.color, self.pattern_color):
            if len(c) != 3 or not all(0 <= v <= 255 for v in c):
                raise DatasetError(f"bad colour {c}")

    @classmethod
    def from_dict(cls, d: dict) -> "ConceptSpec":
        d = dict(d)
        for key in ("color", "pattern_color", "radius"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            spec = cls(**d)
        except TypeError as exc:
            raise DatasetError(str(exc)) from None
        spec.validate()
        return spec


BUILTIN_CONCEPTS = {
    "dogA": ConceptSpec("dogA", "dog", "circle", COLORS["orange"], "stripes", COLORS["black"]),
    "clockB": ConceptSpec("clockB", "clock", "square", COLORS["blue"], "dots", COLORS["yellow"]),
    "manC": ConceptSpec("manC", "man", "bar", COLORS["purple"], "checker", COLORS["white"]),
}


@dataclass
class SynthConceptDataset:
    images: np.ndarray  # (N, H, W, 3) uint8
    masks: np.ndarray  # (N, H, W) uint8 in {0, 255}
    prompts: list[str]
    names: list[str] = field(default_factory=list)
    concept: ConceptSpec | None = None

    def __len__(self) -> int:
        return len(self.prompts)

    def save(self, root: str | Path) -> None:
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for name, img, mask in zip(self.names, self.images, self.masks):
            Image.fromarray(img, mode="RGB").save(root / "images" / name)
            Image.fromarray(mask, mode="L").save(root / "masks" / name)
        lines = [f"{n}\t{p}" for n, p in zip(self.names, self.prompts)]
        (root / "prompts.txt").write_text("\n".join(lines) + "\n")
        if self.concept is not None:
            meta = asdict(self.concept)
            (root / "concept.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def load_mask_or_fallback(image: np.ndarray, path: Path) -> tuple[np.ndarray, bool]:
    """Read an 8-bit mask; if missing, threshold luminance against the border median."""
    if path.exists():
        return np.asarray(Image.open(path).convert("L"), dtype=np.uint8), False
    lum = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    border = np.concatenate([lum[0], lum[-1], lum[:, 0], lum[:, -1]])
    fg = np.abs(lum - np.median(border)) > 12.0
    logger.warning("mask %s missing, using luminance-threshold fallback", path)
    return np.where(fg, 255, 0).astype(np.uint8), True


def load_dataset(root: str | Path, allow_mask_fallback: bool = False) -> SynthConceptDataset:
    root = Path(root)
    index = root / "prompts.txt"
    if not index.exists():
        raise DatasetError(f"no prompts.txt under {root}")
    names, prompts, images, masks = [], [], [], []
    for line in index.read_text().splitlines():
        if not line.strip():
            continue
        name, prompt = line.split("\t", 1)
        img_path = root / "images" / name
        if not img_path.exists():
            raise DatasetError(f"missing image {img_path}")
        img = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.uint8)
        if not (root / "masks" / name).exists() and not allow_mask_fallback:
            raise DatasetError(f"missing mask for {name} and mask fallback not enabled")
        mask, _ = load_mask_or_fallback(img, root / "masks" / name)
        if mask.shape != img.shape[:2]:
            raise DatasetError(f"mask for {name} has shape {mask.shape}, image {img.shape[:2]}")
        names.append(name)
        prompts.append(prompt)
        images.append(img)
        masks.append(mask)
    if not names:
        raise DatasetError(f"empty dataset at {root}")
    concept = None
    meta_path = root / "concept.txt"
    if meta_path.exists():
        meta = dict(line.split("=", 1) for line in meta_path.read_text().splitlines() if line)
        concept = ConceptSpec.from_dict({
            "name": meta["name"], "class_word": meta["class_word"], "shape": meta["shape"],
            "pattern": meta["pattern"], "n_images": int(meta["n_images"]),
            "color": _parse_tuple(meta["color"], int), "pattern_color": _parse_tuple(meta["pattern_color"], int),
            "radius": _parse_tuple(meta["radius"], float),
        })
    return SynthConceptDataset(np.stack(images), np.stack(masks), prompts, names, concept)


def _parse_tuple(text: str, typ):
    return tuple(typ(v) for v in text.strip("()[] ").split(","))


def _place(rng: random.Random, r: float, size: int = SIZE) -> tuple[float, float]:
    lo, hi = r, size - r
    return rng.uniform(lo, hi), rng.uniform(lo, hi)


def make_dataset(spec: ConceptSpec, seed: int = 0) -> SynthConceptDataset:
    """Render ``spec.n_images`` views of one concept on varied backgrounds."""
    spec.validate()
    rng = random.Random(seed)
    bgs = sorted(BACKGROUNDS)
    images, masks, prompts, names = [], [], [], []
    for i in range(spec.n_images):
        r = rng.uniform(*spec.radius)
        cy, cx = _place(rng, r)
        bg = bgs[rng.randrange(len(bgs))]
        obj = dict(shape=spec.shape, cy=cy, cx=cx, r=r, color=spec.color,
                   pattern=spec.pattern, pattern_color=spec.pattern_color)
        img, (mask,) = render([obj], BACKGROUNDS[bg])
        images.append(img)
        masks.append(np.where(mask, 255, 0).astype(np.uint8))
        prompts.append(f"a photo of <{spec.name}> on the {bg}")
        names.append(f"{i:03d}.png")
    return SynthConceptDataset(np.stack(images), np.stack(masks), prompts, names, spec)


def generic_scene(rng: random.Random) -> tuple[np.ndarray, str, list[np.ndarray]]:
    """One base-model training scene: one or two generic class objects with a caption."""
    classes = sorted(CLASS_SHAPES)
    color_names = sorted(COLORS)
    bg = sorted(BACKGROUNDS)[rng.randrange(len(BACKGROUNDS))]
    n_obj = 1 if rng.random() < 0.6 else 2
    objects, phrases = [], []
    picked = rng.sample(classes, n_obj)
    for j, cls in enumerate(picked):
        r = rng.uniform(3.0, 5.0) if n_obj == 2 else rng.uniform(3.5, 6.0)
        if n_obj == 2:
            # left / right halves keep the two objects mostly apart
            cy = rng.uniform(r, SIZE - r)
            cx = rng.uniform(r, SIZE / 2) if j == 0 else rng.uniform(SIZE / 2, SIZE - r)
        else:
            cy, cx = _place(rng, r)
        cname = color_names[rng.randrange(len(color_names))]
        pattern = PATTERNS[rng.randrange(len(PATTERNS))]
        pcolor = COLORS[color_names[rng.randrange(len(color_names))]]
        objects.append(dict(shape=CLASS_SHAPES[cls], cy=cy, cx=cx, r=r, color=COLORS[cname],
                            pattern=pattern, pattern_color=pcolor))
        phrases.append(f"a {cname} {cls}")
    img, masks = render(objects, BACKGROUNDS[bg])
    prompt = f"a photo of {' and '.join(phrases)} on the {bg}"
    return img, prompt, masks
