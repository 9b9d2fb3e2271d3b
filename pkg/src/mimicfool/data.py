"""Synthetic shape dataset: one colored shape on a textured background.

Every sample is a pure function of ``(seed, index)``. Labels cycle through
the shape x color classes so the class distribution is uniform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COLORS = ("red", "green", "blue")
SHAPES = ("square", "circle", "triangle")
SIZES = ("small", "large")
HPOS = ("left", "right")
VPOS = ("top", "bottom")

N_CLASSES = len(SHAPES) * len(COLORS)

QUESTIONS = (
    ("what color is the shape", "color", COLORS),
    ("what shape is it", "shape", SHAPES),
    ("is the shape small or large", "size", SIZES),
    ("is the shape on the left or right", "hpos", HPOS),
    ("is the shape at the top or bottom", "vpos", VPOS),
)
ANSWERS = tuple(a for _, _, choices in QUESTIONS for a in choices)

_RGB = {"red": (210, 40, 40), "green": (40, 190, 60), "blue": (40, 70, 210)}


@dataclass(frozen=True)
class SyntheticSample:
    image: np.ndarray
    label: int
    tokens: tuple[str, ...]
    attributes: dict

    def qa_pairs(self) -> list[tuple[int, int]]:
        """(question id, answer id) for every question."""
        return [(q, ANSWERS.index(self.attributes[key])) for q, (_, key, _) in enumerate(QUESTIONS)]


def label_of(shape: str, color: str) -> int:
    return SHAPES.index(shape) * len(COLORS) + COLORS.index(color)


def describe(attributes: dict) -> tuple[str, ...]:
    return (attributes["size"], attributes["color"], attributes["shape"], attributes["hpos"])


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    base = rng.uniform(60, 190) + rng.uniform(-15, 15, size=3)
    coarse = rng.normal(0.0, 25.0, size=(4, 4, 3))
    # bilinear upsampling of the coarse field
    grid = np.linspace(0, 3, size)
    i0 = np.floor(grid).astype(int).clip(0, 2)
    t = (grid - i0)[:, None]
    rows = coarse[i0] * (1 - t)[..., None] + coarse[i0 + 1] * t[..., None]
    field = rows[:, i0] * (1 - t.T)[..., None] + rows[:, i0 + 1] * t.T[..., None]
    return base + field + rng.normal(0.0, 8.0, size=(size, size, 3))


def _mask(shape: str, size: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dx, dy = xx - cx, yy - cy
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)


def render_sample(seed: int, index: int, size: int = 32) -> SyntheticSample:
    rng = np.random.default_rng([seed, index])
    label = index % N_CLASSES
    shape, color = SHAPES[label // len(COLORS)], COLORS[label % len(COLORS)]
    size_word = SIZES[int(rng.integers(2))]
    hpos, vpos = HPOS[int(rng.integers(2))], VPOS[int(rng.integers(2))]
    r = size * (0.14 if size_word == "small" else 0.28)
    half = size / 2.0
    lo = r + 1.0
    cx = rng.uniform(lo, half - 1.0) if hpos == "left" else rng.uniform(half, size - lo)
    cy = rng.uniform(lo, half - 1.0) if vpos == "top" else rng.uniform(half, size - lo)
    img = _background(rng, size)
    rgb = np.asarray(_RGB[color], dtype=np.float64) + rng.uniform(-25, 25, size=3)
    mask = _mask(shape, size, cx, cy, r)
    img[mask] = rgb + rng.normal(0.0, 6.0, size=(int(mask.sum()), 3))
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)
    attributes = {"shape": shape, "color": color, "size": size_word, "hpos": hpos, "vpos": vpos}
    return SyntheticSample(image, label, describe(attributes), attributes)


def synth_dataset(n: int, seed: int, size: int = 32) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return [render_sample(seed, i, size) for i in range(n)]


def as_arrays(samples: list[SyntheticSample]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([s.image for s in samples]), np.array([s.label for s in samples])
