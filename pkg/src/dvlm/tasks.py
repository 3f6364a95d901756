"""Synthetic desk-scale tasks.

grid-caption: colored shapes on a 3x3 grid, one caption line per shape,
    ``<color> <shape> at row <n> column <n>`` joined by ``<nl>`` in row-major
    order. The grammar is invertible, so captions parse back to scenes.
acrostic: grid scenes with >= 2 shapes; each caption line must start with
    a prescribed color word.
memorize: eight fixed token sequences, text only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .vocab import Vocab

COLORS = {
    "red": (1.0, 0.1, 0.1),
    "green": (0.1, 0.9, 0.2),
    "blue": (0.15, 0.3, 1.0),
    "yellow": (1.0, 0.9, 0.1),
}
SHAPES = ("circle", "square", "triangle", "cross")
NUMBERS = ("one", "two", "three")
GRID = 3
NEWLINE = "<nl>"
CAPTION_PROMPT = "describe the image"
MEMORIZE_WORDS = tuple(f"w{i}" for i in range(8))

WORDS = (
    tuple(COLORS)
    + SHAPES
    + ("at", "row", "column")
    + NUMBERS
    + (NEWLINE, "describe", "the", "image", "item")
    + MEMORIZE_WORDS
)


def default_vocab() -> Vocab:
    return Vocab(WORDS)


@dataclass(frozen=True, order=True)
class Shape:
    row: int
    col: int
    color: str
    shape: str


Scene = tuple[Shape, ...]


def random_scene(rng: np.random.Generator, max_objects: int = 3) -> Scene:
    n = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    colors = list(COLORS)
    objs = [
        Shape(int(c) // GRID, int(c) % GRID, colors[int(rng.integers(len(colors)))], SHAPES[int(rng.integers(len(SHAPES)))])
        for c in cells
    ]
    return tuple(sorted(objs))


def scene_from_seed(seed: int, max_objects: int = 3) -> Scene:
    return random_scene(np.random.default_rng(seed), max_objects)


def caption_lines(scene: Scene) -> list[list[str]]:
    return [
        [o.color, o.shape, "at", "row", NUMBERS[o.row], "column", NUMBERS[o.col]]
        for o in sorted(scene)
    ]


def caption(scene: Scene) -> str:
    return f" {NEWLINE} ".join(" ".join(line) for line in caption_lines(scene))


class CaptionParseError(ValueError):
    pass


def parse_caption(text: str | Sequence[str]) -> Scene:
    words = text.split() if isinstance(text, str) else list(text)
    objs = []
    line: list[str] = []
    for w in words + [NEWLINE]:
        if w != NEWLINE:
            line.append(w)
            continue
        if len(line) != 7 or line[2:4] != ["at", "row"] or line[5] != "column":
            raise CaptionParseError(f"malformed caption line: {' '.join(line)!r}")
        color, shape, r, c = line[0], line[1], line[4], line[6]
        if color not in COLORS or shape not in SHAPES or r not in NUMBERS or c not in NUMBERS:
            raise CaptionParseError(f"unknown word in line: {' '.join(line)!r}")
        objs.append(Shape(NUMBERS.index(r), NUMBERS.index(c), color, shape))
        line = []
    return tuple(sorted(objs))


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2
    m = 1  # margin
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= (c - m) ** 2
    if shape == "square":
        return (yy >= m + 0.5) & (yy <= size - m - 0.5) & (xx >= m + 0.5) & (xx <= size - m - 0.5)
    if shape == "triangle":
        top, bottom = m, size - m
        half = (yy - top) / (bottom - top) * (c - m)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - c) <= half)
    if shape == "cross":
        w = max(1, size // 8)
        band = lambda v: np.abs(v - c) <= w  # noqa: E731
        inside = (yy >= m) & (yy <= size - m) & (xx >= m) & (xx <= size - m)
        return inside & (band(yy) | band(xx))
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: Scene, size: int = 24) -> np.ndarray:
    """(size, size, 3) float32 raster on black; cell side is size // 3."""
    if size % GRID:
        raise ValueError(f"image size {size} not divisible by grid {GRID}")
    cell = size // GRID
    img = np.zeros((size, size, 3), dtype=np.float32)
    for o in scene:
        m = _shape_mask(o.shape, cell)
        y, x = o.row * cell, o.col * cell
        img[y : y + cell, x : x + cell][m] = COLORS[o.color]
    return img


def parse_render_roundtrip(text: str, img: np.ndarray) -> bool:
    try:
        scene = parse_caption(text)
    except CaptionParseError:
        return False
    return bool(np.array_equal(render(scene, img.shape[0]), img))


@dataclass
class TrainExample:
    img: Optional[np.ndarray]
    prompt: list[int]
    answer: list[int]  # padded to L
    image_spec: str = ""
    text: str = ""


def gen_scenes(seed: int, n: int, max_objects: int = 3, exclude: frozenset = frozenset()) -> list[tuple[int, Scene]]:
    """n distinct (scene_seed, scene) pairs, skipping any scene in ``exclude``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    seen = set(exclude)
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n + 10_000:
            raise RuntimeError("could not draw enough distinct scenes")
        s = int(rng.integers(0, 2**31 - 1))
        sc = scene_from_seed(s, max_objects)
        if sc in seen:
            continue
        seen.add(sc)
        out.append((s, sc))
    return out


def make_example(vocab: Vocab, scene_seed: int, L: int, image_size: int = 24, max_objects: int = 3) -> TrainExample:
    sc = scene_from_seed(scene_seed, max_objects)
    text = caption(sc)
    return TrainExample(
        img=render(sc, image_size),
        prompt=vocab.encode(CAPTION_PROMPT),
        answer=vocab.pad_answer(vocab.encode(text), L),
        image_spec=image_spec(scene_seed, max_objects),
        text=text,
    )


def image_spec(scene_seed: int, max_objects: int = 3) -> str:
    return f"grid-{max_objects}-{scene_seed}"


def image_from_spec(spec: str, size: int = 24) -> Optional[np.ndarray]:
    """Inverse of :func:`image_spec`; ``-`` or empty means no image."""
    if spec in ("", "-"):
        return None
    try:
        kind, max_objects, seed = spec.split("-")
        if kind != "grid":
            raise ValueError
        return render(scene_from_seed(int(seed), int(max_objects)), size)
    except ValueError:
        raise ValueError(f"bad image spec {spec!r}; expected grid-<max_objects>-<seed> or -") from None


def gen_grid_caption(
    seed: int, n: int, vocab: Optional[Vocab] = None, L: int = 32, image_size: int = 24, max_objects: int = 3,
    exclude: frozenset = frozenset(),
) -> list[TrainExample]:
    vocab = vocab or default_vocab()
    return [make_example(vocab, s, L, image_size, max_objects) for s, _ in gen_scenes(seed, n, max_objects, exclude)]


@dataclass(frozen=True)
class ToyTask:
    name: str = "grid-caption"
    seed: int = 0
    n_train: int = 4000
    n_val: int = 200
    L: int = 32
    image_size: int = 24
    max_objects: int = 3

    def build(self, vocab: Optional[Vocab] = None) -> tuple[list[TrainExample], list[TrainExample]]:
        """Deterministic, disjoint train/val splits."""
        vocab = vocab or default_vocab()
        if self.name == "memorize":
            return memorize_examples(vocab, self.L), []
        if self.name not in ("grid-caption", "acrostic"):
            raise ValueError(f"unknown task {self.name!r}")
        pairs = gen_scenes(self.seed, self.n_train + self.n_val, self.max_objects)
        ex = [make_example(vocab, s, self.L, self.image_size, self.max_objects) for s, _ in pairs]
        train, val = ex[: self.n_train], ex[self.n_train :]
        if self.name == "acrostic":
            val = [e for e in val if len(caption_lines(parse_caption(e.text))) >= 2]
        return train, val


def memorize_examples(vocab: Vocab, L: int = 16) -> list[TrainExample]:
    rng = np.random.default_rng(1234)
    out = []
    for i in range(8):
        words = [MEMORIZE_WORDS[j] for j in rng.integers(0, len(MEMORIZE_WORDS), size=L - 4)]
        out.append(
            TrainExample(None, vocab.encode(["item", NUMBERS[i % 3], MEMORIZE_WORDS[i]]),
                         vocab.pad_answer(vocab.encode(words), L), text=" ".join(words))
        )
    return out


def acrostic_constraints(scene: Scene) -> list[str]:
    return [line[0] for line in caption_lines(scene)]


def acrostic_draft(vocab: Vocab, constraints: Sequence[str], L: int, line_len: int = 7) -> list[int]:
    """Constrained first word of each line kept, the rest of the line masked."""
    toks: list[str] = []
    for i, c in enumerate(constraints):
        if i:
            toks.append(NEWLINE)
        toks.append(c)
        toks.extend(["[M]"] * (line_len - 1))
    return vocab.pad_answer(vocab.encode(toks), L)
