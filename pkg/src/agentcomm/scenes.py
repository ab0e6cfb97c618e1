"""Synthetic grid-scene VQA corpus.

Scenes are small grids holding coloured shapes; questions are scripted from
four templates (color, count, spatial, existence) and answered by a symbolic
evaluator.  Everything is word-level over a closed vocabulary so the toy
language models can consume it directly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("cube", "sphere", "cylinder")
PLURALS = {"cube": "cubes", "sphere": "spheres", "cylinder": "cylinders"}
COLORS = ("red", "green", "blue", "yellow", "gray", "purple")
SIZES = ("small", "large")
CATEGORIES = ("color", "count", "spatial", "existence")
RELATIONS = ("left", "right", "above", "below")

DIGITS = tuple(str(d) for d in range(10))
ANSWERS = COLORS + DIGITS + ("yes", "no")

VOCAB = (
    ("<pad>", "?", ";")
    + ANSWERS
    + SHAPES
    + tuple(PLURALS[s] for s in SHAPES)
    + SIZES
    + ("a", "at", "row", "column", "the", "scene", "is", "empty")
    + ("what", "color", "of", "how", "many", "are", "there", "left", "right",
       "above", "below", "objects", "object")
    + ("question", "about", "colors", "counting", "in", "positions", "presence")
)
WORD_ID = {w: i for i, w in enumerate(VOCAB)}
PAD_ID = WORD_ID["<pad>"]
ANSWER_IDS = tuple(WORD_ID[a] for a in ANSWERS)

assert len(set(VOCAB)) == len(VOCAB)


class EvaluatorError(ValueError):
    """A question structure cannot be evaluated."""


class Unanswerable(Exception):
    """The requested category has no valid question for this scene."""


def tokenize(text: str) -> list[int]:
    try:
        return [WORD_ID[w] for w in text.split()]
    except KeyError as exc:
        raise KeyError(f"word {exc.args[0]!r} not in vocabulary") from None


def detokenize(ids) -> str:
    return " ".join(VOCAB[i] for i in ids)


@dataclass(frozen=True)
class SceneObject:
    x: int  # column
    y: int  # row
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class SceneSpec:
    grid_w: int
    grid_h: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        cells = set()
        for o in self.objects:
            if not (0 <= o.x < self.grid_w and 0 <= o.y < self.grid_h):
                raise ValueError(f"object at ({o.x},{o.y}) outside {self.grid_w}x{self.grid_h} grid")
            if (o.x, o.y) in cells:
                raise ValueError(f"two objects in cell ({o.x},{o.y})")
            if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES:
                raise ValueError(f"bad object attributes {o}")
            cells.add((o.x, o.y))

    def at(self, x: int, y: int) -> SceneObject | None:
        for o in self.objects:
            if o.x == x and o.y == y:
                return o
        return None

    def serialize(self) -> str:
        """Canonical record, objects sorted by cell index."""
        objs = sorted(self.objects, key=lambda o: o.y * self.grid_w + o.x)
        body = ";".join(f"{o.y * self.grid_w + o.x}:{o.shape}:{o.color}:{o.size}" for o in objs)
        return f"{self.grid_w}x{self.grid_h}|{body}"

    @classmethod
    def deserialize(cls, text: str) -> "SceneSpec":
        dims, _, body = text.partition("|")
        w, h = (int(v) for v in dims.split("x"))
        objs = []
        for item in filter(None, body.split(";")):
            cell, shape, color, size = item.split(":")
            cell = int(cell)
            objs.append(SceneObject(cell % w, cell // w, shape, color, size))
        return cls(w, h, tuple(objs))


@dataclass(frozen=True)
class Question:
    """Structured form of a question, the evaluator's input."""

    category: str
    shape: str | None = None
    color: str | None = None
    other_shape: str | None = None
    relation: str | None = None


@dataclass(frozen=True)
class SceneQA:
    scene: SceneSpec
    question: Question
    detailed: str
    vague: str
    category: str
    answer: str
    info_rank: int


@dataclass(frozen=True)
class SceneConfig:
    grid_w: int = 4
    grid_h: int = 4
    min_objects: int = 1
    max_objects: int = 5


@dataclass
class CorpusConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_train: int = 5000
    n_test: int = 1000
    mix: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)  # over CATEGORIES
    max_info_rank: int | None = None


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def gen_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> SceneSpec:
    n_cells = cfg.grid_w * cfg.grid_h
    hi = min(cfg.max_objects, n_cells)
    n = int(rng.integers(cfg.min_objects, hi + 1))
    cells = rng.choice(n_cells, size=n, replace=False)
    objs = []
    for c in sorted(int(c) for c in cells):
        objs.append(SceneObject(
            x=c % cfg.grid_w, y=c // cfg.grid_w,
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            color=COLORS[int(rng.integers(len(COLORS)))],
            size=SIZES[int(rng.integers(len(SIZES)))],
        ))
    return SceneSpec(cfg.grid_w, cfg.grid_h, tuple(objs))


def _unique(scene: SceneSpec, shape: str) -> SceneObject | None:
    hits = [o for o in scene.objects if o.shape == shape]
    return hits[0] if len(hits) == 1 else None


def answer_oracle(scene: SceneSpec, q: Question) -> str:
    """Evaluate a structured question exactly."""
    if q.category == "color":
        if q.shape not in SHAPES:
            raise EvaluatorError(f"color question needs a shape, got {q.shape!r}")
        obj = _unique(scene, q.shape)
        if obj is None:
            raise EvaluatorError(f"no unique {q.shape} in scene")
        return obj.color
    if q.category == "count":
        if q.shape is not None and q.shape not in SHAPES:
            raise EvaluatorError(f"unknown shape {q.shape!r}")
        if q.color is not None and q.color not in COLORS:
            raise EvaluatorError(f"unknown color {q.color!r}")
        n = sum(1 for o in scene.objects
                if (q.shape is None or o.shape == q.shape)
                and (q.color is None or o.color == q.color))
        if n > 9:
            raise EvaluatorError("count exceeds digit vocabulary")
        return str(n)
    if q.category == "existence":
        if q.shape not in SHAPES or q.color not in COLORS:
            raise EvaluatorError("existence question needs shape and color")
        hit = any(o.shape == q.shape and o.color == q.color for o in scene.objects)
        return "yes" if hit else "no"
    if q.category == "spatial":
        if q.relation not in RELATIONS:
            raise EvaluatorError(f"unknown relation {q.relation!r}")
        a = _unique(scene, q.shape) if q.shape in SHAPES else None
        b = _unique(scene, q.other_shape) if q.other_shape in SHAPES else None
        if a is None or b is None or a is b:
            raise EvaluatorError("spatial question needs two distinct unique shapes")
        truth = {
            "left": a.x < b.x,
            "right": a.x > b.x,
            "above": a.y < b.y,
            "below": a.y > b.y,
        }[q.relation]
        return "yes" if truth else "no"
    raise EvaluatorError(f"unknown category {q.category!r}")


def question_text(q: Question) -> str:
    if q.category == "color":
        return f"what is the color of the {q.shape} ?"
    if q.category == "count":
        if q.shape is not None:
            return f"how many {PLURALS[q.shape]} are there ?"
        return f"how many {q.color} objects are there ?"
    if q.category == "existence":
        return f"is there a {q.color} {q.shape} ?"
    if q.category == "spatial":
        rel = {"left": "left of", "right": "right of", "above": "above", "below": "below"}[q.relation]
        return f"is the {q.shape} {rel} the {q.other_shape} ?"
    raise EvaluatorError(f"unknown category {q.category!r}")


def info_rank(scene: SceneSpec, q: Question) -> int:
    if q.category in ("color", "existence"):
        return 1
    if q.category == "spatial":
        return 2
    touched = int(answer_oracle(scene, q))
    return max(1, touched)


def gen_question(scene: SceneSpec, category: str, rng: np.random.Generator) -> SceneQA:
    """Draw a question of ``category``; raises :class:`Unanswerable` to signal a skip."""
    from .pipeline import obfuscate

    if category == "color":
        options = [s for s in SHAPES if _unique(scene, s) is not None]
        if not options:
            raise Unanswerable("no uniquely identifiable shape")
        q = Question("color", shape=options[int(rng.integers(len(options)))])
    elif category == "count":
        if rng.random() < 0.5:
            q = Question("count", shape=SHAPES[int(rng.integers(len(SHAPES)))])
        else:
            q = Question("count", color=COLORS[int(rng.integers(len(COLORS)))])
    elif category == "existence":
        present = sorted({(o.shape, o.color) for o in scene.objects})
        if rng.random() < 0.5:
            shape, color = present[int(rng.integers(len(present)))]
        else:
            absent = [(s, c) for s in SHAPES for c in COLORS if (s, c) not in present]
            shape, color = absent[int(rng.integers(len(absent)))]
        q = Question("existence", shape=shape, color=color)
    elif category == "spatial":
        options = [s for s in SHAPES if _unique(scene, s) is not None]
        if len(options) < 2:
            raise Unanswerable("needs two uniquely identifiable shapes")
        i, j = rng.choice(len(options), size=2, replace=False)
        q = Question("spatial", shape=options[int(i)], other_shape=options[int(j)],
                     relation=RELATIONS[int(rng.integers(len(RELATIONS)))])
    else:
        raise ValueError(f"unknown category {category!r}")
    detailed = question_text(q)
    answer = answer_oracle(scene, q)
    if answer not in ANSWERS:
        raise EvaluatorError(f"answer {answer!r} outside closed vocabulary")
    return SceneQA(scene=scene, question=q, detailed=detailed,
                   vague=obfuscate(detailed, category), category=category,
                   answer=answer, info_rank=info_rank(scene, q))


def describe_scene_text(scene: SceneSpec) -> str:
    """Full verbalisation, one clause per object in cell order."""
    if not scene.objects:
        return "the scene is empty"
    objs = sorted(scene.objects, key=lambda o: (o.y, o.x))
    return " ; ".join(f"a {o.size} {o.color} {o.shape} at row {o.y} column {o.x}" for o in objs)


# ---------------------------------------------------------------------------
# corpus files
# ---------------------------------------------------------------------------

RECORD_FIELDS = ("scene", "category", "detailed", "vague", "answer", "info_rank", "question")


def qa_to_record(qa: SceneQA) -> str:
    q = qa.question
    qstruct = [q.category, q.shape, q.color, q.other_shape, q.relation]
    row = [qa.scene.serialize(), qa.category, qa.detailed, qa.vague, qa.answer,
           qa.info_rank, qstruct]
    return json.dumps(row, separators=(",", ":"))


def record_to_qa(line: str) -> SceneQA:
    scene, category, detailed, vague, answer, rank, qstruct = json.loads(line)
    return SceneQA(scene=SceneSpec.deserialize(scene), question=Question(*qstruct),
                   detailed=detailed, vague=vague, category=category, answer=answer,
                   info_rank=int(rank))


def _category_plan(n: int, mix, rng: np.random.Generator) -> list[str]:
    mix = np.asarray(mix, dtype=float)
    mix = mix / mix.sum()
    counts = np.floor(mix * n).astype(int)
    for i in np.argsort(-(mix * n - counts))[: n - counts.sum()]:
        counts[i] += 1
    plan = [c for c, k in zip(CATEGORIES, counts) for _ in range(k)]
    rng.shuffle(plan)
    return plan


def gen_corpus(seed: int, cfg: CorpusConfig) -> tuple[list[SceneQA], list[SceneQA]]:
    """Train/test splits with disjoint scene content and exact category mix."""
    from .numkit import stream

    rng = stream(seed, "corpus")
    seen: dict[str, str] = {}
    splits = {"train": [], "test": []}
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        for category in _category_plan(n, cfg.mix, rng):
            while True:
                scene = gen_scene(rng, cfg.scene)
                key = scene.serialize()
                if seen.get(key, split) != split:
                    continue
                try:
                    qa = gen_question(scene, category, rng)
                except Unanswerable:
                    continue
                if cfg.max_info_rank is not None and qa.info_rank > cfg.max_info_rank:
                    continue
                seen[key] = split
                splits[split].append(qa)
                break
    return splits["train"], splits["test"]


def write_corpus(out_dir, train: list[SceneQA], test: list[SceneQA], manifest: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, rows in (("train.jsonl", train), ("test.jsonl", test)):
        (out / name).write_text("".join(qa_to_record(qa) + "\n" for qa in rows))
    lines = [f"{k} = {v}" for k, v in manifest.items()]
    lines.append("fields = " + ",".join(RECORD_FIELDS))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_split(path) -> list[SceneQA]:
    with open(path) as fh:
        return [record_to_qa(line) for line in fh if line.strip()]


def majority_baseline(rows: list[SceneQA]) -> tuple[str, float]:
    from collections import Counter

    counts = Counter(qa.answer for qa in rows)
    answer, n = counts.most_common(1)[0]
    return answer, n / max(len(rows), 1)


def corpus_digest(rows: list[SceneQA]) -> str:
    h = hashlib.sha256()
    for qa in rows:
        h.update(qa_to_record(qa).encode())
    return h.hexdigest()
