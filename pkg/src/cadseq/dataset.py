"""Synthetic sketch-extrusion corpus, length statistics, and stratified splits."""

from __future__ import annotations

import csv
import io as _io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from cadseq import geometry
from cadseq.core import (
    MAX_TOKENS,
    MIN_PROGRAM_LENGTH,
    BooleanOp,
    CadError,
    CadSequence,
    CadTree,
    ExtrusionParams,
    SketchPrimitive,
    angle_to_token,
    coord_to_token,
    depth_to_token,
    deserialize_sequence,
    scale_to_token,
    serialize_tree,
)
from cadseq.io import canonical_json, load_sequence, save_sequence

BIN_EDGES = (1, 40, 60, 80, 160, 240)
BIN_LABELS = ("1-40", "40-60", "60-80", "80-160", "160-240")
MAX_STEPS = 6
MAX_FACES = 3
VALIDATION_RESOLUTION = 32


@dataclass(frozen=True)
class CorpusStats:
    total: int
    avg_length: float
    bins: tuple[float, ...]


# Published statistics of the long-sequence benchmark, echoed in reports for comparison.
REFERENCE_STATS = CorpusStats(total=215_914, avg_length=36.2, bins=(76.6, 12.0, 5.9, 5.2, 0.21))


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# generator
#
# A structure is drawn first (steps, faces, loops, curve kinds) so the token length
# is known before any geometry; structures outside the requested range are redrawn.


def _loop_tokens(layout) -> int:
    kind, curves = layout
    if kind == "circle":
        return 3 + 1  # 2 coords + e_c, then e_l
    return sum(4 if c == "arc" else 3 for c in curves) + 1


def _structure_length(steps) -> int:
    n = 3  # cls, e_solid, end
    for faces in steps:
        n += 1 + 11  # e_s + extrusion block
        for loops in faces:
            n += 1 + sum(_loop_tokens(lp) for lp in loops)
    return n


def _draw_structure(rng: np.random.Generator):
    steps = []
    for _ in range(rng.integers(1, MAX_STEPS + 1)):
        faces = []
        for _ in range(rng.integers(1, MAX_FACES + 1)):
            if rng.random() < 0.3:
                outer = ("circle", None)
            else:
                n = int(rng.integers(3, 7))
                outer = ("poly", ["arc" if rng.random() < 0.3 else "line" for _ in range(n)])
            loops = [outer]
            if rng.random() < 0.3:
                loops.append(("circle", None))
            faces.append(loops)
        steps.append(faces)
    return steps


def _point(x: float, y: float) -> tuple[int, int]:
    return coord_to_token(x), coord_to_token(y)


def _make_loop(layout, cx, cy, base, rng, hole: bool):
    kind, curves = layout
    if kind == "circle":
        r = base * (0.12 if hole else 1.0)
        c = _point(cx, cy)
        p = _point(cx + r, cy)
        if p == c:
            p = (c[0] + 2, c[1])
        return [SketchPrimitive.circle(c, p)]
    n = len(curves)
    step = 2 * math.pi / n
    angles = np.arange(n) * step + rng.uniform(-0.15, 0.15, n) * step + rng.uniform(0, 2 * math.pi)
    radii = base * rng.uniform(0.75, 1.0, n)
    verts = [_point(cx + r * math.cos(a), cy + r * math.sin(a)) for a, r in zip(angles, radii)]
    if len(set(verts)) != n:
        return None
    loop = []
    for i, kind_i in enumerate(curves):
        a, b = verts[i], verts[(i + 1) % n]
        if kind_i == "arc":
            mx, my = (a[0] + b[0]) / 2, (a[1] + b[1]) / 2
            dx, dy = b[0] - a[0], b[1] - a[1]
            # outward normal for counter-clockwise vertex order
            bulge = rng.uniform(0.15, 0.3)
            mid = (round(mx + dy * bulge), round(my - dx * bulge))
            if not all(11 <= v <= 266 for v in mid):
                return None
            try:
                loop.append(SketchPrimitive.arc(a, mid, b))
            except CadError:
                return None
        else:
            loop.append(SketchPrimitive.line(a, b))
    return loop


def _make_extrusion(rng: np.random.Generator, first: bool) -> ExtrusionParams:
    quarter = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    angles = [quarter[rng.integers(4)] if rng.random() < 0.8 else rng.uniform(0, 2 * math.pi) for _ in range(3)]
    if first:
        beta = BooleanOp.NEW
    else:
        beta = [BooleanOp.JOIN, BooleanOp.NEW, BooleanOp.CUT, BooleanOp.INTERSECT][
            rng.choice(4, p=[0.5, 0.2, 0.2, 0.1])
        ]
    return ExtrusionParams(
        *(angle_to_token(a) for a in angles),
        *(coord_to_token(t) for t in rng.uniform(-0.3, 0.3, 3)),
        scale_to_token(rng.uniform(0.6, 1.2)),
        depth_to_token(rng.uniform(0.2, 0.8)),
        depth_to_token(rng.uniform(0.0, 0.4)),
        beta=beta,
    )


def _make_tree(structure, rng: np.random.Generator):
    steps = []
    for si, faces in enumerate(structure):
        sketch = []
        n = len(faces)
        for fi, loops in enumerate(faces):
            # spread faces around the sketch so they overlap little
            if n == 1:
                cx, cy = rng.uniform(-0.2, 0.2, 2)
            else:
                ang = 2 * math.pi * fi / n + rng.uniform(-0.3, 0.3)
                cx, cy = 0.45 * math.cos(ang), 0.45 * math.sin(ang)
            base = rng.uniform(0.25, 0.45) if n > 1 else rng.uniform(0.35, 0.7)
            face = []
            for li, layout in enumerate(loops):
                loop = _make_loop(layout, cx, cy, base, rng, hole=li > 0)
                if loop is None:
                    return None
                face.append(loop)
            sketch.append(face)
        steps.append((sketch, _make_extrusion(rng, si == 0)))
    return CadTree.from_steps(steps)


def _feasible(tree: CadTree) -> bool:
    try:
        geometry.execute(tree, VALIDATION_RESOLUTION)
    except (CadError, geometry.GeometryError):
        return False
    return True


def generate_one(length_range: tuple[int, int], rng: np.random.Generator, max_attempts: int = 10_000) -> CadTree:
    lo, hi = length_range
    for _ in range(max_attempts):
        structure = _draw_structure(rng)
        if not lo <= _structure_length(structure) <= hi:
            continue
        tree = _make_tree(structure, rng)
        if tree is not None and _feasible(tree):
            return tree
    raise DatasetError(f"no valid program found in {max_attempts} attempts for range {length_range}")


def generate(n: int, length_range: tuple[int, int] = (MIN_PROGRAM_LENGTH, 60), seed: int = 0) -> list[CadTree]:
    """``n`` random valid trees whose token length lies in ``length_range`` (inclusive).

    Item ``i`` uses its own generator seeded by ``(seed, i)``.
    """
    lo, hi = length_range
    if not 2 <= lo <= hi <= 240:
        raise DatasetError(f"length range {length_range} must satisfy 2 <= min <= max <= 240")
    if hi < MIN_PROGRAM_LENGTH:
        raise DatasetError(f"max length {hi} is below the shortest valid program ({MIN_PROGRAM_LENGTH})")
    return [generate_one(length_range, np.random.default_rng([seed, i])) for i in range(n)]


# ---------------------------------------------------------------------------
# statistics

Corpus = Sequence[Union[CadTree, CadSequence]]


def _as_sequence(item: Union[CadTree, CadSequence]) -> CadSequence:
    return item if isinstance(item, CadSequence) else serialize_tree(item, MAX_TOKENS)


def program_length(item: Union[CadTree, CadSequence], count: str = "tokens") -> int:
    """Token count excluding padding, or with ``count="commands"`` curves plus extrusions."""
    if count == "tokens":
        return _as_sequence(item).valid_len
    if count == "commands":
        tree = item if isinstance(item, CadTree) else deserialize_sequence(item)
        return sum(1 + sum(len(lp) for f in sk for lp in f) for sk, _ in tree.steps())
    raise DatasetError(f"unknown length count {count!r}")


def length_bin(length: int) -> int:
    for i, edge in enumerate(BIN_EDGES[1:-1]):
        if length < edge:
            return i
    return len(BIN_LABELS) - 1


def stats(corpus: Corpus, count: str = "tokens") -> CorpusStats:
    if not len(corpus):
        raise DatasetError("empty corpus")
    lengths = [program_length(c, count) for c in corpus]
    hist = np.bincount([length_bin(n) for n in lengths], minlength=len(BIN_LABELS))
    bins = tuple(float(x) for x in 100.0 * hist / len(lengths))
    return CorpusStats(len(lengths), float(np.mean(lengths)), bins)


def stats_csv(rows: dict[str, CorpusStats], include_reference: bool = True) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["Dataset", "Total", "Avg. Length", *BIN_LABELS])
    items = list(rows.items())
    if include_reference:
        items.append(("reference (published)", REFERENCE_STATS))
    for name, s in items:
        w.writerow([name, s.total, f"{s.avg_length:.2f}", *(f"{b:.2f}" for b in s.bins)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# splits


def split(corpus: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded split stratified by length bin; returns (train, val, test).

    Items are shuffled within each bin, bins are concatenated, and each item goes to
    the split with the largest deficit against its target share, so every bin and
    the whole corpus stay within one item of the requested proportions.
    """
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise DatasetError(f"ratios {tuple(ratios)} must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    bins = [length_bin(program_length(c)) for c in corpus]
    order = []
    for b in range(len(BIN_LABELS)):
        members = [i for i, x in enumerate(bins) if x == b]
        order.extend(members[j] for j in rng.permutation(len(members)))
    parts: list[list] = [[], [], []]
    counts = np.zeros(3)
    for i, idx in enumerate(order):
        deficit = ratios * (i + 1) - counts
        s = int(np.argmax(deficit))
        counts[s] += 1
        parts[s].append(corpus[idx])
    return tuple(parts)


# ---------------------------------------------------------------------------
# corpus directories


def write_corpus(directory, items: Iterable[Union[CadTree, CadSequence]], *, seed: int, n_ts: int = MAX_TOKENS,
                 extra: dict | None = None) -> dict:
    """One canonical sequence JSON per model plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    seqs = [it.with_n_ts(n_ts) if isinstance(it, CadSequence) else serialize_tree(it, n_ts) for it in items]
    for i, seq in enumerate(seqs):
        save_sequence(seq, d / f"{i:06d}.json")
    manifest = {"count": len(seqs), "seed": seed, "n_ts": n_ts, "stats": asdict(stats(seqs)) if seqs else None}
    manifest.update(extra or {})
    text = canonical_json(manifest)
    (d / "manifest.json").write_text(text)
    return json.loads(text)


def read_corpus(directory) -> list[CadSequence]:
    return [load_sequence(p) for p in sorted(Path(directory).glob("*.json")) if p.name != "manifest.json"]


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
