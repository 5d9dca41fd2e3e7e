"""Point-cloud distribution metrics, CAD sequence metrics and paired reconstruction accuracy."""

from __future__ import annotations

import csv
import io as _io
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from cadseq import geometry
from cadseq.core import VALUE_MIN, CadError, CadSequence, Role, deserialize_sequence, token_info
from cadseq.geometry import PointCloud

JSD_GRID = 28
PRIMITIVES = ("line", "arc", "circle", "extrusion")
_CHUNK = 1024


class MetricsError(ValueError):
    pass


def _points(x: Union[PointCloud, np.ndarray]) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise MetricsError("empty point cloud")
    return pts


def _min_sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each row of ``a`` the squared distance to its nearest row of ``b``."""
    out = np.empty(len(a))
    for i in range(0, len(a), _CHUNK):
        d = ((a[i : i + _CHUNK, None, :] - b[None, :, :]) ** 2).sum(-1)
        out[i : i + _CHUNK] = d.min(axis=1)
    return out


def chamfer(a, b) -> float:
    """Mean nearest-neighbor squared distance from a to b plus from b to a."""
    pa, pb = _points(a), _points(b)
    return float(_min_sq_dist(pa, pb).mean() + _min_sq_dist(pb, pa).mean())


def chamfer_matrix(gen: Sequence, ref: Sequence) -> np.ndarray:
    return np.array([[chamfer(g, r) for r in ref] for g in gen])


def cov_mmd(gen: Sequence, ref: Sequence, dist: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Coverage (percent of references that are the nearest reference of some
    generated cloud) and minimum matching distance (mean over references of the
    distance to the closest generated cloud)."""
    if not len(gen) or not len(ref):
        raise MetricsError("cov_mmd needs non-empty generated and reference sets")
    d = chamfer_matrix(gen, ref) if dist is None else np.asarray(dist)
    matched = np.unique(np.argmin(d, axis=1))
    return 100.0 * len(matched) / d.shape[1], float(d.min(axis=0).mean())


def occupancy_distribution(clouds: Iterable, grid: int = JSD_GRID, bounds=geometry.WORLD_BOUNDS) -> np.ndarray:
    """Normalized histogram of all points over a ``grid``^3 partition of ``bounds``."""
    lo, hi = np.asarray(bounds[0], float), np.asarray(bounds[1], float)
    counts = np.zeros(grid**3)
    for c in clouds:
        p = _points(c)
        idx = np.clip(((p - lo) / (hi - lo) * grid).astype(int), 0, grid - 1)
        flat = (idx[:, 0] * grid + idx[:, 1]) * grid + idx[:, 2]
        counts += np.bincount(flat, minlength=grid**3)
    total = counts.sum()
    if total == 0:
        raise MetricsError("no points")
    return counts / total


def _kl(p: np.ndarray, q: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def jsd_distributions(p: np.ndarray, q: np.ndarray) -> float:
    p, q = np.asarray(p, float), np.asarray(q, float)
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def jsd(gen: Sequence, ref: Sequence, grid: int = JSD_GRID) -> float:
    """Jensen-Shannon divergence (natural log) of the two sets' occupancy distributions."""
    if not len(gen) or not len(ref):
        raise MetricsError("jsd needs non-empty sets")
    return jsd_distributions(occupancy_distribution(gen, grid), occupancy_distribution(ref, grid))


# ---------------------------------------------------------------------------
# sequence-level metrics


def _key(seq: CadSequence) -> tuple:
    return seq.valid_tokens()


def novelty(gen: Sequence[CadSequence], train: Sequence[CadSequence]) -> float:
    if not len(gen):
        raise MetricsError("empty generated set")
    seen = {_key(s) for s in train}
    return 100.0 * sum(_key(s) not in seen for s in gen) / len(gen)


def uniqueness(gen: Sequence[CadSequence]) -> float:
    if not len(gen):
        raise MetricsError("empty generated set")
    counts = Counter(_key(s) for s in gen)
    return 100.0 * sum(counts[_key(s)] == 1 for s in gen) / len(gen)


def executes(seq: CadSequence, resolution: int = 32) -> Optional[geometry.VoxelGrid]:
    try:
        return geometry.execute(deserialize_sequence(seq), resolution)
    except (CadError, geometry.GeometryError):
        return None


def valid_ratio(gen: Sequence[CadSequence], resolution: int = 32) -> float:
    if not len(gen):
        raise MetricsError("empty generated set")
    return 100.0 * sum(executes(s, resolution) is not None for s in gen) / len(gen)


def primitive_counts(seqs: Iterable[CadSequence]) -> Counter:
    """Occurrences of each primitive type and of extrusions over the sequences that parse."""
    counts: Counter = Counter({k: 0 for k in PRIMITIVES})
    for s in seqs:
        try:
            tree = deserialize_sequence(s)
        except CadError:
            continue
        for sketch, _ in tree.steps():
            counts["extrusion"] += 1
            for face in sketch:
                for loop in face:
                    for curve in loop:
                        counts[curve.kind.value.lower()] += 1
    return counts


def f1_from_counts(gen: Counter, ref: Counter) -> dict[str, float]:
    """Multiset F1 per type: matches are min(count_gen, count_ref).

    A type absent from both sides scores 1 (nothing to get wrong); absent from only one scores 0.
    """
    out = {}
    for k in PRIMITIVES:
        g, r = gen.get(k, 0), ref.get(k, 0)
        if g == 0 and r == 0:
            out[k] = 1.0
            continue
        tp = min(g, r)
        if tp == 0:
            out[k] = 0.0
            continue
        p, rc = tp / g, tp / r
        out[k] = 2 * p * rc / (p + rc)
    return out


def f1_scores(gen: Sequence[CadSequence], ref: Sequence[CadSequence]) -> dict[str, float]:
    return f1_from_counts(primitive_counts(gen), primitive_counts(ref))


# ---------------------------------------------------------------------------
# paired accuracy

_ROLE_GROUPS = {
    "line": (Role.LINE_POINT,),
    "arc": (Role.ARC_POINT,),
    "circle": (Role.CIRCLE_CENTER, Role.CIRCLE_PERIMETER),
    "ext": (Role.EXT_ANGLE, Role.EXT_TRANSLATION, Role.EXT_SCALE, Role.EXT_DEPTH, Role.EXT_BETA),
}


def paired_accuracy(pred: Sequence[CadSequence], truth: Sequence[CadSequence]) -> dict[str, float]:
    """Token-type accuracy over ground-truth tokens, and exact-match accuracy over value tokens
    overall and per primitive group. Positions beyond a prediction's length count as wrong."""
    if len(pred) != len(truth) or not len(truth):
        raise MetricsError("paired evaluation needs equal, non-empty prediction and truth lists")
    n_cmd = ok_cmd = 0
    hits: Counter = Counter()
    tot: Counter = Counter()
    for p, g in zip(pred, truth):
        info = token_info(g)
        for k in range(g.valid_len):
            inside = k < p.valid_len
            n_cmd += 1
            ok_cmd += inside and p.type_flags[k] == g.type_flags[k]
            if g.tokens[k][0] < VALUE_MIN:
                continue
            hit = inside and p.tokens[k] == g.tokens[k]
            tot["param"] += 1
            hits["param"] += hit
            for name, roles in _ROLE_GROUPS.items():
                if info[k].role in roles:
                    tot[name] += 1
                    hits[name] += hit
    out = {"acc_cmd": 100.0 * ok_cmd / n_cmd}
    for name in ("param", "line", "arc", "circle", "ext"):
        out[f"acc_{name}"] = 100.0 * hits[name] / tot[name] if tot[name] else None
    return out


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    cov: Optional[float] = None
    mmd: Optional[float] = None
    jsd: Optional[float] = None
    f1_per_type: dict = field(default_factory=dict)
    novelty: Optional[float] = None
    uniqueness: Optional[float] = None
    valid_ratio: Optional[float] = None
    acc_cmd: Optional[float] = None
    acc_param: Optional[float] = None
    acc_line: Optional[float] = None
    acc_arc: Optional[float] = None
    acc_circle: Optional[float] = None
    acc_ext: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def flat(self) -> dict:
        """One value per column; MMD and JSD scaled by 100."""
        d = {
            "COV": self.cov,
            "MMD_x100": None if self.mmd is None else 100.0 * self.mmd,
            "JSD_x100": None if self.jsd is None else 100.0 * self.jsd,
        }
        for k in PRIMITIVES:
            d[f"F1_{k}"] = self.f1_per_type.get(k)
        for k in ("novelty", "uniqueness", "valid_ratio", "acc_cmd", "acc_param", "acc_line", "acc_arc",
                  "acc_circle", "acc_ext"):
            d[k] = getattr(self, k)
        d.update(self.extra)
        return d

    def to_csv(self) -> str:
        row = self.flat()
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(row))
        w.writerow(["" if v is None else (f"{v:.6g}" if isinstance(v, float) else v) for v in row.values()])
        return buf.getvalue()

    def to_json(self) -> str:
        d = asdict(self)
        d["scaled"] = self.flat()
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


def clouds(seqs: Sequence[CadSequence], n_points: int = 2048, resolution: int = 64, seed: int = 0) -> list[PointCloud]:
    """Surface samples of every sequence that executes; failures are skipped."""
    out = []
    for i, s in enumerate(seqs):
        grid = executes(s, resolution)
        if grid is not None:
            out.append(geometry.sample_points(grid, n_points, seed + i))
    return out


def evaluate(gen: Sequence[CadSequence], ref: Sequence[CadSequence], train: Sequence[CadSequence] = (),
             n_points: int = 2048, resolution: int = 64, seed: int = 0, paired: bool = False) -> MetricsReport:
    rep = MetricsReport()
    gen_c = clouds(gen, n_points, resolution, seed)
    ref_c = clouds(ref, n_points, resolution, seed)
    if gen_c and ref_c:
        rep.cov, rep.mmd = cov_mmd(gen_c, ref_c)
        rep.jsd = jsd(gen_c, ref_c)
    elif ref_c:
        rep.cov = 0.0
    if len(gen):
        rep.novelty = novelty(gen, train)
        rep.uniqueness = uniqueness(gen)
        rep.valid_ratio = 100.0 * len(gen_c) / len(gen)
        rep.f1_per_type = f1_scores(gen, ref)
    if paired:
        for k, v in paired_accuracy(gen, ref).items():
            setattr(rep, k, v)
    rep.extra = {"n_gen": len(gen), "n_ref": len(ref)}
    return rep
