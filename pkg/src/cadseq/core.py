"""Token vocabulary, quantization, and the tree <-> sequence codec for sketch-extrusion programs.

A program is a Solid whose children alternate Sketch, Extrusion, Sketch, Extrusion, ...
Sketches nest Face -> Loop -> Curve. The flat form is a list of 2-component tokens
emitted by a depth-first walk, with terminator tokens closing every level.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence, Union

# Reserved structural ids.
PAD = 0
CLS = 1
END = 2
E_SOLID = 3
E_SKETCH = 4
E_FACE = 5
E_LOOP = 6
E_CURVE = 7
E_EXTRUDE = 8

VALUE_MIN = 11
VALUE_MAX = 266
N_LEVELS = VALUE_MAX - VALUE_MIN + 1
VOCAB_SIZE = VALUE_MAX + 1
MAX_TOKENS = 256
N_EXTRUSION_VALUES = 10
MIN_PROGRAM_LENGTH = 20  # cls, circle (2 coords + 4 terminators), 11 extrusion tokens, e_solid, end

STRUCTURAL_NAMES = {
    PAD: "pad",
    CLS: "cls",
    END: "end",
    E_SOLID: "e_solid",
    E_SKETCH: "e_s",
    E_FACE: "e_f",
    E_LOOP: "e_l",
    E_CURVE: "e_c",
    E_EXTRUDE: "e_e",
}

TokenPair = tuple[int, int]


class TokenType(enum.IntEnum):
    """Per-token class flag. Structural classes share their token id."""

    PAD = 0
    CLS = 1
    END = 2
    E_SOLID = 3
    E_SKETCH = 4
    E_FACE = 5
    E_LOOP = 6
    E_CURVE = 7
    E_EXTRUDE = 8
    COORD = 9
    SCALAR = 10
    BETA = 11


N_TOKEN_TYPES = len(TokenType)


class Role(enum.IntEnum):
    """Structural role of a token inside the tree (finer than TokenType)."""

    NONE = 0
    CLS = 1
    END = 2
    E_SOLID = 3
    E_SKETCH = 4
    E_FACE = 5
    E_LOOP = 6
    E_CURVE = 7
    LINE_POINT = 8
    ARC_POINT = 9
    CIRCLE_CENTER = 10
    CIRCLE_PERIMETER = 11
    EXT_ANGLE = 12
    EXT_TRANSLATION = 13
    EXT_SCALE = 14
    EXT_DEPTH = 15
    EXT_BETA = 16
    E_EXTRUDE = 17


N_ROLES = len(Role)


class NodeType(str, enum.Enum):
    SOLID = "Solid"
    SKETCH = "Sketch"
    FACE = "Face"
    LOOP = "Loop"
    CURVE = "Curve"
    EXTRUSION = "Extrusion"


NODE_TYPE_CODES = {t: i + 1 for i, t in enumerate(NodeType)}  # 0 = no parent
N_PARENT_CODES = len(NodeType) + 1


class CurveKind(str, enum.Enum):
    LINE = "Line"
    ARC = "Arc"
    CIRCLE = "Circle"


class BooleanOp(str, enum.Enum):
    NEW = "New"
    CUT = "Cut"
    JOIN = "Join"
    INTERSECT = "Intersect"


BOOLEAN_OPS = list(BooleanOp)


class CadError(ValueError):
    """Base class for codec errors."""


class QuantizationError(CadError):
    pass


class TreeValidationError(CadError):
    def __init__(self, message: str, node: Optional[int] = None):
        self.node = node
        if node is not None:
            message = f"node {node}: {message}"
        super().__init__(message)


class SequenceParseError(CadError):
    def __init__(self, message: str, index: Optional[int] = None):
        self.index = index
        if index is not None:
            message = f"token {index}: {message}"
        super().__init__(message)


# ---------------------------------------------------------------------------
# quantization


def quantize(x: float) -> int:
    """Map ``x`` in [0, 1] onto the 256 value ids 11..266 (round half up)."""
    if not math.isfinite(x) or x < 0.0 or x > 1.0:
        raise QuantizationError(f"value {x!r} outside [0, 1]")
    return VALUE_MIN + math.floor(x * (N_LEVELS - 1) + 0.5)


def dequantize(t: int) -> float:
    if not VALUE_MIN <= t <= VALUE_MAX:
        raise QuantizationError(f"token {t} is not a value token")
    return (t - VALUE_MIN) / (N_LEVELS - 1)


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def coord_to_token(c: float) -> int:
    """Sketch coordinate or translation in [-1, 1]."""
    return quantize(_clamp01((c + 1.0) / 2.0))


def token_to_coord(t: int) -> float:
    return dequantize(t) * 2.0 - 1.0


def angle_to_token(a: float) -> int:
    return quantize((a % (2 * math.pi)) / (2 * math.pi))


def token_to_angle(t: int) -> float:
    return dequantize(t) * 2 * math.pi


def scale_to_token(s: float) -> int:
    """Sketch scale in (0, 2]."""
    return quantize(_clamp01(s / 2.0))


def token_to_scale(t: int) -> float:
    return dequantize(t) * 2.0


def depth_to_token(d: float) -> int:
    return quantize(_clamp01(d))


def token_to_depth(t: int) -> float:
    return dequantize(t)


def beta_to_token(op: BooleanOp) -> int:
    return quantize(BOOLEAN_OPS.index(BooleanOp(op)) / 3)


BETA_TOKENS = {beta_to_token(op): op for op in BOOLEAN_OPS}


def token_to_beta(t: int) -> BooleanOp:
    try:
        return BETA_TOKENS[t]
    except KeyError:
        raise QuantizationError(f"token {t} does not encode a boolean type") from None


def _is_value(t: int) -> bool:
    return VALUE_MIN <= t <= VALUE_MAX


# ---------------------------------------------------------------------------
# domain types

Point = tuple[int, int]


def _cross(o: Point, a: Point, b: Point) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


@dataclass(frozen=True)
class SketchPrimitive:
    """A curve in quantized sketch units.

    ``points`` holds (start, end) for lines, (start, mid, end) for arcs and
    (center, perimeter point) for circles.
    """

    kind: CurveKind
    points: tuple[Point, ...]

    def __post_init__(self):
        object.__setattr__(self, "kind", CurveKind(self.kind))
        object.__setattr__(self, "points", tuple((int(p[0]), int(p[1])) for p in self.points))
        expected = 3 if self.kind is CurveKind.ARC else 2
        if len(self.points) != expected:
            raise CadError(f"{self.kind.value} needs {expected} points, got {len(self.points)}")
        for p in self.points:
            if not (_is_value(p[0]) and _is_value(p[1])):
                raise CadError(f"point {p} outside value range")
        if self.kind is CurveKind.ARC and _cross(*self.points) == 0:
            raise CadError("arc start/mid/end are collinear")
        if self.points[0] == self.points[1]:
            raise CadError(f"degenerate {self.kind.value.lower()}")

    @classmethod
    def line(cls, start: Point, end: Point) -> "SketchPrimitive":
        return cls(CurveKind.LINE, (start, end))

    @classmethod
    def arc(cls, start: Point, mid: Point, end: Point) -> "SketchPrimitive":
        return cls(CurveKind.ARC, (start, mid, end))

    @classmethod
    def circle(cls, center: Point, perimeter: Point) -> "SketchPrimitive":
        return cls(CurveKind.CIRCLE, (center, perimeter))

    @property
    def start(self) -> Point:
        return self.points[0]

    @property
    def end(self) -> Point:
        return self.points[0] if self.kind is CurveKind.CIRCLE else self.points[-1]

    def arc_sweep_and_flip(self) -> tuple[float, int]:
        """Sweep angle (radians, in (0, 2*pi)) and orientation flag (1 = clockwise).

        Derived from start/mid/end; only defined for arcs.
        """
        if self.kind is not CurveKind.ARC:
            raise CadError("sweep/flip only defined for arcs")
        s, m, e = (tuple(map(token_to_coord, p)) for p in self.points)
        cx, cy, _ = circumcircle(s, m, e)
        a0 = math.atan2(s[1] - cy, s[0] - cx)
        am = math.atan2(m[1] - cy, m[0] - cx)
        a1 = math.atan2(e[1] - cy, e[0] - cx)
        ccw = (a1 - a0) % (2 * math.pi)
        if (am - a0) % (2 * math.pi) < ccw:
            return ccw, 0
        return 2 * math.pi - ccw, 1


def circumcircle(a, b, c) -> tuple[float, float, float]:
    """Center and radius of the circle through three 2D points."""
    ax, ay = a
    bx, by = b
    cx, cy = c
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if d == 0.0:
        raise CadError("collinear points have no circumcircle")
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, math.hypot(ax - ux, ay - uy)


@dataclass(frozen=True)
class ExtrusionParams:
    """Extrusion fields as quantized value ids (see the *_to_token helpers)."""

    theta: int
    phi: int
    gamma: int
    tau_x: int
    tau_y: int
    tau_z: int
    sigma: int
    d_plus: int
    d_minus: int
    beta: BooleanOp

    def __post_init__(self):
        object.__setattr__(self, "beta", BooleanOp(self.beta))
        for name in self.value_fields():
            v = getattr(self, name)
            if not isinstance(v, int) or not _is_value(v):
                raise CadError(f"extrusion field {name}={v!r} outside value range")
        if self.d_plus == VALUE_MIN and self.d_minus == VALUE_MIN:
            raise CadError("extrusion has zero depth in both directions")

    @staticmethod
    def value_fields() -> tuple[str, ...]:
        return ("theta", "phi", "gamma", "tau_x", "tau_y", "tau_z", "sigma", "d_plus", "d_minus")

    def tokens(self) -> list[int]:
        return [getattr(self, f) for f in self.value_fields()] + [beta_to_token(self.beta)]

    @classmethod
    def from_tokens(cls, values: Sequence[int]) -> "ExtrusionParams":
        if len(values) != N_EXTRUSION_VALUES:
            raise CadError(f"extrusion needs {N_EXTRUSION_VALUES} values, got {len(values)}")
        return cls(*values[:9], beta=token_to_beta(values[9]))

    @classmethod
    def from_real(
        cls,
        *,
        angles=(0.0, 0.0, 0.0),
        translation=(0.0, 0.0, 0.0),
        scale: float = 1.0,
        d_plus: float = 1.0,
        d_minus: float = 0.0,
        beta: BooleanOp = BooleanOp.NEW,
    ) -> "ExtrusionParams":
        return cls(
            *(angle_to_token(a) for a in angles),
            *(coord_to_token(t) for t in translation),
            scale_to_token(scale),
            depth_to_token(d_plus),
            depth_to_token(d_minus),
            beta=BooleanOp(beta),
        )


Params = Union[ExtrusionParams, SketchPrimitive, None]


@dataclass(frozen=True)
class TreeNode:
    node_type: NodeType
    params: Params = None
    children: tuple[int, ...] = ()
    parent: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "node_type", NodeType(self.node_type))
        object.__setattr__(self, "children", tuple(int(c) for c in self.children))


# Nested step form: list of (sketch, extrusion), sketch = faces, face = loops, loop = curves.
Loop = Sequence[SketchPrimitive]
Face = Sequence[Loop]
Sketch = Sequence[Face]
Step = tuple[Sketch, ExtrusionParams]


@dataclass(frozen=True, eq=False)
class CadTree:
    nodes: tuple[TreeNode, ...]
    root: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))

    def _nested(self, i: int):
        n = self.nodes[i]
        return (n.node_type, n.params, tuple(self._nested(c) for c in n.children))

    def nested(self):
        """Index-free structural form; two trees are equal iff these match."""
        return self._nested(self.root)

    def __eq__(self, other):
        if not isinstance(other, CadTree):
            return NotImplemented
        return self.nested() == other.nested()

    def __hash__(self):
        return hash(self.nested())

    @classmethod
    def from_steps(cls, steps: Iterable[Step]) -> "CadTree":
        """Build a tree in depth-first node order from nested step form."""
        nodes: list[dict] = []

        def add(node_type, params, parent):
            nodes.append({"node_type": node_type, "params": params, "children": [], "parent": parent})
            idx = len(nodes) - 1
            if parent is not None:
                nodes[parent]["children"].append(idx)
            return idx

        root = add(NodeType.SOLID, None, None)
        for sketch, extrusion in steps:
            s = add(NodeType.SKETCH, None, root)
            for face in sketch:
                f = add(NodeType.FACE, None, s)
                for loop in face:
                    lp = add(NodeType.LOOP, None, f)
                    for curve in loop:
                        add(NodeType.CURVE, curve, lp)
            add(NodeType.EXTRUSION, extrusion, root)
        return cls(tuple(TreeNode(**n) for n in nodes), root)

    def steps(self) -> list[Step]:
        """Inverse of :meth:`from_steps` (assumes the tree is valid)."""
        out = []
        kids = self.nodes[self.root].children
        for si, ei in zip(kids[::2], kids[1::2]):
            sketch = [
                [[self.nodes[c].params for c in self.nodes[lp].children] for lp in self.nodes[f].children]
                for f in self.nodes[si].children
            ]
            out.append((sketch, self.nodes[ei].params))
        return out

    def validate(self) -> None:
        """Raise :class:`TreeValidationError` naming the first offending node."""
        nodes = self.nodes
        if not 0 <= self.root < len(nodes):
            raise TreeValidationError("root index out of range")
        seen: set[int] = set()
        child_rule = {
            NodeType.SOLID: (NodeType.SKETCH, NodeType.EXTRUSION),
            NodeType.SKETCH: (NodeType.FACE,),
            NodeType.FACE: (NodeType.LOOP,),
            NodeType.LOOP: (NodeType.CURVE,),
            NodeType.CURVE: (),
            NodeType.EXTRUSION: (),
        }

        def visit(i: int, parent: Optional[int]):
            if not 0 <= i < len(nodes):
                raise TreeValidationError("child index out of range", parent)
            if i in seen:
                raise TreeValidationError("node reached twice (cycle or shared node)", i)
            seen.add(i)
            n = nodes[i]
            if n.parent != parent:
                raise TreeValidationError(f"parent link {n.parent} != {parent}", i)
            for c in n.children:
                if 0 <= c < len(nodes) and nodes[c].node_type not in child_rule[n.node_type]:
                    raise TreeValidationError(
                        f"{nodes[c].node_type.value} cannot be a child of {n.node_type.value}", c
                    )
            kind = n.node_type
            if kind is NodeType.CURVE and not isinstance(n.params, SketchPrimitive):
                raise TreeValidationError("curve without primitive", i)
            if kind is NodeType.EXTRUSION and not isinstance(n.params, ExtrusionParams):
                raise TreeValidationError("extrusion without parameters", i)
            if kind not in (NodeType.CURVE, NodeType.EXTRUSION) and n.params is not None:
                raise TreeValidationError("structural node carries parameters", i)
            if kind in (NodeType.SKETCH, NodeType.FACE, NodeType.LOOP) and not n.children:
                raise TreeValidationError(f"empty {kind.value.lower()}", i)
            if kind is NodeType.LOOP:
                _check_loop(i, [nodes[c].params for c in n.children])
            for c in n.children:
                visit(c, i)

        root = nodes[self.root]
        if root.node_type is not NodeType.SOLID:
            raise TreeValidationError("root is not a Solid", self.root)
        visit(self.root, None)
        if len(seen) != len(nodes):
            orphan = min(set(range(len(nodes))) - seen)
            raise TreeValidationError("node not reachable from root", orphan)
        kids = root.children
        if not kids:
            raise TreeValidationError("solid has no sketch/extrusion steps", self.root)
        for pos, c in enumerate(kids):
            want = NodeType.SKETCH if pos % 2 == 0 else NodeType.EXTRUSION
            if nodes[c].node_type is not want:
                raise TreeValidationError(f"expected {want.value} at step position {pos}", c)
        if len(kids) % 2:
            raise TreeValidationError("sketch without extrusion", kids[-1])


def _check_loop(loop_index: int, curves: Sequence[SketchPrimitive]) -> None:
    if len(curves) == 1:
        if curves[0].kind is not CurveKind.CIRCLE:
            raise TreeValidationError("single-curve loop is open", loop_index)
        return
    for c in curves:
        if c.kind is CurveKind.CIRCLE:
            raise TreeValidationError("circle inside a multi-curve loop", loop_index)
    for a, b in zip(curves, list(curves[1:]) + [curves[0]]):
        if a.end != b.start:
            raise TreeValidationError(f"loop not closed: {a.end} != {b.start}", loop_index)


def loop_is_closed(curves: Sequence[SketchPrimitive]) -> bool:
    try:
        _check_loop(-1, curves)
    except TreeValidationError:
        return False
    return True


# ---------------------------------------------------------------------------
# flat sequence


@dataclass(frozen=True)
class CadSequence:
    tokens: tuple[TokenPair, ...]
    type_flags: tuple[int, ...]
    step_flags: tuple[int, ...]
    valid_len: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple((int(a), int(b)) for a, b in self.tokens))
        object.__setattr__(self, "type_flags", tuple(int(t) for t in self.type_flags))
        object.__setattr__(self, "step_flags", tuple(int(s) for s in self.step_flags))
        n = len(self.tokens)
        if len(self.type_flags) != n or len(self.step_flags) != n:
            raise CadError("flags not aligned with tokens")
        if not 0 <= self.valid_len <= n:
            raise CadError(f"valid_len {self.valid_len} outside [0, {n}]")
        for k in range(self.valid_len, n):
            if self.tokens[k] != (PAD, PAD):
                raise CadError(f"non-pad token at padded position {k}")

    @property
    def n_ts(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_tokens(cls, tokens: Sequence[TokenPair], n_ts: Optional[int] = None) -> "CadSequence":
        """Pad ``tokens`` to ``n_ts`` and derive the flag columns."""
        tokens = [tuple(t) for t in tokens]
        n_ts = len(tokens) if n_ts is None else n_ts
        if len(tokens) > n_ts:
            raise CadError(f"sequence of length {len(tokens)} exceeds n_ts={n_ts}")
        valid = len(tokens)
        types, steps = infer_flags(tokens)
        pad = n_ts - valid
        return cls(
            tuple(tokens) + ((PAD, PAD),) * pad,
            tuple(types) + (TokenType.PAD,) * pad,
            tuple(steps) + (0,) * pad,
            valid,
        )

    def valid_tokens(self) -> tuple[TokenPair, ...]:
        return self.tokens[: self.valid_len]

    def with_n_ts(self, n_ts: int) -> "CadSequence":
        return CadSequence.from_tokens(self.valid_tokens(), n_ts)


def infer_flags(tokens: Sequence[TokenPair]) -> tuple[list[int], list[int]]:
    """Token-type and design-step flags from a left-to-right scan.

    Works on grammar-invalid input too (used for decoded model output).
    """
    types: list[int] = []
    steps: list[int] = []
    step = 0
    new_step = True
    in_extrusion = False
    n_values = 0
    for a, b in tokens:
        if a < VALUE_MIN:
            kind = a if a <= E_EXTRUDE else TokenType.PAD
            if a == CLS:
                new_step = True
            elif a not in (E_SOLID, END, PAD) and new_step:
                step += 1
                new_step = False
            if a == E_SKETCH:
                in_extrusion, n_values = True, 0
            elif a == E_EXTRUDE:
                in_extrusion, new_step = False, True
            types.append(int(kind))
            steps.append(0 if a in (CLS, PAD) else step)
            continue
        if new_step:
            step += 1
            new_step = False
        if b >= VALUE_MIN:
            kind = TokenType.COORD
        else:
            n_values += in_extrusion
            kind = TokenType.BETA if in_extrusion and n_values == N_EXTRUSION_VALUES else TokenType.SCALAR
        types.append(int(kind))
        steps.append(step)
    return types, steps


def serialize_tree(tree: CadTree, n_ts: int = MAX_TOKENS) -> CadSequence:
    """Depth-first emission: cls, (sketch tokens, extrusion tokens)+, e_solid, end."""
    tree.validate()
    out: list[TokenPair] = [(CLS, PAD)]
    for sketch, extrusion in tree.steps():
        for face in sketch:
            for loop in face:
                for curve in loop:
                    out.extend(curve.points)
                    out.append((E_CURVE, PAD))
                out.append((E_LOOP, PAD))
            out.append((E_FACE, PAD))
        out.append((E_SKETCH, PAD))
        out.extend((v, PAD) for v in extrusion.tokens())
        out.append((E_EXTRUDE, PAD))
    out.append((E_SOLID, PAD))
    out.append((END, PAD))
    return CadSequence.from_tokens(out, n_ts)


class TokenInfo(NamedTuple):
    """Per-token position in the tree recovered by the parser."""

    role: Role
    parent: int  # NODE_TYPE_CODES value of the owning node's parent, 0 = none
    sibling: int  # index among the parent's children
    depth: int
    step: int = -1
    face: int = -1
    loop: int = -1
    curve: int = -1


_NO_INFO = TokenInfo(Role.NONE, 0, 0, 0)
_EXT_ROLES = (
    [Role.EXT_ANGLE] * 3 + [Role.EXT_TRANSLATION] * 3 + [Role.EXT_SCALE] + [Role.EXT_DEPTH] * 2 + [Role.EXT_BETA]
)
_CODE = NODE_TYPE_CODES


class _Parsed(NamedTuple):
    steps: list  # (sketch, extrusion or None)
    info: list  # TokenInfo per token (length n_ts)


def _parse(seq: CadSequence, strict: bool = True) -> _Parsed:
    toks = seq.tokens
    n = seq.valid_len
    info = [_NO_INFO] * len(toks)
    if n == 0 or toks[0] != (CLS, PAD):
        raise SequenceParseError("sequence must start with cls", 0)
    info[0] = TokenInfo(Role.CLS, 0, 0, 0)

    def tok(k: int) -> TokenPair:
        if k >= n:
            raise SequenceParseError("unexpected end of sequence", k)
        a, b = toks[k]
        if a > VALUE_MAX or (E_EXTRUDE < a < VALUE_MIN):
            raise SequenceParseError(f"unknown token id {a}", k)
        if a < VALUE_MIN and b != PAD:
            raise SequenceParseError(f"structural token {a} with non-pad second component {b}", k)
        if a >= VALUE_MIN and b != PAD and not _is_value(b):
            raise SequenceParseError(f"invalid second component {b}", k)
        return a, b

    steps = []
    k = 1
    while True:
        if k >= n:
            raise SequenceParseError("empty solid" if not steps else "missing e_solid", k)
        a, b = tok(k)
        if a == E_SOLID:
            break
        if a == PAD or a == END:
            raise SequenceParseError("empty solid" if not steps else "missing e_solid", k)
        si = len(steps)
        sibling_step = 2 * si
        sketch: list = []
        # sketch region
        while True:
            a, b = tok(k)
            if a == E_SKETCH:
                if not sketch:
                    raise SequenceParseError("empty sketch", k)
                info[k] = TokenInfo(Role.E_SKETCH, _CODE[NodeType.SOLID], min(sibling_step, 31), 1, si)
                k += 1
                break
            fi = len(sketch)
            face: list = []
            while True:
                a, b = tok(k)
                if a == E_FACE:
                    if not face:
                        raise SequenceParseError("empty face", k)
                    info[k] = TokenInfo(Role.E_FACE, _CODE[NodeType.SKETCH], fi, 2, si, fi)
                    k += 1
                    break
                if a in (E_SKETCH, E_SOLID, END, PAD, CLS, E_EXTRUDE):
                    raise SequenceParseError("missing e_f", k)
                li = len(face)
                coords_per_curve: list[list[Point]] = []
                curve_pos: list[list[int]] = []
                while True:
                    a, b = tok(k)
                    if a == E_LOOP:
                        if not coords_per_curve:
                            raise SequenceParseError("empty loop", k)
                        info[k] = TokenInfo(Role.E_LOOP, _CODE[NodeType.FACE], li, 3, si, fi, li)
                        k += 1
                        break
                    if a in (E_FACE, E_SKETCH, E_SOLID, END, PAD, CLS, E_EXTRUDE):
                        raise SequenceParseError(f"missing e_l before {STRUCTURAL_NAMES[a]}", k)
                    ci = len(coords_per_curve)
                    pts: list[Point] = []
                    pos: list[int] = []
                    while True:
                        a, b = tok(k)
                        if a == E_CURVE:
                            if len(pts) not in (2, 3):
                                raise SequenceParseError(f"curve with {len(pts)} points", k)
                            info[k] = TokenInfo(Role.E_CURVE, _CODE[NodeType.LOOP], ci, 4, si, fi, li, ci)
                            k += 1
                            break
                        if a < VALUE_MIN:
                            raise SequenceParseError(f"missing e_c before {STRUCTURAL_NAMES[a]}", k)
                        if b == PAD:
                            raise SequenceParseError("extrusion token inside a sketch region", k)
                        pts.append((a, b))
                        pos.append(k)
                        k += 1
                    coords_per_curve.append(pts)
                    curve_pos.append(pos)
                loop = _make_loop(coords_per_curve, curve_pos, k - 1)
                for ci, (curve, pos) in enumerate(zip(loop, curve_pos)):
                    for j, p in enumerate(pos):
                        info[p] = TokenInfo(_point_role(curve.kind, j), _CODE[NodeType.CURVE], j, 5, si, fi, li, ci)
                face.append(loop)
            sketch.append(face)
        # extrusion region
        a, b = tok(k)
        if a < VALUE_MIN or b != PAD:
            if strict:
                raise SequenceParseError("sketch without extrusion", k)
            steps.append((sketch, None))
            continue
        values: list[int] = []
        start = k
        while True:
            a, b = tok(k)
            if a == E_EXTRUDE:
                break
            if a < VALUE_MIN or b != PAD:
                raise SequenceParseError("missing e_e", k)
            values.append(a)
            k += 1
        if len(values) != N_EXTRUSION_VALUES:
            raise SequenceParseError(f"extrusion with {len(values)} values", k)
        try:
            extrusion = ExtrusionParams.from_tokens(values)
        except CadError as exc:
            raise SequenceParseError(str(exc), start) from None
        for j in range(N_EXTRUSION_VALUES):
            info[start + j] = TokenInfo(_EXT_ROLES[j], _CODE[NodeType.EXTRUSION], j, 1, si)
        info[k] = TokenInfo(Role.E_EXTRUDE, _CODE[NodeType.SOLID], min(sibling_step + 1, 31), 1, si)
        k += 1
        steps.append((sketch, extrusion))
    info[k] = TokenInfo(Role.E_SOLID, 0, 0, 0)
    k += 1
    if tok(k)[0] != END:
        raise SequenceParseError("missing end after e_solid", k)
    info[k] = TokenInfo(Role.END, 0, 0, 0)
    if k + 1 != n:
        raise SequenceParseError("tokens after end", k + 1)
    return _Parsed(steps, info)


def _point_role(kind: CurveKind, j: int) -> Role:
    if kind is CurveKind.LINE:
        return Role.LINE_POINT
    if kind is CurveKind.ARC:
        return Role.ARC_POINT
    return Role.CIRCLE_CENTER if j == 0 else Role.CIRCLE_PERIMETER


def _make_loop(coords: list[list[Point]], positions: list[list[int]], end_index: int) -> list[SketchPrimitive]:
    curves = []
    for pts, pos in zip(coords, positions):
        if len(pts) == 3:
            kind = CurveKind.ARC
        elif len(coords) == 1:
            kind = CurveKind.CIRCLE
        else:
            kind = CurveKind.LINE
        try:
            curves.append(SketchPrimitive(kind, tuple(pts)))
        except CadError as exc:
            raise SequenceParseError(str(exc), pos[0]) from None
    return curves


def deserialize_sequence(seq: CadSequence) -> CadTree:
    """Rebuild the tree from a grammar-valid sequence in one left-to-right pass."""
    return CadTree.from_steps(_parse(seq).steps)


def token_info(seq: CadSequence) -> list[TokenInfo]:
    """Tree position of every token (parent type, sibling index, role, depth)."""
    return _parse(seq).info


@dataclass(frozen=True)
class ValidationReport:
    has_sketch_and_extrusion: bool
    sketches_have_closed_loop: bool
    executes_to_solid: bool
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.has_sketch_and_extrusion and self.sketches_have_closed_loop and self.executes_to_solid


def validate_sequence(seq: CadSequence, resolution: int = 32) -> ValidationReport:
    """Check the three dataset filter criteria; never raises."""
    try:
        steps = _parse(seq, strict=False).steps
    except CadError as exc:
        return ValidationReport(False, False, False, str(exc))
    has_both = bool(steps) and all(ext is not None for _, ext in steps)
    closed = bool(steps) and all(any(loop_is_closed(loop) for face in sk for loop in face) for sk, _ in steps)
    if not has_both:
        return ValidationReport(False, closed, False, "sketch without extrusion")
    from cadseq import geometry

    tree = CadTree.from_steps(steps)
    try:
        tree.validate()
        geometry.execute(tree, resolution)
    except (CadError, geometry.GeometryError) as exc:
        return ValidationReport(has_both, closed, False, str(exc))
    return ValidationReport(has_both, closed, True)
