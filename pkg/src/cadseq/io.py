"""JSON and binary file formats for sequences and trees.

All JSON is written with sorted keys and compact separators so equal objects
produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

from cadseq.core import (
    BooleanOp,
    CadError,
    CadSequence,
    CadTree,
    ExtrusionParams,
    NodeType,
    SketchPrimitive,
    TreeNode,
)

FORMAT_VERSION = 1
TOKEN_MAGIC = b"GFC1"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sequence_to_dict(seq: CadSequence) -> dict:
    return {
        "version": FORMAT_VERSION,
        "tokens": [list(t) for t in seq.tokens],
        "type_flags": list(seq.type_flags),
        "step_flags": list(seq.step_flags),
        "valid_len": seq.valid_len,
    }


def sequence_from_dict(d: dict) -> CadSequence:
    if d.get("version") != FORMAT_VERSION:
        raise CadError(f"unsupported sequence version {d.get('version')!r}")
    return CadSequence(
        tuple(tuple(t) for t in d["tokens"]), tuple(d["type_flags"]), tuple(d["step_flags"]), int(d["valid_len"])
    )


def _params_to_dict(p) -> Any:
    if p is None:
        return None
    if isinstance(p, SketchPrimitive):
        return {"kind": p.kind.value, "points": [list(pt) for pt in p.points]}
    d = {f: getattr(p, f) for f in ExtrusionParams.value_fields()}
    d["beta"] = p.beta.value
    return d


def _params_from_dict(node_type: NodeType, d) -> Any:
    if d is None:
        return None
    if node_type is NodeType.CURVE:
        return SketchPrimitive(d["kind"], tuple(tuple(p) for p in d["points"]))
    if node_type is NodeType.EXTRUSION:
        return ExtrusionParams(**{f: int(d[f]) for f in ExtrusionParams.value_fields()}, beta=BooleanOp(d["beta"]))
    raise CadError(f"{node_type.value} node cannot carry parameters")


def tree_to_dict(tree: CadTree) -> dict:
    return {
        "version": FORMAT_VERSION,
        "root": tree.root,
        "nodes": [
            {
                "node_type": n.node_type.value,
                "params": _params_to_dict(n.params),
                "children": list(n.children),
                "parent": n.parent,
            }
            for n in tree.nodes
        ],
    }


def tree_from_dict(d: dict) -> CadTree:
    if d.get("version") != FORMAT_VERSION:
        raise CadError(f"unsupported tree version {d.get('version')!r}")
    nodes = []
    for n in d["nodes"]:
        t = NodeType(n["node_type"])
        nodes.append(TreeNode(t, _params_from_dict(t, n["params"]), tuple(n["children"]), n["parent"]))
    return CadTree(tuple(nodes), int(d["root"]))


def dumps_sequence(seq: CadSequence) -> str:
    return canonical_json(sequence_to_dict(seq))


def loads_sequence(text: str) -> CadSequence:
    return sequence_from_dict(json.loads(text))


def dumps_tree(tree: CadTree) -> str:
    return canonical_json(tree_to_dict(tree))


def loads_tree(text: str) -> CadTree:
    return tree_from_dict(json.loads(text))


def save_sequence(seq: CadSequence, path) -> None:
    Path(path).write_text(dumps_sequence(seq))


def load_sequence(path) -> CadSequence:
    return loads_sequence(Path(path).read_text())


def save_tree(tree: CadTree, path) -> None:
    Path(path).write_text(dumps_tree(tree))


def load_tree(path) -> CadTree:
    return loads_tree(Path(path).read_text())


def sequence_to_bytes(seq: CadSequence) -> bytes:
    """``GFC1``, u16 n_ts, u16 valid_len, then interleaved little-endian u16 token pairs.

    Flags are not stored; they are re-derived from the tokens on read.
    """
    flat = [v for pair in seq.tokens for v in pair]
    return TOKEN_MAGIC + struct.pack(f"<HH{len(flat)}H", seq.n_ts, seq.valid_len, *flat)


def sequence_from_bytes(data: bytes) -> CadSequence:
    if data[:4] != TOKEN_MAGIC:
        raise CadError("bad token stream magic")
    n_ts, valid = struct.unpack_from("<HH", data, 4)
    flat = struct.unpack_from(f"<{2 * n_ts}H", data, 8)
    pairs = list(zip(flat[::2], flat[1::2]))
    return CadSequence.from_tokens(pairs[:valid], n_ts)
