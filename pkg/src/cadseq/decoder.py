"""Command and argument heads over denoised features, and discrete sequence assembly."""

from __future__ import annotations

from typing import Union

import numpy as np

from cadseq.core import CLS, END, E_EXTRUDE, N_TOKEN_TYPES, PAD, CadSequence, TokenType
from cadseq.numerics import tensor as T
from cadseq.numerics.nn import MLP, Linear, Module
from cadseq.numerics.tensor import Tensor

N_CMD = N_TOKEN_TYPES


class DecoderHeads(Module):
    """``cmd``: one linear layer to the token-type classes.
    ``args``: three-layer MLP to two V-way groups (token components a and b)."""

    def __init__(self, d_e: int, V: int, rng: np.random.Generator):
        self.V = V
        self.cmd = Linear(d_e, N_CMD, rng)
        self.args = MLP([d_e, 4 * d_e, 4 * d_e, 2 * V], rng)

    def __call__(self, z: Tensor) -> tuple[Tensor, Tensor]:
        cmd = self.cmd(z)
        args = self.args(z)
        return cmd, T.reshape(args, args.shape[:-1] + (2, self.V))


def decode_distributions(heads: DecoderHeads, z) -> tuple[np.ndarray, np.ndarray]:
    """Softmax probabilities: command (..., n_cmd) and arguments (..., 2, V)."""
    z = T.as_tensor(z)
    if not np.isfinite(z.data).all():
        raise T.NonFiniteError("decode_distributions: non-finite features")
    cmd, args = heads(z)
    return T.softmax(cmd).data, T.softmax(args).data


def _argmax(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, which is the lowest-index tie-break
    return np.argmax(p, axis=-1)


def assemble_tokens(cmd: np.ndarray, arg_a: np.ndarray, arg_b: np.ndarray) -> list[tuple[int, int]]:
    """Token pairs from per-position type, a and b ids (argmax results)."""
    out = []
    for k, (c, a, b) in enumerate(zip(cmd, arg_a, arg_b)):
        c = int(c)
        if k == 0:
            c = CLS
        if c == PAD:
            out.append((PAD, PAD))
        elif c <= E_EXTRUDE:
            out.append((c, PAD))
        elif c == TokenType.COORD:
            out.append((int(a), int(b)))
        else:
            out.append((int(a), PAD))
    return out


def assemble(cmd_probs: Union[np.ndarray, Tensor], arg_probs: Union[np.ndarray, Tensor]) -> CadSequence:
    """Argmax decoding of one sequence; the result may be grammar-invalid.

    ``valid_len`` runs through the first ``end`` token, or through the last
    non-pad token when no ``end`` is emitted.
    """
    cmd_probs = np.asarray(getattr(cmd_probs, "data", cmd_probs))
    arg_probs = np.asarray(getattr(arg_probs, "data", arg_probs))
    n = cmd_probs.shape[0]
    if arg_probs.shape[:2] != (n, 2):
        raise T.ShapeError(f"assemble: command {cmd_probs.shape} vs arguments {arg_probs.shape}")
    arg = _argmax(arg_probs)
    tokens = assemble_tokens(_argmax(cmd_probs), arg[:, 0], arg[:, 1])
    ends = [k for k, t in enumerate(tokens) if t[0] == END and k > 0]
    if ends:
        valid = ends[0] + 1
    else:
        nonpad = [k for k, t in enumerate(tokens) if t != (PAD, PAD)]
        valid = nonpad[-1] + 1 if nonpad else 1
    return CadSequence.from_tokens(tokens[:valid], n)
