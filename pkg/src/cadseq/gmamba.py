"""Geometry-conditioned state-space denoiser.

Tokens are embedded into width ``d_e``; each block normalizes, runs the
geometry-conditioned scan, adds the residual, then applies an MLP with a second
residual. Scan kernels are produced per token from geometric descriptors and
tree-position codes, and are modulated by the diffusion timestep.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from cadseq.core import N_PARENT_CODES, N_ROLES, VOCAB_SIZE, CadSequence, SequenceParseError, token_info
from cadseq.decoder import DecoderHeads
from cadseq.geometry import GeomDescriptors, null_descriptors
from cadseq.numerics import tensor as T
from cadseq.numerics.nn import MLP, Embedding, Linear, Module, RMSNorm, param
from cadseq.numerics.tensor import Tensor

SIBLING_CLAMP = 31
# Inference without a tape runs the denoiser over chunks of this many tokens.
STREAM_CHUNK = 512
TIME_FEATURES = 64
VARIANTS = ("gmamba", "vanilla")


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 12
    d_e: int = 256
    d_c: int = 16
    variant: str = "gmamba"
    film_enabled: bool = True
    K: int = 4
    n_ts: int = 256
    V: int = VOCAB_SIZE
    zero_out_proj: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if min(self.n_blocks, self.d_e, self.d_c, self.K, self.n_ts, self.V) < 1:
            raise ValueError("model sizes must be positive")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return replace(cls(n_blocks=4, d_e=64), **kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return replace(cls(), **kw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# per-sequence conditioning inputs


@dataclass
class Conditioning:
    """Batched arrays derived from sequences; all shaped (B, L) or (B, L, ...)."""

    a: np.ndarray
    b: np.ndarray
    type_flags: np.ndarray
    step_flags: np.ndarray
    mask: np.ndarray  # bool, True on valid tokens
    desc: np.ndarray  # (B, L, 3): s, d/5, log1p(r)
    parent: np.ndarray
    sibling: np.ndarray
    role: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def take(self, idx) -> "Conditioning":
        """Sub-batch by row indices."""
        return Conditioning(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})


def hierarchy_codes(seq: CadSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(parent type code, clamped sibling index, role) per token; zeros when the sequence does not parse."""
    n = seq.n_ts
    parent = np.zeros(n, dtype=np.int64)
    sibling = np.zeros(n, dtype=np.int64)
    role = np.zeros(n, dtype=np.int64)
    try:
        info = token_info(seq)
    except SequenceParseError:
        return parent, sibling, role
    for k, ti in enumerate(info):
        parent[k] = ti.parent
        sibling[k] = min(ti.sibling, SIBLING_CLAMP)
        role[k] = int(ti.role)
    return parent, sibling, role


def normalize_descriptors(desc: GeomDescriptors) -> np.ndarray:
    return np.stack([desc.s, np.asarray(desc.d, float) / 5.0, np.log1p(desc.r)], axis=-1)


def conditioning(
    seqs: Sequence[CadSequence], descs: Optional[Sequence[Optional[GeomDescriptors]]] = None, structure: bool = True
) -> Conditioning:
    """Stack token ids, flags, descriptors and hierarchy codes for a batch.

    With ``structure=False`` descriptors and hierarchy codes are zero, as in
    unconditional generation.
    """
    n = {s.n_ts for s in seqs}
    if len(n) != 1:
        raise ValueError(f"sequences in a batch must share n_ts, got {sorted(n)}")
    (L,) = n
    B = len(seqs)
    tok = np.array([s.tokens for s in seqs], dtype=np.int64).reshape(B, L, 2)
    mask = np.arange(L)[None, :] < np.array([s.valid_len for s in seqs])[:, None]
    desc = np.zeros((B, L, 3))
    codes = np.zeros((3, B, L), dtype=np.int64)
    if structure:
        for i, s in enumerate(seqs):
            d = descs[i] if descs is not None and descs[i] is not None else null_descriptors(L)
            desc[i] = normalize_descriptors(d)
            codes[:, i] = hierarchy_codes(s)
    return Conditioning(
        tok[..., 0], tok[..., 1],
        np.array([s.type_flags for s in seqs], dtype=np.int64),
        np.array([s.step_flags for s in seqs], dtype=np.int64),
        mask, desc, codes[0], codes[1], codes[2],
    )


def unconditional(batch: int, n_ts: int) -> Conditioning:
    """All positions valid, no token content, null descriptors and zero codes."""
    z = np.zeros((batch, n_ts), dtype=np.int64)
    return Conditioning(z, z, z, z, np.ones((batch, n_ts), dtype=bool), np.zeros((batch, n_ts, 3)), z, z, z)


# ---------------------------------------------------------------------------
# scan


def linear_recurrence(a: Tensor, u: Tensor, s0: Optional[np.ndarray] = None) -> Tensor:
    """States ``S[:, k] = s_k`` with ``s_0 = 0`` (or ``s0``) and ``s_{k+1} = a_k * s_k + u_k``.

    ``a`` and ``u`` are (B, L, d). Fused forward loop with a hand-written adjoint pass;
    ``s0`` is treated as a constant.
    """
    if a.shape != u.shape:
        raise T.ShapeError(f"linear_recurrence: shapes {a.shape} and {u.shape} differ")
    A, U = a.data, u.data
    L = A.shape[1]
    S = np.zeros_like(U)
    s = np.zeros_like(U[:, 0]) if s0 is None else np.asarray(s0, dtype=U.dtype)
    for k in range(L):
        S[:, k] = s
        s = A[:, k] * s + U[:, k]

    def back(g):
        ga = np.zeros_like(A)
        gu = np.zeros_like(U)
        lam = np.zeros_like(U[:, 0])  # dL/ds_{k+1}
        for k in range(L - 1, -1, -1):
            gu[:, k] = lam
            ga[:, k] = lam * S[:, k]
            lam = g[:, k] + A[:, k] * lam
        return ga, gu

    return T.custom_op(S, (a, u), back)


@dataclass
class Kernels:
    """Per-token diagonal kernels, each (B, L, d_e)."""

    A: Tensor
    B: Tensor
    C: Tensor
    G: Tensor


# Keeps the squashed transition strictly below 1 in floating point, where
# exp(-softplus(x)) alone rounds to 1.0 for very negative x.
SQUASH_FLOOR = 1e-6


def squash(x) -> Tensor:
    """exp(-softplus(x) - floor) maps the reals into (0, exp(-floor)]."""
    return T.exp(-(T.softplus(x) + SQUASH_FLOOR))


def gsm_ssd_scan(Z: Tensor, k: Kernels, pi: Optional[Tensor], conv_w: Tensor, gsm_in: Linear, gsm_out: Linear,
                 mask: np.ndarray) -> Tensor:
    """One geometry-conditioned scan layer over ``Z`` (B, L, d_e)."""
    if Z.shape != k.A.shape:
        raise T.ShapeError(f"gsm_ssd_scan: input {Z.shape} vs kernels {k.A.shape}")
    out, _ = _scan_body(T.depthwise_conv1d(Z, conv_w), k, pi, gsm_in, gsm_out, mask, None)
    return out


def _scan_body(zh: Tensor, k: Kernels, pi, gsm_in: Linear, gsm_out: Linear, mask: np.ndarray, s0):
    """Scan layer after the convolution; returns the output and the state after the last token."""
    d = zh.shape[-1]
    m = mask[..., None].astype(zh.dtype)
    if pi is not None:
        zh = zh + pi
    h_in = k.A * k.B * zh
    hz = gsm_in(h_in)
    h, z = hz[..., :d], hz[..., d:]
    h_hat = gsm_out(h * T.sigmoid(z))
    a = k.A * m + (1.0 - m)
    u = k.B * zh * m
    states = linear_recurrence(a, u, s0)
    last = a.data[:, -1] * states.data[:, -1] + u.data[:, -1]
    return (k.C * states + k.G * h_hat) * m, last


# ---------------------------------------------------------------------------
# model


def timestep_features(t: np.ndarray, n: int = TIME_FEATURES) -> np.ndarray:
    t = np.asarray(t, dtype=float).reshape(-1, 1)
    freqs = np.exp(-math.log(10_000.0) * np.arange(n // 2) / (n // 2))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.d_e
        self.norm1 = RMSNorm(d)
        self.norm2 = RMSNorm(d)
        w = np.zeros((cfg.K, d))
        w[0] = 1.0
        self.conv = param(w + rng.normal(0.0, 0.1, (cfg.K, d)))
        self.gsm_in = Linear(d, 2 * d, rng)
        self.gsm_out = Linear(d, d, rng)
        self.mlp = MLP([d, 4 * d, d], rng)
        if cfg.variant == "gmamba":
            self.f_geom = MLP([cfg.d_c + d, d, 4 * d], rng)
        else:
            self.shared = param(np.concatenate([np.full(d, 1.0), rng.normal(0.0, 1.0, 3 * d)]))
        if cfg.film_enabled:
            self.film = Linear(d, 4 * d, rng, zero=True)

    def kernels(self, cfg: ModelConfig, delta: Optional[Tensor], pi: Optional[Tensor], temb: Optional[Tensor],
                shape: tuple) -> Kernels:
        d = cfg.d_e
        if cfg.variant == "gmamba":
            raw = self.f_geom(T.concat([delta, pi], axis=-1))
        else:
            raw = T.reshape(self.shared, (1, 1, 4 * d)) * np.ones(shape[:2] + (1,))
        if temb is not None:
            psi = 1.0 + T.reshape(self.film(temb), (shape[0], 1, 4 * d))
            raw = raw * psi
        return Kernels(squash(raw[..., :d]), raw[..., d : 2 * d], raw[..., 2 * d : 3 * d], raw[..., 3 * d :])

    def __call__(self, x: Tensor, cfg: ModelConfig, delta, pi, temb, mask) -> Tensor:
        k = self.kernels(cfg, delta, pi, temb, x.shape)
        pi_in = pi if cfg.variant == "gmamba" else None
        x = x + gsm_ssd_scan(self.norm1(x), k, pi_in, self.conv, self.gsm_in, self.gsm_out, mask)
        m = mask[..., None].astype(x.dtype)
        return x + self.mlp(self.norm2(x)) * m

    def stream(self, x: Tensor, cfg: ModelConfig, delta, pi, temb, mask, state):
        """The same computation on one chunk of tokens, given the state left by the previous
        chunk: the last ``K - 1`` normalized inputs and the recurrent state."""
        k = self.kernels(cfg, delta, pi, temb, x.shape)
        pi_in = pi if cfg.variant == "gmamba" else None
        tail, s0 = state
        xn = self.norm1(x)
        n = x.shape[1]
        window = xn if tail is None else T.concat([T.Tensor(tail), xn], axis=1)
        zh = T.depthwise_conv1d(window, self.conv)[:, window.shape[1] - n :]
        y, last = _scan_body(zh, k, pi_in, self.gsm_in, self.gsm_out, mask, s0)
        x = x + y
        m = mask[..., None].astype(x.dtype)
        keep = cfg.K - 1
        new_tail = window.data[:, max(0, window.shape[1] - keep) :] if keep else None
        return x + self.mlp(self.norm2(x)) * m, (new_tail, last)


class GMambaModel(Module):
    """Embedding, denoiser blocks and decoder heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, V = cfg.d_e, cfg.V
        w = rng.normal(0.0, 1.0 / math.sqrt(2.0), (2 * V + 2, d))
        w[2 * V :] *= 0.02
        self.w_emb = param(w)
        self.c_pos = param(rng.normal(0.0, 0.02, (cfg.n_ts, d)))
        self.g_mlp = MLP([3, cfg.d_c, cfg.d_c], rng)
        self.e_parent = Embedding(N_PARENT_CODES, d, rng)
        self.e_sibling = Embedding(SIBLING_CLAMP + 1, d, rng)
        self.e_role = Embedding(N_ROLES, d, rng)
        if cfg.film_enabled:
            self.t_mlp = MLP([TIME_FEATURES, d, d], rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_blocks)]
        self.norm_out = RMSNorm(d)
        self.proj = Linear(d, d, rng, zero=cfg.zero_out_proj)
        self.heads = DecoderHeads(d, V, rng)

    # -- embedding
    def embed(self, c: Conditioning) -> Tensor:
        """Token one-hots for both components plus type/step columns through ``w_emb``, plus positions."""
        B, L = c.shape
        if L > self.cfg.n_ts:
            raise T.ShapeError(f"sequence length {L} exceeds model n_ts {self.cfg.n_ts}")
        V = self.cfg.V
        W = self.w_emb
        z = T.embedding_lookup(W, c.a) + T.embedding_lookup(W, c.b + V)
        flags = np.stack([c.type_flags, c.step_flags], axis=-1).astype(W.dtype)
        z = z + T.matmul(T.Tensor(flags), W[2 * V :])
        z = z + self.c_pos[:L]
        return z * c.mask[..., None].astype(W.dtype)

    def embed_sequences(self, seqs: Sequence[CadSequence]) -> Tensor:
        return self.embed(conditioning(seqs, structure=False))

    # -- denoiser
    def geometry(self, c: Conditioning) -> tuple[Tensor, Tensor]:
        delta = self.g_mlp(T.Tensor(c.desc))
        pi = self.e_parent(c.parent) + self.e_sibling(c.sibling) + self.e_role(c.role)
        return delta, pi

    def time_embedding(self, t) -> Optional[Tensor]:
        if not self.cfg.film_enabled:
            return None
        return T.silu(self.t_mlp(T.Tensor(timestep_features(t))))

    def block_kernels(self, c: Conditioning, t) -> list[Kernels]:
        delta, pi = self.geometry(c)
        temb = self.time_embedding(np.broadcast_to(np.asarray(t), (c.shape[0],)))
        return [b.kernels(self.cfg, delta, pi, temb, c.shape + (self.cfg.d_e,)) for b in self.blocks]

    def denoise(self, z_t: Tensor, t, c: Conditioning) -> Tensor:
        """Predicted noise for ``z_t`` (B, L, d_e) at timesteps ``t`` (scalar or length-B)."""
        z_t = T.as_tensor(z_t)
        if z_t.shape[:2] != c.shape:
            raise T.ShapeError(f"denoise: input {z_t.shape} vs conditioning {c.shape}")
        delta, pi = self.geometry(c)
        temb = self.time_embedding(np.broadcast_to(np.asarray(t), (c.shape[0],)))
        L = c.shape[1]
        if not T.grad_enabled() and L > STREAM_CHUNK:
            return self._denoise_streaming(z_t, c, delta, pi, temb)
        x = z_t
        for block in self.blocks:
            x = block(x, self.cfg, delta, pi, temb, c.mask)
        return self.proj(self.norm_out(x)) * c.mask[..., None].astype(x.dtype)

    def _denoise_streaming(self, z_t: Tensor, c: Conditioning, delta, pi, temb) -> Tensor:
        """Chunked evaluation over the sequence; the working set stays the size of one chunk."""
        L = c.shape[1]
        out = np.empty(z_t.shape, dtype=z_t.dtype)
        states = [(None, None)] * len(self.blocks)
        for i0 in range(0, L, STREAM_CHUNK):
            sl = slice(i0, min(L, i0 + STREAM_CHUNK))
            x = z_t[:, sl]
            mask = c.mask[:, sl]
            for j, block in enumerate(self.blocks):
                x, states[j] = block.stream(x, self.cfg, delta[:, sl], pi[:, sl], temb, mask, states[j])
            out[:, sl] = (self.proj(self.norm_out(x)) * mask[..., None].astype(x.dtype)).data
        return T.Tensor(out)

    def decode(self, z0: Tensor) -> tuple[Tensor, Tensor]:
        return self.heads(z0)

    # -- persistence
    def save(self, path, meta: Optional[dict] = None) -> None:
        from cadseq.numerics import checkpoint

        checkpoint.save(path, self.state_dict(), {"config": asdict(self.cfg), **(meta or {})})

    @classmethod
    def load(cls, path) -> "GMambaModel":
        from cadseq.numerics import checkpoint

        tensors, meta = checkpoint.load(path)
        model = cls(ModelConfig(**meta["config"]))
        model.load_state_dict(tensors)
        return model


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(cfg.to_json())


def load_config(path) -> ModelConfig:
    return ModelConfig.from_json(Path(path).read_text())
