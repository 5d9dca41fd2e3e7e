"""Gaussian corruption of token embeddings, the reverse chain, the training loss and loop."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from cadseq import geometry
from cadseq.core import PAD, VALUE_MIN, CadError, CadSequence, TokenType, deserialize_sequence
from cadseq.decoder import assemble
from cadseq.gmamba import Conditioning, GMambaModel, conditioning
from cadseq.numerics import checkpoint
from cadseq.numerics import tensor as T
from cadseq.numerics.nn import AdamW, clip_grad_norm
from cadseq.numerics.tensor import Tensor

REFERENCE_T = 1000


class DiffusionError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Arrays indexed by timestep ``t`` in [0, T]; entry 0 is the clean-data convention."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def linear(cls, T: int = REFERENCE_T, beta_min: float = 1e-4, beta_max: float = 0.02,
               rescale: bool = True) -> "DiffusionSchedule":
        """Linear variances from ``beta_min`` to ``beta_max``.

        With ``rescale`` the endpoints are multiplied by ``1000 / T`` (capped below 1)
        so shorter chains destroy the signal as thoroughly as the 1000-step chain.
        """
        if T < 1:
            raise DiffusionError("T must be >= 1")
        scale = REFERENCE_T / T if rescale else 1.0
        b = np.linspace(beta_min * scale, min(beta_max * scale, 0.999), T)
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        sigma = np.sqrt(beta)
        sigma[1] = 0.0  # final step is noiseless
        return cls(T, beta, alpha, alpha_bar, sigma)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise DiffusionError(f"timestep outside [0, {self.T}]")
        return t


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return v.reshape(v.shape + (1,) * (ndim - v.ndim)) if v.ndim else v


def _mask(mask, z: np.ndarray) -> np.ndarray:
    if mask is None:
        return np.ones(z.shape[:-1] + (1,), dtype=z.dtype)
    return np.asarray(mask, dtype=z.dtype)[..., None]


def forward_sample(sched: DiffusionSchedule, z0, t, rng: np.random.Generator | int, mask=None):
    """``(z_t, eps)`` with ``z_t = sqrt(abar) z0 + sqrt(1 - abar) eps``; padded rows stay zero.

    ``t`` is a scalar or one timestep per leading-axis entry.
    """
    t = sched.check_t(t)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    z0 = np.asarray(z0)
    m = _mask(mask, z0)
    eps = rng.standard_normal(z0.shape).astype(z0.dtype) * m
    ab = _bcast(sched.alpha_bar[t], z0.ndim)
    zt = np.sqrt(ab) * z0 * m + np.sqrt(1.0 - ab) * eps
    return zt.astype(z0.dtype), eps


def reverse_step(sched: DiffusionSchedule, z_t, t: int, eps_hat, rng=None, deterministic: bool = False, mask=None):
    """One ancestral step from ``t`` to ``t - 1``."""
    if not 1 <= t <= sched.T:
        raise DiffusionError(f"timestep {t} outside [1, {sched.T}]")
    z_t = np.asarray(z_t)
    a, ab = sched.alpha[t], sched.alpha_bar[t]
    mu = (z_t - (1.0 - a) / math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(a)
    if deterministic or sched.sigma[t] == 0.0:
        out = mu
    else:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        out = mu + sched.sigma[t] * rng.standard_normal(z_t.shape)
    return (out * _mask(mask, z_t)).astype(z_t.dtype)


def estimate_z0(sched: DiffusionSchedule, z_t, t, eps_hat):
    """Closed-form clean estimate; accepts arrays or tape Tensors."""
    t = sched.check_t(t)
    nd = z_t.ndim
    ab = _bcast(sched.alpha_bar[t], nd)
    if isinstance(z_t, Tensor) or isinstance(eps_hat, Tensor):
        return (T.as_tensor(z_t) - T.as_tensor(eps_hat) * np.sqrt(1.0 - ab)) * (1.0 / np.sqrt(ab))
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossWeights:
    eta: float = 2.0

    def __post_init__(self):
        if self.eta < 0:
            raise DiffusionError("eta must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    total: Tensor
    diffusion: float
    command: float
    args: float


def argument_targets(c: Conditioning) -> tuple[np.ndarray, np.ndarray]:
    """Per-token argument targets (B, L, 2) and a mask selecting supervised components.

    Coordinates supervise both components, extrusion scalars and beta the first only;
    structural tokens carry no arguments.
    """
    tgt = np.stack([c.a, c.b], axis=-1)
    coord = c.type_flags == TokenType.COORD
    scalar = (c.type_flags == TokenType.SCALAR) | (c.type_flags == TokenType.BETA)
    m = np.stack([coord | scalar, coord], axis=-1) & c.mask[..., None]
    return tgt, m


def total_loss(model: GMambaModel, sched: DiffusionSchedule, c: Conditioning, t, eps: np.ndarray,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Noise regression plus command and argument cross-entropy on the decoded clean estimate.

    The diffusion term averages over valid entries. The cross-entropy terms sum over
    valid tokens (and a token's supervised components) with each item weighted by
    ``alpha_bar[t]``, then divide by the number of valid tokens. The weight cancels the
    ``1 / sqrt(alpha_bar)`` gain of the clean estimate, which otherwise lets the
    cross-entropy gradient at large ``t`` swamp the noise regression.
    """
    B, L = c.shape
    if B == 0:
        raise DiffusionError("empty batch")
    t = sched.check_t(t)
    m = c.mask[..., None].astype(model.w_emb.dtype)
    z0 = model.embed(c)
    ab = _bcast(sched.alpha_bar[t], 3)
    z_t = z0 * np.sqrt(ab) + T.Tensor(np.sqrt(1.0 - ab) * eps * m)
    eps_hat = model.denoise(z_t, t, c)
    l_diff = T.mse(eps_hat, T.Tensor(eps * m), np.broadcast_to(m, eps.shape))
    z0_hat = estimate_z0(sched, z_t, t, eps_hat)
    cmd_logits, arg_logits = model.decode(z0_hat)
    n_tok = max(float(c.mask.sum()), 1.0)
    w = _bcast(sched.alpha_bar[t], 2) * c.mask
    l_cmd = T.cross_entropy(cmd_logits, c.type_flags, w, reduction="sum") * (1.0 / n_tok)
    tgt, am = argument_targets(c)
    l_args = T.cross_entropy(arg_logits, tgt, am * w[..., None], reduction="sum") * (1.0 / n_tok)
    total = l_diff + l_cmd + l_args * weights.eta
    return LossBreakdown(total, l_diff.item(), l_cmd.item(), l_args.item())


# ---------------------------------------------------------------------------
# sampling and reconstruction


def _decode_batch(model: GMambaModel, z0: np.ndarray, n_ts: int) -> list[CadSequence]:
    with T.no_grad():
        cmd, args = model.decode(T.Tensor(z0))
    cmd_p, arg_p = T.softmax(cmd).data, T.softmax(args).data
    return [assemble(cmd_p[i], arg_p[i]) for i in range(z0.shape[0])]


def run_chain(model: GMambaModel, sched: DiffusionSchedule, z: np.ndarray, c: Conditioning, t_start: int,
              rng: Optional[np.random.Generator], deterministic: bool,
              clamp: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Reverse steps from ``t_start`` to 0. With ``clamp``, each step's clean estimate is
    replaced by ``clamp(estimate)`` and the noise it implies is used instead of the prediction."""
    for t in range(t_start, 0, -1):
        with T.no_grad():
            eps_hat = model.denoise(T.Tensor(z), t, c).data
        if clamp is not None:
            ab = sched.alpha_bar[t]
            eps_hat = (z - math.sqrt(ab) * clamp(estimate_z0(sched, z, t, eps_hat))) / math.sqrt(1.0 - ab)
        z = reverse_step(sched, z, t, eps_hat, rng, deterministic, c.mask)
    return z


def structured_tokens(model: GMambaModel, z0: np.ndarray, c: Conditioning) -> tuple[np.ndarray, np.ndarray]:
    """Token components decoded under the known token types of ``c``: structural tokens
    are fixed by their type, value tokens take the most likely value id."""
    with T.no_grad():
        _, args = model.decode(T.Tensor(z0))
    vals = np.argmax(args.data[..., VALUE_MIN:], axis=-1) + VALUE_MIN
    types = c.type_flags
    a = np.where(types >= TokenType.COORD, vals[..., 0], types) * c.mask
    b = np.where(types == TokenType.COORD, vals[..., 1], PAD) * c.mask
    return a, b


def _structure_clamp(model: GMambaModel, c: Conditioning) -> Callable[[np.ndarray], np.ndarray]:
    def clamp(z0: np.ndarray) -> np.ndarray:
        a, b = structured_tokens(model, z0.astype(model.w_emb.dtype), c)
        with T.no_grad():
            return model.embed(replace(c, a=a, b=b)).data

    return clamp


@dataclass(frozen=True)
class Sample:
    sequence: CadSequence
    valid: bool


def sample(model: GMambaModel, sched: DiffusionSchedule, n: int, seed: int = 0,
           cond: Optional[Conditioning] = None, batch: int = 16, teacher_structure: bool = False) -> list[Sample]:
    """Ancestral sampling from pure noise.

    Without ``cond`` generation is unconditional; with it the structure inputs of
    given sequences are supplied (token contents are not read by the denoiser).
    ``teacher_structure`` also fixes the token types and lengths of ``cond``: each
    step's clean estimate is snapped to the embedding of its decoded tokens, and
    only value tokens are generated.
    """
    from cadseq.gmamba import unconditional

    if teacher_structure and cond is None:
        raise DiffusionError("teacher_structure needs conditioning sequences")
    rng = np.random.default_rng(seed)
    dtype = model.w_emb.dtype
    out: list[Sample] = []
    for i0 in range(0, n, batch):
        nb = min(batch, n - i0)
        c = cond.take(np.arange(i0, i0 + nb)) if cond is not None else unconditional(nb, model.cfg.n_ts)
        z = rng.standard_normal(c.shape + (model.cfg.d_e,)).astype(dtype) * c.mask[..., None]
        clamp = _structure_clamp(model, c) if teacher_structure else None
        z = run_chain(model, sched, z, c, sched.T, rng, deterministic=False, clamp=clamp)
        if teacher_structure:
            a, b = structured_tokens(model, z, c)
            seqs = [CadSequence.from_tokens(list(zip(a[i, :v].tolist(), b[i, :v].tolist())), model.cfg.n_ts)
                    for i, v in enumerate(c.mask.sum(1))]
        else:
            seqs = _decode_batch(model, z, model.cfg.n_ts)
        out.extend(Sample(seq, parses(seq)) for seq in seqs)
    return out


def parses(seq: CadSequence) -> bool:
    try:
        deserialize_sequence(seq)
    except CadError:
        return False
    return True


def reconstruct(model: GMambaModel, sched: DiffusionSchedule, c: Conditioning, seed: int = 0,
                t_start: Optional[int] = None, batch: int = 16) -> list[CadSequence]:
    """Paired-mode predictions: corrupt each embedded sequence to ``t_start`` and run the
    deterministic reverse chain back to a clean estimate, then decode."""
    t_start = max(1, sched.T // 10) if t_start is None else t_start
    rng = np.random.default_rng(seed)
    out = []
    B = c.shape[0]
    for i0 in range(0, B, batch):
        cb = c.take(np.arange(i0, min(B, i0 + batch)))
        with T.no_grad():
            z0 = model.embed(cb).data
        z, _ = forward_sample(sched, z0, t_start, rng, cb.mask)
        z = run_chain(model, sched, z, cb, t_start, None, deterministic=True)
        out.extend(_decode_batch(model, z, model.cfg.n_ts))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    T: int = 50
    beta_min: float = 1e-4
    beta_max: float = 0.02
    eta: float = 2.0
    lr: float = 1e-3
    betas: tuple = (0.95, 0.99)
    batch: int = 16
    epochs: int = 0
    steps: int = 2000
    seed: int = 0
    clip: float = 1.0
    checkpoint_every: int = 0

    @classmethod
    def full(cls, **kw) -> "TrainConfig":
        return replace(cls(T=1000, lr=1e-4, batch=512, epochs=1000, steps=0), **kw)

    def total_steps(self, n_items: int) -> int:
        if self.epochs:
            return self.epochs * max(1, math.ceil(n_items / self.batch))
        return self.steps

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def corpus_conditioning(seqs: Sequence[CadSequence]) -> Conditioning:
    """Conditioning with descriptors computed from each sequence's tree."""
    descs = []
    for s in seqs:
        tree = deserialize_sequence(s)
        descs.append(geometry.descriptors(tree, s))
    return conditioning(seqs, descs)


class Trainer:
    """Optimizer loop with per-step seeding so a resumed run replays the same trajectory."""

    def __init__(self, model: GMambaModel, cond: Conditioning, cfg: TrainConfig):
        self.model = model
        self.cond = cond
        self.cfg = cfg
        self.sched = DiffusionSchedule.linear(cfg.T, cfg.beta_min, cfg.beta_max)
        self.opt = AdamW(list(model.named_parameters()), lr=cfg.lr, betas=cfg.betas)
        self.step = 0
        self.history: list[dict] = []

    def batch_for(self, step: int):
        rng = np.random.default_rng([self.cfg.seed, step])
        n = self.cond.shape[0]
        b = min(self.cfg.batch, n)
        idx = np.sort(rng.choice(n, b, replace=False)) if b < n else np.arange(n)
        c = self.cond.take(idx)
        t = rng.integers(1, self.sched.T + 1, size=len(idx))
        eps = rng.standard_normal(c.shape + (self.model.cfg.d_e,)).astype(self.model.w_emb.dtype)
        return c, t, eps

    def train_step(self) -> dict:
        c, t, eps = self.batch_for(self.step)
        self.opt.zero_grad()
        parts = total_loss(self.model, self.sched, c, t, eps, LossWeights(self.cfg.eta))
        if not math.isfinite(parts.total.item()):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        parts.total.backward()
        norm = clip_grad_norm(self.model.parameters(), self.cfg.clip) if self.cfg.clip > 0 else float("nan")
        self.opt.step()
        self.step += 1
        rec = {"step": self.step, "loss": parts.total.item(), "diffusion": parts.diffusion,
               "command": parts.command, "args": parts.args, "grad_norm": norm}
        self.history.append(rec)
        return rec

    def run(self, steps: int, checkpoint_path=None, log: Optional[Callable[[dict], None]] = None,
            time_limit: Optional[float] = None) -> list[dict]:
        start = time.perf_counter()
        for _ in range(steps):
            rec = self.train_step()
            if log:
                log(rec)
            every = self.cfg.checkpoint_every
            if checkpoint_path and every and self.step % every == 0:
                self.save(checkpoint_path)
            if time_limit and time.perf_counter() - start > time_limit:
                break
        if checkpoint_path:
            self.save(checkpoint_path)
        return self.history

    # -- checkpoints hold parameters, optimizer moments and the step counter
    def save(self, path) -> None:
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        tensors.update({f"opt.{k}": v for k, v in self.opt.state_dict().items()})
        meta = {"config": asdict(self.model.cfg), "train": self.cfg.to_dict(), "step": self.step}
        checkpoint.save(path, tensors, meta)

    @classmethod
    def resume(cls, path, cond: Conditioning, cfg: Optional[TrainConfig] = None) -> "Trainer":
        from cadseq.gmamba import ModelConfig

        tensors, meta = checkpoint.load(path)
        model = GMambaModel(ModelConfig(**meta["config"]))
        model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        tr = cls(model, cond, cfg or TrainConfig.from_dict(meta["train"]))
        tr.opt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        tr.step = int(meta["step"])
        return tr


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))
