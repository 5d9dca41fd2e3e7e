"""Parameter containers, standard layers and the AdamW optimizer."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from cadseq.numerics import tensor as T
from cadseq.numerics.tensor import Tensor


class Module:
    """Parameters are discovered by walking attributes: Tensors that require grad,
    sub-modules and lists of sub-modules. Names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in params.items():
            if tuple(state[k].shape) != p.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {tuple(state[k].shape)} vs parameter {p.shape}")
            p.data = np.asarray(state[k], dtype=p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, zero: bool = False):
        scale = 0.0 if zero else 1.0 / np.sqrt(d_in)
        self.weight = param(rng.normal(0.0, 1.0, (d_in, d_out)) * scale)
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class MLP(Module):
    """Linear layers with SiLU between them (none after the last)."""

    def __init__(self, widths: list[int], rng: np.random.Generator, zero_last: bool = False):
        n = len(widths) - 1
        self.layers = [Linear(widths[i], widths[i + 1], rng, zero=zero_last and i == n - 1) for i in range(n)]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.silu(x)
        return x


class RMSNorm(Module):
    def __init__(self, d: int, eps: float = 1e-6):
        self.gain = param(np.ones(d))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return T.rms_norm(x, self.gain, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = param(rng.normal(0.0, std, (n, d)))

    def __call__(self, idx) -> Tensor:
        return T.embedding_lookup(self.weight, idx)


def clip_grad_norm(params: list[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = T.parameters_grad_norm(params)
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class AdamW:
    def __init__(
        self,
        named_params: list[tuple[str, Tensor]],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.95, 0.99),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(named_params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params}

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                p.data = p.data * (1 - self.lr * self.weight_decay)
            p.data = (p.data - self.lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        out["step"] = np.array([self.step_count], dtype=np.int64)
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.step_count = int(state["step"][0])
        for k, _ in self.params:
            self.m[k] = np.array(state[f"m.{k}"])
            self.v[k] = np.array(state[f"v.{k}"])


def init_rng(seed: Optional[int]) -> np.random.Generator:
    return np.random.default_rng(seed)
