"""Wall-clock and peak-memory scaling of the denoiser over sequence length."""

from __future__ import annotations

import csv
import io as _io
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from cadseq.gmamba import GMambaModel, ModelConfig, unconditional
from cadseq.numerics import tensor as T

DEFAULT_LENGTHS = (512, 1024, 2048, 4096)


@dataclass(frozen=True)
class BenchRow:
    L: int
    seconds: float
    peak_bytes: int
    tape_peak_bytes: int


def _traced_peak(fn) -> int:
    tracemalloc.start()
    try:
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def bench_denoise(lengths=DEFAULT_LENGTHS, d_e: int = 64, n_blocks: int = 4, repeats: int = 9,
                  seed: int = 0, variant: str = "gmamba") -> list[BenchRow]:
    """Per length: best-of-``repeats`` time of one inference-mode denoiser call, its traced
    peak allocation, and the traced peak of the same call recording the tape (training mode).

    Timing rounds visit every length in turn, so slow periods on a shared machine
    hit all lengths alike instead of skewing one of them.
    """
    cfg = ModelConfig(n_blocks=n_blocks, d_e=d_e, n_ts=max(lengths), variant=variant)
    model = GMambaModel(cfg, seed)
    rng = np.random.default_rng(seed)
    inputs = {L: (T.Tensor(rng.standard_normal((1, L, d_e))), unconditional(1, L)) for L in lengths}
    best = {L: float("inf") for L in lengths}
    peak, tape = {}, {}
    for L, (z, c) in inputs.items():
        tape[L] = _traced_peak(lambda: model.denoise(z, 25, c))
    with T.no_grad():
        for L, (z, c) in inputs.items():
            model.denoise(z, 25, c)  # warm-up
            peak[L] = _traced_peak(lambda: model.denoise(z, 25, c))
        for _ in range(repeats):
            for L, (z, c) in inputs.items():
                t0 = time.perf_counter()
                model.denoise(z, 25, c)
                best[L] = min(best[L], time.perf_counter() - t0)
    return [BenchRow(L, best[L], peak[L], tape[L]) for L in lengths]


def ratios(rows: list[BenchRow]) -> list[tuple[int, float, float, float]]:
    """(L, time, inference memory and tape memory of each row over the previous row)."""
    return [(b.L, b.seconds / a.seconds, b.peak_bytes / a.peak_bytes, b.tape_peak_bytes / a.tape_peak_bytes)
            for a, b in zip(rows, rows[1:])]


def to_csv(rows: list[BenchRow]) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["L", "time_s", "peak_bytes", "tape_peak_bytes"])
    for r in rows:
        w.writerow([r.L, f"{r.seconds:.6f}", r.peak_bytes, r.tape_peak_bytes])
    return buf.getvalue()
