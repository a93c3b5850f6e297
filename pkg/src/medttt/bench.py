"""Wall-clock scaling of the TTT scans against attention references."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .tensor import Tensor
from .ttt import TttProjections, forward_minibatch, forward_online, zero_state

IMPLS = ("ttt_minibatch", "ttt_online", "linear_attn", "softmax_attn")
BENCH_HEADER = "impl,T,b,wall_ns"
MIN_TICKS = 100


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BenchRecord:
    impl: str
    T: int
    b: int
    wall_ns: int

    def __post_init__(self):
        if self.impl not in IMPLS:
            raise BenchError(f"unknown impl {self.impl!r}")
        if self.wall_ns <= 0:
            raise BenchError(f"wall_ns must be positive, got {self.wall_ns}")

    def csv_row(self) -> str:
        return f"{self.impl},{self.T},{self.b},{self.wall_ns}"


def causal_linear_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, chunk: int = 256) -> np.ndarray:
    """z_t = sum_{s<=t} v_s (k_s . q_t), chunkwise with a carried d x d state."""
    T, d = q.shape
    out = np.empty((T, v.shape[1]))
    state = np.zeros((v.shape[1], d))
    for s in range(0, T, chunk):
        qc, kc, vc = q[s : s + chunk], k[s : s + chunk], v[s : s + chunk]
        scores = np.tril(qc @ kc.T)
        out[s : s + chunk] = qc @ state.T + scores @ vc
        state += vc.T @ kc
    return out


def causal_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float, chunk: int = 256) -> np.ndarray:
    """Quadratic reference: each query chunk attends to every earlier key."""
    T = q.shape[0]
    out = np.empty((T, v.shape[1]))
    for s in range(0, T, chunk):
        e = min(s + chunk, T)
        logits = (q[s:e] @ k[:e].T) * scale
        rows = np.arange(s, e)[:, None]
        logits[np.arange(e)[None, :] > rows] = -np.inf
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        out[s:e] = w @ v[:e]
    return out


def _workload(impl: str, T: int, b: int, d: int, seed: int) -> Callable[[], object]:
    rng = np.random.default_rng([seed, T])
    x = rng.normal(size=(T, d))
    proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
    if impl in ("ttt_minibatch", "ttt_online"):
        seq = Tensor(x)
        state = zero_state(d, 0.5 / max(b, 1) / d)
        if impl == "ttt_minibatch":
            return lambda: forward_minibatch(seq, proj, state, b)
        return lambda: forward_online(seq, proj, state)
    k, v, q = (x @ t.data.T for t in (proj.theta_k, proj.theta_v, proj.theta_q))
    if impl == "linear_attn":
        return lambda: causal_linear_attention(q, k, v)
    return lambda: causal_softmax_attention(q, k, v, 1.0 / np.sqrt(d))


def time_forward(fn: Callable[[], object], reps: int = 5, warmup: int = 2) -> int:
    """Median wall time in ns over ``reps`` runs after ``warmup`` untimed runs."""
    if reps < 5:
        raise BenchError(f"need at least 5 repetitions, got {reps}")
    resolution = time.get_clock_info("perf_counter").resolution
    with tt.no_grad():
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
    med = int(statistics.median(times))
    if med * 1e-9 < MIN_TICKS * resolution:
        raise BenchError(f"run of {med} ns is under {MIN_TICKS} timer ticks; use a larger T")
    return max(med, 1)


def run_bench(
    impl: str,
    Ts: Sequence[int],
    b: int = 16,
    d: int = 8,
    reps: int = 5,
    warmup: int = 2,
    seed: int = 0,
) -> list[BenchRecord]:
    if impl not in IMPLS:
        raise BenchError(f"unknown impl {impl!r}; expected one of {IMPLS}")
    Ts = sorted(int(t) for t in Ts)
    if len(Ts) < 2 or Ts[-1] < 16 * Ts[0]:
        raise BenchError(f"T values must span at least 16x, got {Ts[0]}..{Ts[-1]}")
    if impl == "ttt_minibatch" and any(t % b for t in Ts):
        raise BenchError(f"every T must be a multiple of b={b}")
    return [BenchRecord(impl, T, b, time_forward(_workload(impl, T, b, d, seed), reps, warmup)) for T in Ts]


def loglog_slope(records: Sequence[BenchRecord]) -> float:
    """Least-squares slope of log(wall) against log(T)."""
    T = np.log([r.T for r in records])
    w = np.log([r.wall_ns for r in records])
    return float(np.polyfit(T, w, 1)[0])


def b_invariance(T: int = 64, d: int = 8, seed: int = 0) -> float:
    """Max output change from doubling b in batch-at-init mode (expected ~0)."""
    rng = np.random.default_rng(seed)
    seq = Tensor(rng.normal(size=(T, d)))
    proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
    state = zero_state(d, 0.5)
    with tt.no_grad():
        a = forward_minibatch(seq, proj, state, T // 4, at_init=True).data
        c = forward_minibatch(seq, proj, state, T // 2, at_init=True).data
    return float(np.max(np.abs(a - c)))
