"""Naive causal attention references.

These are deliberately O(T^2) double loops over plain numpy arrays and share
no code with the TTT scans they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OracleConfig:
    d_model: int
    scale_by_sqrt_dk: bool = True

    @property
    def logit_scale(self) -> float:
        return 1.0 / math.sqrt(self.d_model) if self.scale_by_sqrt_dk else 1.0


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _views(seq, proj):
    xs = _arr(seq)
    tk, tv, tq = (_arr(t) for t in (proj.theta_k, proj.theta_v, proj.theta_q))
    T = xs.shape[0]
    keys = [tk @ xs[s] for s in range(T)]
    vals = [tv @ xs[s] for s in range(T)]
    queries = [tq @ xs[s] for s in range(T)]
    return keys, vals, queries


def linear_attention(seq, proj) -> np.ndarray:
    """z_t = sum_{s<=t} (theta_V x_s)(theta_K x_s)^T (theta_Q x_t)."""
    keys, vals, queries = _views(seq, proj)
    T = len(keys)
    out = np.zeros((T, vals[0].shape[0]))
    for t in range(T):
        acc = np.zeros_like(out[t])
        for s in range(t + 1):
            acc += vals[s] * float(keys[s] @ queries[t])
        out[t] = acc
    return out


def softmax_attention(seq, proj, cfg: OracleConfig) -> np.ndarray:
    """Causal softmax attention with logits (theta_K x_s)^T (theta_Q x_t) [/ sqrt(d_k)]."""
    keys, vals, queries = _views(seq, proj)
    T = len(keys)
    out = np.zeros((T, vals[0].shape[0]))
    for t in range(T):
        logits = np.array([float(keys[s] @ queries[t]) * cfg.logit_scale for s in range(t + 1)])
        logits -= logits.max()
        w = np.exp(logits)
        w /= w.sum()
        for s in range(t + 1):
            out[t] += w[s] * vals[s]
    return out


def nadaraya_watson(seq, proj, cfg: OracleConfig, logit_shift: float = 0.0) -> np.ndarray:
    """Kernel-weighted average of labels y_s = theta_V x_s, queried at x = x_t.

    The kernel is kappa(x, x_s) = exp((theta_K x_s)^T (theta_Q x) [/ sqrt(d_k)] + shift).
    ``logit_shift`` is a constant added to every logit; it cancels in the ratio.
    """
    keys, vals, queries = _views(seq, proj)
    T = len(keys)
    out = np.zeros((T, vals[0].shape[0]))
    for t in range(T):
        logits = [float(keys[s] @ queries[t]) * cfg.logit_scale + logit_shift for s in range(t + 1)]
        # factor exp(max) out of numerator and denominator alike
        top = max(logits)
        num = np.zeros_like(out[t])
        den = 0.0
        for s in range(t + 1):
            kappa = math.exp(logits[s] - top)
            num += kappa * vals[s]
            den += kappa
        out[t] = num / den
    return out
