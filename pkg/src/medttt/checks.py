"""Seeded equivalence and gradient checks shared by ``oracle-check`` and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tt
from .oracles import OracleConfig, linear_attention, nadaraya_watson, softmax_attention
from .tensor import Tensor
from .ttt import (
    TttProjections,
    TttState,
    forward_batch_at_init,
    forward_minibatch,
    forward_online,
    inner_grad_linear,
    inner_loss,
    mlp_init,
    step_online,
    zero_state,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_dev: float
    tol: float
    worst_seed: int

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max deviation {self.max_dev:.3e} (tol {self.tol:.0e}, worst seed {self.worst_seed})"


def _collect(name: str, tol: float, seeds: Sequence[int], dev: Callable[[int], float]) -> CheckResult:
    worst, worst_seed = 0.0, -1
    for s in seeds:
        e = dev(s)
        e = e if np.isfinite(e) else np.inf
        if worst_seed < 0 or e > worst:
            worst, worst_seed = e, s
    return CheckResult(name, bool(worst < tol or worst == 0.0), float(worst), tol, worst_seed)


def random_instance(seed: int, max_T: int = 64, max_d: int = 16, proj_std: float | None = None):
    """Random ``(seq T x d, projections)``; sizes are drawn from the seed."""
    rng = np.random.default_rng(seed)
    T = int(rng.integers(1, max_T + 1))
    d = int(rng.integers(1, max_d + 1))
    std = 1.0 / np.sqrt(d) if proj_std is None else proj_std
    seq = Tensor(rng.normal(size=(T, d)))
    return seq, TttProjections.random(d, rng, std=std)


# ---------------------------------------------------------------------------
# equivalences
# ---------------------------------------------------------------------------


def check_linear_attention(n: int = 1000, eta: float = 0.5, seed0: int = 0) -> CheckResult:
    """Batch-at-init scan (linear f, W0 = 0) against the explicit linear-attention sum."""

    def dev(s):
        seq, proj = random_instance(seed0 + s)
        with tt.no_grad():
            z = forward_batch_at_init(seq, proj, eta=eta).data
        return float(np.max(np.abs(z - linear_attention(seq, proj))))

    return _collect(f"batch_at_init == linear attention (eta={eta})", 1e-9, range(n), dev)


def check_nadaraya_watson(n: int = 200, scaled_nw: bool = True, scaled_softmax: bool = True, seed0: int = 10_000) -> CheckResult:
    """Kernel regression with an exponential kernel against causal softmax attention."""

    def dev(s):
        seq, proj = random_instance(seed0 + s, max_T=32)
        d = proj.d
        nw = nadaraya_watson(seq, proj, OracleConfig(d, scaled_nw), logit_shift=3.0)
        sm = softmax_attention(seq, proj, OracleConfig(d, scaled_softmax))
        return float(np.max(np.abs(nw - sm)))

    tag = "matched" if scaled_nw == scaled_softmax else "mismatched"
    return _collect(f"Nadaraya-Watson == softmax attention ({tag} scaling)", 1e-12, range(n), dev)


def check_minibatch_b1_online(n: int = 50, hidden_model: str = "linear", seed0: int = 20_000) -> CheckResult:
    """Mini-batch scan with b = 1 reproduces the online trajectory."""

    def dev(s):
        rng = np.random.default_rng(seed0 + s)
        T, d = int(rng.integers(1, 25)), int(rng.integers(1, 9))
        seq = Tensor(rng.normal(size=(T, d)))
        if hidden_model == "linear":
            proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
            state = TttState({"W": Tensor(rng.normal(0, 0.3, (d, d)))}, 0.05)
        else:
            proj = TttProjections.random(d, rng, std=0.3)
            state = TttState(mlp_init(d, rng, std=0.3), 0.02)
        with tt.no_grad():
            a = forward_minibatch(seq, proj, state, 1).data
            b = forward_online(seq, proj, state).data
        return float(np.max(np.abs(a - b)))

    return _collect(f"minibatch b=1 == online ({hidden_model})", 1e-10, range(n), dev)


def check_minibatch_bT_linear_attention(n: int = 100, seed0: int = 30_000) -> CheckResult:
    """One group spanning the whole sequence, gradients at W0 = 0, eta = 1/2."""

    def dev(s):
        seq, proj = random_instance(seed0 + s)
        T = seq.shape[0]
        with tt.no_grad():
            z = forward_minibatch(seq, proj, zero_state(proj.d, 0.5), T, at_init=True).data
        return float(np.max(np.abs(z - linear_attention(seq, proj))))

    return _collect("minibatch b=T at init == linear attention", 1e-10, range(n), dev)


def check_eta_zero_freezes(n: int = 50, seed0: int = 40_000) -> CheckResult:
    """With eta = 0 the fast weights after every online step equal W0 bit for bit."""

    def dev(s):
        rng = np.random.default_rng(seed0 + s)
        T, d = int(rng.integers(1, 33)), int(rng.integers(1, 9))
        seq = Tensor(rng.normal(size=(T, d)))
        proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
        W0 = rng.normal(size=(d, d))
        st = TttState({"W": Tensor(W0)}, 0.0)
        worst = 0.0
        with tt.no_grad():
            for t in range(T):
                st, _ = step_online(st, seq[t], proj, t)
                worst = max(worst, float(np.max(np.abs(st.weights["W"].data - W0))))
        return worst

    return _collect("eta=0 freezes W", 0.0, range(n), dev)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def finite_difference(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f`` w.r.t. every entry of ``arr`` (mutated in place, then restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6) -> float:
    """Worst relative error between tape and central-difference gradients of ``sum(fn(*inputs))``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value():
        with tt.no_grad():
            return float(np.sum(fn(*[Tensor(a.copy()) for a in arrays]).data))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    grads = tt.grad(tt.sum(out), leaves)
    worst = 0.0
    for a, g in zip(arrays, grads):
        num = finite_difference(value, a, eps)
        ana = np.zeros_like(a) if g is None else g.data
        worst = max(worst, rel_error(ana, num))
    return worst


def check_inner_grad_linear(n: int = 100, seed0: int = 50_000) -> CheckResult:
    """Closed form 2 (W k - v) k^T against central differences of the inner loss."""

    def dev(s):
        rng = np.random.default_rng(seed0 + s)
        d = int(rng.integers(1, 7))
        proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
        W = rng.normal(size=(d, d))
        x = Tensor(rng.normal(size=d))
        with tt.no_grad():
            ana = inner_grad_linear(Tensor(W), x, proj).data
            num = finite_difference(lambda: float(inner_loss(Tensor(W.copy()), x, proj).data), W)
        return rel_error(ana, num)

    return _collect("inner_grad_linear vs finite differences", 1e-6, range(n), dev)


def check_inner_grad_mlp(n: int = 100, seed0: int = 60_000) -> CheckResult:
    """Tape gradient of the MLP inner loss against central differences, every fast weight."""

    def dev(s):
        rng = np.random.default_rng(seed0 + s)
        d = int(rng.integers(1, 5))
        proj = TttProjections.random(d, rng, std=1.0 / np.sqrt(d))
        w = {k: v.data.copy() for k, v in mlp_init(d, rng, std=0.5).items()}
        x = Tensor(rng.normal(size=d))
        leaves = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
        grads = tt.grad(inner_loss(leaves, x, proj), list(leaves.values()))
        worst = 0.0
        for (name, arr), g in zip(w.items(), grads):
            num = finite_difference(lambda: float(inner_loss({k: Tensor(v.copy()) for k, v in w.items()}, x, proj).data), arr)
            worst = max(worst, rel_error(g.data, num))
        return worst

    return _collect("MLP inner gradient vs finite differences", 1e-5, range(n), dev)


def equivalence_suite(scale: float = 1.0, eta: float = 0.5, scale_mismatch: bool = False) -> list[CheckResult]:
    """The oracle-check suite; ``eta`` and ``scale_mismatch`` inject faults for negative controls."""
    k = lambda m: max(1, int(round(m * scale)))  # noqa: E731
    return [
        check_linear_attention(k(1000), eta=eta),
        check_nadaraya_watson(k(200), scaled_nw=not scale_mismatch),
        check_minibatch_b1_online(k(50), "linear"),
        check_minibatch_b1_online(k(50), "mlp"),
        check_minibatch_bT_linear_attention(k(100)),
        check_eta_zero_freezes(k(50)),
        check_inner_grad_linear(k(100)),
        check_inner_grad_mlp(k(50)),
    ]


def model_gradcheck(model, images, masks, names: Sequence[str] | None = None, per_param: int = 4, seed: int = 0, eps: float = 1e-6) -> dict[str, float]:
    """Relative error of tape vs central-difference gradients of the training loss.

    Checks ``per_param`` randomly chosen entries of each named parameter
    (all parameters by default).  Returns ``{name: relative error}``.
    """
    from .losses import combined_loss

    names = list(model.params) if names is None else list(names)
    loss = combined_loss(model(images).probs, masks)
    leaves = [model.params[n] for n in names]
    grads = tt.grad(loss, leaves)
    rng = np.random.default_rng(seed)
    out = {}
    for name, g in zip(names, grads):
        base = model.params[name].data.copy()
        flat_idx = rng.choice(base.size, size=min(per_param, base.size), replace=False)
        ana, num = [], []
        for i in flat_idx:
            vals = []
            for sign in (1.0, -1.0):
                arr = base.copy().reshape(-1)
                arr[i] += sign * eps
                model.set_param(name, arr.reshape(base.shape))
                with tt.no_grad():
                    vals.append(combined_loss(model(images).probs, masks).item())
            num.append((vals[0] - vals[1]) / (2 * eps))
            ana.append(0.0 if g is None else g.data.reshape(-1)[i])
        model.set_param(name, base)
        out[name] = rel_error(np.array(ana), np.array(num), floor=1e-7)
    return out
