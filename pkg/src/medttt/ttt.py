"""Test-time-training sequence layer.

The hidden state of the layer is the parameter set ``W`` of a small inner
model ``f``.  For every token the layer takes a gradient step on the
self-supervised loss ``||f(theta_K x; W) - theta_V x||^2`` and then emits
``z = f(theta_Q x; W_new)``.

Tokens are row vectors, so a projection is ``x @ theta.T`` and the linear
inner model ``f(k; W) = W k`` is ``k @ W.T``.  Sequences are ``T x d`` or
batched ``N x T x d``; batched sequences carry one independent fast-weight
state per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as tt
from .tensor import Tensor

HIDDEN_MODELS = ("linear", "mlp")
MODES = ("online", "batch_at_init", "minibatch")
SCANS = ("forward", "bidirectional")
OBJECTIVES = ("multiview", "reconstruction")


class ConfigError(ValueError):
    pass


class TilingError(ValueError):
    pass


@dataclass(frozen=True)
class TttConfig:
    d_model: int
    hidden_model: str = "linear"
    mode: str = "minibatch"
    minibatch_b: int = 16
    eta: float = 0.5
    scan: str = "forward"
    trainable_eta: bool = True
    objective: str = "multiview"
    keep_prob: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.d_model <= 0:
            raise ConfigError(f"d_model must be positive, got {self.d_model}")
        if self.hidden_model not in HIDDEN_MODELS:
            raise ConfigError(f"hidden_model must be one of {HIDDEN_MODELS}, got {self.hidden_model!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scan not in SCANS:
            raise ConfigError(f"scan must be one of {SCANS}, got {self.scan!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.minibatch_b <= 0:
            raise ConfigError(f"minibatch_b must be positive, got {self.minibatch_b}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")


@dataclass
class TttProjections:
    """Training view ``theta_k``, label view ``theta_v`` and test view ``theta_q`` (all d x d)."""

    theta_k: Tensor
    theta_v: Tensor
    theta_q: Tensor

    def __post_init__(self):
        d = self.theta_k.shape[0]
        for name in ("theta_k", "theta_v", "theta_q"):
            t = getattr(self, name)
            if t.shape != (d, d):
                raise tt.ShapeError(f"{name} must be {d}x{d}, got {t.shape}")

    @property
    def d(self) -> int:
        return self.theta_k.shape[0]

    @classmethod
    def identity(cls, d: int) -> "TttProjections":
        eye = np.eye(d)
        return cls(Tensor(eye), Tensor(eye), Tensor(eye))

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, std: float = 1.0, requires_grad: bool = False):
        return cls(*(Tensor(rng.normal(0.0, std, (d, d)), requires_grad=requires_grad) for _ in range(3)))

    def views(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return (
            tt.matmul(x, tt.transpose(self.theta_k)),
            tt.matmul(x, tt.transpose(self.theta_v)),
            tt.matmul(x, tt.transpose(self.theta_q)),
        )

    def tensors(self) -> list[Tensor]:
        return [self.theta_k, self.theta_v, self.theta_q]


@dataclass
class TttState:
    """Fast weights of the inner model plus the inner learning rate.

    ``weights`` is ``{"W": d x d}`` for the linear model and
    ``{"W1", "b1", "W2", "b2"}`` for the MLP; a leading batch axis is
    allowed on every entry.
    """

    weights: dict[str, Tensor]
    eta: Tensor | float = 0.5

    @property
    def hidden_model(self) -> str:
        return "linear" if set(self.weights) == {"W"} else "mlp"


def zero_state(d: int, eta: float = 0.5) -> TttState:
    return TttState({"W": Tensor(np.zeros((d, d)))}, eta)


def mlp_init(d: int, rng: np.random.Generator | None = None, std: float = 0.02, requires_grad: bool = False) -> dict[str, Tensor]:
    """Two-layer MLP weights, hidden width 4d. ``rng=None`` gives all zeros."""
    h = 4 * d
    if rng is None:
        arrs = {"W1": np.zeros((h, d)), "b1": np.zeros(h), "W2": np.zeros((d, h)), "b2": np.zeros(d)}
    else:
        arrs = {
            "W1": rng.normal(0.0, std, (h, d)),
            "b1": np.zeros(h),
            "W2": rng.normal(0.0, std, (d, h)),
            "b2": np.zeros(d),
        }
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in arrs.items()}


# ---------------------------------------------------------------------------
# inner model
# ---------------------------------------------------------------------------


def _bias(b: Tensor, like_shape: tuple[int, ...]) -> Tensor:
    # bias is (h,) or (N, h); activations are (N, b, h) or (b, h) or (h,)
    if b.ndim == 1:
        return tt.broadcast_to(b, like_shape)
    return tt.broadcast_to(tt.reshape(b, (b.shape[0],) + (1,) * (len(like_shape) - 2) + (b.shape[-1],)), like_shape)


def _apply_weight(x: Tensor, w: Tensor) -> Tensor:
    """Row-vector product ``x @ w.T`` with optional per-sample ``w``."""
    if w.ndim == 2:
        if x.ndim == 1:
            return tt.reshape(tt.matmul(tt.reshape(x, (1, -1)), tt.transpose(w)), (w.shape[0],))
        return tt.matmul(x, tt.transpose(w))
    # per-sample weights (N, out, in): x is (N, in) or (N, T, in)
    if x.ndim == 2:
        return tt.reshape(tt.matmul(w, tt.reshape(x, x.shape + (1,))), (x.shape[0], w.shape[1]))
    return tt.matmul(x, tt.transpose(w))


def mlp_preact(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    pre = _apply_weight(x, weights["W1"])
    return tt.add(pre, _bias(weights["b1"], pre.shape))


def mlp_from_preact(pre: Tensor, weights: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    act = tt.gelu(pre)
    out = _apply_weight(act, weights["W2"])
    return act, tt.add(out, _bias(weights["b2"], out.shape))


def mlp_hidden_forward(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Two-layer GELU MLP, ``W2 gelu(W1 x + b1) + b2``."""
    return mlp_from_preact(mlp_preact(x, weights), weights)[1]


def hidden_forward(x: Tensor, weights: dict[str, Tensor]) -> Tensor:
    if set(weights) == {"W"}:
        return _apply_weight(x, weights["W"])
    return mlp_hidden_forward(x, weights)


def inner_loss(weights: dict[str, Tensor] | Tensor, x_t: Tensor, proj: TttProjections) -> Tensor:
    """``||f(theta_K x_t; W) - theta_V x_t||^2`` for a single token ``x_t``."""
    if isinstance(weights, Tensor):
        weights = {"W": weights}
    x_t = tt._as_tensor(x_t)
    if x_t.shape[-1] != proj.d:
        raise tt.ShapeError(f"token dimension {x_t.shape[-1]} != projection dimension {proj.d}")
    k, v, _ = proj.views(tt.reshape(x_t, (1, proj.d)))
    pred = hidden_forward(tt.reshape(k, (proj.d,)), weights)
    if pred.shape != (proj.d,):
        raise tt.ShapeError(f"inner model output {pred.shape} != ({proj.d},)")
    return tt.sum(tt.square(tt.sub(pred, tt.reshape(v, (proj.d,)))))


def _outer(a: Tensor, b: Tensor) -> Tensor:
    """Outer product ``a b^T`` for vectors or row-batched vectors."""
    a_col = tt.reshape(a, a.shape + (1,))
    b_row = tt.reshape(b, b.shape[:-1] + (1, b.shape[-1]))
    return tt.matmul(a_col, b_row)


def inner_grad_linear(W: Tensor, x_t: Tensor, proj: TttProjections) -> Tensor:
    """Closed-form gradient ``2 (W k - v) k^T`` of the linear inner loss.

    ``x_t`` may be a single token ``(d,)`` with ``W`` ``d x d``, or a batch
    ``(N, d)`` with per-sample ``W`` ``(N, d, d)``.
    """
    x_t = tt._as_tensor(x_t)
    if x_t.shape[-1] != proj.d or W.shape[-2:] != (proj.d, proj.d):
        raise tt.ShapeError(f"inner_grad_linear: token {x_t.shape} / W {W.shape} vs d={proj.d}")
    k, v, _ = proj.views(x_t if x_t.ndim == 2 else tt.reshape(x_t, (1, proj.d)))
    if x_t.ndim == 1:
        k, v = tt.reshape(k, (proj.d,)), tt.reshape(v, (proj.d,))
    err = tt.sub(_apply_weight(k, W), v)
    return tt.mul(_outer(err, k), 2.0)


def _inner_grads(weights: dict[str, Tensor], k: Tensor, v: Tensor) -> dict[str, Tensor]:
    """Tape gradients of the inner loss w.r.t. every fast weight."""
    keep = tt.is_grad_enabled() and any(t.requires_grad for t in list(weights.values()) + [k, v])
    with tt.enable_grad():
        if keep:
            local = {n: w if w.requires_grad else Tensor(w.data, requires_grad=True) for n, w in weights.items()}
        else:
            local = {n: Tensor(w.data, requires_grad=True) for n, w in weights.items()}
        pred = hidden_forward(k, local)
        loss = tt.sum(tt.square(tt.sub(pred, v)))
        names = list(local)
        grads = tt.grad(loss, [local[n] for n in names], create_graph=keep)
    out = {}
    for n, g in zip(names, grads):
        out[n] = g if g is not None else Tensor(np.zeros(local[n].shape))
    return out


# ---------------------------------------------------------------------------
# scans
# ---------------------------------------------------------------------------


def step_online(state: TttState, x_t: Tensor, proj: TttProjections, token_index: int = 0) -> tuple[TttState, Tensor]:
    """One inner gradient step on token ``x_t`` followed by the output rule.

    ``x_t`` is ``(d,)`` or a batch ``(N, d)`` paired with per-sample weights.
    """
    x_t = tt._as_tensor(x_t)
    single = x_t.ndim == 1
    xb = tt.reshape(x_t, (1, proj.d)) if single else x_t
    k, v, q = proj.views(xb)
    if single:
        k, v, q = (tt.reshape(t, (proj.d,)) for t in (k, v, q))
    weights = state.weights
    try:
        if state.hidden_model == "linear":
            err = tt.sub(_apply_weight(k, weights["W"]), v)
            grads = {"W": tt.mul(_outer(err, k), 2.0)}
        else:
            grads = _inner_grads(weights, k, v)
        new = {n: tt.sub(w, tt.mul(grads[n], state.eta)) for n, w in weights.items()}
        z = hidden_forward(q, new)
    except tt.NumericError as exc:
        raise tt.NumericError(f"non-finite inner update at token {token_index}") from exc
    return TttState(new, state.eta), z


def _batched(seq: Tensor) -> tuple[Tensor, bool]:
    seq = tt._as_tensor(seq)
    if seq.ndim == 2:
        return tt.reshape(seq, (1,) + seq.shape), True
    if seq.ndim != 3:
        raise tt.ShapeError(f"token sequence must be T x d or N x T x d, got {seq.shape}")
    return seq, False


def _expand_weights(weights: dict[str, Tensor], n: int) -> dict[str, Tensor]:
    out = {}
    for name, w in weights.items():
        out[name] = tt.broadcast_to(w, (n,) + w.shape) if w.ndim in (1, 2) else w
    return out


def _unbatch(z: Tensor, squeeze: bool) -> Tensor:
    return tt.reshape(z, z.shape[1:]) if squeeze else z


def forward_online(seq: Tensor, proj: TttProjections, state: TttState) -> Tensor:
    """Sequential scan: one inner step per token."""
    xs, squeeze = _batched(seq)
    n, T, d = xs.shape
    st = TttState(_expand_weights(state.weights, n), state.eta)
    outs = []
    for t in range(T):
        st, z = step_online(st, xs[:, t, :], proj, token_index=t)
        outs.append(tt.reshape(z, (n, 1, d)))
    return _unbatch(tt.concat(outs, axis=1), squeeze)


def forward_batch_at_init(seq: Tensor, proj: TttProjections, eta=0.5, W0: Tensor | None = None) -> Tensor:
    """Linear inner model with every inner gradient taken at ``W0`` (zero by default).

    ``W_t = W_{t-1} - eta * grad(W0; x_t)`` and ``z_t = W_t theta_Q x_t``.
    """
    xs, squeeze = _batched(seq)
    n, T, d = xs.shape
    if d != proj.d:
        raise tt.ShapeError(f"token dimension {d} != projection dimension {proj.d}")
    W0 = Tensor(np.zeros((d, d))) if W0 is None else W0
    if W0.shape[-2:] != (d, d):
        raise ConfigError("batch-at-init needs the linear inner model (W must be d x d)")
    W0b = _expand_weights({"W": W0}, n)["W"]
    W = W0b
    outs = []
    for t in range(T):
        g = inner_grad_linear(W0b, xs[:, t, :], proj)
        W = tt.sub(W, tt.mul(g, eta))
        q = tt.matmul(xs[:, t, :], tt.transpose(proj.theta_q))
        outs.append(tt.reshape(_apply_weight(q, W), (n, 1, d)))
    return _unbatch(tt.concat(outs, axis=1), squeeze)


_TRIL_CACHE: dict[int, np.ndarray] = {}


def _tril(b: int) -> np.ndarray:
    m = _TRIL_CACHE.get(b)
    if m is None:
        m = np.tril(np.ones((b, b)))
        m.flags.writeable = False
        _TRIL_CACHE[b] = m
    return m


def _causal_scores(a: Tensor, c: Tensor, plus_one: bool = False) -> Tensor:
    """``tril(a c^T [+ 1])`` over the token axis of ``(N, b, m)`` inputs."""
    s = tt.matmul(a, tt.transpose(c))
    if plus_one:
        s = tt.add(s, 1.0)
    mask = np.broadcast_to(_tril(s.shape[-1]), s.shape)
    return tt.mul(s, Tensor._wrap(np.array(mask)))


def _group_linear(W: Tensor, Wg: Tensor, k: Tensor, v: Tensor, q: Tensor, eta) -> tuple[Tensor, Tensor]:
    """Linear inner model on one group; gradients evaluated at ``Wg``."""
    two_eta = tt.mul(eta, 2.0)
    err = tt.sub(tt.matmul(k, tt.transpose(Wg)), v)
    scores = _causal_scores(q, k)
    z = tt.sub(tt.matmul(q, tt.transpose(W)), tt.mul(tt.matmul(scores, err), two_eta))
    W_next = tt.sub(W, tt.mul(tt.matmul(tt.transpose(err), k), two_eta))
    return W_next, z


def _group_mlp(w: dict[str, Tensor], wg: dict[str, Tensor], k: Tensor, v: Tensor, q: Tensor, eta) -> tuple[dict[str, Tensor], Tensor]:
    """MLP inner model on one group; gradients evaluated at ``wg``.

    The per-token gradients of the two linear layers are outer products of
    tape gradients at the pre-activation / output with the layer inputs, so
    the cumulative within-group weights never need to be materialized.
    """
    keep = tt.is_grad_enabled() and any(t.requires_grad for t in list(wg.values()) + [k, v])
    with tt.enable_grad():
        if keep:
            local = wg
            kk = k
        else:
            local = {n: Tensor(t.data) for n, t in wg.items()}
            kk = Tensor(k.data)
        pre = mlp_preact(kk, local)
        if not keep:
            pre = Tensor(pre.data, requires_grad=True)
        act, out = mlp_from_preact(pre, local)
        loss = tt.sum(tt.square(tt.sub(out, v if keep else Tensor(v.data))))
        d_pre, d_out = tt.grad(loss, [pre, out], create_graph=keep)
    if not keep:
        act = act.detach()
    # z_i = f(q_i; w - eta * sum_{j<=i} grad_j)
    pre_q = tt.sub(mlp_preact(q, w), tt.mul(tt.matmul(_causal_scores(q, k, plus_one=True), d_pre), eta))
    act_q = tt.gelu(pre_q)
    z = tt.sub(
        _apply_weight(act_q, w["W2"]) + _bias(w["b2"], (q.shape[0], q.shape[1], w["W2"].shape[-2])),
        tt.mul(tt.matmul(_causal_scores(act_q, act, plus_one=True), d_out), eta),
    )
    new = {
        "W1": tt.sub(w["W1"], tt.mul(tt.matmul(tt.transpose(d_pre), k), eta)),
        "b1": tt.sub(w["b1"], tt.mul(tt.sum(d_pre, axis=1), eta)),
        "W2": tt.sub(w["W2"], tt.mul(tt.matmul(tt.transpose(d_out), act), eta)),
        "b2": tt.sub(w["b2"], tt.mul(tt.sum(d_out, axis=1), eta)),
    }
    return new, z


def forward_minibatch(seq: Tensor, proj: TttProjections, state: TttState, b: int, at_init: bool = False) -> Tensor:
    """Mini-batch scan over consecutive groups of ``b`` tokens.

    Within a group every inner gradient is taken at the weights held at the
    group start (or at the initial weights when ``at_init``); token ``i``
    of the group sees the start weights minus the summed updates of tokens
    ``<= i``.  The next group starts from the fully updated weights.
    """
    xs, squeeze = _batched(seq)
    n, T, d = xs.shape
    if b <= 0 or T % b:
        raise TilingError(f"sequence length {T} is not divisible by mini-batch size {b}")
    k_all, v_all, q_all = proj.views(xs)
    w = _expand_weights(state.weights, n)
    w0 = w
    linear = state.hidden_model == "linear"
    outs = []
    for g in range(T // b):
        sl = (slice(None), slice(g * b, (g + 1) * b), slice(None))
        k, v, q = k_all[sl], v_all[sl], q_all[sl]
        wg = w0 if at_init else w
        try:
            if linear:
                W_next, z = _group_linear(w["W"], wg["W"], k, v, q, state.eta)
                w = {"W": W_next}
            else:
                w, z = _group_mlp(w, wg, k, v, q, state.eta)
        except tt.NumericError as exc:
            raise tt.NumericError(f"non-finite inner update in tokens {g * b}..{(g + 1) * b - 1}") from exc
        outs.append(z)
    return _unbatch(tt.concat(outs, axis=1), squeeze)


def ttt_scan(seq: Tensor, proj: TttProjections, state: TttState, cfg: TttConfig) -> Tensor:
    """Dispatch on ``cfg.mode``; every call starts from ``state`` (no leakage)."""
    if cfg.mode == "online":
        return forward_online(seq, proj, state)
    if cfg.mode == "batch_at_init":
        if state.hidden_model != "linear":
            raise ConfigError("batch_at_init mode supports only the linear inner model")
        return forward_batch_at_init(seq, proj, state.eta, W0=state.weights["W"])
    return forward_minibatch(seq, proj, state, cfg.minibatch_b)


def corrupt(seq: Tensor, keep_prob: float, rng: np.random.Generator) -> Tensor:
    """Bernoulli zero-mask used by the reconstruction objective."""
    mask = (rng.random(seq.shape) < keep_prob).astype(np.float64)
    return tt.mul(seq, Tensor._wrap(mask))


# ---------------------------------------------------------------------------
# layer with norm + residual wrapper
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = tt.broadcast_to(tt.mean(x, axis=-1, keepdims=True), x.shape)
    xc = tt.sub(x, mu)
    var = tt.mean(tt.square(xc), axis=-1, keepdims=True)
    inv = tt.div(1.0, tt.sqrt(tt.add(var, eps)))
    xn = tt.mul(xc, tt.broadcast_to(inv, x.shape))
    return tt.add(tt.mul(xn, tt.broadcast_to(gain, x.shape)), tt.broadcast_to(bias, x.shape))


@dataclass
class TttLayer:
    """Pre-norm residual TTT block with its own projections and fast-weight init."""

    cfg: TttConfig
    proj: TttProjections
    init_weights: dict[str, Tensor]
    log_eta: Tensor | None  # trainable eta is stored in log space so it stays positive
    ln_gain: Tensor
    ln_bias: Tensor
    _calls: int = field(default=0, repr=False)

    @classmethod
    def create(cls, cfg: TttConfig, rng: np.random.Generator, proj_std: float = 0.02) -> "TttLayer":
        d = cfg.d_model
        proj = TttProjections.random(d, rng, std=proj_std, requires_grad=True)
        if cfg.hidden_model == "linear":
            weights = {"W": Tensor(np.zeros((d, d)), requires_grad=True)}
        else:
            weights = mlp_init(d, rng, requires_grad=True)
        log_eta = Tensor(np.log(cfg.eta), requires_grad=True) if cfg.trainable_eta else None
        return cls(cfg, proj, weights, log_eta, Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("theta_k", self.proj.theta_k), ("theta_v", self.proj.theta_v), ("theta_q", self.proj.theta_q)]
        out += [(f"w0_{n}", w) for n, w in self.init_weights.items()]
        if self.log_eta is not None:
            out.append(("log_eta", self.log_eta))
        out += [("ln_gain", self.ln_gain), ("ln_bias", self.ln_bias)]
        return out

    @property
    def eta(self) -> Tensor | float:
        return self.cfg.eta if self.log_eta is None else tt.exp(self.log_eta)

    def state(self) -> TttState:
        return TttState(dict(self.init_weights), self.eta)

    def scan(self, seq: Tensor) -> Tensor:
        cfg = self.cfg
        if cfg.objective == "reconstruction":
            rng = np.random.default_rng([cfg.seed, self._calls])
            self._calls += 1
            return self._scan_reconstruction(seq, rng)
        if cfg.scan == "forward":
            return ttt_scan(seq, self.proj, self.state(), cfg)
        axis = seq.ndim - 2
        fwd = ttt_scan(seq, self.proj, self.state(), cfg)
        bwd = tt.flip(ttt_scan(tt.flip(seq, axis), self.proj, self.state(), cfg), axis)
        return tt.mul(tt.add(fwd, bwd), 0.5)

    def _scan_reconstruction(self, seq: Tensor, rng: np.random.Generator) -> Tensor:
        # training view sees the corrupted tokens, label and test views the clean ones
        noisy = corrupt(seq, self.cfg.keep_prob, rng)
        theta_k = self.proj.theta_k
        mixed = TttProjections(theta_k, self.proj.theta_v, self.proj.theta_q)
        xs, squeeze = _batched(seq)
        ns, _ = _batched(noisy)
        n, T, d = xs.shape
        st = TttState(_expand_weights(self.init_weights, n), self.eta)
        outs = []
        for t in range(T):
            k = tt.matmul(ns[:, t, :], tt.transpose(theta_k))
            v = tt.matmul(xs[:, t, :], tt.transpose(mixed.theta_v))
            q = tt.matmul(xs[:, t, :], tt.transpose(mixed.theta_q))
            if st.hidden_model == "linear":
                err = tt.sub(_apply_weight(k, st.weights["W"]), v)
                grads = {"W": tt.mul(_outer(err, k), 2.0)}
            else:
                grads = _inner_grads(st.weights, k, v)
            st = TttState({nm: tt.sub(w, tt.mul(grads[nm], st.eta)) for nm, w in st.weights.items()}, st.eta)
            outs.append(tt.reshape(hidden_forward(q, st.weights), (n, 1, d)))
        return _unbatch(tt.concat(outs, axis=1), squeeze)

    def __call__(self, seq: Tensor) -> Tensor:
        """``seq + scan(layer_norm(seq))``; shape-preserving."""
        normed = layer_norm(seq, self.ln_gain, self.ln_bias)
        return tt.add(seq, self.scan(normed))


def ttt_block(features: Tensor, layer: TttLayer) -> Tensor:
    return layer(features)


def with_config(cfg: TttConfig, **changes) -> TttConfig:
    return replace(cfg, **changes)
