import numpy as np
import pytest

from medttt import tensor as tt
from medttt.checks import finite_difference, rel_error
from medttt.oracles import linear_attention
from medttt.tensor import Tensor
from medttt.ttt import (
    ConfigError,
    TilingError,
    TttConfig,
    TttLayer,
    TttProjections,
    TttState,
    forward_batch_at_init,
    forward_minibatch,
    forward_online,
    inner_grad_linear,
    inner_loss,
    mlp_hidden_forward,
    mlp_init,
    step_online,
    ttt_block,
    zero_state,
)


def proj1(k=1.0, v=1.0, q=1.0):
    return TttProjections(Tensor([[k]]), Tensor([[v]]), Tensor([[q]]))


def rand_proj(rng, d, std=None):
    return TttProjections.random(d, rng, std=1.0 / np.sqrt(d) if std is None else std)


# ---------------------------------------------------------------------------
# inner loss and gradient
# ---------------------------------------------------------------------------


def test_inner_loss_hand_value():
    assert inner_loss(Tensor([[0.5]]), Tensor([2.0]), proj1()).item() == 1.0


def test_inner_loss_zero_case():
    d = 3
    proj = TttProjections(Tensor(np.eye(d)), Tensor(np.zeros((d, d))), Tensor(np.eye(d)))
    assert inner_loss(Tensor(np.zeros((d, d))), Tensor([1.0, -2.0, 0.5]), proj).item() == 0.0


def test_inner_loss_matches_scalar_loop():
    rng = np.random.default_rng(0)
    d = 4
    proj = rand_proj(rng, d)
    W, x = rng.normal(size=(d, d)), rng.normal(size=d)
    tk, tv = proj.theta_k.data, proj.theta_v.data
    k = [sum(tk[i, j] * x[j] for j in range(d)) for i in range(d)]
    v = [sum(tv[i, j] * x[j] for j in range(d)) for i in range(d)]
    ref = sum((sum(W[i, j] * k[j] for j in range(d)) - v[i]) ** 2 for i in range(d))
    assert abs(inner_loss(Tensor(W), Tensor(x), proj).item() - ref) < 1e-12


def test_inner_loss_shape_error():
    with pytest.raises(tt.ShapeError):
        inner_loss(Tensor(np.zeros((2, 2))), Tensor([1.0, 2.0, 3.0]), TttProjections.identity(2))


def test_inner_grad_linear_examples():
    assert inner_grad_linear(Tensor([[0.5]]), Tensor([2.0]), proj1()).item() == -4.0
    g = inner_grad_linear(Tensor(np.zeros((2, 2))), Tensor([1.0, 0.0]), TttProjections.identity(2))
    assert np.array_equal(g.data, -2 * np.array([[1.0, 0], [0, 0]]))
    with pytest.raises(tt.ShapeError):
        inner_grad_linear(Tensor(np.zeros((3, 3))), Tensor([1.0, 0.0]), TttProjections.identity(2))


def test_inner_grad_linear_matches_finite_differences():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = 4
        proj = rand_proj(rng, d)
        W, x = rng.normal(size=(d, d)), Tensor(rng.normal(size=d))
        num = finite_difference(lambda: inner_loss(Tensor(W.copy()), x, proj).item(), W)
        assert rel_error(inner_grad_linear(Tensor(W), x, proj).data, num) < 1e-6


# ---------------------------------------------------------------------------
# online scan
# ---------------------------------------------------------------------------


def test_step_online_single_step_identity_case():
    st, z = step_online(zero_state(2, 0.5), Tensor([1.0, 0.0]), TttProjections.identity(2))
    assert np.array_equal(st.weights["W"].data, [[1, 0], [0, 0]])
    assert np.array_equal(z.data, [1, 0])


def test_step_online_eta_zero_keeps_w():
    rng = np.random.default_rng(1)
    W0 = rng.normal(size=(3, 3))
    proj = rand_proj(rng, 3)
    st = TttState({"W": Tensor(W0)}, 0.0)
    for t in range(5):
        x = Tensor(rng.normal(size=3))
        st, z = step_online(st, x, proj, t)
        assert np.array_equal(st.weights["W"].data, W0)
        assert np.allclose(z.data, W0 @ proj.theta_q.data @ x.data, atol=1e-14)


def test_online_final_w_matches_scalar_loop():
    rng = np.random.default_rng(2)
    d, T, eta = 4, 8, 0.1
    proj = rand_proj(rng, d)
    xs = rng.normal(size=(T, d))
    tk, tv = proj.theta_k.data, proj.theta_v.data
    W = [[0.0] * d for _ in range(d)]
    for t in range(T):
        k = [sum(tk[i][j] * xs[t][j] for j in range(d)) for i in range(d)]
        v = [sum(tv[i][j] * xs[t][j] for j in range(d)) for i in range(d)]
        err = [sum(W[i][j] * k[j] for j in range(d)) - v[i] for i in range(d)]
        W = [[W[i][j] - eta * 2 * err[i] * k[j] for j in range(d)] for i in range(d)]
    st = zero_state(d, eta)
    for t in range(T):
        st, _ = step_online(st, Tensor(xs[t]), proj, t)
    assert np.max(np.abs(st.weights["W"].data - np.array(W))) < 1e-10


def test_step_online_non_finite_names_token():
    proj = TttProjections.identity(1)
    st = zero_state(1, 0.1)
    tokens = [1.0, 1.0, 1.0, 1e200]
    with pytest.raises(tt.NumericError, match="token 3"):
        for t, x in enumerate(tokens):
            st, _ = step_online(st, Tensor([x]), proj, t)


def test_descent_property_linear():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        d = 4
        proj = rand_proj(rng, d)
        W = Tensor(rng.normal(size=(d, d)))
        x = Tensor(rng.normal(size=d))
        k = proj.theta_k.data @ x.data
        eta = 0.99 / (2 * k @ k)
        st, _ = step_online(TttState({"W": W}, eta), x, proj)
        assert inner_loss(st.weights, x, proj).item() <= inner_loss(W, x, proj).item() + 1e-12


# ---------------------------------------------------------------------------
# batch at init
# ---------------------------------------------------------------------------


def test_batch_at_init_single_token_closed_form():
    rng = np.random.default_rng(3)
    d = 3
    proj = rand_proj(rng, d)
    x = rng.normal(size=(1, d))
    k, v, q = (t.data @ x[0] for t in (proj.theta_k, proj.theta_v, proj.theta_q))
    z = forward_batch_at_init(Tensor(x), proj).data[0]
    assert np.allclose(z, v * (k @ q), atol=1e-14)


def test_batch_at_init_orthogonal_tokens():
    z = forward_batch_at_init(Tensor([[1.0, 0], [0, 1]]), TttProjections.identity(2)).data
    assert np.allclose(z[1], [0, 1])


def test_batch_at_init_matches_linear_attention():
    rng = np.random.default_rng(4)
    seq = Tensor(rng.normal(size=(32, 8)))
    proj = rand_proj(rng, 8)
    assert np.max(np.abs(forward_batch_at_init(seq, proj).data - linear_attention(seq, proj))) < 1e-10


def test_batch_at_init_rejects_mlp():
    cfg = TttConfig(d_model=2, hidden_model="mlp", mode="batch_at_init")
    layer = TttLayer.create(cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        layer.scan(Tensor(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# mini-batch scan
# ---------------------------------------------------------------------------


def _grouped_reference(xs, proj, W0, eta, b):
    """Sequential loop: gradients inside a group all taken at the group-start W."""
    tk, tv, tq = (t.data for t in (proj.theta_k, proj.theta_v, proj.theta_q))
    W = W0.copy()
    out = []
    for g in range(0, len(xs), b):
        Wg = W.copy()
        acc = np.zeros_like(W)
        for x in xs[g : g + b]:
            k, v, q = tk @ x, tv @ x, tq @ x
            acc += 2 * np.outer(Wg @ k - v, k)
            out.append((Wg - eta * acc) @ q)
        W = Wg - eta * acc
    return np.array(out)


def test_minibatch_matches_grouped_reference():
    rng = np.random.default_rng(5)
    d, T, b = 8, 64, 16
    proj = rand_proj(rng, d)
    xs = rng.normal(size=(T, d))
    W0 = rng.normal(0, 0.2, (d, d))
    z = forward_minibatch(Tensor(xs), proj, TttState({"W": Tensor(W0)}, 0.01), b).data
    assert np.max(np.abs(z - _grouped_reference(xs, proj, W0, 0.01, b))) < 1e-10


def test_minibatch_b1_equals_online():
    rng = np.random.default_rng(6)
    d = 4
    proj = rand_proj(rng, d)
    seq = Tensor(rng.normal(size=(12, d)))
    st = TttState({"W": Tensor(rng.normal(0, 0.3, (d, d)))}, 0.05)
    a = forward_minibatch(seq, proj, st, 1).data
    assert np.max(np.abs(a - forward_online(seq, proj, st).data)) < 1e-10


def test_minibatch_b1_equals_online_mlp():
    rng = np.random.default_rng(7)
    d = 3
    proj = rand_proj(rng, d, std=0.3)
    seq = Tensor(rng.normal(size=(10, d)))
    st = TttState(mlp_init(d, rng, std=0.3), 0.02)
    a = forward_minibatch(seq, proj, st, 1).data
    assert np.max(np.abs(a - forward_online(seq, proj, st).data)) < 1e-10


def test_minibatch_bT_equals_linear_attention():
    rng = np.random.default_rng(8)
    seq = Tensor(rng.normal(size=(16, 4)))
    proj = rand_proj(rng, 4)
    z = forward_minibatch(seq, proj, zero_state(4, 0.5), 16, at_init=True).data
    assert np.max(np.abs(z - linear_attention(seq, proj))) < 1e-10


def test_minibatch_tiling_error():
    with pytest.raises(TilingError):
        forward_minibatch(Tensor(np.ones((10, 2))), TttProjections.identity(2), zero_state(2), 4)


def test_minibatch_batched_sequences_match_individual():
    rng = np.random.default_rng(9)
    proj = rand_proj(rng, 4)
    seqs = rng.normal(size=(3, 8, 4))
    st = zero_state(4, 0.1)
    joint = forward_minibatch(Tensor(seqs), proj, st, 4).data
    for i in range(3):
        assert np.allclose(joint[i], forward_minibatch(Tensor(seqs[i]), proj, st, 4).data, atol=1e-14)


# ---------------------------------------------------------------------------
# MLP inner model
# ---------------------------------------------------------------------------


def test_mlp_zero_weights_output_zero():
    w = mlp_init(4)
    assert np.array_equal(mlp_hidden_forward(Tensor(np.ones(4)), w).data, np.zeros(4))


def test_mlp_inner_gradient_matches_finite_differences():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = 4
        proj = rand_proj(rng, d)
        w = {k: v.data.copy() for k, v in mlp_init(d, rng, std=0.5).items()}
        x = Tensor(rng.normal(size=d))
        leaves = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
        grads = tt.grad(inner_loss(leaves, x, proj), list(leaves.values()))
        for (name, arr), g in zip(w.items(), grads):
            num = finite_difference(lambda: inner_loss({k: Tensor(v.copy()) for k, v in w.items()}, x, proj).item(), arr)
            assert rel_error(g.data, num) < 1e-4, name


def test_mlp_step_descends():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        d = 4
        proj = rand_proj(rng, d)
        w = mlp_init(d, rng, std=0.5)
        x = Tensor(rng.normal(size=d))
        st, _ = step_online(TttState(w, 1e-2), x, proj)
        assert inner_loss(st.weights, x, proj).item() <= inner_loss(w, x, proj).item()


# ---------------------------------------------------------------------------
# layer-level properties
# ---------------------------------------------------------------------------


def test_causality():
    rng = np.random.default_rng(10)
    d, T, t = 4, 16, 6
    proj = rand_proj(rng, d)
    xs = rng.normal(size=(T, d))
    st = TttState({"W": Tensor(rng.normal(0, 0.2, (d, d)))}, 0.05)
    for scan in (lambda s: forward_online(s, proj, st), lambda s: forward_minibatch(s, proj, st, 1)):
        z = scan(Tensor(xs)).data
        ys = xs.copy()
        ys[t + 1 :] += rng.normal(size=ys[t + 1 :].shape)
        assert np.array_equal(scan(Tensor(ys)).data[: t + 1], z[: t + 1])


def test_state_isolation():
    cfg = TttConfig(d_model=4, hidden_model="linear", minibatch_b=4, eta=0.1)
    rng = np.random.default_rng(11)
    layer = TttLayer.create(cfg, np.random.default_rng(0), proj_std=0.3)
    fresh = TttLayer.create(cfg, np.random.default_rng(0), proj_std=0.3)
    a, b = Tensor(rng.normal(size=(8, 4))), Tensor(rng.normal(size=(8, 4)))
    layer(a)
    assert np.array_equal(layer(b).data, fresh(b).data)


def test_outer_gradient_through_online_scan():
    rng = np.random.default_rng(12)
    d, T = 3, 4
    proj = rand_proj(rng, d)
    seq = Tensor(rng.normal(size=(T, d)))
    target = rng.normal(size=(T, d))

    def loss(tk):
        p = TttProjections(tk, proj.theta_v, proj.theta_q)
        return tt.sum(tt.square(tt.sub(forward_online(seq, p, zero_state(d, 0.1)), Tensor(target))))

    tk = proj.theta_k.data.copy()
    leaf = Tensor(tk.copy(), requires_grad=True)
    (g,) = tt.grad(loss(leaf), [leaf])
    num = finite_difference(lambda: loss(Tensor(tk.copy())).item(), tk)
    assert rel_error(g.data, num) < 1e-4


def test_ttt_block_zero_projections_is_identity():
    cfg = TttConfig(d_model=4, hidden_model="mlp", minibatch_b=4, eta=0.1)
    layer = TttLayer.create(cfg, np.random.default_rng(0))
    z = Tensor(np.zeros((4, 4)))
    layer.proj = TttProjections(z, z, z)
    x = Tensor(np.random.default_rng(1).normal(size=(8, 4)))
    assert np.allclose(ttt_block(x, layer).data, x.data, atol=1e-15)


@pytest.mark.parametrize("T,d", [(4, 2), (8, 4), (16, 3)])
def test_ttt_block_preserves_shape(T, d):
    cfg = TttConfig(d_model=d, hidden_model="linear", minibatch_b=4)
    layer = TttLayer.create(cfg, np.random.default_rng(0))
    assert layer(Tensor(np.ones((T, d)))).shape == (T, d)
    assert layer(Tensor(np.ones((2, T, d)))).shape == (2, T, d)


def test_bidirectional_is_average_of_both_scans():
    cfg = TttConfig(d_model=4, hidden_model="linear", minibatch_b=4, eta=0.1, scan="bidirectional")
    layer = TttLayer.create(cfg, np.random.default_rng(0), proj_std=0.3)
    x = np.random.default_rng(2).normal(size=(8, 4))
    fwd_cfg = TttConfig(d_model=4, hidden_model="linear", minibatch_b=4, eta=0.1)
    fwd = TttLayer(fwd_cfg, layer.proj, layer.init_weights, layer.log_eta, layer.ln_gain, layer.ln_bias)
    f = fwd.scan(Tensor(x)).data
    r = fwd.scan(Tensor(x[::-1].copy())).data[::-1]
    assert np.allclose(layer.scan(Tensor(x)).data, (f + r) / 2, atol=1e-14)


def test_reconstruction_objective_is_seeded():
    cfg = TttConfig(d_model=4, hidden_model="linear", minibatch_b=4, eta=0.1, objective="reconstruction", seed=3)
    x = Tensor(np.random.default_rng(2).normal(size=(8, 4)))
    a = TttLayer.create(cfg, np.random.default_rng(0), proj_std=0.3).scan(x).data
    b = TttLayer.create(cfg, np.random.default_rng(0), proj_std=0.3).scan(x).data
    assert np.array_equal(a, b)


def test_trainable_eta_is_positive_and_initialised():
    cfg = TttConfig(d_model=4, eta=0.25)
    layer = TttLayer.create(cfg, np.random.default_rng(0))
    assert abs(layer.eta.item() - 0.25) < 1e-15
    fixed = TttLayer.create(TttConfig(d_model=4, eta=0.25, trainable_eta=False), np.random.default_rng(0))
    assert fixed.eta == 0.25 and "log_eta" not in dict(fixed.named_parameters())


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_model=0), dict(d_model=2, hidden_model="rnn"), dict(d_model=2, mode="x"), dict(d_model=2, eta=0.0), dict(d_model=2, minibatch_b=0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TttConfig(**kwargs)
