import numpy as np
import pytest

from medttt import tensor as tt
from medttt.checks import model_gradcheck
from medttt.losses import combined_loss
from medttt.model import (
    ABLATION_SETTINGS,
    CheckpointError,
    ModelConfig,
    ModelConfigError,
    ablation_setting,
    build_model,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)


def tiny(**kw):
    return ModelConfig(base_channels=2, **kw)


def batch(n=2, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 1, size, size)), (rng.random((n, size, size)) < 0.4).astype(float)


def test_forward_shapes_and_probability_range():
    model = build_model(tiny())
    out = model(batch(3, 32)[0])
    assert out.probs.shape == (3, 32, 32) and out.logits.shape == (3, 32, 32)
    assert np.all((out.probs.data >= 0) & (out.probs.data <= 1))


def test_default_model_on_64x64():
    out = build_model(ModelConfig())(np.zeros((1, 1, 64, 64)))
    assert out.probs.shape == (1, 64, 64)


def test_same_seed_gives_identical_parameters():
    a, b = build_model(tiny(seed=3)), build_model(tiny(seed=3))
    assert all(np.array_equal(a.params[n].data, b.params[n].data) for n in a.params)
    c = build_model(tiny(seed=4))
    assert not np.array_equal(a.params["high0.weight"].data, c.params["high0.weight"].data)


def test_zero_head_gives_one_half():
    model = build_model(tiny())
    model.zero_head()
    assert np.all(model(np.zeros((1, 1, 16, 16))).probs.data == 0.5)


def test_setting_one_topology():
    m = build_model(ablation_setting("I", tiny()))
    names = set(m.params)
    assert not any(n.startswith(("fff_", "mid", "low", "fuse")) for n in names)
    assert any(n.startswith("ttt0.") for n in names) and "lift.weight" in names
    assert m.summary()["branches"]["mid"] is None


def test_disabling_branches_changes_parameters_not_output_shape():
    x = batch(1, 16)[0]
    counts = set()
    for name in ABLATION_SETTINGS:
        m = build_model(ablation_setting(name, tiny()))
        counts.add(m.parameter_count())
        assert m(x).probs.shape == (1, 16, 16)
    assert len(counts) == len(ABLATION_SETTINGS)


def test_ablation_setting_flags():
    assert (lambda c: (c.use_mr_block, c.use_fff, c.use_ttt))(ablation_setting("I")) == (False, False, True)
    assert (lambda c: (c.use_mr_block, c.use_fff, c.use_ttt))(ablation_setting("II")) == (True, False, True)
    assert (lambda c: (c.use_mr_block, c.use_fff, c.use_ttt))(ablation_setting("III")) == (False, True, True)
    assert (lambda c: (c.use_mr_block, c.use_fff, c.use_ttt))(ablation_setting("full")) == (True, True, True)
    with pytest.raises(ModelConfigError):
        ablation_setting("IV")


@pytest.mark.parametrize(
    "kw",
    [
        dict(use_mr_block=False, use_fff=False, use_ttt=False),
        dict(head="softmax"),
        dict(base_channels=0),
        dict(ttt=dict(d_model=4)),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ModelConfigError):
        ModelConfig(**kw) if "base_channels" in kw else tiny(**kw)


def test_extent_must_be_multiple_of_tiling():
    with pytest.raises(ModelConfigError, match="divisible"):
        build_model(tiny())(np.zeros((1, 1, 20, 20)))
    with pytest.raises(ModelConfigError, match="input"):
        build_model(tiny())(np.zeros((1, 3, 16, 16)))


def test_end_to_end_gradient_theta_k():
    model = build_model(tiny())
    x, y = batch(1, 16)
    errs = model_gradcheck(model, x, y, names=["ttt0.theta_k", "ttt1.theta_k"], per_param=12)
    assert max(errs.values()) < 1e-3, errs


def test_end_to_end_gradient_all_parameters():
    model = build_model(tiny())
    x, y = batch(1, 16, seed=1)
    errs = model_gradcheck(model, x, y, per_param=2)
    assert max(errs.values()) < 1e-3, {k: v for k, v in errs.items() if v >= 1e-3}


def test_every_parameter_receives_gradient():
    model = build_model(tiny())
    x, y = batch(2, 16)
    grads = tt.grad(combined_loss(model(x).probs, y), model.parameters())
    dead = [n for n, g in zip(model.params, grads) if g is None or not np.any(g.data)]
    assert not dead, dead


def test_flip_equivariance_without_ttt():
    # exact only when every kernel is mirror-symmetric along the flipped axis
    model = build_model(tiny(use_ttt=False))
    for n, p in list(model.params.items()):
        if n.endswith(".weight"):
            model.set_param(n, 0.5 * (p.data + p.data[..., ::-1]))
    x = batch(1, 16)[0]
    a = model(x[..., ::-1].copy()).probs.data[..., ::-1]
    assert np.max(np.abs(a - model(x).probs.data)) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny())
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    other = build_model(tiny(seed=9))
    other.load_state_dict(load_checkpoint(path))
    x = batch(1, 16)[0]
    assert np.array_equal(model(x).probs.data, other(x).probs.data)
    assert encode_checkpoint(other.state_dict()) == path.read_bytes()


def test_checkpoint_mismatch_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(build_model(tiny()), path)
    with pytest.raises(CheckpointError, match="manifest"):
        build_model(ablation_setting("I", tiny())).load_state_dict(load_checkpoint(path))
    with pytest.raises(CheckpointError):
        build_model(ModelConfig(base_channels=3)).load_state_dict(load_checkpoint(path))


def test_corrupt_checkpoint_rejected():
    buf = encode_checkpoint(build_model(tiny()).state_dict())
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(buf[:-3])
