import numpy as np
import pytest

from straightwm import autograd as ag
from straightwm.envs import make_env
from straightwm.errors import ConfigError, DegenerateVelocity, DimensionError, FormatError
from straightwm.model import ModelConfig, WorldModel, patchify, straightening_cosine

from oracles import central_diff, rel_err

SMALL = ModelConfig(predictor_hidden=32, encoder_hidden=8, latent_channels=4, head_hidden=8, head_dim=4)


@pytest.fixture(scope="module")
def model():
    return WorldModel(SMALL, seed=0)


@pytest.fixture(scope="module")
def obs():
    env = make_env("umaze")
    return env.render_positions(np.array([[1.5, 1.5], [2.5, 1.5], [3.5, 1.5], [3.5, 2.5]]))


def test_patchify_roundtrip_order():
    x = np.arange(2 * 2 * 4 * 4, dtype=float).reshape(2, 2, 4, 4)
    p = patchify(x, 2)
    assert p.shape == (8, 8)
    # token 1 of sample 0 is the top-right 2x2 patch of both channels
    assert p[1].tolist() == [2, 3, 6, 7, 18, 19, 22, 23]


def test_shapes(model, obs):
    z = model.encode(obs)
    assert z.shape == (4, 16, 4)
    assert model.encode(obs[0]).shape == (1, 16, 4)
    a = np.zeros((4, SMALL.chunk_size))
    nxt = model.predict_next([z, z, z], [a, a, a])
    assert nxt.shape == z.shape
    preds = model.rollout([z, z, z], [a, a], [a, a, a, a, a])
    assert len(preds) == 5 and all(p.shape == z.shape for p in preds)
    assert model.pool(z).shape == (4, 4)


def test_global_mode_has_one_token(obs):
    m = WorldModel(ModelConfig(mode="global", predictor_hidden=16, encoder_hidden=8), seed=1)
    assert m.encode(obs).shape == (4, 1, 8)


def test_bad_inputs(model, obs):
    with pytest.raises(DimensionError):
        model.encode(np.zeros((1, 3, 32, 32)))
    z = model.encode(obs)
    a = np.zeros((4, SMALL.chunk_size))
    with pytest.raises(DimensionError):
        model.predict_next([z, z], [a, a])
    with pytest.raises(DimensionError):
        model.embed_action(np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        model.rollout([z, z, z], [a], [a])
    with pytest.raises(ConfigError):
        ModelConfig(patch_size=5)
    with pytest.raises(ConfigError):
        ModelConfig(mode="bogus", history=0)


def test_predictor_is_residual(model, obs):
    z = model.encode(obs)
    a = np.zeros((4, SMALL.chunk_size))
    zero = {k: np.zeros_like(v.value) if k.startswith("predictor.mlp2") else v.value for k, v in model.params.items()}
    m0 = WorldModel(SMALL, params=zero)
    np.testing.assert_array_equal(m0.predict_next([z, z, z], [a, a, a]).value, z.value)


def test_pool_is_odd(model, obs):
    z = model.encode_numpy(obs)
    v = z[1:] - z[:-1]
    np.testing.assert_allclose(model.pool(-v).value, -model.pool(v).value, atol=1e-15)
    np.testing.assert_array_equal(model.pool(np.zeros_like(v)).value, 0.0)


def test_checkpoint_roundtrip(model, obs, tmp_path):
    path = tmp_path / "m.ckpt"
    model.save(path)
    back = WorldModel.load(path)
    assert back.config == model.config
    assert back.to_bytes() == model.to_bytes()
    np.testing.assert_array_equal(back.encode_numpy(obs), model.encode_numpy(obs))
    assert WorldModel(SMALL, seed=0).to_bytes() == model.to_bytes()
    assert WorldModel(SMALL, seed=1).to_bytes() != model.to_bytes()


@pytest.mark.parametrize("blob", [b"", b"XXXX" + b"\0" * 20])
def test_checkpoint_rejects_garbage(blob):
    with pytest.raises(FormatError):
        WorldModel.from_bytes(blob)


def test_checkpoint_rejects_truncation(model):
    with pytest.raises(FormatError):
        WorldModel.from_bytes(model.to_bytes()[:-8])


# straightening cosine -----------------------------------------------------------


def _line(direction, m=3, d=2):
    z0 = np.random.default_rng(0).normal(size=(m, d))
    return z0, z0 + direction, z0 + 2 * direction


@pytest.mark.parametrize("variant", ["patch", "mean", "flatten"])
def test_straight_line_cosine_is_one(variant):
    z = _line(np.array([[1.0, 2.0], [0.5, -1.0], [3.0, 0.1]]))
    assert float(straightening_cosine(*z, variant).value) == pytest.approx(1.0, abs=1e-12)


def test_agg_straight_line(model):
    z0 = np.random.default_rng(1).normal(size=(16, 4))
    d = np.random.default_rng(2).normal(size=(16, 4))
    assert float(straightening_cosine(z0, z0 + d, z0 + 2 * d, "agg", model).value) == pytest.approx(1.0, abs=1e-12)
    # odd head: reversing direction gives -1
    assert float(straightening_cosine(z0, z0 + d, z0, "agg", model).value) == pytest.approx(-1.0, abs=1e-12)


def test_right_angle_cosines():
    z0 = np.zeros((2, 2))
    z1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    z2 = np.array([[1.0, 1.0], [1.0, 1.0]])
    for v in ("patch", "mean", "flatten"):
        assert float(straightening_cosine(z0, z1, z2, v).value) == pytest.approx(0.0, abs=1e-12)


def test_variants_differ():
    # token 0 goes straight, token 1 turns a right angle and doubles its speed
    z0 = np.zeros((2, 2))
    z1 = np.array([[1.0, 0.0], [1.0, 0.0]])
    z2 = np.array([[2.0, 0.0], [1.0, 2.0]])
    assert float(straightening_cosine(z0, z1, z2, "patch").value) == pytest.approx(0.5)
    assert float(straightening_cosine(z0, z1, z2, "flatten").value) == pytest.approx(1 / np.sqrt(10))
    assert float(straightening_cosine(z0, z1, z2, "mean").value) == pytest.approx(0.5 / np.sqrt(1.25))


def test_patch_cosine_skips_static_tokens():
    z0 = np.zeros((2, 2))
    z1 = np.array([[1.0, 0.0], [0.0, 0.0]])
    z2 = np.array([[2.0, 0.0], [0.0, 0.0]])
    assert float(straightening_cosine(z0, z1, z2, "patch").value) == pytest.approx(1.0)
    with pytest.raises(DegenerateVelocity):
        straightening_cosine(z0, z0, z0, "patch")


def test_degenerate_velocity_raises():
    z = np.ones((2, 2))
    with pytest.raises(DegenerateVelocity):
        straightening_cosine(z, z, z + 1, "flatten")


def test_unknown_variant_and_missing_model():
    z = _line(np.ones((3, 2)))
    with pytest.raises(ConfigError):
        straightening_cosine(*z, "bogus")
    with pytest.raises(ConfigError):
        straightening_cosine(*z, "agg")


def test_batched_cosine_shape():
    rng = np.random.default_rng(3)
    z = [rng.normal(size=(5, 3, 2)) for _ in range(3)]
    c = straightening_cosine(*z, "flatten")
    assert c.shape == (5,)
    assert np.all(np.abs(c.value) <= 1)


@pytest.mark.parametrize("variant", ["patch", "mean", "flatten"])
def test_cosine_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(4)
    z0, z1, z2 = (rng.normal(size=(3, 2)) for _ in range(3))

    def f(x):
        return float(straightening_cosine(z0, x, z2, variant).value)

    x = ag.parameter(z1.copy())
    ag.backward(straightening_cosine(z0, x, z2, variant))
    assert rel_err(x.grad, central_diff(f, z1.copy())) < 1e-6


def test_model_gradient_through_rollout(model, obs):
    """Action gradients through a two-step rollout match finite differences."""
    z = model.encode(obs[:1])
    goal = model.encode_numpy(obs[3:4])
    seed = [np.zeros((1, SMALL.chunk_size))] * 2
    a0 = np.random.default_rng(5).normal(scale=0.3, size=(2, 1, SMALL.chunk_size))

    def cost(a):
        preds = model.rollout([z, z, z], seed, [a[0], a[1]])
        return ag.sum_(ag.square(preds[-1] - ag.constant(goal)))

    a = ag.parameter(a0.copy())
    ag.backward(cost(a))
    fd = central_diff(lambda x: float(cost(ag.constant(x)).value), a0.copy())
    assert rel_err(a.grad, fd) < 1e-5
