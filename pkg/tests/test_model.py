import numpy as np
import pytest

from aptnet.model import APT, ModelConfig, forward
from aptnet.geometry import PointCloudSample
from aptnet.tensor import Tensor

from conftest import loss_gradient_errors, np_dit, np_layer_norm, perturb


@pytest.fixture
def model(tiny_cfg):
    return perturb(APT(tiny_cfg), 0.3, 4)


def inputs(n=12, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 200, size=(batch, n, 2)), rng.normal(size=(batch, n, 2))


def latent(model, seed=0):
    coords, feats = inputs(seed=seed)
    cond = model.condition(0.3, {"rate": 0.5})
    return model.encode(coords, feats, cond), cond


def test_fresh_approximator_is_identity(tiny_cfg):
    m = APT(tiny_cfg)
    z = Tensor(np.random.default_rng(0).normal(size=(1, 2, 8)))
    assert np.array_equal(m.approximate(z, m.condition(0.5, {"rate": 1.0})).data, z.data)


def test_approximator_is_token_equivariant(model):
    z, cond = latent(model)
    z = Tensor(np.random.default_rng(1).normal(size=(1, 5, 8)))
    perm = np.array([3, 0, 4, 1, 2])
    a = model.approximate(Tensor(z.data[:, perm]), cond).data
    assert np.allclose(a, model.approximate(z, cond).data[:, perm], atol=1e-13)


def test_approximator_brute_force(model):
    z = np.random.default_rng(2).normal(size=(1, 2, 8))
    cond = model.condition(0.3, {"rate": 0.5})
    ref = np_dit(model.approximator.blocks[0], z[0], cond.data[0])
    assert np.allclose(model.approximate(Tensor(z), cond).data[0], ref)


def test_decode_duplicate_queries_are_bit_identical(model):
    z, cond = latent(model)
    q = np.random.default_rng(3).uniform(0, 200, size=(1, 5, 2))
    q[0, 3] = q[0, 1]
    out = model.decode(z, q, cond).data
    assert np.array_equal(out[0, 3], out[0, 1])


def test_decode_query_independence(model):
    z, cond = latent(model)
    rng = np.random.default_rng(4)
    a = rng.uniform(0, 200, size=(1, 7, 2))
    b = rng.uniform(0, 200, size=(1, 30, 2))
    both = np.concatenate([b[:, :11], a, b[:, 11:]], axis=1)
    assert np.array_equal(model.decode(z, both, cond).data[:, 11:18], model.decode(z, a, cond).data)
    for i in range(7):
        assert np.array_equal(model.decode(z, a[:, i:i + 1], cond).data[0, 0], model.decode(z, a, cond).data[0, i])


@pytest.mark.parametrize("chunk", [1, 3, 8, 64])
def test_chunked_decoding_equals_monolithic(model, chunk):
    z, cond = latent(model)
    q = np.random.default_rng(5).uniform(0, 200, size=(1, 23, 2))
    assert np.array_equal(model.decode(z, q, cond, chunk_size=chunk).data, model.decode(z, q, cond).data)


def test_single_query_single_token_by_hand(tiny_cfg):
    tiny_cfg.n_latent = 1
    m = perturb(APT(tiny_cfg), 0.3, 6)
    z, cond = latent(m)
    q = np.array([[[40.0, 160.0]]])
    dec = m.decoder
    x = dec.pos(q[0]).data + cond.data[0] @ dec.cond_proj.weight.data + dec.cond_proj.bias.data
    x = np_dit(dec.blocks[0], x, cond.data[0], context=z.data[0])
    ref = np_layer_norm(x) @ dec.head.weight.data + dec.head.bias.data
    assert np.allclose(m.decode(z, q, cond).data[0], ref)


def test_forward_shapes_and_superset_consistency(model):
    coords, feats = inputs(n=12, seed=7)
    s = PointCloudSample(coords[0], feats[0], [0.2], np.zeros((1, 12, 1)), {"rate": 0.3})
    own = forward(model, s, 0.2).data
    assert own.shape == (12, 1)
    extra = np.random.default_rng(8).uniform(0, 200, size=(40, 2))
    sup = forward(model, s, 0.2, np.concatenate([extra[:20], coords[0], extra[20:]])).data
    assert sup.shape == (52, 1)
    assert np.array_equal(sup[20:32], own)
    assert forward(model, s, 0.2, extra[:3]).data.shape == (3, 1)


def test_forward_batch_and_single_agree(model):
    coords, feats = inputs(n=12, seed=9, batch=2)
    batch = model(coords, feats, [0.1, 0.7], {"rate": [0.2, -0.4]}).data
    single = model(coords[1], feats[1], 0.7, {"rate": -0.4}).data
    assert np.allclose(batch[1], single, atol=1e-12)


def test_empty_query_set(model):
    coords, feats = inputs()
    assert model(coords[0], feats[0], 0.5, {"rate": 0.0}, np.zeros((0, 2))).shape == (0, 1)


def test_loss_gradients_match_finite_differences(tiny_cfg):
    m = perturb(APT(tiny_cfg), 0.3, 7)
    errors = loss_gradient_errors(m)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, (worst, errors[worst])


def test_config_round_trip_and_validation(tiny_cfg):
    assert ModelConfig.from_dict(tiny_cfg.to_dict()) == tiny_cfg
    with pytest.raises(ValueError):
        ModelConfig(d_h=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(pe="fourier")
    with pytest.warns(UserWarning):
        ModelConfig(n_supernodes=4, n_latent=8)


def test_default_model_size_is_desk_scale():
    n = APT(ModelConfig(d_a=2, scalar_names=("rate",))).num_parameters()
    assert 100_000 <= n <= 200_000
