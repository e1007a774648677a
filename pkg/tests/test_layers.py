import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capsfeat import autodiff as ad
from capsfeat.autodiff import Tape, Tensor
from capsfeat.config import NetworkConfig
from capsfeat.errors import ConfigError, UsageError
from capsfeat.layers import (
    CapsNet,
    Decoder,
    FcHead,
    PrimaryCapsLayer,
    RoutingLayer,
    class_lengths,
    decode,
    dynamic_routing,
    predict,
    squash,
)

from capsfeat.gradcheck import run_gradcheck
from routing_oracle import route


def small_config(**kw):
    base = dict(conv_channels=8, caps_blocks=2, caps_dim=8, image_height=17, image_width=17,
                decoder_widths=(16, 32))
    base.update(kw)
    return NetworkConfig(**base)


# -- squash -----------------------------------------------------------------


def test_squash_zero_is_zero():
    assert np.array_equal(squash(Tensor(np.zeros((2, 5)))).data, np.zeros((2, 5)))


@pytest.mark.parametrize("norm,expected", [(1.0, 0.5), (3.0, 0.9)])
def test_squash_fixed_points(rng, norm, expected):
    d = rng.normal(size=16)
    s = d / np.linalg.norm(d) * norm
    v = squash(Tensor(s)).data
    assert abs(np.linalg.norm(v) - expected) < 1e-6
    np.testing.assert_allclose(v / np.linalg.norm(v), s / norm, atol=1e-6)


def test_squash_norm_strictly_increasing_and_bounded():
    norms = np.geomspace(0.01, 100, 400)
    s = np.zeros((400, 3))
    s[:, 0] = norms
    with ad.precision(np.float64):
        out = np.linalg.norm(squash(Tensor(s)).data, axis=1)
    assert np.all(out < 1)
    assert np.all(np.diff(out) > 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=16))
@settings(max_examples=100, deadline=None)
def test_squash_bound_property(xs):
    v = squash(Tensor(np.array(xs))).data
    assert np.linalg.norm(v.astype(np.float64)) < 1


# -- primary capsules -------------------------------------------------------


@pytest.mark.parametrize("size,n_pc", [(28, 1152), (32, 2048)])
def test_primary_capsule_count(size, n_pc):
    # conv arithmetic: (size - 9 + 1 - 9) // 2 + 1 positions per side, 32 blocks
    side = (size - 9 + 1 - 9) // 2 + 1
    assert 32 * side * side == n_pc
    cfg = NetworkConfig(image_height=size, image_width=size, conv_channels=4)
    assert cfg.n_primary == n_pc
    layer = PrimaryCapsLayer(cfg, np.random.default_rng(0))
    out = layer(Tensor(np.random.default_rng(1).uniform(size=(1, 1, size, size))))
    assert out.shape == (1, n_pc, 8)
    assert np.all(np.linalg.norm(out.data, axis=-1) < 1)


def test_primary_zero_image_gives_zero_capsules():
    cfg = small_config()
    layer = PrimaryCapsLayer(cfg, np.random.default_rng(0))
    out = layer(Tensor(np.zeros((2, 1, 17, 17))))
    assert np.array_equal(out.data, np.zeros_like(out.data))


def test_primary_rejects_small_images():
    layer = PrimaryCapsLayer(small_config(), np.random.default_rng(0))
    with pytest.raises(ConfigError, match="17x17"):
        layer(Tensor(np.zeros((1, 1, 16, 16))))


def test_config_rejects_small_images():
    with pytest.raises(ConfigError, match="minimum size"):
        NetworkConfig(image_height=16, image_width=28).validate()


# -- routing ----------------------------------------------------------------


def random_routing(rng, n_pc, n_out, iters, d_in=8, d_out=16, batch=1, dtype=np.float64):
    u = rng.normal(size=(batch, n_pc, d_in)) * 0.5
    W = rng.normal(size=(n_pc, n_out, d_in, d_out)) * 0.5
    layer = RoutingLayer(n_pc, n_out, iters, d_in, d_out, weights=W.astype(dtype))
    return u.astype(dtype), W, layer


def test_single_iteration_uniform_coupling(f64, rng):
    u, W, layer = random_routing(rng, 5, 3, 1)
    state = dynamic_routing(Tensor(u), layer)
    np.testing.assert_allclose(state.c.data, 1 / 3)
    u_hat = np.einsum("bik,ijkd->bijd", u, W)
    s = u_hat.mean(axis=1) * 5 / 3
    n = np.linalg.norm(s, axis=-1, keepdims=True)
    np.testing.assert_allclose(state.v.data, s * n / (1 + n * n), rtol=1e-10)


def test_toy_instance_matches_scalar_oracle(f64, rng):
    u, W, layer = random_routing(rng, 3, 2, 3, d_in=2, d_out=2)
    state = dynamic_routing(Tensor(u), layer)
    v_ref, _ = route(u[0].tolist(), W.tolist(), 3)
    assert np.max(np.abs(state.v.data[0] - np.array(v_ref))) < 1e-6


@given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_routing_oracle_equivalence_float32(n_pc, n_out, iters, seed):
    rng = np.random.default_rng(seed)
    u, W, layer = random_routing(rng, n_pc, n_out, iters, dtype=np.float32)
    state = dynamic_routing(Tensor(u), layer)
    v_ref, hist = route(u[0].astype(np.float64).tolist(), W.astype(np.float32).astype(np.float64).tolist(), iters)
    assert np.max(np.abs(state.v.data[0] - np.array(v_ref))) < 1e-6
    for c_iter, c_ref in zip(state.couplings, hist):
        assert np.max(np.abs(c_iter[0] - np.array(c_ref))) < 1e-6


def test_couplings_normalised_every_iteration(rng):
    u, W, layer = random_routing(rng, 40, 7, 4, batch=3, dtype=np.float32)
    state = dynamic_routing(Tensor(u), layer)
    assert len(state.couplings) == 4
    for c in state.couplings:
        assert np.max(np.abs(c.sum(axis=2) - 1)) <= 1e-6
    assert np.all(np.linalg.norm(state.v.data, axis=-1) < 1)


def test_routing_logits_reset_every_call(rng):
    u, W, layer = random_routing(rng, 6, 3, 3, dtype=np.float32)
    a = dynamic_routing(Tensor(u), layer)
    b = dynamic_routing(Tensor(u), layer)
    assert np.array_equal(a.v.data, b.v.data)
    assert "b" not in "".join(layer.parameters())


def test_routing_rejects_zero_iterations():
    with pytest.raises(ConfigError):
        RoutingLayer(4, 2, 0)


def test_agreeing_couplings_do_not_decrease(f64, rng):
    # every primary capsule predicts the same vector for output 0; output 1 gets noise
    n_pc, d_in, d_out = 12, 4, 6
    target = rng.normal(size=d_out)
    u = rng.normal(size=(1, n_pc, d_in))
    W = np.zeros((n_pc, 2, d_in, d_out))
    for i in range(n_pc):
        # choose W[i, 0] so that u_i @ W[i, 0] == target
        W[i, 0] = np.outer(u[0, i], target) / (u[0, i] @ u[0, i])
        noise = rng.normal(size=d_out)
        noise -= noise @ target / (target @ target) * target
        W[i, 1] = np.outer(u[0, i], noise) / (u[0, i] @ u[0, i])
    layer = RoutingLayer(n_pc, 2, 5, d_in, d_out, weights=W)
    state = dynamic_routing(Tensor(u), layer)
    agree = np.array([c[0, :, 0] for c in state.couplings])
    assert np.all(np.diff(agree, axis=0) >= -1e-12)
    assert agree[-1].min() > 0.5


def test_feature_mode_routing_independent_of_class_count():
    shapes = set()
    for n_class in (10, 50, 199):
        cfg = NetworkConfig(head_mode="feature", n_features=8, n_class=n_class, conv_channels=4)
        shapes.add(CapsNet(cfg).routing.W.shape)
    assert shapes == {(1152, 8, 8, 16)}


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-2), (np.float64, 1e-5)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_routing_gradients_through_three_iterations(dtype, tol, seed):
    (res,) = run_gradcheck(seed=seed, layers=["routing"], dtype=dtype, probes=40)
    assert res.probes == 40
    assert res.worst_rel_error < tol


# -- head, lengths, decoder -------------------------------------------------


def test_fc_head_zero_weights_uniform():
    head = FcHead(4, 5)
    head.weights.data[:] = 0
    p = head(Tensor(np.random.default_rng(0).normal(size=(3, 4, 16)))).data
    np.testing.assert_allclose(p, 0.2, atol=1e-7)


def test_fc_head_parameter_count_and_normalisation(rng):
    head = FcHead(10, 10)
    assert head.weights.size + head.bias.size == 1610
    p = head(Tensor(rng.normal(size=(6, 10, 16)))).data
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-6


def test_class_lengths_and_prediction(rng):
    v = np.zeros((1, 2, 16))
    v[0, 0, 0], v[0, 1, 3] = 0.1, 0.9
    lengths = class_lengths(Tensor(v)).data
    np.testing.assert_allclose(lengths, [[0.1, 0.9]], atol=1e-7)
    assert predict(lengths)[0] == 1
    assert predict(np.full((1, 4), 0.3))[0] == 0
    w = rng.normal(size=(3, 5, 16)).astype(np.float32)
    oracle = np.sqrt((w.astype(np.float64) ** 2).sum(-1))
    assert np.max(np.abs(class_lengths(Tensor(w)).data - oracle)) < 1e-6


def test_class_mask_keeps_one_capsule(rng):
    dec = Decoder(3 * 16, 25, (8, 8))
    caps = Tensor(rng.normal(size=(2, 3, 16)))
    seen = {}
    original = ad.matmul

    def spy(a, b):
        seen.setdefault("first", a.data.copy())
        return original(a, b)

    ad.matmul = spy
    try:
        decode(dec, caps, "class", mask=[2, 0])
    finally:
        ad.matmul = original
    h = seen["first"]
    assert np.count_nonzero(h[0]) == 16 and np.all(h[0, :32] == 0) and np.all(h[0, 32:] != 0)
    assert np.count_nonzero(h[1]) == 16 and np.all(h[1, :16] != 0)


def test_feature_mode_decoder_sees_all_capsules(rng):
    dec = Decoder(4 * 16, 25, (8, 8))
    out = decode(dec, Tensor(rng.normal(size=(2, 4, 16))), "feature")
    assert out.shape == (2, 25)


def test_decode_mask_contract():
    dec = Decoder(32, 9, (4, 4))
    caps = Tensor(np.zeros((1, 2, 16)))
    with pytest.raises(UsageError):
        decode(dec, caps, "class")
    with pytest.raises(UsageError):
        decode(dec, caps, "feature", mask=[0])


def test_zero_capsules_decode_to_sigmoid_of_bias():
    dec = Decoder(32, 9, (4, 4))
    dec.layers[-1][1].data[:] = np.linspace(-2, 2, 9)
    out = decode(dec, Tensor(np.zeros((1, 2, 16))), "feature").data
    np.testing.assert_allclose(out[0], 1 / (1 + np.exp(-np.linspace(-2, 2, 9))), rtol=1e-6)
    assert np.all((out > 0) & (out < 1))


# -- assembled model --------------------------------------------------------


@pytest.mark.parametrize("mode,nf", [("class", None), ("feature", 3)])
def test_model_forward_shapes(rng, mode, nf):
    cfg = small_config(head_mode=mode, n_features=nf, n_class=4)
    net = CapsNet(cfg)
    x = rng.uniform(size=(5, 1, 17, 17)).astype(np.float32)
    out = net.forward(Tensor(x), labels=[0, 1, 2, 3, 0], reconstruct=True)
    assert out.scores.shape == (5, 4)
    assert out.recon.shape == (5, 17 * 17)
    if mode == "feature":
        np.testing.assert_allclose(out.scores.data.sum(1), 1, atol=1e-6)
    else:
        assert np.all(out.scores.data < 1)


def test_model_is_seed_deterministic():
    cfg = small_config()
    a, b = CapsNet(cfg), CapsNet(cfg)
    for (n, p), (_, q) in zip(a.parameters().items(), b.parameters().items()):
        assert np.array_equal(p.data, q.data), n
