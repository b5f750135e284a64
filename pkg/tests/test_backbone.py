import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latenthead import backbone as bb
from latenthead.tensor_core import ShapeError

from gradcheck import check

TINY = dict(H=8, W=8, P=2, E=8, L_atm=3, L_lat=2, n_blocks=2)


def rand_batch(cfg, rng, B=2):
    return {"surf": rng.standard_normal((B, cfg.T, cfg.V_s, cfg.H, cfg.W)),
            "atm": rng.standard_normal((B, cfg.T, cfg.V_a, cfg.L_atm, cfg.H, cfg.W))}


def zero_biases(params):
    return {k: (np.zeros_like(v) if k.endswith("_b") or "_b/" in k else v) for k, v in params.items()}


def test_config_invariants():
    with pytest.raises(ShapeError):
        bb.BackboneConfig(H=30, P=4)
    with pytest.raises(ShapeError):
        bb.BackboneConfig(E=31)
    with pytest.raises(ShapeError):
        bb.BackboneConfig(L_atm=2, L_lat=3)


def test_desk_shapes(rng):
    cfg = bb.BackboneConfig()
    assert cfg.N == 128
    params = bb.init_params(cfg)
    lat = bb.process(bb.encode(rand_batch(cfg, rng, 1), params, cfg), params, cfg)
    assert lat.shape == (1, 128, 4, 64)
    out = bb.decode_native(lat, params, cfg)
    assert out["surf"].shape == (1, 4, 32, 64)
    assert out["atm"].shape == (1, 2, 4, 32, 64)


@settings(max_examples=15, deadline=None)
@given(st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
       st.integers(0, 2), st.integers(1, 3))
def test_latent_shape_property(P, hp, wp, half_e, n_blocks, L_atm):
    cfg = bb.BackboneConfig(H=P * hp, W=P * wp, P=P, E=2 * half_e, L_atm=L_atm,
                            L_lat=min(L_atm, 2), n_blocks=n_blocks)
    params = bb.init_params(cfg, seed=1)
    lat = bb.process(bb.encode(rand_batch(cfg, np.random.default_rng(0), 1), params, cfg), params, cfg)
    assert lat.shape[1:] == cfg.latent_shape == (hp * wp, cfg.L_lat + 1, 4 * half_e)


def test_encode_linearity(rng):
    cfg = bb.BackboneConfig(**TINY)
    params = zero_biases(bb.init_params(cfg))
    zero = {k: np.zeros_like(v) for k, v in rand_batch(cfg, rng).items()}
    assert np.all(bb.encode(zero, params, cfg) == 0)
    b = rand_batch(cfg, rng)
    t1 = bb.encode(b, params, cfg)
    t2 = bb.encode({k: 2 * v for k, v in b.items()}, params, cfg)
    np.testing.assert_allclose(t2, 2 * t1, rtol=1e-13, atol=1e-13)


def test_process_identity_mixing(rng):
    cfg = bb.BackboneConfig(**TINY)
    params = bb.init_params(cfg)
    for k in range(cfg.n_blocks):
        for s in ("tok_w", "tok_b", "chan_w", "chan_b"):
            params[f"block{k}_{s}"] = np.zeros_like(params[f"block{k}_{s}"])
    params["lift_b"] = np.zeros_like(params["lift_b"])
    tokens = rng.standard_normal((2, cfg.N, cfg.levels, cfg.E))
    np.testing.assert_array_equal(bb.process(tokens, params, cfg), tokens @ params["lift_w"])


def test_decode_zero_and_one_hot(rng):
    cfg = bb.BackboneConfig(**TINY)
    params = zero_biases(bb.init_params(cfg))
    out = bb.decode_native(np.zeros((1,) + cfg.latent_shape), params, cfg)
    assert np.all(out["surf"] == 0) and out["surf"].shape[-2:] == (8, 8)
    lat = np.zeros((1,) + cfg.latent_shape)
    lat[0, 0, 0, 3] = 1.0
    out = bb.decode_native(lat, params, cfg)
    P2 = cfg.P * cfg.P
    for j in range(cfg.n_surf):
        patch = params["dec_surf_w"][3, j * P2:(j + 1) * P2].reshape(cfg.P, cfg.P)
        np.testing.assert_array_equal(out["surf"][0, j, :2, :2], patch)
        assert np.all(out["surf"][0, j, 2:] == 0)


def test_decode_shape_error():
    cfg = bb.BackboneConfig(**TINY)
    with pytest.raises(ShapeError):
        bb.decode_native(np.zeros((1, 3, 3, 16)), bb.init_params(cfg), cfg)
    with pytest.raises(ShapeError):
        bb.encode({"surf": np.zeros((1, 2, 6, 8, 4)), "atm": np.zeros((1, 2, 2, 3, 8, 8))},
                  bb.init_params(cfg), cfg)


def _loss_and_grads(cfg, params, batch, R, input_grads=False):
    out, cache = bb.forward(batch, params, cfg, keep_cache=True)
    loss = sum(float(np.sum(R[k] * out[k])) for k in R)
    return loss, bb.backward(cache, R, params, cfg, input_grads=input_grads)


@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    cfg = bb.BackboneConfig(**TINY, seed=seed)
    params = bb.init_params(cfg)
    batch = rand_batch(cfg, rng)
    out, _ = bb.forward(batch, params, cfg)
    R = {k: rng.standard_normal(v.shape) for k, v in out.items()}
    _, g = _loss_and_grads(cfg, params, batch, R, input_grads=True)

    def f():
        o, _ = bb.forward(batch, params, cfg)
        return sum(float(np.sum(R[k] * o[k])) for k in R)

    assert check(f, params, g, rng, max_entries=40) < 1e-4
    inputs = {"input/surf": batch["surf"], "input/atm": batch["atm"]}
    assert check(f, inputs, g, rng, max_entries=40) < 1e-4


def test_new_variable_gradients():
    rng = np.random.default_rng(3)
    cfg = bb.BackboneConfig(**TINY)
    params, cfg = bb.add_new_variables(bb.init_params(cfg), cfg, ["a", "b"])
    batch = rand_batch(cfg, rng)
    batch["new"] = rng.standard_normal((2, cfg.T, 2, cfg.H, cfg.W))
    out, _ = bb.forward(batch, params, cfg)
    assert out["new"].shape == (2, 2, 8, 8)
    R = {k: rng.standard_normal(v.shape) for k, v in out.items()}
    _, g = _loss_and_grads(cfg, params, batch, R)

    def f():
        o, _ = bb.forward(batch, params, cfg)
        return sum(float(np.sum(R[k] * o[k])) for k in R)

    sub = {k: v for k, v in params.items() if "/" in k or k.startswith("enc_surf")}
    assert check(f, sub, g, rng, max_entries=30) < 1e-4


def test_forward_deterministic(rng):
    cfg = bb.BackboneConfig(**TINY)
    params = bb.init_params(cfg)
    b = rand_batch(cfg, rng)
    o1, _ = bb.forward(b, params, cfg)
    o2, _ = bb.forward(b, params, cfg)
    assert o1["surf"].tobytes() == o2["surf"].tobytes()
    assert bb.params_hash(params) == bb.params_hash(bb.init_params(cfg))


def test_frozen_backbone_rejects_updates():
    cfg = bb.BackboneConfig(**TINY)
    norm = {v: (0.0, 1.0) for v in ("u", "v", "q", "tmp", "tmp_atm", "q_atm")}
    m = bb.Backbone(cfg, bb.init_params(cfg), norm, ("u", "v", "q", "tmp"), ("tmp_atm", "q_atm"),
                    np.zeros((2, 8, 8)))
    m.freeze()
    h = m.hash()
    with pytest.raises(ValueError):
        m.params["lift_w"][0, 0] = 1.0
    assert m.hash() == h
