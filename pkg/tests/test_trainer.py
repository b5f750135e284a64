import math

import numpy as np
import pytest

from latenthead import backbone as bb
from latenthead import synthworld as sw
from latenthead import trainer as tr
from latenthead.tensor_core import DomainError

from gradcheck import check

TINY_WORLD = dict(H=8, W=16, n_steps=90, n_train=60, n_val=15, spinup=10, atm_levels=3)


@pytest.fixture(scope="module")
def tiny_ds():
    return sw.generate(sw.WorldConfig(**TINY_WORLD))


@pytest.fixture(scope="module")
def tiny_backbone(tiny_ds):
    cfg = bb.BackboneConfig(H=8, W=16, P=2, E=8, L_atm=3, L_lat=2)
    tcfg = tr.TrainConfig(mode="pretrain", epochs=2, warmup_steps=2, batch_size=8)
    model, res = tr.pretrain(tiny_ds, cfg, tcfg)
    return model, res


# -- loss ---------------------------------------------------------------------

def test_wmae_examples(rng):
    ref = rng.standard_normal((3, 4))
    w = np.array([0.5, 1.0, 1.5])
    assert tr.wmae_loss(ref, ref, w)[0] == 0
    assert tr.wmae_loss(ref + 0.7, ref, w)[0] == pytest.approx(0.7, rel=1e-14)
    loss, _ = tr.wmae_loss(np.array([[3.0], [0.0]]), np.zeros((2, 1)), [4 / 3, 2 / 3])
    assert loss == pytest.approx(2.0, rel=1e-15)


def test_wmae_mask_and_errors(rng):
    p, r = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    with pytest.raises(DomainError):
        tr.wmae_loss(p, r, [1.0, 1.0], np.zeros((2, 3)))
    mask = np.array([[1, 0, 1], [0, 1, 1]])
    loss, g = tr.wmae_loss(p, r, [1.0, 1.0], mask)
    assert loss == pytest.approx(np.abs(p - r)[mask > 0].mean(), rel=1e-14)
    assert np.all(g[mask == 0] == 0)


def test_wmae_tie_subgradient_zero():
    _, g = tr.wmae_loss(np.ones((2, 2)), np.ones((2, 2)), [1.0, 1.0])
    assert np.all(g == 0)


def test_wmae_gradient_and_permutation(rng):
    pred = rng.standard_normal((4, 5))
    ref = rng.standard_normal((4, 5))
    w = rng.uniform(0.1, 2, 4)
    _, g = tr.wmae_loss(pred, ref, w)
    assert check(lambda: tr.wmae_loss(pred, ref, w)[0], {"p": pred}, {"p": g}) < 1e-4
    perm = rng.permutation(4)
    assert tr.wmae_loss(pred[perm], ref[perm], w[perm])[0] == pytest.approx(
        tr.wmae_loss(pred, ref, w)[0], rel=1e-14)


# -- schedule and optimizer --------------------------------------------------

def test_schedule_endpoints_and_midpoint():
    c = tr.TrainConfig(mode="decoder")
    total = 1100
    assert abs(tr.lr_schedule(100, total, c) - 5e-4) < 1e-12
    assert abs(tr.lr_schedule(total, total, c) - 5e-5) < 1e-12
    assert tr.lr_schedule(600, total, c) == pytest.approx(2.75e-4, rel=1e-12)
    assert tr.lr_schedule(0, total, c) == pytest.approx(5e-6)
    lrs = [tr.lr_schedule(s, total, c) for s in range(100, total + 1)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_errors():
    c = tr.TrainConfig(mode="finetune")
    assert c.warmup_steps == 500
    with pytest.raises(ValueError):
        tr.lr_schedule(0, 500, c)
    with pytest.raises(ValueError):
        tr.lr_schedule(1001, 1000, c)


def test_train_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(lr_max=1e-5, lr_min=1e-4)
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="sprint")
    with pytest.raises(ValueError):
        tr.TrainConfig(warmup_steps=-1)


def test_adam_closed_form():
    p = {"x": np.array([1.0])}
    st = tr.init_opt_state(p)
    tr.adam_step(p, {"x": np.array([1.0])}, st, 0.1)
    assert p["x"][0] == pytest.approx(0.9, abs=1e-7)
    q = {"x": np.array([2.0, -1.0])}
    st = tr.init_opt_state(q)
    tr.adam_step(q, {"x": np.zeros(2)}, st, 0.1)
    np.testing.assert_array_equal(q["x"], [2.0, -1.0])


def test_adam_nan_raises():
    p = {"x": np.zeros(2)}
    with pytest.raises(tr.TrainingError):
        tr.adam_step(p, {"x": np.array([np.nan, 0.0])}, tr.init_opt_state(p), 0.1)


# -- cost model ----------------------------------------------------------------

def test_linear_flops():
    assert tr.linear_flops(1, 2, 3) == 12


def test_cost_ordering_desk():
    cfg = bb.BackboneConfig()
    dec = tr.flop_count(cfg, "decoder")
    ft = tr.flop_count(cfg, "finetune")
    assert dec.flops_per_step < ft.flops_per_step
    assert ft.flops_per_step / dec.flops_per_step > 5
    assert ft.trainable_params > dec.trainable_params
    assert dec.frozen_params == sum(v.size for v in bb.init_params(cfg).values())
    for r in (dec, ft, tr.flop_count(cfg, "pretrain")):
        assert min(r.flops_per_step, r.trainable_params, r.frozen_params, r.peak_activation_floats,
                   r.memory_floats) >= 0


# -- end-to-end on a tiny world ------------------------------------------------

def test_pretrain_reduces_val_loss(tiny_backbone):
    model, res = tiny_backbone
    v = res.val_losses()
    assert v[-1] < v[0]
    assert model.frozen


def test_pretrain_deterministic(tiny_ds, tiny_backbone):
    cfg = bb.BackboneConfig(H=8, W=16, P=2, E=8, L_atm=3, L_lat=2)
    tcfg = tr.TrainConfig(mode="pretrain", epochs=2, warmup_steps=2, batch_size=8)
    again, _ = tr.pretrain(tiny_ds, cfg, tcfg)
    assert again.hash() == tiny_backbone[0].hash()


def test_decoder_training_keeps_backbone(tiny_ds, tiny_backbone):
    model = tiny_backbone[0]
    h = model.hash()
    tcfg = tr.TrainConfig(mode="decoder", epochs=3, warmup_steps=2)
    heads, res = tr.train_decoders(model, tiny_ds, ["evap_like", "precip_like"], tcfg)
    assert model.hash() == h
    for v in ("evap_like", "precip_like"):
        assert res.extra["val_per_var"][v][-1] < res.extra["val_per_var"][v][0]
    # same result without the latent cache
    heads2, _ = tr.train_decoders(model, tiny_ds, ["evap_like", "precip_like"],
                                  tr.TrainConfig(mode="decoder", epochs=3, warmup_steps=2,
                                                 latent_cache=False))
    np.testing.assert_allclose(heads2["evap_like"].weights[0], heads["evap_like"].weights[0],
                               rtol=1e-10, atol=1e-12)


def test_decoder_requires_frozen(tiny_ds, tiny_backbone):
    with pytest.raises(ValueError):
        tr.train_decoders(tiny_backbone[0].unfrozen_copy(), tiny_ds, ["evap_like"], tr.TrainConfig())


def test_finetune_adds_parameters(tiny_ds, tiny_backbone, tmp_path):
    base = tiny_backbone[0]
    tcfg = tr.TrainConfig(mode="finetune", epochs=2, warmup_steps=2)
    ft, res = tr.finetune(base, tiny_ds, ["evap_like", "storage_like"], tcfg)
    assert ft.backbone.param_count() > base.param_count()
    assert math.isfinite(res.val_losses()[-1])
    t = tr.sample_times(tiny_ds, "test")[:3]
    p = ft.predict_new(tiny_ds, t)
    assert p["storage_like"].shape == (3, 8, 16)
    ft.save(tmp_path / "ft")
    back = tr.FinetunedModel.load(tmp_path / "ft")
    np.testing.assert_allclose(back.predict_new(tiny_ds, t)["evap_like"], p["evap_like"], rtol=1e-4,
                               atol=1e-5)


def test_rollout_loss_gradients(tiny_ds, tiny_backbone):
    model = tiny_backbone[0].unfrozen_copy()
    rng = np.random.default_rng(0)
    t = tr.sample_times(tiny_ds, "train")[:2]
    K = 3
    batch = model.make_batch(tr.surf_history(tiny_ds, t), tr.atm_history(tiny_ds, t))
    targets = [(model.normalize_surf(tr.surf_history(tiny_ds, t + k, 1)[:, 0]),
                model.normalize_atm(tr.atm_history(tiny_ds, t + k, 1)[:, 0])) for k in range(1, K + 1)]
    w = tr.lat_weights(tiny_ds.lats)
    loss, g = tr.rollout_loss_and_grads(model, batch, targets, w)
    sub = {k: model.params[k] for k in ("lift_w", "block0_tok_w", "dec_surf_w", "enc_atm_w")}
    f = lambda: tr.rollout_loss_and_grads(model, batch, targets, w)[0]
    assert check(f, sub, g, rng, max_entries=15) < 1e-4
