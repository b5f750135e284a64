"""Acceptance criteria, one test per criterion.

Criteria 4 to 8 share one run of the command-line pipeline on the default
desk world (32 x 64 grid, 2000 training steps).  That run takes roughly ten
minutes on one CPU core.  Set ``LH_DESK_DIR`` to keep its outputs in a fixed
directory; an existing complete run there is reused.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from latenthead import backbone as bb
from latenthead import metrics as me
from latenthead import synthworld as sw
from latenthead import trainer as tr
from latenthead.cli import main
from latenthead.evaluate import std_ratio
from latenthead.heads import head_backward, head_forward, init_head
from latenthead.tensor_core import (lat_weights, patchify, read_tensor, regular_grid, unpatchify,
                                    write_tensor)
from latenthead.transforms import inv_log_precip, log_precip

from gradcheck import check
from oracles import fss_bruteforce, w1_trapezoid


def tree_hash(directory) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(directory).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(directory)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


# -- 1 ------------------------------------------------------------------------------

def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(seed)
        cfg = bb.BackboneConfig(H=8, W=8, P=2, E=8, L_atm=3, L_lat=2, seed=seed)
        params = bb.init_params(cfg)
        batch = {"surf": rng.standard_normal((2, cfg.T, cfg.V_s, 8, 8)),
                 "atm": rng.standard_normal((2, cfg.T, cfg.V_a, cfg.L_atm, 8, 8))}
        out, cache = bb.forward(batch, params, cfg, keep_cache=True)
        R = {k: rng.standard_normal(v.shape) for k, v in out.items()}
        g = bb.backward(cache, R, params, cfg, input_grads=True)

        def f():
            o, _ = bb.forward(batch, params, cfg)
            return sum(float(np.sum(R[k] * o[k])) for k in R)

        worst = max(worst, check(f, params, g, rng, max_entries=60))
        worst = max(worst, check(f, {"input/surf": batch["surf"], "input/atm": batch["atm"]}, g, rng,
                                 max_entries=40))

        head = init_head("x", [2 * cfg.E, 16, 16, 4, cfg.P * cfg.P], (8, 8), seed=seed)
        x = rng.standard_normal((2, cfg.N, 2 * cfg.E))
        Rh = rng.standard_normal((2, 8, 8))
        hg, dx = head_backward(x, head, Rh)
        fh = lambda: float(np.sum(Rh * head_forward(x, head)))
        worst = max(worst, check(fh, head.params(), hg), check(fh, {"x": x}, {"x": dx}))

        p, r = rng.standard_normal((3, 8, 8)), rng.standard_normal((3, 8, 8))
        w = rng.uniform(0.5, 1.5, 8)
        _, gl = tr.wmae_loss(p, r, w)
        worst = max(worst, check(lambda: tr.wmae_loss(p, r, w)[0], {"p": p}, {"p": gl}))
    assert worst < 1e-4
    assert time.perf_counter() - t0 < 60


# -- 2 ------------------------------------------------------------------------------

def test_criterion_02_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    for i in range(200):
        shape = rng.choice([0.3, 1.0, 3.0])
        p, r = rng.gamma(shape, 2.0, (8, 8)), rng.gamma(shape, 2.0, (8, 8))
        alpha = float(rng.choice([0.5, 1.0, 4.0]))
        window = int(rng.choice([1, 3, 5]))
        assert me.fss(p, r, alpha, window) == fss_bruteforce(p, r, alpha, window)
        assert me.w1(p, r) == w1_trapezoid(p, r)
    assert time.perf_counter() - t0 < 60


# -- 3 ------------------------------------------------------------------------------

def test_criterion_03_perfect_forecast():
    rng = np.random.default_rng(3)
    H, W = 16, 32
    w = lat_weights(regular_grid(H, W)[0])
    for _ in range(5):
        ref = rng.gamma(0.6, 3.0, (4, H, W))
        hist = rng.gamma(0.6, 3.0, (300, H, W))
        clim = me.SeepsClimatology.from_series(hist)
        rep = me.evaluate_fields(ref.copy(), ref, weights=w, climatology=clim, P=4)
        v = rep.values
        for k in ("mae", "rmse", "w1", "seeps"):
            assert v[k] == 0, k
        assert abs(v["bias"]) == 0
        for k in ("pcc", "fss_1", "fss_5"):
            assert v[k] == 1, k
        assert v["patchiness"] == pytest.approx(1.0, abs=1e-12)


# -- desk pipeline (4 to 8) ---------------------------------------------------------

STEPS = ("gen-data", "pretrain", "train-decoder", "finetune", "evaluate", "rollout", "cost-report")


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = Path(os.environ["LH_DESK_DIR"]) if os.environ.get("LH_DESK_DIR") else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    done = root / "complete.json"
    if done.exists():
        return root, json.loads(done.read_text())
    d, pre = str(root / "data"), root / "pre"
    rc = {}
    rc["gen-data"] = main(["gen-data", "--out", d])
    rc["pretrain"] = main(["pretrain", "--data", d, "--out", str(pre)])
    before = tree_hash(pre / "backbone")
    rc["train-decoder"] = main(["train-decoder", "--data", d, "--backbone", str(pre / "backbone"),
                                "--out", str(root / "dec")])
    after = tree_hash(pre / "backbone")
    rc["finetune"] = main(["finetune", "--data", d, "--backbone", str(pre / "backbone"),
                           "--out", str(root / "ft")])
    rc["evaluate"] = max(main(["evaluate", "--pred", str(root / m / "pred"), "--ref", d,
                               "--out", str(root / f"{m}_report.json")]) for m in ("dec", "ft"))
    rc["rollout"] = main(["rollout", "--data", d, "--backbone", str(pre / "backbone"), "--heads",
                          str(root / "dec" / "heads"), "--steps", "64", "--out", str(root / "roll")])
    rc["cost-report"] = main(["cost-report", "--out", str(root / "cost.json")])
    info = {"exit_codes": rc, "hash_before": before, "hash_after": after}
    if all(c == 0 for c in rc.values()):
        done.write_text(json.dumps(info))
    return root, info


def _pcc(root, mode):
    rep = json.loads((root / f"{mode}_report.json").read_text())
    return {v: r["values"]["pcc"] for v, r in rep["variables"].items()}


def test_desk_pipeline_runs(desk):
    _, info = desk
    assert info["exit_codes"] == {s: 0 for s in STEPS}


def test_criterion_04_correlation_ordering(desk):
    root, _ = desk
    p = _pcc(root, "dec")
    print("decoder PCC", {k: round(x, 3) for k, x in p.items()})
    assert p["evap_like"] > p["precip_like"] > p["storage_like"]
    assert p["evap_like"] > 0.9
    assert p["storage_like"] < 0.5


def test_criterion_05_finetune_advantage(desk):
    root, _ = desk
    dec, ft = _pcc(root, "dec"), _pcc(root, "ft")
    print("storage PCC decoder", round(dec["storage_like"], 3), "finetune", round(ft["storage_like"], 3))
    assert ft["storage_like"] - dec["storage_like"] >= 0.1


def test_criterion_06_cost_ordering(desk):
    root, _ = desk
    cost = json.loads((root / "cost.json").read_text())
    dec, ft = cost["decoder"], cost["finetune"]
    assert dec["flops_per_step"] < ft["flops_per_step"] / 5
    assert dec["trainable_params"] < ft["trainable_params"] / 5
    sd = json.loads((root / "dec" / "cost.json").read_text())["samples_per_second"]
    sf = json.loads((root / "ft" / "cost.json").read_text())["samples_per_second"]
    print(f"samples/s decoder {sd:.1f} finetune {sf:.1f}")
    assert sd >= 1.5 * sf


def test_criterion_07_freezing(desk):
    root, info = desk
    assert info["hash_before"] == info["hash_after"]
    man = json.loads((root / "dec" / "run_manifest.json").read_text())
    assert man["extra"]["backbone_hash_before"] == man["extra"]["backbone_hash_after"]


def test_criterion_08_rollout_stability(desk):
    root, _ = desk
    ds = sw.load_dataset(root / "data")
    fields, _ = sw.load_fields(root / "roll" / "fields")
    r = ds.split_range("test")
    worst = {}
    for v in sw.TARGET_VARS:
        a = fields[v].astype(np.float64)
        assert a.shape[0] == 64 and np.all(np.isfinite(a))
        mask = ds.land_mask if v in sw.LAND_ONLY else None
        worst[v] = float(std_ratio(a, ds.fields[v][r.start:r.stop], mask).max())
    print("max std ratio", {k: round(x, 2) for k, x in worst.items()})
    assert all(x <= 3.0 for x in worst.values())


# -- 9 to 11 ---------------------------------------------------------------------------

def test_criterion_09_schedule_endpoints():
    cfg = tr.TrainConfig(mode="finetune", lr_max=5e-4, lr_min=5e-5, warmup_steps=1000)
    total = 20000
    assert abs(tr.lr_schedule(cfg.warmup_steps, total, cfg) - 5e-4) <= 1e-12
    assert abs(tr.lr_schedule(total, total, cfg) - 5e-5) <= 1e-12
    assert tr.TrainConfig().lr_max == 5e-4 and tr.TrainConfig().lr_min == 5e-5


def test_criterion_10_patchiness():
    rng = np.random.default_rng(10)
    H, W, P = 32, 64, 4
    y, x = np.meshgrid(np.linspace(0, np.pi, H), np.linspace(0, 2 * np.pi, W, endpoint=False),
                       indexing="ij")
    ref = sum(rng.standard_normal() * np.sin(m * y + 1.0) * np.cos(n * x + 0.5)
              for m, n in ((1, 2), (2, 3), (3, 1)))
    blocky = np.kron(ref.reshape(H // P, P, W // P, P).mean(axis=(1, 3)), np.ones((P, P)))
    assert me.patchiness(blocky, ref, P) > 2.0
    assert abs(me.patchiness(ref, ref, P) - 1.0) <= 1e-9


def test_criterion_11_round_trips(tmp_path):
    rng = np.random.default_rng(11)
    for shape in ((), (7,), (3, 5, 7), (2, 1, 4, 8, 16)):
        a = (rng.standard_normal(shape) * 10.0 ** rng.integers(-30, 30, shape)).astype(np.float32)
        write_tensor(tmp_path / "t.lht", a)
        b = read_tensor(tmp_path / "t.lht")
        assert b.dtype == np.float32 and b.shape == a.shape and b.tobytes() == a.tobytes()
    x = np.concatenate([[0.0, 100.0], rng.uniform(0, 100, 10000), 10.0 ** rng.uniform(-6, 2, 1000)])
    back = inv_log_precip(log_precip(x))
    pos = x > 0
    assert np.max(np.abs(back[pos] - x[pos]) / x[pos]) < 1e-6
    assert back[0] == 0.0
    f = rng.standard_normal((2, 3, 8, 12))
    np.testing.assert_array_equal(unpatchify(patchify(f, 4), 4, 8, 12), f)
    p = rng.standard_normal((2, 3, 6, 16))
    np.testing.assert_array_equal(patchify(unpatchify(p, 4, 8, 12), 4), p)


# -- 12 ----------------------------------------------------------------------------------

SMALL = {
    "seed": 12,
    "world": {"H": 8, "W": 16, "n_steps": 90, "n_train": 60, "n_val": 14, "spinup": 5, "atm_levels": 3},
    "backbone": {"P": 2, "E": 8, "L_lat": 2},
    "pretrain": {"epochs": 1, "rollout_epochs": 1, "rollout_steps": 2, "warmup_steps": 2},
    "decoder": {"epochs": 2, "warmup_steps": 2},
    "metrics": {"fss_window": 3},
}


def test_criterion_12_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    reports = []
    for run in ("a", "b"):
        root = tmp_path / run
        d = str(root / "data")
        args = ["--config", str(cfg)]
        assert main(["gen-data", *args, "--out", d]) == 0
        assert main(["pretrain", *args, "--data", d, "--out", str(root / "pre")]) == 0
        assert main(["train-decoder", *args, "--data", d, "--backbone", str(root / "pre" / "backbone"),
                     "--out", str(root / "dec")]) == 0
        assert main(["evaluate", *args, "--pred", str(root / "dec" / "pred"), "--ref", d,
                     "--out", str(root / "report.json")]) == 0
        reports.append(root)
    a, b = reports
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert tree_hash(a / "pre" / "backbone") == tree_hash(b / "pre" / "backbone")
    assert tree_hash(a / "dec" / "heads") == tree_hash(b / "dec" / "heads")
    assert (a / "pre" / "loss.csv").read_bytes() == (b / "pre" / "loss.csv").read_bytes()
