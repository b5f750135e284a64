"""Command-line entry point: ``latenthead <command> ...``.

Exit status 0 on success, 2 on a configuration or usage error, 3 on a
runtime or numerical failure.  Every successful command writes a
``run_manifest.json`` listing what it produced.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import backbone as bb
from . import evaluate as ev
from . import metrics as me
from . import synthworld as sw
from . import trainer as tr
from .heads import load_heads, save_heads
from .tensor_core import (DomainError, ShapeError, TensorFileError, hash_directory, lat_weights,
                          read_tensor, write_json, write_tensor)

log = logging.getLogger("latenthead")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


@dataclass
class RunManifest:
    command: str
    config_hash: str
    dataset_hash: str | None
    seed: int
    artifacts: list
    wall_clock_seconds: float
    samples_per_second: float | None = None
    extra: dict = field(default_factory=dict)

    def write(self, path):
        write_json(path, asdict(self))


# -- helpers --------------------------------------------------------------------

def _dir_hash(path) -> str | None:
    return hash_directory(path) if path and Path(path).is_dir() else None


def _write_csv(path, rows: list[dict], header=None):
    header = header or (list(rows[0]) if rows else [])
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def _write_table(path, rows: list[dict], header):
    """CSV unless the path ends in ``.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        write_json(path, {"rows": rows})
    else:
        _write_csv(path, rows, header)


def _loss_rows(history):
    return [{"step": s, "split": sp, "loss": float(l)} for s, sp, l in history]


def _backbone_cfg(cfg: dict, ds: sw.Dataset) -> bb.BackboneConfig:
    sec = cfg.get("backbone", {})
    H, W = ds.fields["u"].shape[-2:]
    L = ds.fields["tmp_atm"].shape[1]
    return bb.BackboneConfig(H=H, W=W, n_surf=len(sw.BASE_VARS), n_static=len(sw.STATIC_VARS),
                             V_a=len(sw.ATMOS_VARS), L_atm=L, L_lat=sec.get("L_lat", min(3, L)),
                             **{k: v for k, v in sec.items() if k != "L_lat"})


def _train_cfg(cfg: dict, mode: str) -> tr.TrainConfig:
    return tr.TrainConfig(mode=mode, **cfg.get(mode, {}))


def _target_times(ds, split="test", T=2):
    return tr.sample_times(ds, split, T)


def _save_predictions(out_dir, preds: dict, times, ds):
    sw.save_fields(out_dir, preds, times, ds.lats, ds.lons, {"kind": "predictions"})


# -- commands -------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    world = sw.WorldConfig.from_dict(cfg["world"])
    ds = sw.generate(world)
    out = Path(args.out)
    sw.save_dataset(ds, out)
    basins = ev.synthetic_basins(ds.land_mask, ds.lats)
    (out / "basins").mkdir(exist_ok=True)
    for b in basins:
        write_tensor(out / "basins" / f"{b.basin_id}.lht", b.mask.astype(np.float32))
    return {"artifacts": [str(out / "dataset.json"), str(out / "fields"), str(out / "static"),
                          str(out / "basins")],
            "dataset_hash": _dir_hash(out)}


def _train_common(args):
    ds = sw.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return ds, out


def cmd_pretrain(args, cfg):
    ds, out = _train_common(args)
    bcfg = _backbone_cfg(cfg, ds)
    tcfg = _train_cfg(cfg, "pretrain")
    try:
        model, res = tr.pretrain(ds, bcfg, tcfg, freeze=True)
    except tr.TrainingError as e:
        _save_last_good(e, out, bcfg, ds)
        raise
    model.save(out / "backbone")
    _write_csv(out / "loss.csv", _loss_rows(res.history))
    cost = tr.flop_count(bcfg, "pretrain", batch_size=tcfg.batch_size, epochs=tcfg.epochs)
    cost.samples_per_second = res.samples_per_second
    write_json(out / "cost.json", cost.to_dict())
    return {"artifacts": [str(out / "backbone"), str(out / "loss.csv"), str(out / "cost.json")],
            "samples_per_second": res.samples_per_second,
            "extra": {"backbone_hash": _dir_hash(out / "backbone")}}


def _save_last_good(err: tr.TrainingError, out: Path, bcfg, ds):
    if isinstance(err.last_good, dict) and err.last_good:
        bb.Backbone(bcfg, err.last_good, tr.compute_norm(ds), sw.BASE_VARS, sw.ATMOS_VARS,
                    tr.static_channels(ds)).save(out / "last_good")
        log.error("training diverged; last good parameters in %s", out / "last_good")


def cmd_train_decoder(args, cfg):
    ds, out = _train_common(args)
    h_before = _dir_hash(args.backbone)
    model = bb.Backbone.load(args.backbone)
    model.freeze()
    tcfg = _train_cfg(cfg, "decoder")
    heads, res = tr.train_decoders(model, ds, cfg["variables"], tcfg)
    save_heads(out / "heads", heads)
    _write_csv(out / "loss.csv", _loss_rows(res.history))
    val_rows = [{"epoch": i, "var": v, "val_loss": l} for v, ls in res.extra["val_per_var"].items()
                for i, l in enumerate(ls)]
    _write_csv(out / "val_loss_per_var.csv", val_rows)
    times = _target_times(ds, "test", model.cfg.T)
    lat = tr.surface_latents(model, ds, times)
    preds = {v: h.predict(lat) for v, h in heads.items()}
    _save_predictions(out / "pred", preds, times + 1, ds)
    cost = tr.flop_count(model.cfg, "decoder", head_dims=heads[cfg["variables"][0]].dims,
                         n_heads=len(heads), batch_size=tcfg.batch_size, epochs=tcfg.epochs,
                         latent_cache=tcfg.latent_cache)
    cost.samples_per_second = res.samples_per_second
    write_json(out / "cost.json", cost.to_dict())
    h_after = _dir_hash(args.backbone)
    if h_before != h_after:
        raise RuntimeError("backbone checkpoint changed during decoder training")
    return {"artifacts": [str(out / p) for p in ("heads", "loss.csv", "val_loss_per_var.csv", "pred", "cost.json")],
            "samples_per_second": res.samples_per_second,
            "extra": {"backbone_hash_before": h_before, "backbone_hash_after": h_after}}


def cmd_finetune(args, cfg):
    ds, out = _train_common(args)
    base = bb.Backbone.load(args.backbone)
    tcfg = _train_cfg(cfg, "finetune")
    ft, res = tr.finetune(base, ds, cfg["variables"], tcfg)
    ft.save(out / "model")
    _write_csv(out / "loss.csv", _loss_rows(res.history))
    times = _target_times(ds, "test", base.cfg.T)
    preds = {v: [] for v in ft.new_vars}
    for i in range(0, len(times), 64):
        p = ft.predict_new(ds, times[i:i + 64])
        for v in ft.new_vars:
            preds[v].append(p[v])
    _save_predictions(out / "pred", {v: np.concatenate(a) for v, a in preds.items()}, times + 1, ds)
    cost = tr.flop_count(ft.backbone.cfg, "finetune", batch_size=tcfg.batch_size, epochs=tcfg.epochs)
    cost.samples_per_second = res.samples_per_second
    write_json(out / "cost.json", cost.to_dict())
    return {"artifacts": [str(out / p) for p in ("model", "loss.csv", "pred", "cost.json")],
            "samples_per_second": res.samples_per_second}


def _metric_cfg(cfg) -> me.MetricConfig:
    m = dict(cfg.get("metrics", {}))
    if "fss_thresholds" in m:
        m["fss_thresholds"] = tuple(m["fss_thresholds"])
    return me.MetricConfig(**m)


def evaluate_prediction_dir(pred_dir, ref_dir, metrics=("all",), mcfg=None, P: int = 4) -> dict:
    """Metric report per variable for a prediction directory against a dataset."""
    mcfg = mcfg or me.MetricConfig()
    pred, side = sw.load_fields(pred_dir)
    ref_ds = sw.load_dataset(ref_dir)
    times = np.asarray(side.extra["times"])
    if times.size == 0:
        raise DomainError("prediction directory holds no steps")
    w = lat_weights(ref_ds.lats)
    land = ref_ds.land_mask
    report = {"n_samples": int(times.size), "config": asdict(mcfg), "variables": {}}
    for v, p in pred.items():
        ref = ref_ds.fields[v][times].astype(np.float64)
        p = p.astype(np.float64)
        if p.shape != ref.shape:
            raise ShapeError(f"{v}: prediction {p.shape} vs reference {ref.shape}")
        clim = None
        if v == "precip_like":
            tr_range = ref_ds.split_range("train")
            clim = me.SeepsClimatology.from_series(ref_ds.fields[v][tr_range.start:tr_range.stop],
                                                   mcfg.seeps_dry_threshold)
        mask = land if v in sw.LAND_ONLY else None
        rep = me.evaluate_fields(p, ref, var_id=v, config=mcfg, weights=w, mask=mask,
                                 climatology=clim, P=P, metrics=metrics)
        report["variables"][v] = {"values": rep.values, "flags": rep.flags}
    return report


def cmd_evaluate(args, cfg):
    P = cfg.get("backbone", {}).get("P", bb.BackboneConfig().P)
    metrics = tuple(m.strip() for m in args.metrics.split(","))
    report = evaluate_prediction_dir(args.pred, args.ref, metrics, _metric_cfg(cfg), P)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        rows = [{"var": v, "metric": k, "value": x} for v, r in report["variables"].items()
                for k, x in sorted(r["values"].items())]
        _write_csv(out, rows, ["var", "metric", "value"])
    else:
        write_json(out, report)
    return {"artifacts": [str(out)], "dataset_hash": _dir_hash(args.ref),
            "manifest_path": out.with_name(out.stem + ".manifest.json")}


def cmd_rollout(args, cfg):
    ds = sw.load_dataset(args.data)
    model = bb.Backbone.load(args.backbone)
    heads = load_heads(args.heads) if args.heads else {}
    T = model.cfg.T
    steps = args.steps or cfg["rollout"].get("steps", 64)
    init = args.init if args.init is not None else cfg["rollout"].get("init")
    if init is None:
        init = ds.split_range("test").start + T - 1
    if init < T - 1 or init >= ds.n_steps:
        raise DomainError(f"init step {init} outside the dataset")
    res = ev.rollout(tr.surf_history(ds, [init], T)[0], tr.atm_history(ds, [init], T)[0],
                     model, heads, steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    times = init + 1 + np.arange(res.n_steps)
    _save_predictions(out / "fields", res.fields, times, ds)
    r = ds.split_range("test")
    rows, summary = [], {}
    for v, a in res.fields.items():
        if res.n_steps == 0:
            break
        mask = ds.land_mask if v in sw.LAND_ONLY else None
        ratio = ev.std_ratio(a, ds.fields[v][r.start:r.stop], mask)
        std = ev.spatial_std(a, mask)
        for k in range(res.n_steps):
            rows.append({"step": k + 1, "lead_hours": float(res.lead_hours[k]), "var": v,
                         "spatial_std": float(std[k]), "std_ratio": float(ratio[k])})
        summary[v] = {"max_std_ratio": float(ratio.max()), "min_std_ratio": float(ratio.min())}
    _write_csv(out / "rollout.csv", rows, ["step", "lead_hours", "var", "spatial_std", "std_ratio"])
    write_json(out / "rollout.json", {"init": int(init), "steps_requested": steps,
                                      "steps_completed": res.n_steps,
                                      "truncated_at": res.truncated_at, "variables": summary})
    if res.truncated_at is not None:
        log.warning("rollout produced non-finite values at step %d", res.truncated_at + 1)
    return {"artifacts": [str(out / "fields"), str(out / "rollout.csv"), str(out / "rollout.json")]}


def _load_basins(masks_dir, lats):
    d = Path(masks_dir)
    files = sorted(d.glob("*.lht"))
    if not files:
        raise DomainError(f"no basin masks (*.lht) in {d}")
    return [ev.BasinMask.on_grid(f.stem, read_tensor(f), lats) for f in files]


def cmd_basins(args, cfg):
    pred, side = sw.load_fields(args.pred)
    ds = sw.load_dataset(args.data)
    times = np.asarray(side.extra["times"])
    ref = {v: ds.fields[v][times] for v in pred}
    basins = _load_basins(args.masks or Path(args.data) / "basins", ds.lats)
    rows = ev.basin_table(pred, ref, basins)
    _write_table(args.out, rows, ["basin", "var", "relative_rmse", "pixels"])
    return {"artifacts": [str(args.out)], "dataset_hash": _dir_hash(args.data),
            "manifest_path": Path(args.out).with_name(Path(args.out).stem + ".manifest.json")}


def cmd_spectra(args, cfg):
    ds = sw.load_dataset(args.data)
    w = lat_weights(ds.lats)
    rows = []
    if args.pred:
        pred, side = sw.load_fields(args.pred)
        times = np.asarray(side.extra["times"])
    else:
        r = ds.split_range("test")
        pred, times = {}, np.arange(r.start, r.stop)
    variables = args.vars.split(",") if args.vars else (list(pred) or list(sw.BASE_VARS))
    for v in variables:
        sources = {"ref": ds.fields[v][times]}
        if v in pred:
            sources["pred"] = pred[v]
        for name, a in sources.items():
            spec = me.energy_spectrum(a, w)
            rows += [{"var": v, "source": name, "wavenumber": k, "power": float(p)}
                     for k, p in enumerate(spec)]
    _write_table(args.out, rows, ["var", "source", "wavenumber", "power"])
    return {"artifacts": [str(args.out)],
            "manifest_path": Path(args.out).with_name(Path(args.out).stem + ".manifest.json")}


def cmd_cost_report(args, cfg):
    world = cfg["world"]
    bsec = dict(cfg.get("backbone", {}))
    bcfg = bb.BackboneConfig(H=world.get("H", 32), W=world.get("W", 64),
                             L_atm=world.get("atm_levels", 4), **bsec)
    n_new = len(cfg["variables"])
    reports = {}
    for mode in ("pretrain", "decoder", "finetune"):
        t = _train_cfg(cfg, mode)
        reports[mode] = tr.flop_count(bcfg, mode, n_heads=n_new, n_new=n_new,
                                      batch_size=t.batch_size, epochs=t.epochs,
                                      latent_cache=t.latent_cache).to_dict()
    ft, dec = reports["finetune"], reports["decoder"]
    reports["ratios"] = {"flops_finetune_over_decoder": ft["flops_per_step"] / dec["flops_per_step"],
                         "trainable_finetune_over_decoder": ft["trainable_params"] / dec["trainable_params"],
                         "memory_finetune_over_decoder": ft["memory_floats"] / dec["memory_floats"]}
    text = json.dumps(reports, indent=2, sort_keys=True)
    if args.out:
        write_json(args.out, reports)
    else:
        print(text)
    out = [str(args.out)] if args.out else []
    mpath = Path(args.out).with_name(Path(args.out).stem + ".manifest.json") if args.out else None
    return {"artifacts": out, "manifest_path": mpath}


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-decoder": cmd_train_decoder,
    "finetune": cmd_finetune, "evaluate": cmd_evaluate, "rollout": cmd_rollout,
    "basins": cmd_basins, "spectra": cmd_spectra, "cost-report": cmd_cost_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latenthead",
                                description="Synthetic-world backbone, decoder heads and verification.")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS worker threads")
    p.add_argument("--seed", type=int, default=None, help="override every seed (beats LH_SEED)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help_, *flags):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON run configuration")
        for f in flags:
            f(s)
        return s

    data = lambda s: s.add_argument("--data", required=True, help="dataset directory")
    out_dir = lambda s: s.add_argument("--out", required=True, help="output directory")
    out_file = lambda s: s.add_argument("--out", required=True, help="output file")
    backbone = lambda s: s.add_argument("--backbone", required=True, help="backbone checkpoint directory")

    add("gen-data", "generate a synthetic dataset", out_dir)
    add("pretrain", "train and freeze the backbone", data, out_dir)
    add("train-decoder", "train decoder heads on the frozen backbone", data, backbone, out_dir)
    add("finetune", "fine-tune the whole backbone with new variables", data, backbone, out_dir)
    s = add("evaluate", "score predictions against a dataset", out_file)
    s.add_argument("--pred", required=True, help="prediction directory")
    s.add_argument("--ref", required=True, help="reference dataset directory")
    s.add_argument("--metrics", default="all", help="comma-separated metric names or 'all'")
    s = add("rollout", "autoregressive rollout with heads attached", data, backbone, out_dir)
    s.add_argument("--heads", help="decoder heads directory")
    s.add_argument("--init", type=int, help="index of the latest input step")
    s.add_argument("--steps", type=int, help="number of forecast steps (default 64)")
    s = add("basins", "relative RMSE of daily basin sums", data, out_file)
    s.add_argument("--pred", required=True, help="prediction directory")
    s.add_argument("--masks", help="directory of basin mask tensors (default DATA/basins)")
    s = add("spectra", "zonal energy spectra as CSV", data, out_file)
    s.add_argument("--pred", help="prediction directory (default: reference only)")
    s.add_argument("--vars", help="comma-separated variables")
    s = add("cost-report", "analytic FLOP and memory report for the three modes")
    s.add_argument("--out", help="output JSON (default stdout)")
    return p


def _threads(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise cfgmod.ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        cfg = cfgmod.load(args.config, args.seed)
        with _threads(args.threads):
            info = COMMANDS[args.command](args, cfg)
    except cfgmod.ConfigError as e:
        print(f"latenthead: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (tr.TrainingError, DomainError, ShapeError, TensorFileError, FileNotFoundError,
            KeyError, RuntimeError, ValueError, FloatingPointError) as e:
        print(f"latenthead: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    mpath = info.pop("manifest_path", None)
    if mpath is None:
        if not getattr(args, "out", None):
            return EXIT_OK
        mpath = Path(args.out) / "run_manifest.json"
    man = RunManifest(args.command, cfgmod.config_hash(cfg), info.get("dataset_hash", _dir_hash(getattr(args, "data", None))),
                      cfg["seed"], info.get("artifacts", []), time.perf_counter() - t0,
                      info.get("samples_per_second"), info.get("extra", {}))
    man.write(mpath)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
