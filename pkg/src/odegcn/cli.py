"""Command-line entry point: ``odegcn <subcommand> [flags]``.

Subcommands: synth, train, eval, gradcheck, check, theory-lab, sweep.
Settings come from built-in defaults, then ``--config``, then flags.
Every run writes ``config.ini`` (the resolved settings) into ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .config import RunConfig, apply_overrides, config_hash, load_config, write_snapshot
from .data import (build_split, load_populations, load_series, synth_rd, synth_sir, write_populations,
                   write_series)
from .graph import load_edges, write_edges
from .gradcheck import run_gradcheck
from .metrics import check_symmetry, evaluate
from .optimize import TrainingInterrupted, chunk_tasks, maml_init, train
from .rdgcn import RdModel, rd_residuals
from .sirgcn import SirModel
from .theory import discrepancy_experiment, sweep_experiment

log = logging.getLogger("odegcn")


class UsageError(ValueError):
    pass


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _clean(obj):
    """Replace non-finite floats with None so reports stay valid JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _provenance(cfg: RunConfig) -> dict:
    return {"version": __version__, "config_hash": config_hash(cfg)}


def _params_to_lists(p) -> dict:
    return {k: np.asarray(v, float).tolist() for k, v in asdict(p).items() if k != "single_beta"}


# ------------------------------------------------------------------ synth


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    synth = replace(cfg.synth, model=cfg.model)
    # generate everything first so a failure leaves no partial files
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        if cfg.model == "rd":
            ds = synth_rd(synth)
            truth = {"model": "rd", **_params_to_lists(ds.params)}
            write_series(tmp / "series.csv", ds.table)
        else:
            ds = synth_sir(synth)
            p = ds.params
            truth = {"model": "sir", "single_beta": p.single_beta, **_params_to_lists(p)}
            write_series(tmp / "series.csv", ds.table)
            write_populations(tmp / "populations.csv", ds.N, ds.table.columns)
            for name, arr in (("susceptible.csv", ds.S), ("recovered.csv", ds.R)):
                write_series(tmp / name, replace(ds.table, values=arr, mask=np.ones_like(arr, bool)))
        write_edges(tmp / "edges.csv", ds.graph)
        _dump_json(tmp / "truth.json", _clean({**truth, **_provenance(cfg)}))
        out.mkdir(parents=True, exist_ok=True)
        for f in sorted(tmp.iterdir()):
            shutil.copyfile(f, out / f.name)
    write_snapshot(cfg, out / "config.ini")
    print(f"wrote {cfg.model} dataset ({ds.graph.n} vertices, {ds.graph.num_edges} edges) to {out}")
    return 0


# ------------------------------------------------------------ train / eval


def _require(path: Path | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given; pass --data DIR or set [paths] {what}")
    if not path.exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _load_inputs(cfg: RunConfig):
    series = load_series(_require(cfg.paths.resolve("series", "series.csv"), "series"))
    graph = load_edges(_require(cfg.paths.resolve("edges", "edges.csv"), "edges"), n=series.n)
    pops = None
    if cfg.model == "sir":
        pp = cfg.paths.resolve("populations", "populations.csv")
        if pp is not None and (cfg.paths.populations or pp.exists()):
            pops = load_populations(pp, series.columns)
    return series, graph, pops


def _model(cfg: RunConfig, graph):
    if cfg.model == "rd":
        return RdModel(graph, cfg.loss)
    return SirModel(graph, cfg.loss, cfg.single_beta)


def cmd_train(cfg: RunConfig, out: Path) -> int:
    series, graph, pops = _load_inputs(cfg)
    split = build_split(series, cfg.effective_split(), pops)
    model = _model(cfg, graph)
    tcfg = replace(cfg.train, loss_kind=cfg.loss)
    init = None
    if cfg.maml:
        tasks = chunk_tasks(split.train, cfg.maml_tasks)
        init = maml_init(model, tasks, cfg.maml_cfg, seed=tcfg.seed, loss_kind=cfg.loss)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    try:
        best, history = train(model, split.train, split.val, tcfg, init=init)
    except TrainingInterrupted as exc:
        exc.history.write_csv(out / "history.csv")
        model.save(out / "checkpoint.json", exc.best, {"interrupted": True})
        print(f"interrupted; partial history written to {out / 'history.csv'}", file=sys.stderr)
        return 130
    history.write_csv(out / "history.csv")
    model.save(out / "checkpoint.json", best, {"best_epoch": history.best_epoch, "loss": cfg.loss,
                                              "version": __version__})
    summary = {
        **_provenance(cfg), "model": cfg.model, "loss": cfg.loss, "maml": cfg.maml,
        "num_params": model.num_params, "epochs": len(history.epochs), "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "train_loss": model.loss(best, split.train), "val_loss": model.loss(best, split.val),
        "train_samples": len(split.train), "val_samples": len(split.val), "test_samples": len(split.test),
    }
    _dump_json(out / "train_summary.json", _clean(summary))
    print(f"trained {cfg.model} for {len(history.epochs)} epochs; best epoch {history.best_epoch}, "
          f"train {cfg.loss} {summary['train_loss']:.6g}, val {summary['val_loss']:.6g}")
    return 0


def _checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    if cfg.paths.checkpoint:
        p = Path(cfg.paths.checkpoint)
    else:
        p = out / "checkpoint.json"
    if not p.exists():
        raise FileNotFoundError(f"checkpoint file not found: {p}")
    return p


def _checkpoint_config(cfg: RunConfig, path: Path) -> RunConfig:
    """Adopt the model family stored in the checkpoint."""
    ck = load_checkpoint(path)
    if ck["model"] == "sir":
        return replace(cfg, model="sir", single_beta=bool(ck["meta"].get("single_beta", False)))
    return replace(cfg, model="rd")


def cmd_eval(cfg: RunConfig, out: Path, subset: str = "test") -> int:
    ck_path = _checkpoint_path(cfg, out)
    cfg = _checkpoint_config(cfg, ck_path)
    series, graph, pops = _load_inputs(cfg)
    model = _model(cfg, graph)
    flat = model.load(ck_path)
    split = build_split(series, cfg.effective_split(), pops)
    parts = {"train": [split.train], "val": [split.val], "test": [split.test],
             "all": [split.train, split.val, split.test]}[subset]
    samples = type(parts[0]).concat(parts)
    pred = model.predict(flat, samples)
    report = evaluate(pred, samples.y, samples.valid)
    if not report.mae <= report.rmse + 1e-12 * max(1.0, report.rmse):
        raise RuntimeError(f"metric invariant violated: mae={report.mae} > rmse={report.rmse}")
    metrics = {**_provenance(cfg), "model": cfg.model, "subset": subset, **report.to_dict()}
    if cfg.model == "sir":
        metrics["susceptible_clamped"] = model.overshoot(flat, samples)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    _dump_json(out / "metrics.json", _clean(metrics))
    print(f"{subset}: MAE {report.mae:.6g}  RMSE {report.rmse:.6g}  ({report.count} values, "
          f"{report.dropped} dropped)")
    return 0


# -------------------------------------------------------------- diagnostics


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    gc = cfg.gradcheck
    results = run_gradcheck(gc.instances, gc.max_n, gc.step, gc.tolerance, gc.seed, gc.corrupt)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "instance", "n", "num_params", "worst_error", "worst_coordinate", "passed"])
        for r in results:
            w.writerow([r.model, r.instance, r.n, r.num_params, repr(r.worst_error), r.worst_coordinate,
                        int(r.passed)])
    ok = True
    print(f"{'model':<6}{'instances':>10}{'failed':>8}{'worst error':>14}  worst case")
    for kind in ("rd", "sir"):
        rs = [r for r in results if r.model == kind]
        worst = max(rs, key=lambda r: r.worst_error)
        failed = sum(not r.passed for r in rs)
        ok &= failed == 0
        print(f"{kind:<6}{len(rs):>10}{failed:>8}{worst.worst_error:>14.3e}  "
              f"instance {worst.instance}, coordinate {worst.worst_coordinate}")
    print("PASS" if ok else f"FAIL (tolerance {gc.tolerance:g})")
    return 0 if ok else 1


def cmd_check(cfg: RunConfig, out: Path) -> int:
    """Residual symmetry check of a trained model on a series."""
    ck_path = _checkpoint_path(cfg, out)
    cfg = _checkpoint_config(cfg, ck_path)
    series, graph, pops = _load_inputs(cfg)
    model = _model(cfg, graph)
    flat = model.load(ck_path)
    if cfg.model == "rd":
        resid = rd_residuals(model.unpack(flat), graph, series)
    else:
        split = build_split(series, cfg.effective_split(), pops)
        s = type(split.train).concat([split.train, split.val, split.test])
        resid = np.where(s.valid, model.predict(flat, s) - s.y, np.nan)
    rep = check_symmetry(resid)
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    _dump_json(out / "symmetry.json", _clean({**_provenance(cfg), **rep.to_dict()}))
    print(f"residual symmetry: {'pass' if rep.passed else 'FAIL'} (mean {rep.mean:.4g}, "
          f"median {rep.median:.4g}, skewness {rep.skewness:.3g}, {rep.samples} samples)")
    return 0 if rep.passed else 1


def _report_text(reports) -> str:
    lines = [f"{'loss':<5}{'pool':>6}{'disc RDGCN':>13}{'disc window':>13}{'pooled SE':>11}  result"]
    for kind, r in reports.items():
        res = "n/a (gated)" if r.gated else ("pass" if r.passed else "FAIL")
        lines.append(f"{kind:<5}{r.pool_size:>6}{r.disc_rd:>13.5g}{r.disc_window:>13.5g}{r.pooled_se:>11.3g}  {res}")
        if r.gate_note:
            lines.append(f"      {r.gate_note}")
    return "\n".join(lines) + "\n"


def cmd_theory_lab(cfg: RunConfig, out: Path) -> int:
    tc = cfg.theory
    result = discrepancy_experiment(tc)
    reports = result["reports"]
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    payload = {**_provenance(cfg), "reports": {k: r.to_dict() for k, r in reports.items()}}
    _dump_json(out / "disc_report.json", _clean(payload))
    text = _report_text(reports)
    (out / "disc_report.txt").write_text(text)
    with (out / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "model", "mae"])
        for t, name, v in result["curves"]:
            w.writerow([t, name, repr(v)])
    sys.stdout.write(text)
    return 0 if all(r.passed or r.gated for r in reports.values()) else 1


def cmd_sweep(cfg: RunConfig, out: Path, losses=("mae", "mse")) -> int:
    rows = {k: sweep_experiment(cfg.sweep, k) for k in losses}
    out.mkdir(parents=True, exist_ok=True)
    write_snapshot(cfg, out / "config.ini")
    _dump_json(out / "sweep_report.json", _clean({**_provenance(cfg), "results": rows}))
    ok = True
    for kind, r in rows.items():
        ok &= r["monotone_decreasing"]
        dist = ", ".join(f"{x['samples']}: {x['distance_to_F']:.4g}" for x in r["rows"])
        print(f"{kind}: {dist}  {'decreasing' if r['monotone_decreasing'] else 'NOT decreasing'}")
    return 0 if ok else 1


# -------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--seed", type=int, help="seed for every stochastic component")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--model", choices=("rd", "sir"))
    common.add_argument("--loss", choices=("mae", "mse"))
    common.add_argument("--data", type=Path, help="directory with series.csv, edges.csv [, populations.csv]")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="odegcn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    tr = sub.add_parser("train", parents=[common], help="train a model")
    tr.add_argument("--maml", action="store_true", help="meta-learn the initialization first")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path)
    ev.add_argument("--subset", choices=("test", "train", "val", "all"), default="test")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient verification")
    ck = sub.add_parser("check", parents=[common], help="residual symmetry check of a checkpoint")
    ck.add_argument("--checkpoint", type=Path)
    sub.add_parser("theory-lab", parents=[common], help="source/target discrepancy experiment")
    sub.add_parser("sweep", parents=[common], help="sample-size sweep toward the shared dynamics")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, seed=args.seed, model=args.model, loss=args.loss,
                          maml=getattr(args, "maml", False))
    paths = cfg.paths
    if args.data is not None:
        paths = replace(paths, data=str(args.data))
    if getattr(args, "checkpoint", None) is not None:
        paths = replace(paths, checkpoint=str(args.checkpoint))
    return replace(cfg, paths=paths)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"synth": cmd_synth, "train": cmd_train, "gradcheck": cmd_gradcheck, "check": cmd_check,
                "theory-lab": cmd_theory_lab}
    try:
        cfg = resolve_config(args)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.subset)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.out, (args.loss,) if args.loss else ("mae", "mse"))
        return commands[args.command](cfg, args.out)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except (OSError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        if args.verbose:
            log.exception("command failed")
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
