"""``facade-recon`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import backbone as bb
from .config import (ScenarioConfig, load_run_config, scenario_from_json,
                     synth_config)
from .data import (Segment, load_records, read_fprd, split_and_normalize,
                   synth_generate, write_fprd, write_manifest)
from .errors import ConfigError, DataError
from .forecast import ForecastConfig, Forecaster, train_forecaster, two_stage_predict
from .graph import FacadeGraph
from .inference import (OverlapPlan, aggregate, evaluate_fields, format_table, reconstruct_full,
                        welch_psd)
from .model import ModelConfig, ReconModel, arch_table
from .training import train

log = logging.getLogger("facade_recon")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    return int(os.environ.get("FACADE_RECON_THREADS", "1"))


def _snapshot(out: Path, command: str, config: dict, threads: int, extra: dict | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"version": __version__, "command": command, "threads": threads, "config": config}
    snap.update(extra or {})
    (out / "run.json").write_text(json.dumps(snap, indent=2, sort_keys=True))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _segments(data_dir, graph: FacadeGraph, train_fraction: float = 0.8) -> list[Segment]:
    manifest = Path(data_dir) / "manifest.json" if Path(data_dir).is_dir() else Path(data_dir)
    records = load_records(manifest, graph)
    if not records:
        raise DataError(f"{manifest}: no records to work on")
    return [split_and_normalize(r, train_fraction) for r in records]


def _graph_from_manifest(data_dir) -> FacadeGraph:
    manifest = Path(data_dir) / "manifest.json" if Path(data_dir).is_dir() else Path(data_dir)
    g = _read_json(manifest).get("graph", {})
    return FacadeGraph.build(g.get("rows", 25), g.get("cols", 5), g.get("sensors"))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_dump_graph(args) -> int:
    sensors = _read_json(args.sensors)["sensors"] if args.sensors else None
    graph = FacadeGraph.build(args.rows, args.cols, sensors)
    text = _dump(graph.to_json())
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_arch_summary(args) -> int:
    cfg = ModelConfig()
    rows, cols = 25, 5
    if args.config:
        run = load_run_config(args.config)
        cfg, rows, cols = run.model, run.graph.rows, run.graph.cols
    print(arch_table(ReconModel(FacadeGraph.build(rows, cols), cfg)))
    return 0


def cmd_synth(args) -> int:
    raw = _read_json(args.config)
    cfg = synth_config(raw)
    records = synth_generate(cfg)
    graph = FacadeGraph.build(cfg.rows, cfg.cols)
    out = Path(args.out)
    write_manifest(out, records, graph, args.format)
    _snapshot(out, "synth", cfg.to_dict(), _threads(args))
    print(json.dumps({"records": len(records), "out": str(out)}))
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    threads = _threads(args)
    bb.set_threads(threads)
    bb.set_precision(run.precision)
    graph = run.graph.build()
    segments = _segments(args.data, graph)
    out = Path(args.out)
    _snapshot(out, "train", run.to_dict(), threads, {"data": str(Path(args.data).resolve())})
    torch.manual_seed(run.seed)
    model = ReconModel(graph, run.model)
    tcfg = run.train
    tcfg.seed = run.seed
    res = train(segments, model, tcfg, run.loss, out_dir=out, progress=args.verbose)
    (out / "stats.json").write_text(_dump([s.stats.to_json() for s in segments]))
    print(json.dumps({"checkpoint": str(res.checkpoint), "steps": len(res.steps),
                      "final_loss": res.epochs[-1]["loss_total"] if res.epochs else None}))
    return 0


def _selected_nodes(scenario, graph, extra: int = 3) -> list[int]:
    unobs = scenario.unobserved_nodes
    pick = [unobs[i] for i in np.linspace(0, len(unobs) - 1, min(extra, len(unobs))).astype(int)] if unobs else []
    return list(scenario.masked_nodes) + pick


def _write_plot_csvs(out: Path, tag: str, pred: np.ndarray, ref: np.ndarray, nodes, graph: FacadeGraph,
                     fs: float, nperseg: int) -> None:
    t = np.arange(pred.shape[1]) / fs
    with open(out / f"series_{tag}.csv", "w") as fh:
        fh.write("t," + ",".join(f"pred_{n},ref_{n}" for n in nodes) + "\n")
        for i in range(pred.shape[1]):
            fh.write(f"{t[i]:.6f}," + ",".join(f"{pred[n, i]:.6g},{ref[n, i]:.6g}" for n in nodes) + "\n")
    nps = min(nperseg, pred.shape[1])
    f, _ = welch_psd(pred[0], fs, nps)
    cols = []
    for n in nodes:
        cols.append(welch_psd(pred[n], fs, nps)[1])
        cols.append(welch_psd(ref[n], fs, nps)[1])
    with open(out / f"psd_{tag}.csv", "w") as fh:
        fh.write("freq_hz," + ",".join(f"pred_{n},ref_{n}" for n in nodes) + "\n")
        for i in range(len(f)):
            fh.write(f"{f[i]:.6g}," + ",".join(f"{c[i]:.6g}" for c in cols) + "\n")
    xy = graph.coords()
    snaps = np.linspace(0, pred.shape[1] - 1, 3).astype(int)
    with open(out / f"field_{tag}.csv", "w") as fh:
        fh.write("snapshot,node,row,col,x,y,pred,ref,error\n")
        for s in snaps:
            for n in range(graph.num_nodes):
                fh.write(f"{s},{n},{n % graph.rows + 1},{n // graph.rows + 1},{xy[n, 0]:.4f},{xy[n, 1]:.4f},"
                         f"{pred[n, s]:.6g},{ref[n, s]:.6g},{pred[n, s] - ref[n, s]:.6g}\n")


def _metrics_for(recon_dir: Path, snap: dict) -> dict:
    """Score stored reconstructions against the data they came from."""
    graph = FacadeGraph.from_json(snap["graph"])
    segments = _segments(snap["data"], graph)
    scenario = scenario_from_json(snap["scenario"], graph)
    inf = snap["inference"]
    per_dir = []
    for seg in segments:
        pred, _ = read_fprd(recon_dir / _recon_name(seg.direction_deg))
        if inf["units"] == "physical":
            ref = seg.stats.denormalize(seg.holdout)
        else:
            ref, pred = seg.holdout, seg.stats.normalize(pred)
        rep = evaluate_fields(pred, ref, scenario, seg.sample_rate_hz, inf["nperseg"],
                              [tuple(b) for b in inf.get("bands", [])])
        per_dir.append({"direction_deg": seg.direction_deg, **rep})
    facade = snap.get("facade", "facade")
    summary = {s: aggregate([{k: v for k, v in d.items() if k != "direction_deg"} for d in per_dir], facade, s)
               for s in ("masked", "unobserved", "observed")}
    return {"directions": per_dir, "aggregate": summary}


def _recon_name(direction: float) -> str:
    return f"recon_dir_{direction:05.1f}.fprd"


def cmd_reconstruct(args) -> int:
    threads = _threads(args)
    bb.set_threads(threads)
    model = ReconModel.load(args.checkpoint)
    model.eval()
    graph = model.graph
    scenario = scenario_from_json(_read_json(args.scenario), graph) if args.scenario \
        else ScenarioConfig().build(graph)
    run = load_run_config(args.config) if args.config else None
    inf = asdict(run.inference) if run else {"window": model.cfg.window, "hop": model.cfg.window // 2,
                                              "kind": "hann", "eps": 1e-8, "batch": 8, "nperseg": 256,
                                              "units": "physical", "bands": []}
    out = Path(args.out)
    snap = {"data": str(Path(args.data).resolve()), "checkpoint": str(Path(args.checkpoint).resolve()),
            "scenario": scenario.to_json(), "inference": inf, "graph": graph.to_json(), "facade": args.facade}
    _snapshot(out, "reconstruct", snap, threads, snap)
    for seg in _segments(args.data, graph):
        plan = OverlapPlan(seg.holdout.shape[1], inf["window"], inf["hop"], inf["kind"], inf["eps"])
        res = reconstruct_full(seg.holdout, seg.direction_deg, model, scenario, plan, seg.stats, inf["batch"])
        path = write_fprd(out / _recon_name(seg.direction_deg), res.physical, seg.sample_rate_hz)
        pred, _ = read_fprd(path)
        tag = f"dir_{seg.direction_deg:05.1f}"
        _write_plot_csvs(out, tag, pred, seg.stats.denormalize(seg.holdout), _selected_nodes(scenario, graph),
                         graph, seg.sample_rate_hz, inf["nperseg"])
    report = _metrics_for(out, json.loads((out / "run.json").read_text()))
    (out / "metrics.json").write_text(_dump(report))
    rows = [report["aggregate"][s] | {"facade": f"{args.facade} ({s})"} for s in ("masked", "unobserved")]
    (out / "table.tsv").write_text(format_table(rows) + "\n")
    print(format_table(rows))
    return 0


def cmd_evaluate(args) -> int:
    recon = Path(args.recon)
    snap = _read_json(recon / "run.json")
    if args.data:
        snap["data"] = str(Path(args.data).resolve())
    report = _metrics_for(recon, snap)
    text = _dump(report)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return 0


def cmd_train_forecaster(args) -> int:
    threads = _threads(args)
    bb.set_threads(threads)
    raw = _read_json(args.config) if args.config else {}
    cfg = ForecastConfig(**raw.get("forecast", raw))
    graph = _graph_from_manifest(args.data)
    scenario = scenario_from_json(_read_json(args.scenario), graph) if args.scenario \
        else ScenarioConfig().build(graph)
    out = Path(args.out)
    _snapshot(out, "train-forecaster", cfg.to_dict(), threads, {"scenario": scenario.to_json()})
    model, hist = train_forecaster(_segments(args.data, graph), scenario.available_nodes, cfg, args.verbose)
    path = model.save(out / "forecaster.frck")
    with open(out / "forecaster_log.jsonl", "w") as fh:
        for rec in hist:
            fh.write(json.dumps(rec) + "\n")
    print(json.dumps({"checkpoint": str(path), "final_loss": hist[-1]["loss"] if hist else None}))
    return 0


def cmd_forecast(args) -> int:
    threads = _threads(args)
    bb.set_threads(threads)
    recon = ReconModel.load(args.recon_ck)
    recon.eval()
    graph = recon.graph
    scenario = scenario_from_json(_read_json(args.scenario), graph) if args.scenario \
        else ScenarioConfig().build(graph)
    fcst = "persist" if args.fcst_ck in (None, "persist") else Forecaster.load(args.fcst_ck)
    out = Path(args.out)
    _snapshot(out, "forecast", {"recon_ck": args.recon_ck, "fcst_ck": args.fcst_ck, "horizon_s": args.horizon_s,
                                "scenario": scenario.to_json()}, threads)
    results = []
    for seg in _segments(args.data, graph):
        horizon = int(round(args.horizon_s * seg.sample_rate_hz))
        full = np.concatenate([seg.train, seg.holdout], axis=1)
        start = seg.train.shape[1] if args.start is None else args.start
        res = two_stage_predict(full, start, horizon, fcst, recon, scenario, seg.direction_deg,
                                seg.sample_rate_hz, seg.stats, recon.cfg.window, recon.cfg.window // 2)
        tag = f"dir_{seg.direction_deg:05.1f}"
        write_fprd(out / f"two_stage_{tag}.fprd", seg.stats.denormalize(res.two_stage), seg.sample_rate_hz)
        write_fprd(out / f"reference_{tag}.fprd", seg.stats.denormalize(res.reference), seg.sample_rate_hz)
        results.append({"direction_deg": seg.direction_deg, **res.to_json()})
    (out / "two_stage.json").write_text(_dump(results))
    print(_dump([{"direction_deg": r["direction_deg"], "delta_rmse_unobserved": r["delta_rmse_unobserved"]}
                 for r in results]))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facade-recon", description="Façade pressure-field reconstruction")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="intra-op threads (env FACADE_RECON_THREADS)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = common(sub.add_parser("dump-graph", help="export the façade graph as JSON"))
    sp.add_argument("--rows", type=int, default=25)
    sp.add_argument("--cols", type=int, default=5)
    sp.add_argument("--sensors", help="JSON file with {\"sensors\": [...]} overriding the default layout")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_dump_graph)

    sp = common(sub.add_parser("arch-summary", help="print the layer table with parameter counts"))
    sp.add_argument("--config")
    sp.set_defaults(func=cmd_arch_summary)

    sp = common(sub.add_parser("synth", help="generate synthetic records"))
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=("fprd", "csv"), default="fprd")
    sp.set_defaults(func=cmd_synth)

    sp = common(sub.add_parser("train", help="train the reconstruction model"))
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("reconstruct", help="reconstruct holdout segments and score them"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--scenario")
    sp.add_argument("--config", help="run config whose inference section is used")
    sp.add_argument("--facade", default="facade")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_reconstruct)

    sp = common(sub.add_parser("evaluate", help="recompute metrics from a reconstruction directory"))
    sp.add_argument("--recon", required=True)
    sp.add_argument("--data")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("train-forecaster", help="fit the sensor forecaster"))
    sp.add_argument("--config")
    sp.add_argument("--data", required=True)
    sp.add_argument("--scenario")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train_forecaster)

    sp = common(sub.add_parser("forecast", help="two-stage future full-field prediction"))
    sp.add_argument("--recon-ck", required=True)
    sp.add_argument("--fcst-ck", default="persist")
    sp.add_argument("--horizon-s", type=float, default=1.52)
    sp.add_argument("--start", type=int)
    sp.add_argument("--scenario")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_forecast)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, FileNotFoundError, KeyError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc).strip("'\"")}
        print(json.dumps(err), file=sys.stderr)
        return 1


dispatch = main

if __name__ == "__main__":
    sys.exit(main())
