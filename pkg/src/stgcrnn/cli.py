"""Command-line interface.

    stgcrnn build-graph stations.csv --epsilon 0.01 --out graph.json
    stgcrnn synth --config run.yaml --out data/
    stgcrnn prepare-data --graph graph.json --factor air=air.csv --out dataset.npz
    stgcrnn train --config run.yaml --seed 0 --out runs/
    stgcrnn eval --checkpoint runs/<run>/best.json --sp-rmse
    stgcrnn forecast --checkpoint runs/<run>/best.json --horizon 6
    stgcrnn ablate --config run.yaml --axis K --out ablations/

Exit status is 0 on success, 2 for configuration errors, 1 for anything else.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd

from .config import RunConfig, load_config
from .data import (FACTOR_GROUPS, GraphSignalSequence, NormalizationStats, assign_nearest_source,
                   fuse_factors, impute, normalize, read_factor_csv, regrid_to_nodes, save_dataset)
from .errors import AlignmentError, ConfigurationError, STGCRNNError
from .graph import StationGraph, read_graph_csv
from .metrics import evaluate
from .model import GCRNNModel, count_parameters, load_checkpoint, save_checkpoint
from .pipeline import (adjacency_at, load_inputs, prepare_from_config, synthetic_stations)
from .train import fit, history_line

log = logging.getLogger("stgcrnn")

ABLATION_AXES = {
    "K": [1, 2, 3, 4],
    "epsilon": [0.1, 0.01, 0.0],
    "conv": ["spectral", "diffusion_rw", "diffusion_dual"],
}


class CommandError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def write_csv(rows, header, path=None) -> str:
    """RFC 4180: comma separated, CRLF line ends, minimal quoting."""
    buf = io.StringIO(newline="")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    writer.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, newline="")
    return text


def fresh_dir(parent: Path, name: str) -> Path:
    """Create ``parent/name`` without ever reusing an existing directory."""
    parent.mkdir(parents=True, exist_ok=True)
    candidate, n = parent / name, 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            candidate = parent / f"{name}-{n}"
            n += 1


def cli_overrides(args) -> dict:
    out: dict = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def resolved_config(args) -> RunConfig:
    cfg = load_config(args.config, cli_overrides(args))
    print("# resolved configuration")
    print(cfg.to_yaml(), end="")
    return cfg


def checkpoint_meta(cfg: RunConfig, data, seq: GraphSignalSequence, epoch: int) -> dict:
    return {
        "epoch": epoch,
        "feature_names": list(seq.feature_names),
        "node_ids": list(seq.node_ids),
        "normalization": data.stats.to_json(),
        "target_feature": seq.feature_names[data.target_index],
        "target_index": data.target_index,
        "run_config": cfg.to_dict(),
    }


def check_schema(meta: dict, seq: GraphSignalSequence):
    expected, found = meta.get("feature_names"), list(seq.feature_names)
    if expected is not None and expected != found:
        raise AlignmentError(f"dataset features do not match the checkpoint: expected {expected}, found {found}")
    nodes = meta.get("node_ids")
    if nodes is not None and nodes != list(seq.node_ids):
        raise AlignmentError("dataset nodes do not match the checkpoint's graph nodes")


# --------------------------------------------------------------------------
# training (shared by `train` and `ablate`)
# --------------------------------------------------------------------------

def run_training(cfg: RunConfig, run_dir: Path | None = None, graph=None, seq=None) -> dict:
    """Prepare data, fit, evaluate.  Writes artifacts when ``run_dir`` is given."""
    if cfg.train.max_epochs == 0:
        raise CommandError("nothing to train: train.max_epochs is 0")
    if graph is None or seq is None:
        graph, seq = load_inputs(cfg)
    W = adjacency_at(graph, cfg.graph.epsilon)
    data = prepare_from_config(cfg, seq)
    model = GCRNNModel.from_graph(cfg.model_config(seq.shape[2]), W)
    log.info("%d train / %d valid / %d test windows, %d parameters", len(data.train),
             len(data.valid), len(data.test), count_parameters(model))

    history_fh = None
    on_epoch = on_improve = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir()
        history_fh = open(run_dir / "history.jsonl", "w")

        def on_epoch(record):
            history_fh.write(history_line(record) + "\n")
            history_fh.flush()

        def on_improve(epoch, m):
            save_checkpoint(m, run_dir / "checkpoints" / f"epoch_{epoch:03d}.json", W,
                            checkpoint_meta(cfg, data, seq, epoch))

    started = time.perf_counter()
    try:
        result = fit(model, data.train, data.valid, cfg.train_config(), on_epoch, on_improve)
    finally:
        if history_fh is not None:
            history_fh.close()
    train_seconds = time.perf_counter() - started
    valid = evaluate(model, data.valid, data.stats, split="valid")
    test = evaluate(model, data.test, data.stats, split="test") if len(data.test) else None
    summary = {
        "best_epoch": result.best_epoch,
        "best_valid_rmse": result.best_valid,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "parameters": count_parameters(model),
        "train_seconds": train_seconds,
        "seconds_per_epoch": float(np.mean([h["seconds"] for h in result.history])),
        "valid": json.loads(valid.to_json()),
        "test": None if test is None else json.loads(test.to_json()),
    }
    if run_dir is not None:
        save_checkpoint(model, run_dir / "best.json", W, checkpoint_meta(cfg, data, seq, result.best_epoch))
        (run_dir / "metrics.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    summary["model"] = model
    summary["data"] = data
    summary["history"] = result.history
    return summary


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_build_graph(args) -> int:
    epsilon = args.epsilon
    if epsilon is None:
        epsilon = load_config(args.config).graph.epsilon
    graph = read_graph_csv(args.stations, epsilon)
    out = Path(args.out or "graph.json")
    graph.save(out)
    deg = graph.degrees()
    off = graph.W[~np.eye(graph.num_nodes, dtype=bool)]
    print(f"nodes: {graph.num_nodes}")
    print(f"edges: {graph.num_edges}")
    print(f"degree: min {deg.min():.4f} mean {deg.mean():.4f} max {deg.max():.4f}")
    print(f"weight: max {off.max() if off.size else 0.0:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    # here --seed picks the generator seed, not the training seed
    overrides = {} if args.seed is None else {"data": {"synthetic": {"seed": args.seed}}}
    cfg = load_config(args.config, overrides)
    print("# resolved configuration")
    print(cfg.to_yaml(), end="")
    syn = cfg.data.synthetic
    out = Path(args.out or "synthetic")
    out.mkdir(parents=True, exist_ok=True)
    ids, xy = synthetic_stations(syn.nodes, syn.seed, syn.extent_m)
    write_csv([(i, f"{x:.3f}", f"{y:.3f}") for i, (x, y) in zip(ids, xy)],
              ["station_id", "x_meters", "y_meters"], out / "stations.csv")
    cfg.graph.path = None
    cfg.data.dataset = None
    graph, seq = load_inputs(cfg)
    graph.save(out / "graph.json")
    save_dataset(seq, out / "dataset.npz")
    print(f"wrote {out / 'stations.csv'}, {out / 'graph.json'} ({graph.num_edges} edges), "
          f"{out / 'dataset.npz'} {seq.shape}")
    return 0


def _parse_pairs(items, flag):
    pairs = {}
    for item in items or []:
        if "=" not in item:
            raise CommandError(f"{flag} expects GROUP=PATH, got {item!r}")
        group, path = item.split("=", 1)
        if group not in FACTOR_GROUPS:
            raise CommandError(f"{flag}: unknown factor group {group!r} (known: {', '.join(FACTOR_GROUPS)})")
        pairs[group] = path
    return pairs


def _align_hours(seqs: dict[str, GraphSignalSequence]) -> dict[str, GraphSignalSequence]:
    """Pad every group with missing hours so all share the union time range."""
    start = min(s.timestamps[0] for s in seqs.values())
    stop = max(s.timestamps[-1] for s in seqs.values())
    hours = np.arange(start, stop + np.timedelta64(1, "h"), np.timedelta64(1, "h"))
    out = {}
    for group, s in seqs.items():
        offset = int((s.timestamps[0] - start) / np.timedelta64(1, "h"))
        data = np.full((len(hours),) + s.shape[1:], np.nan)
        data[offset:offset + len(s)] = s.data
        out[group] = GraphSignalSequence(hours, s.node_ids, data, s.feature_names, s.feature_groups)
    return out


def cmd_prepare_data(args) -> int:
    graph = StationGraph.load(args.graph)
    factors = _parse_pairs(args.factor, "--factor")
    sources = _parse_pairs(args.sources, "--sources")
    if not factors:
        raise CommandError("at least one --factor GROUP=CSV is required")
    seqs = {}
    for group, path in factors.items():
        seq = read_factor_csv(path, group)
        if set(seq.node_ids) >= set(graph.node_ids):
            seq = read_factor_csv(path, group, graph.node_ids)
        elif group in sources:
            if graph.coords is None:
                raise CommandError("nearest-source assignment needs station coordinates in the graph file")
            src = read_station_coords(sources[group])
            seq = read_factor_csv(path, group, list(src))
            idx = assign_nearest_source(np.array(list(src.values())), graph.coords)
            seq = regrid_to_nodes(seq, idx, graph.node_ids)
        else:
            missing = sorted(set(graph.node_ids) - set(seq.node_ids))
            raise AlignmentError(f"group {group!r} lacks stations {missing}; pass --sources {group}=CSV")
        seqs[group] = seq
    fused = fuse_factors(_align_hours(seqs))
    out = Path(args.out or "dataset.npz")
    save_dataset(fused, out)
    print(f"wrote {out}: {len(fused)} hours x {fused.shape[1]} nodes x {fused.shape[2]} features "
          f"({', '.join(fused.feature_names)}); {fused.missing_mask.mean():.1%} missing")
    return 0


def read_station_coords(path) -> dict[str, tuple[float, float]]:
    df = pd.read_csv(path, dtype={"station_id": str})
    return {r.station_id: (float(r.x_meters), float(r.y_meters)) for r in df.itertuples()}


def cmd_train(args) -> int:
    cfg = resolved_config(args)
    if cfg.train.max_epochs == 0:
        raise CommandError("nothing to train: train.max_epochs is 0")
    graph, seq = load_inputs(cfg)
    stamp = time.strftime("%Y%m%dT%H%M%S")
    run_dir = fresh_dir(Path(args.out or "runs"), f"{stamp}-seed{cfg.seed}")
    (run_dir / "config.yaml").write_text(cfg.to_yaml())
    summary = run_training(cfg, run_dir, graph, seq)
    test = summary["test"]
    print(f"run: {run_dir}")
    print(f"best epoch {summary['best_epoch']}  valid RMSE {summary['best_valid_rmse']:.6f}")
    if test is not None:
        print(f"test RMSE {test['overall_rmse']:.6f}  R2 {test['r2']:.4f}  "
              f"persistence {test['persistence_rmse']:.6f}")
    return 0


def _load_for_checkpoint(args):
    model, meta = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config, cli_overrides(args))
    else:
        cfg = load_config(overrides={**meta.get("run_config", {}), **cli_overrides(args)})
    graph, seq = load_inputs(cfg)
    check_schema(meta, seq)
    return model, meta, cfg, seq


def cmd_eval(args) -> int:
    model, meta, cfg, seq = _load_for_checkpoint(args)
    data = prepare_from_config(cfg, seq)
    # score with the normalization the model was trained with
    data.stats = NormalizationStats.from_json(meta["normalization"])
    windows = {"train": data.train, "valid": data.valid, "test": data.test}[args.split]
    if len(windows) == 0:
        raise CommandError(f"the {args.split} split has no windows")
    report = evaluate(model, windows, data.stats, split=args.split, with_sp_rmse=args.sp_rmse)
    horizons = len(report.horizon_rmse) if args.horizon is None else min(args.horizon, len(report.horizon_rmse))
    report.horizon_rmse = report.horizon_rmse[:horizons]
    text = report.to_json()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.json").write_text(text)
        write_csv([(h + 1, repr(v)) for h, v in enumerate(report.horizon_rmse)], ["horizon_hours", "rmse"],
                  out / f"horizon_rmse_{args.split}.csv")
    return 0


def cmd_forecast(args) -> int:
    model, meta, cfg, seq = _load_for_checkpoint(args)
    T, horizon = model.config.history, model.config.horizon
    h = horizon if args.horizon is None else args.horizon
    if not 1 <= h <= horizon:
        raise CommandError(f"--horizon must lie in [1, {horizon}] for this model")
    if len(seq) < T:
        raise CommandError(f"dataset has {len(seq)} hours; the model needs {T}")
    stats = NormalizationStats.from_json(meta["normalization"])
    history = impute(normalize(seq.slice_time(len(seq) - T, len(seq)), stats)).data
    pred = model.predict(history[None])[0, :h]
    target = meta["target_index"]
    values = pred * stats.span[target] + stats.lo[target]
    last = seq.timestamps[-1]
    rows = [(str(last + np.timedelta64(k + 1, "h")), node, k + 1, repr(float(values[k, n])))
            for k in range(h) for n, node in enumerate(seq.node_ids)]
    text = write_csv(rows, ["timestamp", "station_id", "horizon_hours", meta["target_feature"]],
                     args.out)
    if args.out is None:
        sys.stdout.write(text)
    else:
        print(f"wrote {args.out}: {h} hours x {len(seq.node_ids)} stations")
    return 0


def _ablation_run(task):
    cfg_dict, setting = task
    cfg = load_config(overrides=cfg_dict)
    try:
        summary = run_training(cfg)
        return (setting, "ok", repr(summary["best_valid_rmse"]), repr(summary["seconds_per_epoch"]), "")
    except Exception as exc:  # a failed setting becomes a row, the sweep goes on
        return (setting, "failed", "", "", f"{type(exc).__name__}: {exc}")


def cmd_ablate(args) -> int:
    cfg = resolved_config(args)
    values = args.values or ABLATION_AXES[args.axis]
    tasks = []
    for v in values:
        doc = copy.deepcopy(cfg.to_dict())
        if args.axis == "K":
            doc["model"]["K"] = int(v)
        elif args.axis == "epsilon":
            doc["graph"]["epsilon"] = float(v)
        else:
            doc["model"]["conv"] = str(v)
        tasks.append((doc, f"{args.axis}={v}"))
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            rows = list(pool.map(_ablation_run, tasks))
    else:
        rows = [_ablation_run(t) for t in tasks]
    out = Path(args.out or "ablations")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{args.axis}.csv"
    print(write_csv(rows, ["setting", "status", "valid_rmse", "seconds_per_epoch", "error"], path), end="")
    print(f"wrote {path}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--horizon", type=int, help="forecast/report horizon in hours")
    common.add_argument("--quiet", action="store_true", help="only print results")

    p = argparse.ArgumentParser(prog="stgcrnn", description="Graph-convolutional GRU forecasting.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-graph", parents=[common], help="station CSV -> thresholded kernel graph")
    s.add_argument("stations", help="station_id,x_meters,y_meters or from_id,to_id,km")
    s.add_argument("--epsilon", type=float, help="weight threshold (default from config, 0.01)")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic graph and dataset")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare-data", parents=[common], help="fuse factor CSVs into a dataset cache")
    s.add_argument("--graph", required=True)
    s.add_argument("--factor", action="append", metavar="GROUP=CSV")
    s.add_argument("--sources", action="append", metavar="GROUP=CSV",
                   help="source station coordinates for groups measured off the graph nodes")
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("train", parents=[common], help="train and write a run directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=["train", "valid", "test"], default="test")
    s.add_argument("--sp-rmse", action="store_true", help="also compute leave-one-node-out spRMSE")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("forecast", parents=[common], help="forecast past the end of the dataset")
    s.add_argument("--checkpoint", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("ablate", parents=[common], help="sweep K, epsilon or the convolution kind")
    s.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    s.add_argument("--values", nargs="+", help="override the default sweep values")
    s.add_argument("--jobs", type=int, default=1, help="parallel runs (default sequential)")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (STGCRNNError, CommandError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
