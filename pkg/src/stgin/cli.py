"""Command-line entry point: build-graph, synth, train, evaluate.

A flat JSON configuration file supplies defaults and flags override it; the
resolved configuration is echoed next to every command's outputs so a run
can be reproduced from the echo alone. Exit codes: 0 success, 2 config or
validation problems, 3 data format problems, 4 numerical failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import data as dt
from . import graph as gr
from . import model as md
from . import synth as sy
from . import train_eval as te
from .errors import (
    CheckpointError,
    ContractError,
    DataError,
    FormatError,
    ParameterError,
    ShapeError,
    StginError,
    TrainingError,
    ValidationError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4

_CONFIG_ERRORS = (ValidationError, ParameterError, ContractError, CheckpointError, ShapeError)
_FORMAT_ERRORS = (FormatError, DataError)


@dataclass
class RunConfig:
    """Flat key-value run configuration; JSON file keys match field names."""

    speeds: str = ""
    adjacency: str = ""
    distances: str = ""
    out_dir: str = "out"
    seed: int = 0
    sigma: float = 0.0  # 0 = derive from distance standard deviation
    kappa: float = 0.0  # 0 = derive from kappa_percentile
    kappa_percentile: float = 5.0
    input_len: int = 24
    horizon_steps: int = 12
    fca_channels: int = 32
    fca_kernel: int = 3
    hidden_d: int = 32
    heads: int = 4
    gat_heads: int = 4
    enc_layers: int = 3
    replicas: int = 1
    ffn_mult: int = 4
    c_factor: float = 5.0
    l_token: int = 0
    share_informer: bool = True
    gat_enabled: bool = True
    batch_size: int = 32
    iterations: int = 500
    learning_rate: float = 1e-3
    train_fraction: float = 0.8
    eval_stride: int = 1
    horizons_min: str = ""  # comma-separated minutes; empty = all reachable defaults
    nodes: str = ""  # comma-separated node indices for prediction series
    checkpoint_every: int = 0

    def model_dims(self, n_nodes: int) -> md.ModelDims:
        return md.ModelDims(
            n_nodes=n_nodes,
            input_len=self.input_len,
            horizon=self.horizon_steps,
            fca_channels=self.fca_channels,
            fca_kernel=self.fca_kernel,
            embed=self.hidden_d,
            gat_heads=self.gat_heads,
            informer_heads=self.heads,
            enc_layers=self.enc_layers,
            replicas=self.replicas,
            ffn_mult=self.ffn_mult,
            c_factor=self.c_factor,
            l_token=self.l_token,
            share_informer=self.share_informer,
            gat_enabled=self.gat_enabled,
        )

    def train_config(self) -> te.TrainConfig:
        return te.TrainConfig(
            batch_size=self.batch_size,
            heads=self.heads,
            hidden_d=self.hidden_d,
            iterations=self.iterations,
            learning_rate=self.learning_rate,
            seed=self.seed,
            input_len=self.input_len,
            horizon=self.horizon_steps,
        )

    def horizon_minutes(self) -> list | None:
        if not self.horizons_min:
            return None
        if isinstance(self.horizons_min, (list, tuple)):
            return [int(p) for p in self.horizons_min]
        return [int(p) for p in str(self.horizons_min).split(",") if p.strip()]

    def node_indices(self) -> list:
        if not self.nodes:
            return []
        if isinstance(self.nodes, (list, tuple)):
            return [int(p) for p in self.nodes]
        return [int(p) for p in str(self.nodes).split(",") if p.strip()]


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    values = {}
    known = {f.name for f in fields(RunConfig)}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from None
        loaded = {k: v for k, v in loaded.items() if not k.startswith("_")}
        unknown = set(loaded) - known
        if unknown:
            raise ValidationError(f"config {path} has unknown keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def echo_config(cfg: RunConfig, out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(asdict(cfg))
    payload["_command"] = command
    with open(out_dir / "config_echo.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)


def resolve_graph(cfg: RunConfig) -> gr.RoadGraph:
    if cfg.adjacency:
        return gr.load_prebuilt_adjacency(cfg.adjacency)
    if cfg.distances:
        distances = gr.read_matrix_csv(cfg.distances)
        sigma = cfg.sigma if cfg.sigma > 0.0 else gr.sigma_from_distances(distances)
        kappa = cfg.kappa if cfg.kappa > 0.0 else gr.kappa_from_percentile(distances, cfg.kappa_percentile)
        return gr.build_adjacency(distances, sigma=sigma, kappa=kappa)
    raise ValidationError("need an adjacency or a distances CSV path")


def prepare_dataset(cfg: RunConfig) -> dt.SpeedDataset:
    if not cfg.speeds:
        raise ValidationError("config key 'speeds' (CSV path) is required")
    if not Path(cfg.speeds).exists():
        raise ValidationError(f"speeds file does not exist: {cfg.speeds}")
    ds = dt.load_speed_csv(cfg.speeds)
    ds = dt.interpolate_missing(ds)
    return dt.normalize(ds, train_fraction=cfg.train_fraction)


def prepare_windows(cfg: RunConfig, ds: dt.SpeedDataset) -> tuple:
    windows = dt.sliding_windows(ds, cfg.input_len, cfg.horizon_steps)
    return dt.split_chronological(windows, cfg.train_fraction)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_build_graph(cfg: RunConfig) -> int:
    if not cfg.distances:
        raise ValidationError("build-graph needs a distances CSV path")
    out_dir = Path(cfg.out_dir)
    graph = resolve_graph(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    gr.save_adjacency(graph, out_dir / "adjacency.csv")
    edges = int((graph.adj > 0.0).sum() - graph.n_nodes)  # self-loops not counted
    summary = {
        "n_nodes": graph.n_nodes,
        "edges": edges,
        "sigma": graph.sigma,
        "kappa": graph.kappa,
    }
    with open(out_dir / "graph_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    echo_config(cfg, out_dir, "build-graph")
    print(f"built graph: {graph.n_nodes} nodes, {edges} edges, "
          f"sigma={graph.sigma:.3f}, kappa={graph.kappa:.3f}")
    return EXIT_OK


def cmd_synth(cfg: RunConfig, synth_cfg: sy.SynthConfig) -> int:
    out_dir = Path(cfg.out_dir)
    paths = sy.write_synth_files(synth_cfg, out_dir)
    echo_config(cfg, out_dir, "synth")
    print(f"wrote {paths['speeds']}, {paths['distances']}, {paths['truth']}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    out_dir = Path(cfg.out_dir)
    ds = prepare_dataset(cfg)
    graph = resolve_graph(cfg)
    if graph.n_nodes != ds.n_nodes:
        raise ValidationError(
            f"graph has {graph.n_nodes} nodes but the speed matrix has {ds.n_nodes} columns"
        )
    train_windows, _ = prepare_windows(cfg, ds)
    model = md.init_params(cfg.model_dims(ds.n_nodes), cfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)

    on_update = None
    if cfg.checkpoint_every > 0:
        def on_update(step, _loss, current):
            if step % cfg.checkpoint_every == 0:
                md.save_checkpoint(current, out_dir / f"checkpoint_{step:06d}.json")

    model, trace = te.train(model, train_windows, graph, cfg.train_config(), on_update)
    md.save_checkpoint(model, out_dir / "checkpoint.json")
    with open(out_dir / "loss_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("update,loss\n")
        for i, value in enumerate(trace, start=1):
            fh.write(f"{i},{repr(value)}\n")
    echo_config(cfg, out_dir, "train")
    print(f"trained {cfg.iterations} updates on {len(train_windows)} windows; "
          f"loss {trace[0]:.6f} -> {trace[-1]:.6f}")
    return EXIT_OK


def _prediction_series(windows, preds, node: int, horizon_steps: int, input_len: int):
    rows = []
    for w, p in zip(windows, preds):
        step = w.t_start + input_len + horizon_steps - 1
        rows.append((step, w.target.data[horizon_steps - 1, node], p[horizon_steps - 1, node]))
    return rows


def cmd_evaluate(cfg: RunConfig, checkpoint: str, with_baselines: bool = True) -> int:
    out_dir = Path(cfg.out_dir)
    ds = prepare_dataset(cfg)
    graph = resolve_graph(cfg)
    model = md.load_checkpoint(checkpoint, expect_dims=cfg.model_dims(ds.n_nodes))
    train_windows, test_windows = prepare_windows(cfg, ds)
    if cfg.eval_stride > 1:
        test_windows = test_windows[::cfg.eval_stride]
    horizons = cfg.horizon_minutes()
    report = te.evaluate(model, test_windows, graph, ds, horizons)
    if with_baselines:
        base = te.baselines(test_windows, train_windows, ds, horizons)
        report.rows += base.rows
    out_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(out_dir / "metrics.csv")
    with open(out_dir / "metrics.log", "w", encoding="utf-8") as fh:
        fh.write("\n".join(report.lines()) + "\n")

    node_indices = cfg.node_indices()
    if node_indices:
        preds = te.predict_windows(model, test_windows, graph)
        resolved = te.resolve_horizons(
            test_windows[0].target.shape[0], ds.step_minutes, horizons
        )
        for node in node_indices:
            if not 0 <= node < ds.n_nodes:
                raise ParameterError(f"node index {node} out of range [0, {ds.n_nodes})")
            for minutes in resolved:
                steps = minutes // ds.step_minutes
                series = _prediction_series(test_windows, preds, node, steps, cfg.input_len)
                path = out_dir / f"predictions_node{node}_{minutes}min.csv"
                with open(path, "w", encoding="utf-8") as fh:
                    fh.write("step,truth_norm,prediction_norm,truth_raw,prediction_raw\n")
                    for step, truth, pred in series:
                        truth_raw = dt.denormalize(truth, ds)
                        pred_raw = dt.denormalize(pred, ds)
                        fh.write(
                            f"{step},{repr(float(truth))},{repr(float(pred))},"
                            f"{repr(float(truth_raw))},{repr(float(pred_raw))}\n"
                        )
    echo_config(cfg, out_dir, "evaluate")
    for line in report.lines():
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def _add_config_flags(parser: argparse.ArgumentParser, keys):
    parser.add_argument("--config", help="JSON file with RunConfig keys")
    type_map = {int: int, float: float, str: str}
    for f in fields(RunConfig):
        if f.name not in keys:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, dest=f.name, default=None,
                                action=argparse.BooleanOptionalAction)
        else:
            parser.add_argument(flag, dest=f.name, default=None,
                                type=type_map.get(type(f.default), str))


SYNTH_DEFAULTS = sy.SynthConfig(n_nodes=1, days=1)

_GRAPH_KEYS = {"distances", "adjacency", "sigma", "kappa", "kappa_percentile", "out_dir"}
_MODEL_KEYS = {
    "speeds", "seed", "input_len", "horizon_steps", "fca_channels", "fca_kernel",
    "hidden_d", "heads", "gat_heads", "enc_layers", "replicas", "ffn_mult", "c_factor",
    "l_token", "share_informer", "gat_enabled", "train_fraction",
}
_TRAIN_KEYS = _GRAPH_KEYS | _MODEL_KEYS | {"batch_size", "iterations", "learning_rate",
                                           "checkpoint_every"}
_EVAL_KEYS = _GRAPH_KEYS | _MODEL_KEYS | {"eval_stride", "horizons_min", "nodes"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgin",
        description="Spatial-temporal graph-informer traffic forecasting toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_graph = sub.add_parser("build-graph", help="distances CSV -> thresholded Gaussian adjacency")
    _add_config_flags(p_graph, _GRAPH_KEYS)

    p_synth = sub.add_parser("synth", help="generate synthetic speeds + distances + ground truth")
    _add_config_flags(p_synth, {"out_dir", "seed"})
    p_synth.add_argument("--nodes", type=int, default=20)
    p_synth.add_argument("--days", type=int, default=14)
    p_synth.add_argument("--noise-std", type=float, default=SYNTH_DEFAULTS.noise_std)
    p_synth.add_argument("--regional-std", type=float, default=SYNTH_DEFAULTS.regional_std)
    p_synth.add_argument("--daily-amplitude", type=float, default=SYNTH_DEFAULTS.daily_amplitude)
    p_synth.add_argument("--propagation-steps", type=int, default=SYNTH_DEFAULTS.propagation_steps)
    p_synth.add_argument("--incident-rate", type=float, default=0.0)

    p_train = sub.add_parser("train", help="train a model, write checkpoint + loss trace")
    _add_config_flags(p_train, _TRAIN_KEYS)

    p_eval = sub.add_parser("evaluate", help="metrics + per-node prediction series from a checkpoint")
    _add_config_flags(p_eval, _EVAL_KEYS)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--no-baselines", action="store_true")
    return parser


def _overrides_from(args: argparse.Namespace) -> dict:
    keys = {f.name for f in fields(RunConfig)}
    return {k: v for k, v in vars(args).items() if k in keys}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "synth":
            overrides = _overrides_from(args)
            overrides.pop("nodes", None)  # synth --nodes is the node count, not indices
            cfg = load_run_config(args.config, overrides)
            synth_cfg = sy.SynthConfig(
                n_nodes=args.nodes,
                days=args.days,
                seed=cfg.seed,
                noise_std=args.noise_std,
                regional_std=args.regional_std,
                daily_amplitude=args.daily_amplitude,
                propagation_steps=args.propagation_steps,
                incident_rate_per_day=args.incident_rate,
            )
            return cmd_synth(cfg, synth_cfg)
        cfg = load_run_config(args.config, _overrides_from(args))
        if args.command == "build-graph":
            return cmd_build_graph(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint, with_baselines=not args.no_baselines)
        raise ValidationError(f"unknown command {args.command}")
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _FORMAT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StginError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
