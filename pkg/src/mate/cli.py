"""Command-line front end.

Every subcommand reads a JSON config (strict: unknown keys are rejected),
applies ``--set key=value`` overrides, runs, and writes its outputs plus the
effective config next to them. Wall-clock timestamps go only to
``metadata.json`` so re-runs with the same config are byte-identical.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import datagen, eval as ev, forward as fwd, train as tr
from .network import (
    ParseError,
    build_incidences,
    k_shortest_paths,
    parse_tntp_files,
    paths_to_csv,
)
from .observations import (
    ObservationSet,
    features_from_csv,
    features_to_csv,
    observations_from_csv,
    observations_to_csv,
)
from .params import checkpoint_dumps, checkpoint_loads, default_spec, initialize

__all__ = ["main"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------

_NETWORK_KEYS = {
    "builtin": True,  # use the bundled benchmark network
    "network": None,  # or explicit TNTP paths
    "trips": None,
    "k_paths": 3,
    "interaction": "diagonal",
}

_TRAIN_KEYS = {
    "epochs": 60,
    "learning_rate": 0.05,
    "lr_decay": 1.0,
    "batch_size": 1,
    "gap_target": None,
    "seed": 0,
    "n_poly": 4,
    "weights": {"lx": 1.0, "lt": 1.0, "le": 1.0, "lg": 0.0, "lq": 0.0},
}

DEFAULTS = {
    "generate": {
        **_NETWORK_KEYS,
        "periods": [
            {"period_id": "peak", "demand_scale": 1.0, "n_samples": 200},
            {"period_id": "offpeak", "demand_scale": 0.8, "n_samples": 100},
        ],
        "theta": [-1.0, -1.3, -3.0],
        "bpr_alpha": 0.15,
        "bpr_power": 4,
        "od_noise": 0.10,
        "measurement_noise": 0.05,
        "gap_tol": 1e-6,
        "max_iters": 20000,
        "damping": 0.5,
        "seed": 0,
    },
    "train": {
        **_NETWORK_KEYS, **_TRAIN_KEYS,
        "observations": None,
        "features_z": None,
        "truth": None,  # optional ground-truth file providing reference demand
    },
    "equilibrium": {
        **_NETWORK_KEYS, **_TRAIN_KEYS,
        "observations": None,
        "features_z": None,
        "truth": None,
        "params": None,  # checkpoint to start from; defaults to initialization
    },
    "infer": {
        **_NETWORK_KEYS, **_TRAIN_KEYS,
        "observations": None,
        "features_z": None,
        "params": None,  # required: trained checkpoint
        "target_gap": 0.0,
        "sigma_x_reference": None,
    },
    "xval": {
        **_NETWORK_KEYS, **_TRAIN_KEYS,
        "observations": None,
        "features_z": None,
        "truth": None,
        "n_folds": 5,
        "baselines": True,
    },
    "sweep": {
        **_NETWORK_KEYS, **_TRAIN_KEYS,
        "observations": None,
        "features_z": None,
        "truth": None,
        "n_folds": 5,
        "grid": list(ev.LAMBDA_GRID),
    },
    "report": {"input": None},
}


def _load_config(command: str, path: str | None, overrides) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS[command]))  # deep copy
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise DataError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config root must be a JSON object")
        for key, val in user.items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r} for command {command!r}")
            if key == "weights":
                for wk in val:
                    if wk not in cfg["weights"]:
                        raise UsageError(f"unknown weights key {wk!r}")
                cfg["weights"].update(val)
            else:
                cfg[key] = val
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise UsageError(f"unknown config key {key!r} for command {command!r}")
            node = node[p]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r} for command {command!r}")
        node[parts[-1]] = val
    return cfg


def _write_outputs(out_dir: Path, cfg: dict, files: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)
    (out_dir / "effective_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    )
    (out_dir / "metadata.json").write_text(
        json.dumps({"completed_unix": time.time()}) + "\n"
    )


# ---------------------------------------------------------------------------
# shared loading
# ---------------------------------------------------------------------------

def _load_network(cfg):
    if cfg.get("network") and cfg.get("trips"):
        try:
            net, od_table = parse_tntp_files(cfg["network"], cfg["trips"])
        except FileNotFoundError as exc:
            raise DataError(str(exc)) from exc
    elif cfg.get("builtin"):
        net, od_table = datagen.load_sioux_falls()
    else:
        raise UsageError("config must set builtin=true or both network and trips paths")
    return net, od_table


def _load_problem(cfg):
    net, od_table = _load_network(cfg)
    pairs = sorted((net.node_index(o), net.node_index(d)) for o, d in od_table)
    ps = k_shortest_paths(net, pairs, int(cfg["k_paths"]))
    inc = build_incidences(net, ps, interaction=cfg["interaction"])
    return net, od_table, ps, inc


def _load_observations(cfg, inc) -> ObservationSet:
    if not cfg.get("observations"):
        raise UsageError("config key 'observations' (CSV path) is required")
    try:
        text = Path(cfg["observations"]).read_text()
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    try:
        obs = observations_from_csv(text, inc.n_links)
    except ValueError as exc:
        raise DataError(f"observations: {exc}") from exc
    if cfg.get("features_z"):
        try:
            obs.Z = features_from_csv(Path(cfg["features_z"]).read_text(), inc.n_links)
        except (FileNotFoundError, ValueError) as exc:
            raise DataError(f"features: {exc}") from exc
    if cfg.get("truth"):
        try:
            gt = json.loads(Path(cfg["truth"]).read_text())
        except (FileNotFoundError, json.JSONDecodeError) as exc:
            raise DataError(f"truth: {exc}") from exc
        for pid, vals in gt.get("q_true", {}).items():
            q = np.array([float(v) for v in vals])
            obs.ref_od[pid] = q
            obs.ref_generation[pid] = inc.L @ q
    return obs


def _train_config(cfg) -> tr.TrainConfig:
    w = cfg["weights"]
    try:
        return tr.TrainConfig(
            epochs=int(cfg["epochs"]),
            batch_size=int(cfg["batch_size"]),
            learning_rate=float(cfg["learning_rate"]),
            lr_decay=float(cfg["lr_decay"]),
            weights=fwd.LossWeights(**{k: float(v) for k, v in w.items()}),
            gap_target=None if cfg["gap_target"] is None else float(cfg["gap_target"]),
            seed=int(cfg["seed"]),
            sigma_x_reference=(
                float(cfg["sigma_x_reference"])
                if cfg.get("sigma_x_reference") else None
            ),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _spec_for(cfg, net, obs):
    n_z = 0
    for z in obs.Z.values():
        n_z = max(n_z, z.shape[1])
    return default_spec(n_z_features=n_z, n_o_features=0,
                        n_poly=int(cfg["n_poly"]), capacities=net.capacities)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_generate(cfg, out_dir):
    net, od_table = _load_network(cfg)
    sspec = datagen.SyntheticSpec(
        periods=[datagen.PeriodSpec(p["period_id"], float(p["demand_scale"]),
                                    int(p["n_samples"])) for p in cfg["periods"]],
        k_paths=int(cfg["k_paths"]),
        theta=tuple(float(v) for v in cfg["theta"]),
        bpr_alpha=float(cfg["bpr_alpha"]),
        bpr_power=int(cfg["bpr_power"]),
        od_noise=float(cfg["od_noise"]),
        measurement_noise=float(cfg["measurement_noise"]),
        gap_tol=float(cfg["gap_tol"]),
        max_iters=int(cfg["max_iters"]),
        damping=float(cfg["damping"]),
        seed=int(cfg["seed"]),
    )
    data = datagen.generate(net, od_table, sspec)
    _write_outputs(out_dir, cfg, {
        "observations.csv": observations_to_csv(data.obs),
        "features_z.csv": features_to_csv(data.obs.Z, "link"),
        "paths.csv": paths_to_csv(data.path_set),
        "ground_truth.json": datagen.ground_truth_json(data) + "\n",
    })
    worst = max(data.gap.values())
    print(f"generate: {data.obs.n_samples} samples, worst equilibrium gap {worst:.3g}")
    return EXIT_OK


def _cmd_train(cfg, out_dir):
    net, _, ps, inc = _load_problem(cfg)
    obs = _load_observations(cfg, inc)
    config = _train_config(cfg)
    spec = _spec_for(cfg, net, obs)
    params = initialize(spec, net, inc, obs)
    params, trace = tr.fit(params, obs, config, spec, inc,
                           net.capacities, net.free_flow_times)
    _write_outputs(out_dir, cfg, {
        "params.json": checkpoint_dumps(params) + "\n",
        "trace.csv": tr.trace_to_csv(trace),
    })
    last = trace.records[-1]
    print(f"train: {len(trace.records)} epochs, final gap {last.rel_gap:.3g}, "
          f"flow MAPE {last.mape_x:.2f}%, time MAPE {last.mape_t:.2f}%")
    return EXIT_OK


def _cmd_equilibrium(cfg, out_dir):
    net, _, ps, inc = _load_problem(cfg)
    obs = _load_observations(cfg, inc)
    config = _train_config(cfg)
    spec = _spec_for(cfg, net, obs)
    if cfg.get("params"):
        try:
            params = checkpoint_loads(Path(cfg["params"]).read_text())
        except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
            raise DataError(f"params: {exc}") from exc
    else:
        params = initialize(spec, net, inc, obs)
    params, trace = tr.solve_equilibrium(params, obs, config, spec, inc,
                                         net.capacities, net.free_flow_times)
    _write_outputs(out_dir, cfg, {
        "params.json": checkpoint_dumps(params) + "\n",
        "trace.csv": tr.trace_to_csv(trace),
    })
    status = "converged" if trace.converged else "NOT converged"
    print(f"equilibrium: {status}, gap {trace.final_gap:.3g}")
    return EXIT_OK if trace.converged else EXIT_NUMERIC


def _cmd_infer(cfg, out_dir):
    net, _, ps, inc = _load_problem(cfg)
    obs = _load_observations(cfg, inc)
    config = _train_config(cfg)
    spec = _spec_for(cfg, net, obs)
    if not cfg.get("params"):
        raise UsageError("infer requires a trained checkpoint via config key 'params'")
    try:
        params = checkpoint_loads(Path(cfg["params"]).read_text())
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"params: {exc}") from exc
    params, outputs, trace = tr.infer(params, obs, config, spec, inc,
                                      net.capacities, net.free_flow_times,
                                      target_gap=float(cfg["target_gap"]))
    lines = ["sample_id,period_id,link_id,flow,travel_time"]
    for s, out in zip(obs.samples, outputs):
        for a in range(inc.n_links):
            lines.append(f"{s.sample_id},{s.period_id},{a},"
                         f"{float(out.x[a])!r},{float(out.t[a])!r}")
    _write_outputs(out_dir, cfg, {
        "params.json": checkpoint_dumps(params) + "\n",
        "predictions.csv": "\n".join(lines) + "\n",
        "trace.csv": tr.trace_to_csv(trace),
    })
    print(f"infer: final gap {trace.final_gap:.3g} (target {cfg['target_gap']})")
    return EXIT_OK


def _cmd_xval(cfg, out_dir):
    net, _, ps, inc = _load_problem(cfg)
    obs = _load_observations(cfg, inc)
    config = _train_config(cfg)
    spec = _spec_for(cfg, net, obs)
    records, info = ev.kfold(net, inc, obs, spec, config,
                             n_folds=int(cfg["n_folds"]), seed=int(cfg["seed"]))
    files = {"model.csv": ev.records_to_csv(records)}
    if cfg["baselines"]:
        hist, _ = ev.baseline_historical_mean(inc, obs, int(cfg["n_folds"]),
                                              int(cfg["seed"]))
        lin, _ = ev.baseline_linear_regression(net, inc, obs, int(cfg["n_folds"]),
                                               int(cfg["seed"]))
        files["baseline_historical_mean.csv"] = ev.records_to_csv(hist)
        files["baseline_linear_regression.csv"] = ev.records_to_csv(lin)
    _write_outputs(out_dir, cfg, files)
    out = [r.mape for r in records if r.scope == "out" and r.mape == r.mape]
    print(f"xval: {len(records)} records, median out-of-sample MAPE "
          f"{np.median(out):.2f}%")
    return EXIT_OK


def _cmd_sweep(cfg, out_dir):
    net, _, ps, inc = _load_problem(cfg)
    obs = _load_observations(cfg, inc)
    config = _train_config(cfg)
    spec = _spec_for(cfg, net, obs)
    results = ev.lambda_sweep(net, inc, obs, spec, config,
                              grid=[float(v) for v in cfg["grid"]],
                              n_folds=int(cfg["n_folds"]), seed=int(cfg["seed"]))
    lines = ["lambda,mse_out_flow,mean_train_gap"]
    for r in results:
        lines.append(f"{r.lam!r},{r.mse_out_flow!r},{r.mean_train_gap!r}")
    _write_outputs(out_dir, cfg, {"sweep.csv": "\n".join(lines) + "\n"})
    best = min(results, key=lambda r: r.mse_out_flow)
    print(f"sweep: best lambda {best.lam} (out-of-sample flow MSE {best.mse_out_flow:.4g})")
    return EXIT_OK


def _cmd_report(cfg, out_dir):
    if not cfg.get("input"):
        raise UsageError("report requires config key 'input' (a CSV produced "
                         "by train/xval/sweep)")
    try:
        text = Path(cfg["input"]).read_text()
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataError("report input has no data rows")
    header = lines[0].split(",")
    print(",".join(header))
    cols = list(zip(*(ln.split(",") for ln in lines[1:])))
    for name, col in zip(header, cols):
        try:
            vals = np.array([float(v) for v in col])
        except ValueError:
            print(f"{name}: {len(col)} rows (non-numeric)")
            continue
        vals = vals[~np.isnan(vals)]
        if vals.size:
            print(f"{name}: min {vals.min():.6g}, median {np.median(vals):.6g}, "
                  f"max {vals.max():.6g}")
    return EXIT_OK


_HANDLERS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "equilibrium": _cmd_equilibrium,
    "infer": _cmd_infer,
    "xval": _cmd_xval,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mate",
        description="Macroscopic traffic estimation from link measurements.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _HANDLERS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override a config key")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = _load_config(args.command, args.config, args.overrides)
        return _HANDLERS[args.command](cfg, Path(args.out))
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except fwd.NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
