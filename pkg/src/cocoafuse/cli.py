"""Command-line surface: simulate, fit, evaluate, tune, select.

Every command is a pure function of its JSON config and input files;
all randomized steps take explicit seeds, so re-runs reproduce outputs
bit for bit. Commands refuse to write into a non-empty output directory
unless --force is given.

Exit codes: 0 ok, 2 config error, 3 data error, 4 convergence failure,
5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, synth
from .empirical_bayes import EBConfig, tune
from .errors import ConfigError, ConvergenceError, DataError, NumericalError
from .metrics import MetricsReport, cic, cil, emse, lppd, psis_loo, r_squared
from .model import ModelDims, ModelSpec, PriorConfig, _log_gate_matrix
from .sampler import (
    SamplerConfig,
    load_posterior,
    pointwise_loglik_matrix,
    posterior_predict,
    sample_posterior,
    save_posterior,
)
from .selection import select_with_log, trials_from_manifest

RHAT_THRESHOLD = 1.05

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4
EXIT_NUMERICAL = 5


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cocoafuse", description="expert-fusion density regression"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, handler, doc in [
        ("simulate", cmd_simulate, "generate synthetic switch/transition data"),
        ("fit", cmd_fit, "sample the posterior of a model on training data"),
        ("evaluate", cmd_evaluate, "compute metrics and plot data on a test set"),
        ("tune", cmd_tune, "tune prior hyperparameters by gradient ascent"),
        ("select", cmd_select, "complexity-aware selection among fitted trials"),
    ]:
        p = sub.add_parser(name, help=doc)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--output", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override config seeds")
        p.add_argument("--force", action="store_true", help="overwrite output dir")
        p.add_argument(
            "--allow-nonconverged",
            action="store_true",
            help="do not fail when R-hat exceeds the threshold",
        )
        p.set_defaults(handler=handler)
    return parser


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"no such config file: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None


def _output_dir(args, config: dict) -> Path:
    out = args.output or config.get("output")
    if out is None:
        raise ConfigError("no output directory (use --output or config 'output')")
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _section(config: dict, name: str) -> dict:
    if name not in config:
        raise ConfigError(f"config is missing the {name!r} section")
    return config[name]


def _echo_config(config: dict, out: Path):
    (out / "config_echo.json").write_text(
        json.dumps(config, indent=2), encoding="utf-8"
    )


def _model_spec(config: dict) -> ModelSpec:
    return ModelSpec.from_json(_section(config, "model"))


def _sampler_config(config: dict, seed_override) -> SamplerConfig:
    obj = dict(_section(config, "sampler"))
    if seed_override is not None:
        obj["seed"] = seed_override
    return SamplerConfig.from_json(obj)


def _train_dataset(config: dict, spec: ModelSpec) -> dataio.Dataset:
    data_cfg = _section(config, "data")
    if "train" not in data_cfg:
        raise ConfigError("data section needs a 'train' CSV path")
    ds = dataio.load_csv(data_cfg["train"], response=data_cfg.get("response", "y"))
    return dataio.fit_apply_features(
        ds, spec.expert_features, spec.gate_features, spec.behavior_features
    )


def _priors(config: dict, spec: ModelSpec, data: dataio.Dataset) -> PriorConfig:
    obj = config.get("priors", "default")
    if obj == "default":
        return PriorConfig.default(spec, ModelDims.from_dataset(spec, data))
    return PriorConfig.from_json(obj)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    sim = _section(config, "simulate")
    kind = sim.get("kind")
    params = dict(sim.get("config", {}))
    if args.seed is not None:
        params["seed"] = args.seed
    if kind == "switch":
        cfg = synth.SwitchConfig.from_json(params)
        ds = synth.gen_switch(cfg)
    elif kind == "transition":
        cfg = synth.TransitionConfig.from_json(params)
        ds = synth.gen_transition(cfg)
    else:
        raise ConfigError(f"simulate.kind must be switch or transition, got {kind!r}")
    out = _output_dir(args, config)
    train, test = synth.train_test(ds, cfg)
    dataio.save_csv(train, out / f"{kind}_train.csv")
    dataio.save_csv(test, out / f"{kind}_test.csv")
    synth.save_config(cfg, out / f"{kind}_config.json")
    _echo_config(config, out)
    print(f"wrote {cfg.n_train}/{cfg.n_test} rows to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    config = _load_config(args.config)
    spec = _model_spec(config)
    data = _train_dataset(config, spec)
    priors = _priors(config, spec, data)
    sampler_cfg = _sampler_config(config, args.seed)
    out = _output_dir(args, config)

    post = sample_posterior(data, spec, priors, sampler_cfg)
    save_posterior(post, out / "posterior")
    dataio.save_feature_records(data.feature_records, out / "features.json")
    priors.save(out / "priors.json")
    (out / "model.json").write_text(
        json.dumps(spec.to_json(), indent=2), encoding="utf-8"
    )
    rhats = post.rhat_table()
    with (out / "rhat.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "rhat"])
        for name, value in rhats.items():
            writer.writerow([name, repr(value)])
    _echo_config(config, out)

    finite = [v for v in rhats.values() if math.isfinite(v)]
    worst = max(finite) if finite else float("nan")
    print(f"fit complete: {post.n_draws} draws, worst R-hat {worst:.4f}")
    if post.hard_warning:
        print("warning: divergent transitions exceeded 10% in a chain", file=sys.stderr)
    if finite and worst > RHAT_THRESHOLD and not args.allow_nonconverged:
        print(
            f"convergence failure: R-hat {worst:.4f} > {RHAT_THRESHOLD}",
            file=sys.stderr,
        )
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    ev = _section(config, "evaluate")
    fit_dir = Path(ev.get("fit", "."))
    if not (fit_dir / "posterior").exists():
        raise ConfigError(f"no posterior under {fit_dir}")
    post = load_posterior(fit_dir / "posterior")
    records = dataio.load_feature_records(fit_dir / "features.json")

    data_cfg = _section(config, "data")
    if "test" not in data_cfg:
        raise ConfigError("data section needs a 'test' CSV path")
    test_raw = dataio.load_csv(data_cfg["test"], response=data_cfg.get("response", "y"))
    test = dataio.apply_features(test_raw, records)
    if test.n_rows == 0:
        raise DataError("test set is empty")

    seed = args.seed if args.seed is not None else int(ev.get("predict_seed", 0))
    level = float(ev.get("level", 0.95))
    pred = posterior_predict(post, test, seed=seed, store_components=False)
    intervals = pred.intervals(level)

    test_ll = pointwise_loglik_matrix(post, test)
    loo_value, loo_se, pareto_k = psis_loo(post.loglik_matrix())
    report = MetricsReport(
        psis_loo=(loo_value, loo_se),
        lppd=lppd(test_ll),
        cic=cic(test.y, intervals),
        cil=cil(intervals),
        emse=emse(test.y, pred.y),
        r2=r_squared(test.y, pred.means()),
        pareto_k=pareto_k,
    )

    out = _output_dir(args, config)
    (out / "metrics.json").write_text(
        json.dumps(report.to_json(), indent=2), encoding="utf-8"
    )
    header, row = report.csv_row()
    with (out / "metrics_row.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerow(row)
    _write_plot_data(post, records, test, ev, seed, out)
    _echo_config(config, out)
    print(
        f"LOO {report.psis_loo[0]:.2f}  LPPD {report.lppd[0]:.2f}  "
        f"CIC {report.cic[0]:.3f}  CIL {report.cil[0]:.3f}  "
        f"eMSE {report.emse[0]:.4f}  R2 {report.r2:.4f}"
    )
    return EXIT_OK


def _write_plot_data(post, records, test, ev: dict, seed: int, out: Path):
    """Predictive mean/quantile curves and gate probabilities on a grid."""
    plot = ev.get("plot")
    if plot is None:
        return
    column = plot.get("column")
    if column is None:
        raise ConfigError("evaluate.plot needs a 'column'")
    lo = float(plot.get("min", test.columns[column].min()))
    hi = float(plot.get("max", test.columns[column].max()))
    points = int(plot.get("points", 101))
    grid = np.linspace(lo, hi, points)

    referenced = {
        rec["column"]
        for dest in ("expert", "gate", "behavior")
        for rec in records[dest]
        if rec.get("column") is not None
    }
    fixed = plot.get("fixed", {})
    columns = {column: grid}
    for name in sorted(referenced - {column}):
        value = float(fixed.get(name, test.columns[name].mean()))
        columns[name] = np.full(points, value)
    columns[test.response] = np.zeros(points)  # placeholder, never used
    grid_ds = dataio.apply_features(
        dataio.Dataset(columns=columns, response=test.response), records
    )

    pred = posterior_predict(post, grid_ds, seed=seed + 1, store_components=False)
    bands = np.quantile(pred.y, [0.025, 0.05, 0.95, 0.975], axis=1)
    with (out / "plot_predictive.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([column, "mean", "q025", "q05", "q95", "q975"])
        means = pred.means()
        for i in range(points):
            writer.writerow(
                [repr(float(v)) for v in (grid[i], means[i], *bands[:, i])]
            )

    m = post.dims.n_experts
    gate_mean = np.zeros((points, m))
    for pv in post.iter_parameters():
        gate_mean += np.exp(_log_gate_matrix(grid_ds.gate_design, pv))
    gate_mean /= post.n_draws
    with (out / "plot_gate.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([column] + [f"expert{i + 1}" for i in range(m)])
        for i in range(points):
            writer.writerow([repr(float(grid[i]))] + [repr(float(v)) for v in gate_mean[i]])


def cmd_tune(args) -> int:
    config = _load_config(args.config)
    spec = _model_spec(config)
    data = _train_dataset(config, spec)
    priors0 = _priors(config, spec, data)
    tune_cfg_obj = dict(_section(config, "tune"))
    inner = dict(tune_cfg_obj.pop("inner", {}))
    if args.seed is not None:
        tune_cfg_obj["seed"] = args.seed
    eb_cfg = EBConfig(
        gamma=float(tune_cfg_obj.get("gamma", 1.0)),
        step_size=float(tune_cfg_obj.get("step_size", 0.05)),
        decay=tune_cfg_obj.get("decay", "inv_sqrt"),
        horizon=int(tune_cfg_obj.get("horizon", 20)),
        inner=SamplerConfig.from_json({"chains": 2, "warmup": 300, "samples": 300, **inner}),
        seed=int(tune_cfg_obj.get("seed", 0)),
    )
    out = _output_dir(args, config)
    best, trace = tune(data, spec, priors0, eb_cfg)
    best.save(out / "tuned_priors.json")
    trace.save_csv(out / "eb_trace.csv")
    _echo_config(config, out)
    best_obj = trace.iterates[trace.best_index - 1].objective
    print(f"best iterate {trace.best_index} with surrogate {best_obj:.3f}")
    return EXIT_OK


def cmd_select(args) -> int:
    config = _load_config(args.config)
    sel = _section(config, "select")
    if "trials" not in sel:
        raise ConfigError("select section needs a 'trials' manifest path")
    trials = trials_from_manifest(sel["trials"])
    tau = float(sel.get("tau", 0.5))
    best, log = select_with_log(trials, tau)
    out = _output_dir(args, config)
    payload = {
        "selected": {
            "id": best.id,
            "metric": best.metric,
            "metric_se": best.metric_se,
            "n_experts": best.n_experts,
            "n_params": best.n_params,
        },
        "tau": tau,
        "visits": log,
    }
    (out / "selection.json").write_text(json.dumps(payload, indent=2), encoding="utf-8")
    _echo_config(config, out)
    print(f"selected trial {best.id}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
