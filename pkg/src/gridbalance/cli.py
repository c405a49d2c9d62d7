"""Command-line entry point: data generation, grouping, simulation, solving.

Configuration is plain ``key=value`` text (one per line, ``#`` comments),
overridable per invocation with ``--set key=value``; unknown keys are
rejected.  All outputs are written atomically (temp file + rename) and
are byte-reproducible for a fixed seed, except for the wall-clock
``runtime_s`` field inside summary files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np

from . import groupform, milp, simulator
from .core import BatterySpec, DacVector, load_demand_csv, load_holidays

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


def _positive(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def convert(text):
        val = kind(text)
        if lo is not None and (val <= lo if lo_open else val < lo):
            raise ConfigError(f"value {val} below minimum {lo}")
        if hi is not None and (val >= hi if hi_open else val > hi):
            raise ConfigError(f"value {val} above maximum {hi}")
        return val
    return convert


def _float_list(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(float(tok) for tok in text.split(","))


def _clusters(text):
    out = []
    for part in text.strip().split(";"):
        fields = part.split(":")
        if len(fields) != 3:
            raise ConfigError(f"cluster {part!r} is not count:scale:noise")
        out.append((int(fields[0]), float(fields[1]), float(fields[2])))
    return tuple(out)


def _threshold(text):
    if text.strip().lower() == "auto":
        return None
    return _positive(float, lo=0, lo_open=True)(text)


def _source(text):
    if text not in ("synthetic", "csv"):
        raise ConfigError(f"data.source must be synthetic or csv, got {text!r}")
    return text


_SCHEMA = {
    "seed": (_positive(int, lo=0), 0),
    "granularity_minutes": (_positive(int, lo=1), 30),
    "tariff.threshold_kwh": (_threshold, None),
    "tariff.prices": (_float_list, (45.7, 15.0, 10.48, 0.0)),
    "tariff.big_m": (_positive(float, lo=0, lo_open=True), 1e7),
    "battery.capacity_kwh": (_positive(float, lo=0), 320.0),
    "battery.power_charge_kw": (_positive(float, lo=0), 640.0),
    "battery.power_discharge_kw": (_positive(float, lo=0), 640.0),
    "battery.soc_min_frac": (_positive(float, lo=0, hi=1, hi_open=True), 0.01),
    "battery.soc_max_frac": (_positive(float, lo=0, lo_open=True, hi=1), 0.96),
    "battery.eta_charge": (_positive(float, lo=0, lo_open=True, hi=1), 0.9747),
    "battery.eta_discharge": (_positive(float, lo=0, lo_open=True, hi=1), 0.9747),
    "battery.unit_count": (_positive(int, lo=1), 1),
    "mcmc.iterations": (_positive(int, lo=1), 80_000),
    "mcmc.burn_in_frac": (_positive(float, lo=0, hi=1, hi_open=True), 0.25),
    "group.beta": (_positive(float, lo=0, lo_open=True), 1.0),
    "group.threshold": (_positive(float, lo=0, lo_open=True), 2.0),
    "group.min_size": (_positive(int, lo=2), 4),
    "svr.window": (_positive(int, lo=1), 8),
    "svr.past_periods": (_positive(int, lo=1), 48),
    "svr.training_days": (_positive(int, lo=1), 20),
    "scen.space": (_positive(int, lo=1), 5000),
    "scen.count": (_positive(int, lo=1), 57),
    "scen.sigma_floor_frac": (_positive(float, lo=0), 0.05),
    "campaign.horizon_days": (_positive(int, lo=1), 14),
    "campaign.contract_error_frac": (_positive(float, lo=0), 0.10),
    "campaign.c0": (_positive(float, lo=0), 0.1),
    "campaign.c1": (_positive(float, lo=0), 1.0),
    "campaign.sweep": (_float_list, ()),
    "data.source": (_source, "synthetic"),
    "data.demand_csv": (str, ""),
    "data.holidays": (str, ""),
    "data.clusters": (_clusters, ((57, 45.0, 1.35),)),
}


class RunConfig:
    """Validated flat configuration; unknown keys are rejected."""

    def __init__(self, values: dict):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {key: default for key, (_, default) in _SCHEMA.items()}

        def apply(key, raw, where):
            if key not in _SCHEMA:
                raise ConfigError(f"{where}: unknown key {key!r}")
            try:
                values[key] = _SCHEMA[key][0](raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from exc

        if path is not None:
            with open(path) as fh:
                for lineno, line in enumerate(fh, start=1):
                    text = line.split("#", 1)[0].strip()
                    if not text:
                        continue
                    if "=" not in text:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, raw = (part.strip() for part in text.split("=", 1))
                    apply(key, raw, f"{path}:{lineno}")
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set {item!r}: expected key=value")
            key, raw = (part.strip() for part in item.split("=", 1))
            apply(key, raw, f"--set {item}")
        return cls(values)

    def battery(self) -> BatterySpec:
        v = self.values
        return BatterySpec(
            v["battery.capacity_kwh"], v["battery.power_charge_kw"],
            v["battery.power_discharge_kw"], v["battery.soc_min_frac"],
            v["battery.soc_max_frac"], v["battery.eta_charge"],
            v["battery.eta_discharge"], v["battery.unit_count"])

    def campaign(self) -> simulator.CampaignConfig:
        v = self.values
        holidays = frozenset()
        if v["data.holidays"]:
            holidays = frozenset(load_holidays(v["data.holidays"]))
        return simulator.CampaignConfig(
            horizon_days=v["campaign.horizon_days"], window=v["svr.window"],
            n_space=v["scen.space"], n_reduced=v["scen.count"],
            contract_error_frac=v["campaign.contract_error_frac"],
            c0=v["campaign.c0"], c1=v["campaign.c1"], seed=v["seed"],
            granularity_minutes=v["granularity_minutes"],
            n_past=v["svr.past_periods"], training_days=v["svr.training_days"],
            sigma_floor_frac=v["scen.sigma_floor_frac"],
            tariff_prices=v["tariff.prices"],
            tariff_threshold=v["tariff.threshold_kwh"],
            tariff_big_m=v["tariff.big_m"],
            sweep_capacities=v["campaign.sweep"],
            holidays=holidays)


def atomic_write(path, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_text(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def _load_fleet(config: RunConfig):
    v = config.values
    if v["data.source"] == "csv":
        if not v["data.demand_csv"]:
            raise ConfigError("data.source=csv requires data.demand_csv")
        return load_demand_csv(v["data.demand_csv"])
    clusters = v["data.clusters"]
    n = sum(c for c, _, _ in clusters)
    return simulator.generate_synthetic_fleet(
        n, clusters, simulator.derived_seed(v["seed"], simulator._SEED_FLEET),
        v["campaign.horizon_days"],
        granularity_minutes=v["granularity_minutes"])


def cmd_datagen(config: RunConfig, out_dir: str) -> int:
    fleet = _load_fleet(config)
    lines = ["timestamp,customer_id,kwh"]
    for series in fleet:
        for i, val in enumerate(series.values):
            ts = series.timestamp_at(i).isoformat(sep=" ")
            lines.append(f"{ts},{series.customer_id},{float(val)!r}")
    path = os.path.join(out_dir, "demand.csv")
    atomic_write(path, "\n".join(lines) + "\n")
    print(f"wrote {path}: {len(fleet)} customers x {len(fleet[0])} periods")
    return EXIT_OK


def cmd_form_groups(config: RunConfig, demand_csv, out_dir: str) -> int:
    v = config.values
    path = demand_csv or v["data.demand_csv"]
    if path:
        fleet = load_demand_csv(path)
    else:
        fleet = _load_fleet(config)
    dac = DacVector.from_series(fleet)

    traces = []

    def hook(start, end, samples):
        traces.append((start, end, samples))

    groups = groupform.form_groups(
        dac, beta=v["group.beta"], threshold=v["group.threshold"],
        min_group_size=v["group.min_size"],
        mcmc_params=groupform.McmcParams(v["mcmc.iterations"],
                                         v["mcmc.burn_in_frac"]),
        seed=v["seed"], trace_hook=hook)

    atomic_write(os.path.join(out_dir, "groups.json"), groups.to_json())
    for start, end, samples in traces:
        lines = ["tau,lambda1,lambda2"]
        lines.extend(f"{t},{float(l1)!r},{float(l2)!r}" for t, l1, l2 in
                     zip(samples.tau, samples.lambda1, samples.lambda2))
        atomic_write(os.path.join(out_dir, f"posterior_{start}_{end}.csv"),
                     "\n".join(lines) + "\n")
    print(f"wrote {os.path.join(out_dir, 'groups.json')}: "
          f"{len(groups)} group(s) over {len(dac)} customers")
    return EXIT_OK


def cmd_simulate(config: RunConfig, mode: str, out_dir: str) -> int:
    fleet = _load_fleet(config)
    cc = config.campaign()
    campaign = simulator.Campaign(cc, fleet)
    battery = config.battery()

    if mode == "sweep":
        caps = cc.sweep_capacities or (0.0, 80.0, 160.0, 320.0)
        rows = simulator.capacity_sweep(cc, fleet, caps, campaign=campaign)
        lines = ["capacity_kwh,pct_of_basic"]
        lines.extend(f"{cap!r},{pct!r}" for cap, pct in rows)
        path = os.path.join(out_dir, "sweep.csv")
        atomic_write(path, "\n".join(lines) + "\n")
        print(f"wrote {path}: " + "  ".join(f"{c:g}->{p:.1f}%" for c, p in rows))
        return EXIT_OK

    if mode == "nobattery":
        trace = campaign.run_no_battery()
    elif mode == "deterministic":
        trace = campaign.run_dispatch(battery, stochastic=False)
    elif mode == "sswcd":
        trace = campaign.run_dispatch(battery, stochastic=True)
    else:
        raise ConfigError(f"unknown mode {mode!r}")

    atomic_write(os.path.join(out_dir, "trace.csv"), trace.to_csv())
    summary = trace.summary()
    atomic_write(os.path.join(out_dir, "summary.json"), _json_text(summary))
    errors = ["period,lag,actual,predicted,error"]
    for t, preds in enumerate(trace.predictions):
        for lag in range(min(t + 1, len(preds))):
            made = t - lag
            if lag < len(trace.predictions[made]):
                pred = trace.predictions[made][lag]
                act = trace.dm[t]
                errors.append(f"{t},{lag},{float(act)!r},{float(pred)!r},{float(act - pred)!r}")
    if trace.predictions:
        atomic_write(os.path.join(out_dir, "prediction_errors.csv"),
                     "\n".join(errors) + "\n")
    print(f"mode={mode} total_cost={summary['total_cost']:.1f} "
          f"basic_cost={summary['basic_cost']:.1f} "
          f"reduction={summary['reduction_pct']:.1f}%")
    return EXIT_OK


def cmd_solve(problem_file: str) -> int:
    with open(problem_file) as fh:
        text = fh.read()
    problem = milp.parse_lp_text(text)
    solution = milp.solve_milp(problem)
    print(f"status: {solution.status}")
    if solution.x is not None:
        print(f"objective: {solution.objective!r}")
        print(f"nodes: {solution.node_count}  lp_iterations: "
              f"{solution.lp_iterations}")
        for j in range(problem.base.n_vars):
            print(f"  {problem.base.var_name(j)} = {float(solution.x[j])!r}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridbalance",
        description="Balancing-group formation and robust battery dispatch "
                    "against a convex imbalance tariff.")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--set", action="append", default=[], metavar="K=V",
                        dest="overrides", help="override one config key")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", help="write a synthetic demand CSV")
    fg = sub.add_parser("form-groups", help="form balancing groups from demand")
    fg.add_argument("demand_csv", nargs="?", default=None)
    simp = sub.add_parser("simulate", help="run a dispatch campaign")
    simp.add_argument("--mode", default="sswcd",
                      choices=["sswcd", "deterministic", "nobattery", "sweep"])
    sv = sub.add_parser("solve", help="solve a problem in algebraic text form")
    sv.add_argument("problem_file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    try:
        config = RunConfig.load(args.config, overrides)
    except (ConfigError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.command == "datagen":
            return cmd_datagen(config, args.out)
        if args.command == "form-groups":
            return cmd_form_groups(config, args.demand_csv, args.out)
        if args.command == "simulate":
            return cmd_simulate(config, args.mode, args.out)
        if args.command == "solve":
            try:
                return cmd_solve(args.problem_file)
            except (FileNotFoundError, ValueError) as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_INPUT
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (milp.SimplexError, RuntimeError) as exc:
        problem = getattr(exc, "problem", None)
        if problem is not None:
            dump = os.path.join(args.out, "failed_problem.lp")
            atomic_write(dump, milp.write_lp_text(problem))
            print(f"error: {exc} (problem dumped to {dump})", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
