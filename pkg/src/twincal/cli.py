"""Command-line entry point: ``twincal <subcommand> [options]``.

Every invocation writes into one run directory (``--out``) holding the
artifacts and ``manifest.json``.  Progress goes to stderr.  Exit codes:
0 success, 2 configuration error, 3 numerical failure, 4 IO/data error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import add_noise, load_observations, make_toy_observations, save_observations, toy_scenario
from .errors import ConfigError, DataError, NumericalError
from .experiments import (BENCH_METHODS, ToyProblem, point_estimates, posterior_rmse, run_benchmark, toy_problem,
                          write_benchmark)
from .farm import FarmConfig, config_from_mapping, read_scenario, save_config, simulate, write_scenario
from .gp import build_design, default_param_grid, write_design
from .koh import KohHyperPriors, extract_bias, koh_mcmc, koh_sequential
from .pf import LengthscalePrior, PFConfig, pf_run
from .sensitivity import run_morris, write_plot_data, write_summary

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.json"
# columns holding wall-clock values; excluded from the stable checksum
TIMING_COLUMNS = {"step_seconds", "seconds_per_step", "total_seconds"}

log = logging.getLogger("twincal")


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    argv: list
    config: dict
    seed: int
    threads: int
    inputs: dict = dataclasses.field(default_factory=dict)
    outputs: dict = dataclasses.field(default_factory=dict)
    stage_seconds: dict = dataclasses.field(default_factory=dict)
    summary: dict = dataclasses.field(default_factory=dict)
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = out_dir / MANIFEST
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True, default=_json_default) + "\n",
                        encoding="utf-8")
        return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stable_sha256(path) -> str:
    """Checksum of a CSV with wall-clock columns dropped; plain checksum otherwise."""
    path = Path(path)
    if path.suffix != ".csv":
        return file_sha256(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return file_sha256(path)
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    h = hashlib.sha256()
    for r in rows:
        h.update(("\x1f".join(r[i] for i in keep if i < len(r)) + "\n").encode())
    return h.hexdigest()


# ---------------------------------------------------------------- config


def _section(parser: configparser.ConfigParser, name: str) -> dict:
    return dict(parser[name]) if name in parser else {}


def load_run_config(path) -> dict:
    """Read ``[farm]``, ``[pf]``, ``[koh]``, ``[toy]`` and ``[run]`` sections."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    known = {"farm", "pf", "koh", "toy", "run"}
    extra = set(parser.sections()) - known
    if extra:
        raise ConfigError(f"{path}: unknown section(s) {sorted(extra)}")
    return {s: _section(parser, s) for s in known}


def _typed(section: dict, key: str, kind, default):
    if key not in section:
        return default
    try:
        return kind(section[key])
    except ValueError as exc:
        raise ConfigError(f"config value {key} = {section[key]!r} is not a valid {kind.__name__}") from exc


@dataclasses.dataclass
class Settings:
    farm: FarmConfig
    seed: int = 0
    threads: int = 1
    days: int = 20
    weather_seed: int = 0
    noise_2sigma: float = 0.0
    particles: int = 1000
    rejuvenate: float = PFConfig.rejuvenate
    pf_window: str = "newest"
    resampling: str = "systematic"
    l_median: float = LengthscalePrior.median
    l_sigma: float = LengthscalePrior.sigma
    chains: int = 3
    iterations: int = 5000

    def resolved(self) -> dict:
        d = dataclasses.asdict(self)
        d["farm"] = dataclasses.asdict(self.farm)
        return d


def resolve_settings(args) -> Settings:
    """Config file values, overridden by any flag given on the command line."""
    sections = load_run_config(args.config) if args.config else {s: {} for s in ("farm", "pf", "koh", "toy", "run")}
    farm = config_from_mapping(sections["farm"]) if sections["farm"] else FarmConfig()
    run, toy, pf, koh = sections["run"], sections["toy"], sections["pf"], sections["koh"]
    s = Settings(
        farm=farm,
        seed=_typed(run, "seed", int, 0),
        threads=_typed(run, "threads", int, 1),
        days=_typed(toy, "days", int, 20),
        weather_seed=_typed(toy, "weather_seed", int, 0),
        noise_2sigma=_typed(toy, "noise_2sigma", float, 0.0),
        particles=_typed(pf, "particles", int, 1000),
        rejuvenate=_typed(pf, "rejuvenate", float, PFConfig.rejuvenate),
        pf_window=_typed(pf, "window", str, "newest"),
        resampling=_typed(pf, "resampling", str, "systematic"),
        l_median=_typed(pf, "l_median", float, LengthscalePrior.median),
        l_sigma=_typed(pf, "l_sigma", float, LengthscalePrior.sigma),
        chains=_typed(koh, "chains", int, 3),
        iterations=_typed(koh, "iterations", int, 5000),
    )
    flag_map = {"seed": "seed", "threads": "threads", "days": "days", "weather_seed": "weather_seed",
                "noise_2sigma": "noise_2sigma", "particles": "particles", "rejuvenate": "rejuvenate",
                "pf_window": "pf_window", "chains": "chains", "iterations": "iterations"}
    for flag, field_name in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(s, field_name, v)
    if s.threads < 1:
        raise ConfigError("--threads must be >= 1")
    if s.seed < 0:
        raise ConfigError("--seed must be a non-negative integer")
    return s


# ---------------------------------------------------------------- helpers


def _observations(args, settings: Settings, scenario):
    """Observations from ``--observations`` or generated from the toy setup."""
    if getattr(args, "observations", None):
        if settings.noise_2sigma:
            raise ConfigError("--noise-2sigma applies to generated data only; the observation file is used as is")
        return load_observations(args.observations)
    obs = make_toy_observations(settings.farm, scenario=scenario)
    return add_noise(obs, settings.noise_2sigma, settings.seed) if settings.noise_2sigma else obs


def _scenario(args, settings: Settings):
    if getattr(args, "scenario", None):
        return read_scenario(args.scenario)
    return toy_scenario(days=settings.days, seed=settings.weather_seed)


class Run:
    """Collects artifacts and stage timings for one invocation."""

    def __init__(self, args, settings: Settings):
        self.out = Path(args.out or f"twincal-runs/{args.command}-seed{settings.seed}")
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(args.command, list(args.argv), settings.resolved(), settings.seed,
                                    settings.threads)
        for key in ("config", "observations", "scenario"):
            v = getattr(args, key, None)
            if v:
                self.manifest.inputs[key] = {"path": str(v), "sha256": file_sha256(v)}
        self._t = time.perf_counter()

    def path(self, name) -> Path:
        return self.out / name

    def stage(self, name):
        now = time.perf_counter()
        self.manifest.stage_seconds[name] = round(now - self._t, 6)
        self._t = now

    def add(self, name):
        p = self.path(name)
        self.manifest.outputs[name] = {"sha256": file_sha256(p), "stable_sha256": stable_sha256(p)}

    def finish(self):
        self.manifest.write(self.out)
        log.info("wrote %s", self.out / MANIFEST)


# ---------------------------------------------------------------- commands


def cmd_simulate(args, s: Settings, run: Run):
    scenario = _scenario(args, s)
    theta = (args.vent_ach, args.ias) if args.vent_ach is not None or args.ias is not None else None
    if theta is not None and None in theta:
        raise ConfigError("--vent-ach and --ias must be given together")
    res = simulate(s.farm, scenario, theta)
    run.stage("simulate")
    res.write_csv(run.path("output.csv"))
    run.add("output.csv")
    save_config(s.farm, run.path("farm.cfg"))
    run.add("farm.cfg")
    run.manifest.summary = {"hours": len(scenario), "rh_min": float(res.rh.min()), "rh_max": float(res.rh.max())}


def cmd_design(args, s: Settings, run: Run):
    scenario = _scenario(args, s)
    obs = _observations(args, s, scenario)
    design = build_design(default_param_grid(), scenario, s.farm, obs.timestamps)
    run.stage("design")
    write_design(design, run.path("design.csv"))
    run.add("design.csv")
    run.add("design.csv.json")
    run.manifest.summary = {"rows": len(design), "runs": 42, "sample_times": len(obs)}


def cmd_sensitivity(args, s: Settings, run: Run):
    days = args.days if args.days is not None else 30
    scenario = toy_scenario(days=days, seed=s.weather_seed)
    _, summaries = run_morris(s.farm, scenario, r=args.trajectories, p=args.levels, seed=s.seed)
    run.stage("morris")
    write_summary(summaries, run.path("morris_summary.csv"))
    write_plot_data(summaries, run.path("morris_plot.csv"))
    run.add("morris_summary.csv")
    run.add("morris_plot.csv")
    run.manifest.summary = {m: summ.ranking() for m, summ in summaries.items()}


def cmd_toy_data(args, s: Settings, run: Run):
    scenario = toy_scenario(days=s.days, seed=s.weather_seed)
    obs = make_toy_observations(s.farm, scenario=scenario)
    truth = obs.theta
    if s.noise_2sigma:
        obs = add_noise(obs, s.noise_2sigma, s.seed)
    run.stage("generate")
    save_observations(obs, run.path("observations.csv"))
    with open(run.path("truth.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "vent_ach", "ias_ms"])
        for t, (n, ias) in zip(obs.timestamps, truth):
            w.writerow([t.isoformat(), repr(float(n)), repr(float(ias))])
    write_scenario(scenario, run.path("scenario.csv"))
    for name in ("observations.csv", "truth.csv", "scenario.csv"):
        run.add(name)
    run.manifest.summary = {"observations": len(obs), "noise_2sigma": s.noise_2sigma}


def _problem(args, s: Settings):
    scenario = _scenario(args, s)
    obs = _observations(args, s, scenario)
    design = build_design(default_param_grid(), scenario, s.farm, obs.timestamps)
    return scenario, obs, design


def cmd_calibrate_pf(args, s: Settings, run: Run):
    scenario, obs, design = _problem(args, s)
    run.stage("design")
    cfg = PFConfig(particles=s.particles, seed=s.seed, rejuvenate=s.rejuvenate, window=s.pf_window,
                   resampling=s.resampling, l_prior=LengthscalePrior(s.l_median, s.l_sigma), threads=s.threads)
    trace = pf_run(design, obs, cfg, progress=log.info)
    run.stage("filter")
    trace.write_csv(run.path("pf_trace.csv"))
    run.add("pf_trace.csv")
    summary = {"final_mean_N": float(trace.mean("N")[-1]), "final_mean_IAS": float(trace.mean("IAS")[-1]),
               "total_seconds": float(trace.step_seconds.sum())}
    if not getattr(args, "observations", None):
        prob = ToyProblem(s.farm, scenario, make_toy_observations(s.farm, scenario=scenario), design)
        summary["rmse_percent"] = posterior_rmse(prob, point_estimates(trace, len(obs)))
    run.manifest.summary = summary


def cmd_calibrate_koh(args, s: Settings, run: Run):
    if args.window:
        raise ConfigError("calibrate-koh is the static calibration (--window 0); use calibrate-koh-seq for windows")
    _, obs, design = _problem(args, s)
    if args.points is not None:
        if not 2 <= args.points <= len(obs):
            raise ConfigError(f"--points must lie in [2, {len(obs)}]")
        obs = obs.subset(0, args.points)
    run.stage("design")
    post = koh_mcmc(KohHyperPriors(), design, obs, s.chains, s.iterations, s.seed, s.threads, progress=log.info)
    run.stage("mcmc")
    post.write_samples(run.path("koh_samples.csv"))
    bias = extract_bias(post, design, obs)
    bias.write_csv(run.path("koh_bias.csv"))
    run.stage("bias")
    run.add("koh_samples.csv")
    run.add("koh_bias.csv")
    run.manifest.summary = {
        "points": len(obs),
        "posterior_mean": {n: post.mean(n) for n in post.names},
        "split_rhat": post.rhat,
        "acceptance": post.acceptance.tolist(),
        "max_abs_bias_percent": float(np.abs(bias.mean).max()),
    }


def cmd_calibrate_koh_seq(args, s: Settings, run: Run):
    window = args.window if args.window is not None else 4
    if window < 2:
        raise ConfigError("--window must be >= 2 for sequential calibration")
    scenario, obs, design = _problem(args, s)
    run.stage("design")
    res = koh_sequential(KohHyperPriors(), design, obs, window, s.seed, s.chains, s.iterations, s.threads,
                         progress=log.info)
    run.stage("sequential")
    res.trace.write_csv(run.path("koh_seq_trace.csv"))
    run.add("koh_seq_trace.csv")
    summary = {"window": window, "steps": res.steps, "total_seconds": float(res.trace.step_seconds.sum())}
    if not getattr(args, "observations", None):
        prob = ToyProblem(s.farm, scenario, make_toy_observations(s.farm, scenario=scenario), design)
        summary["rmse_percent"] = posterior_rmse(prob, point_estimates(res.trace, len(obs), window))
    run.manifest.summary = summary


def cmd_benchmark(args, s: Settings, run: Run):
    methods = args.methods.split(",") if args.methods else list(BENCH_METHODS)
    bad = [m for m in methods if m not in BENCH_METHODS]
    if bad:
        raise ConfigError(f"unknown method(s) {bad}; choose from {', '.join(BENCH_METHODS)}")
    problem = toy_problem(s.farm, s.days, s.weather_seed)
    run.stage("setup")
    rows = run_benchmark(problem, methods, args.repetitions, s.seed, s.chains, s.iterations, s.threads,
                         progress=log.info)
    run.stage("benchmark")
    write_benchmark(rows, run.path("benchmark.csv"))
    run.add("benchmark.csv")
    run.manifest.summary = {r.method: r.total_seconds for r in rows if r.repetition == 0}


def cmd_replay(args, s: Settings, run: Run):
    """Re-run a manifest's command into this run directory and compare checksums."""
    old = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    argv = list(old["argv"])
    if "--out" in argv:
        i = argv.index("--out")
        del argv[i:i + 2]
    argv += ["--out", str(run.out / "replayed")]
    code = main(argv)
    if code != EXIT_OK:
        raise NumericalError(f"replayed command exited with {code}")
    new = json.loads((run.out / "replayed" / MANIFEST).read_text(encoding="utf-8"))
    mismatched = [k for k, v in old["outputs"].items()
                  if new["outputs"].get(k, {}).get("stable_sha256") != v["stable_sha256"]]
    run.manifest.summary = {"replayed": old["subcommand"], "mismatched": mismatched}
    if mismatched:
        raise NumericalError(f"replay differs for {', '.join(mismatched)}")


COMMANDS = {
    "simulate": cmd_simulate,
    "design": cmd_design,
    "sensitivity": cmd_sensitivity,
    "toy-data": cmd_toy_data,
    "calibrate-pf": cmd_calibrate_pf,
    "calibrate-koh": cmd_calibrate_koh,
    "calibrate-koh-seq": cmd_calibrate_koh_seq,
    "benchmark": cmd_benchmark,
    "replay": cmd_replay,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="config file with [farm], [pf], [koh], [toy], [run] sections")
    common.add_argument("--seed", type=int, help="seed for noise, particles and chains (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--out", type=Path, help="run directory for artifacts and manifest")
    common.add_argument("--days", type=int, help="toy horizon in days")
    common.add_argument("--weather-seed", dest="weather_seed", type=int, help="seed of the synthetic weather")
    common.add_argument("--quiet", action="store_true", help="no progress on stderr")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--observations", type=Path, help="observation CSV (default: generate the toy data)")
    data.add_argument("--scenario", type=Path, help="scenario CSV covering the observation instants")
    data.add_argument("--noise-2sigma", dest="noise_2sigma", type=float,
                      help="2-sigma noise added to generated data, as an RH fraction")

    chains = argparse.ArgumentParser(add_help=False)
    chains.add_argument("--chains", type=int)
    chains.add_argument("--iterations", type=int)

    p = argparse.ArgumentParser(prog="twincal", description="Continuous calibration of a tunnel-farm simulator")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", parents=[common], help="run the farm model")
    sp.add_argument("--scenario", type=Path, help="scenario CSV (default: toy scenario)")
    sp.add_argument("--vent-ach", dest="vent_ach", type=float)
    sp.add_argument("--ias", type=float)

    sub.add_parser("design", parents=[common, data], help="build the 42-run emulator design")

    sp = sub.add_parser("sensitivity", parents=[common], help="Morris screening (default 30 days)")
    sp.add_argument("--trajectories", type=int, default=10)
    sp.add_argument("--levels", type=int, default=4)

    sp = sub.add_parser("toy-data", parents=[common], help="synthetic observations with a step change")
    sp.add_argument("--noise-2sigma", dest="noise_2sigma", type=float)

    sp = sub.add_parser("calibrate-pf", parents=[common, data], help="particle-filter calibration")
    sp.add_argument("--particles", type=int)
    sp.add_argument("--rejuvenate", type=float, help="std of the post-resampling jitter (0 disables)")
    sp.add_argument("--pf-window", dest="pf_window", choices=("newest", "cumulative"))

    sp = sub.add_parser("calibrate-koh", parents=[common, data, chains], help="static KOH calibration")
    sp.add_argument("--window", type=int, default=0, help="must be 0 (static)")
    sp.add_argument("--points", type=int, help="use the first N observations")

    sp = sub.add_parser("calibrate-koh-seq", parents=[common, data, chains], help="sliding-window KOH")
    sp.add_argument("--window", type=int, help="window size (default 4)")

    sp = sub.add_parser("benchmark", parents=[common, chains], help="run-time comparison table")
    sp.add_argument("--methods", help=f"comma list from {','.join(BENCH_METHODS)}")
    sp.add_argument("--repetitions", type=int, default=1)

    sp = sub.add_parser("replay", parents=[common], help="re-run a manifest and verify its checksums")
    sp.add_argument("manifest", type=Path)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        log.addHandler(handler)
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        settings = resolve_settings(args)
        run = Run(args, settings)
        COMMANDS[args.command](args, settings, run)
        run.finish()
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, DataError) as exc:
        log.error("io error: %s", exc)
        return EXIT_IO
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
