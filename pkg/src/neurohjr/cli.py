"""Command-line entry point: ``neurohjr {solve,train,simulate,compare,ablate,checkgrad}``.

Exit codes: 0 success, 1 gradient-check failure, 2 configuration or input
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

from . import __version__
from ._io import atomic_write_text, sha256_file
from .config import ConfigError, ExperimentConfig, load_config
from .core import InvalidEnvironment
from .gridhjr import (CFLError, Grid2D, goal_arrival_field, read_value_field, solve_fields,
                      write_value_field)
from .neuralnet import (CHECK_COMPONENTS, CheckpointError, NonFiniteError, check_gradients,
                        load_checkpoint, save_checkpoint)
from .simulator import (ABLATION_COLUMNS, COMPARISON_COLUMNS, SUMMARY_COLUMNS,
                        CheckpointMissingError, ControllerResources,
                        EnvironmentGenerationError, rows_csv, run_ablation, run_episode,
                        run_monte_carlo, summary_row, write_trajectory_csv)
from .trainer import TrainingDivergence, train, write_history_csv

log = logging.getLogger("neurohjr")

EXIT_OK, EXIT_VALIDATION, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2, 3

FIELD_FILES = {"forward": "forward.txt", "backward": "backward.txt",
               "composite": "composite.txt", "oracle": "oracle.txt"}


class InputError(Exception):
    """A required input file is missing or unusable."""


# ------------------------------------------------------------------- helpers

class _Run:
    """Collects output paths, input hashes and timings for the manifest."""

    def __init__(self, command: str, cfg: ExperimentConfig | None, out: str | None):
        self.command, self.cfg, self.out = command, cfg, out
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.timings: dict[str, float] = {}
        self.extra: dict = {}

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def wrote(self, name: str) -> None:
        self.outputs.append(name)

    def read_input(self, path: str) -> None:
        self.inputs[os.path.abspath(path)] = sha256_file(path)

    def timed(self, key: str):
        run = self

        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[key] = run.timings.get(key, 0.0) + time.perf_counter() - self.t0

        return _T()

    def write_manifest(self) -> None:
        if self.out is None:
            return
        manifest = {
            "command": self.command,
            "version": __version__,
            "config": self.cfg.to_dict() if self.cfg is not None else None,
            "config_sha256": self.cfg.digest() if self.cfg is not None else None,
            "inputs": self.inputs,
            "outputs": {n: sha256_file(self.path(n)) for n in sorted(self.outputs)},
            "timings_s": self.timings,
            **self.extra,
        }
        atomic_write_text(self.path("manifest.json"),
                          json.dumps(manifest, indent=2, sort_keys=True, default=list) + "\n")


def _grid_for(cfg: ExperimentConfig, env) -> Grid2D:
    return Grid2D.covering(env.bounds, cfg.grid.h)


def _solve(cfg: ExperimentConfig, env):
    g = cfg.grid
    return solve_fields(env, _grid_for(cfg, env), g.horizon, g.backward_horizon, g.cfl,
                        oracle=g.oracle)


def _oracle_for_training(cfg: ExperimentConfig, env, run: _Run):
    field_dir = cfg.experiment.field_dir
    if field_dir is not None:
        path = os.path.join(field_dir, FIELD_FILES["oracle"])
        if os.path.exists(path):
            run.read_input(path)
            return read_value_field(path)
        if not cfg.experiment.solve:
            raise InputError(f"{path} not found and [experiment] solve = false")
    elif not cfg.experiment.solve:
        raise InputError("no [experiment] field_dir given and [experiment] solve = false")
    with run.timed("solve"):
        return _solve(cfg, env).oracle


def _train(cfg: ExperimentConfig, env, oracle, run: _Run, training=None):
    training = training or cfg.training

    def progress(epoch, row):
        if epoch % max(1, training.epochs // 10) == 0 or epoch == training.epochs - 1:
            log.info("epoch %d/%d  total %.5g  value %.4g  pde %.4g", epoch + 1,
                     training.epochs, row.total, row.value, row.pde)

    with run.timed("train"):
        return train(env, oracle, training, callback=progress)


def _checkpoint_params(cfg: ExperimentConfig, override: str | None, env, run: _Run):
    """Load the configured checkpoint, or train one on the fly when none is configured."""
    path = override or cfg.experiment.checkpoint
    if path is not None:
        if not os.path.exists(path):
            raise InputError(f"checkpoint {path} not found")
        run.read_input(path)
        params, _ = load_checkpoint(path)
        return params.with_bounds(env.bounds)
    log.info("no checkpoint configured; training one")
    return _train(cfg, env, _oracle_for_training(cfg, env, run), run).params


def _arrival(cfg: ExperimentConfig, env, run: _Run):
    with run.timed("classical_field"):
        return goal_arrival_field(env, _grid_for(cfg, env), cfg.grid.horizon, cfg.grid.cfl)


# ------------------------------------------------------------------ commands

def cmd_solve(cfg: ExperimentConfig, args, run: _Run) -> int:
    env = cfg.build_environment()
    with run.timed("solve"):
        fields = _solve(cfg, env)
    for key, name in FIELD_FILES.items():
        write_value_field(run.path(name), getattr(fields, key))
        run.wrote(name)
    log.info("wrote %s", ", ".join(FIELD_FILES.values()))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args, run: _Run) -> int:
    env = cfg.build_environment()
    oracle = _oracle_for_training(cfg, env, run)
    result = _train(cfg, env, oracle, run)
    save_checkpoint(run.path("checkpoint.bin"), result.params, result.adam)
    write_history_csv(run.path("loss_history.csv"), result.history)
    run.wrote("checkpoint.bin")
    run.wrote("loss_history.csv")
    h = result.history
    log.info("loss %.5g -> %.5g over %d epochs", h[0].total, h[-1].total, len(h))
    return EXIT_OK


def cmd_simulate(cfg: ExperimentConfig, args, run: _Run) -> int:
    env = cfg.build_environment()
    sim = cfg.simulation
    res = ControllerResources(grid=_grid_for(cfg, env), horizon=cfg.grid.horizon,
                              cfl=cfg.grid.cfl)
    if sim.controller == "neurohjr":
        res.params = _checkpoint_params(cfg, args.checkpoint, env, run)
    else:
        res.arrival = _arrival(cfg, env, run)
    rows = []
    for i in range(cfg.experiment.episodes):
        c = dataclasses.replace(sim, rng_seed=sim.rng_seed + i)
        with run.timed("simulate"):
            r = run_episode(env, c, res)
        name = f"trajectory_{i:03d}.csv"
        write_trajectory_csv(run.path(name), r)
        run.wrote(name)
        rows.append(summary_row(i, sim.controller, r))
        log.info("episode %d: reached=%s time %.2f s path %.2f m clearance %.2f m", i,
                 r.reached_goal, r.travel_time, r.path_length, r.min_clearance)
    atomic_write_text(run.path("summary.csv"), rows_csv(rows, SUMMARY_COLUMNS))
    run.wrote("summary.csv")
    return EXIT_OK


AGGREGATE_COLUMNS = ("n_runs", "a_controller", "b_controller", "a_mean_travel_time_s",
                     "b_mean_travel_time_s", "a_mean_path_length_m", "b_mean_path_length_m",
                     "mean_travel_time_reduction_pct", "mean_path_length_efficiency_pct",
                     "a_safety_violations", "b_safety_violations",
                     "a_mean_step_compute_s", "b_mean_resolve_s")


def cmd_compare(cfg: ExperimentConfig, args, run: _Run) -> int:
    template = cfg.build_environment()
    ex, sim = cfg.experiment, cfg.simulation
    pair = tuple(dataclasses.replace(sim, controller=c) for c in ex.compare)
    fixed = None
    if "neurohjr" in ex.compare and (args.checkpoint or ex.checkpoint):
        fixed = _checkpoint_params(cfg, args.checkpoint, template, run)

    def prepare(env, i):
        res = ControllerResources(grid=_grid_for(cfg, env), horizon=cfg.grid.horizon,
                                  cfl=cfg.grid.cfl)
        if "neurohjr" in ex.compare:
            if fixed is not None:
                res.params = fixed
            else:
                with run.timed("solve"):
                    oracle = _solve(cfg, env).oracle
                training = dataclasses.replace(cfg.training,
                                               rng_seed=cfg.training.rng_seed + i)
                res.params = _train(cfg, env, oracle, run, training).params
        if "classical" in ex.compare:
            res.arrival = _arrival(cfg, env, run)
        return res

    def progress(i, row):
        log.info("run %d: time %.2f vs %.2f s, path %.2f vs %.2f m", i,
                 row["a_travel_time_s"], row["b_travel_time_s"],
                 row["a_path_length_m"], row["b_path_length_m"])

    with run.timed("compare"):
        summary = run_monte_carlo(template, ex.n_runs, pair, prepare, ex.n_obstacles,
                                  ex.obstacle_radius, ex.seed, progress)
    rows = summary.comparison_rows
    agg = {
        "n_runs": len(rows), "a_controller": ex.compare[0], "b_controller": ex.compare[1],
        "a_mean_travel_time_s": summary.mean("a", "travel_time_s"),
        "b_mean_travel_time_s": summary.mean("b", "travel_time_s"),
        "a_mean_path_length_m": summary.mean("a", "path_length_m"),
        "b_mean_path_length_m": summary.mean("b", "path_length_m"),
        "mean_travel_time_reduction_pct": summary.mean_travel_time_reduction,
        "mean_path_length_efficiency_pct": summary.mean_path_length_efficiency,
        "a_safety_violations": sum(r["a_safety_violation"] for r in rows),
        "b_safety_violations": sum(r["b_safety_violation"] for r in rows),
        "a_mean_step_compute_s": summary.mean("a", "mean_step_compute_s"),
        "b_mean_resolve_s": summary.mean("b", "mean_resolve_s"),
    }
    for name, text in (("comparison.csv", rows_csv(rows, COMPARISON_COLUMNS)),
                       ("episodes.csv", rows_csv(summary.episode_rows, SUMMARY_COLUMNS)),
                       ("aggregate.csv", rows_csv([agg], AGGREGATE_COLUMNS))):
        atomic_write_text(run.path(name), text)
        run.wrote(name)
    log.info("mean travel-time reduction %.2f%%, mean path-length efficiency %.2f%%",
             agg["mean_travel_time_reduction_pct"], agg["mean_path_length_efficiency_pct"])
    return EXIT_OK


def cmd_ablate(cfg: ExperimentConfig, args, run: _Run) -> int:
    env = cfg.build_environment()
    res = ControllerResources(params=_checkpoint_params(cfg, args.checkpoint, env, run))
    with run.timed("ablate"):
        rows = run_ablation(env, cfg.experiment.radii, cfg.simulation, res)
    for r in rows:
        log.info("rho %.1f m: time %.2f s path %.2f m", r["sensor_radius_m"],
                 r["travel_time_s"], r["path_length_m"])
    atomic_write_text(run.path("ablation.csv"), rows_csv(rows, ABLATION_COLUMNS))
    run.wrote("ablation.csv")
    return EXIT_OK


def cmd_checkgrad(args, run: _Run) -> int:
    """Finite-difference checks over ``--seeds`` consecutive seeds; worst error per component."""
    worst: dict[str, tuple[float, float]] = {}
    with run.timed("checkgrad"):
        for s in range(args.seed, args.seed + args.seeds):
            for c in check_gradients(s, args.batch_size, args.coords,
                                     residual_mode=args.residual_mode, corrupt=args.corrupt):
                prev = worst.get(c.name, (-1.0, c.threshold))
                worst[c.name] = (max(prev[0], c.max_rel_error), c.threshold)
    ok = True
    lines = []
    for name in (*CHECK_COMPONENTS, "input_gradient"):
        err, tol = worst[name]
        passed = err < tol
        ok &= passed
        lines.append(f"{name:<15} max_rel_error={err:.3e} threshold={tol:.0e} "
                     f"{'PASS' if passed else 'FAIL'}")
    print("\n".join(lines))
    if run.out is not None:
        atomic_write_text(run.path("checkgrad.txt"), "\n".join(lines) + "\n")
        run.wrote("checkgrad.txt")
        run.extra["checkgrad"] = {"seeds": [args.seed, args.seeds],
                                  "batch_size": args.batch_size, "coords": args.coords}
    return EXIT_OK if ok else EXIT_VALIDATION


COMMANDS = {"solve": cmd_solve, "train": cmd_train, "simulate": cmd_simulate,
            "compare": cmd_compare, "ablate": cmd_ablate}


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neurohjr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", metavar="PATH", help="TOML experiment config")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
        sp.add_argument("--seed", type=int, metavar="N", help="override every seed")
        sp.add_argument("--quiet", action="store_true", help="suppress progress logging")

    helps = {"solve": "solve forward, backward and composite value fields",
             "train": "train the network against the solved oracle",
             "simulate": "run closed-loop episodes",
             "compare": "Monte Carlo comparison of two controllers",
             "ablate": "sensor-radius ablation"}
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        common(sp)
        if name in ("simulate", "compare", "ablate"):
            sp.add_argument("--checkpoint", metavar="PATH",
                            help="network checkpoint (overrides [experiment] checkpoint)")

    sp = sub.add_parser("checkgrad", help="finite-difference gradient checks")
    common(sp, config=False)
    sp.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    sp.add_argument("--batch-size", type=int, default=8)
    sp.add_argument("--coords", type=int, default=20, help="parameter coordinates per loss")
    sp.add_argument("--residual-mode", default="predicted-control",
                    choices=("predicted-control", "analytic-hamiltonian"))
    sp.add_argument("--corrupt", choices=(*CHECK_COMPONENTS, "input_gradient"),
                    help=argparse.SUPPRESS)
    return p


def _setup_logging(quiet: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if quiet else logging.INFO)
    log.propagate = False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.quiet)
    try:
        if args.command == "checkgrad":
            if args.seed is None:
                args.seed = 0
            if args.seeds < 1 or args.batch_size < 1 or args.coords < 1:
                raise ConfigError("--seeds, --batch-size and --coords must be >= 1")
            run = _Run("checkgrad", None, args.out)
            code = cmd_checkgrad(args, run)
            run.write_manifest()
            return code

        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.out is not None:
            cfg = cfg.with_output_dir(args.out)
        run = _Run(args.command, cfg, cfg.output_dir)
        if args.config:
            run.read_input(args.config)
        os.makedirs(cfg.output_dir, exist_ok=True)
        code = COMMANDS[args.command](cfg, args, run)
        run.write_manifest()
        return code
    except (ConfigError, InvalidEnvironment, InputError, CheckpointError,
            CheckpointMissingError, EnvironmentGenerationError, CFLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as e:
        print(f"error: training diverged at epoch {e.epoch}: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (NonFiniteError, FloatingPointError) as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
