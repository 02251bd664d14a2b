"""Command-line harness: training runs, sweeps, bound tables and checks.

Exit codes: 0 success, 1 a check failed, 2 usage or config error,
3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcheck
from .advantage import grpo_total_magnitude, magnitude_closed_form
from .diagnostics import bounds_csv, flat_advantage_csv, flat_advantage_profile, flatness_ratio, slopes_csv
from .dist_core import ParameterError
from .policy import init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, TrainingAbort, metrics_to_csv, run_training
from .weighting import normalize_batch, raw_weight

log = logging.getLogger("scsdpo")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
FINAL_WINDOW = 40
AGGREGATE_HEADER = ["label", "step", "n_runs", "mean_pass_rate", "frac_mid_wide", "frac_mid_narrow", "grad_norm"]
SUMMARY_HEADER = ["label", "n_runs", "n_failed", "final_mean_pass_rate", "median_grad_norm"]
DEFAULT_P_GRID = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
DEFAULT_BETA_GRID = "1,2,5,10,20,40,80,100,200,1000"


class ConfigError(Exception):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")


def _key_line(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _read_json(path) -> tuple[dict, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(path, 0, f"cannot read config ({e.strerror})") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(path, e.lineno, e.msg) from None
    if not isinstance(data, dict):
        raise ConfigError(path, 1, "top level must be a JSON object")
    return data, text


def config_from_dict(data: dict, text: str, path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(data)
    except KeyError as e:
        key = e.args[0]
        raise ConfigError(path, _key_line(text, key), f"unknown key {key!r}") from None
    except (ParameterError, ValueError, TypeError) as e:
        # point at the first key the message names, if any
        msg = str(e)
        keys = sorted(set(re.findall(r'"(\w+)"\s*:', text)), key=lambda k: -len(k))
        hit = next((k for k in keys if k in msg), None)
        raise ConfigError(path, _key_line(text, hit) if hit else 1, msg) from None


def load_config(path) -> TrainConfig:
    data, text = _read_json(path)
    return config_from_dict(data, text, path)


# ---------------------------------------------------------------- run


@dataclass
class RunOutcome:
    label: str
    seed: int
    csv_path: str
    ok: bool
    error: str = ""


def execute_run(config: TrainConfig, out_dir, label: str | None = None) -> RunOutcome:
    """Train one configuration, writing ``{label}_{seed}.csv`` and a checkpoint.

    On a numerical abort the metrics so far and a JSON dump are still written.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{label or config.method}_{config.seed}"
    history = []
    try:
        _, state = run_training(config, on_step=history.append)
    except TrainingAbort as e:
        (out_dir / f"{stem}.csv").write_bytes(metrics_to_csv(history).encode())
        (out_dir / f"{stem}.abort.json").write_text(json.dumps({"error": str(e), **e.dump}, indent=1))
        return RunOutcome(label or config.method, config.seed, str(out_dir / f"{stem}.csv"), False, str(e))
    (out_dir / f"{stem}.csv").write_bytes(metrics_to_csv(history).encode())
    save_checkpoint(out_dir / f"{stem}.ckpt.json", state.params, state.step)
    return RunOutcome(label or config.method, config.seed, str(out_dir / f"{stem}.csv"), True)


def cmd_run(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.steps is not None:
        config = replace(config, steps=args.steps)
    out = execute_run(config, args.out or "results")
    if not out.ok:
        log.error("training aborted: %s", out.error)
        return EXIT_ABORT
    print(out.csv_path)
    return EXIT_OK


# ---------------------------------------------------------------- sweep


@dataclass
class ExperimentSpec:
    base: dict
    methods: list[dict]
    seeds: list[int]
    out: str
    final_window: int = FINAL_WINDOW

    def configs(self, path="<spec>", text="") -> list[tuple[str, TrainConfig]]:
        runs = []
        for m in self.methods:
            m = dict(m)
            label = m.pop("label", None) or m.get("method", self.base.get("method", "sc_sdpo"))
            merged = {**self.base, **m}
            if "task" in self.base and "task" in m:
                merged["task"] = {**self.base["task"], **m["task"]}
            for seed in self.seeds:
                runs.append((label, config_from_dict({**merged, "seed": seed}, text, path)))
        return runs


def load_spec(path) -> tuple[ExperimentSpec, str]:
    data, text = _read_json(path)
    known = {"base", "methods", "seeds", "out", "final_window"}
    for key in data:
        if key not in known:
            raise ConfigError(path, _key_line(text, key), f"unknown key {key!r}")
    methods, seeds = data.get("methods") or [], data.get("seeds") or []
    if not methods:
        raise ConfigError(path, _key_line(text, "methods"), "spec needs at least one method")
    if not seeds:
        raise ConfigError(path, _key_line(text, "seeds"), "spec needs at least one seed")
    labels = [m.get("label") or m.get("method") for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError(path, _key_line(text, "methods"), "method labels must be unique")
    spec = ExperimentSpec(
        base=data.get("base", {}),
        methods=methods,
        seeds=[int(s) for s in seeds],
        out=data.get("out", "results"),
        final_window=int(data.get("final_window", FINAL_WINDOW)),
    )
    return spec, text


def _read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]} if rows else {}


def aggregate(outcomes: Sequence[RunOutcome], final_window: int = FINAL_WINDOW) -> tuple[str, str]:
    """Seed means per step for each label, and a one-line summary per label."""
    agg, summary = [], []
    for label in dict.fromkeys(o.label for o in outcomes):
        mine = [o for o in outcomes if o.label == label]
        good = [_read_metrics(o.csv_path) for o in mine if o.ok]
        good = [g for g in good if g]
        if good:
            n_steps = min(len(g["step"]) for g in good)
            stack = {k: np.array([g[k][:n_steps] for g in good]) for k in AGGREGATE_HEADER[3:]}
            for i in range(n_steps):
                agg.append([label, i, len(good)] + [float(stack[k][:, i].mean()) for k in AGGREGATE_HEADER[3:]])
            final = float(np.mean([g["mean_pass_rate"][-final_window:].mean() for g in good]))
            med = float(np.mean([np.median(g["grad_norm"]) for g in good]))
        else:
            final = med = math.nan
        summary.append([label, len(mine), len(mine) - len(good), final, med])
    return _csv(AGGREGATE_HEADER, agg), _csv(SUMMARY_HEADER, summary)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def _sweep_job(job):
    label, config, out = job
    return execute_run(config, out, label)


def cmd_sweep(args) -> int:
    path = args.spec or args.config
    if path is None:
        raise ConfigError("<sweep>", 0, "a spec file is required")
    spec, text = load_spec(path)
    runs = spec.configs(path, text)
    out = Path(args.out or spec.out)
    jobs = [(label, cfg, out) for label, cfg in runs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            outcomes = list(pool.map(_sweep_job, jobs))
    else:
        outcomes = []
        for job in jobs:
            log.info("run %s seed %d", job[0], job[1].seed)
            outcomes.append(_sweep_job(job))
    for o in outcomes:
        if not o.ok:
            log.warning("run %s seed %d failed: %s", o.label, o.seed, o.error)
    agg, summary = aggregate(outcomes, spec.final_window)
    (out / "aggregate.csv").write_bytes(agg.encode())
    (out / "summary.csv").write_bytes(summary.encode())
    sys.stdout.write(summary)
    return EXIT_OK if all(o.ok for o in outcomes) else EXIT_ABORT


# ---------------------------------------------------------------- bounds


def _grid(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise ConfigError("<args>", 0, f"bad grid {s!r}") from None


def cmd_bounds(args) -> int:
    p_grid, beta_grid, fit = _grid(args.p_grid), _grid(args.beta_grid), _grid(args.fit_betas)
    try:
        table, slopes = bounds_csv(p_grid, beta_grid), slopes_csv(p_grid, fit)
    except ValueError as e:
        raise ConfigError("<args>", 0, str(e)) from None
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bounds.csv").write_bytes(table.encode())
        (out / "bounds_slopes.csv").write_bytes(slopes.encode())
    else:
        sys.stdout.write(table + "\n" + slopes)
    return EXIT_OK


# ---------------------------------------------------------------- checks


def _report(name: str, ok: bool, detail: str) -> bool:
    print(f"{'PASS' if ok else 'FAIL'}  {name:24s} {detail}")
    return ok


def cmd_gradcheck(args) -> int:
    corrupt = None
    if args.corrupt:
        corrupt = lambda g: g * (1 + 1e-3)  # noqa: E731
    seed = 0 if args.seed is None else args.seed
    results = gradcheck.run_all(seed, args.instances, corrupt)
    ok = True
    for r in results:
        ok &= _report(r.name, r.passed, f"max rel err {r.max_rel_err:.3e}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def identity_checks(max_group: int = 16, tol: float = 1e-9) -> list[tuple[str, bool, str]]:
    worst = 0.0
    for G in range(2, max_group + 1):
        for k in range(G + 1):
            rewards = [1] * k + [0] * (G - k)
            worst = max(worst, abs(grpo_total_magnitude(rewards) - magnitude_closed_form(G, k)))
    out = [("magnitude", worst <= tol, f"max abs err {worst:.2e} over G=2..{max_group}")]

    grid = np.array([k / 8 for k in range(9)])
    sym, uni = True, True
    for alpha in (0.25, 0.5, 1.0, 2.0):
        w = raw_weight(grid, alpha)
        sym &= bool(np.allclose(w, w[::-1], rtol=0, atol=1e-15))
        uni &= bool(np.all(np.diff(w[:5]) > 0) and np.all(np.diff(w[4:]) < 0))
    out.append(("weight-symmetry", sym, "w(p) == w(1-p)"))
    out.append(("weight-unimodal", uni, "peak at p=0.5"))
    out.append(("weight-midpoint", raw_weight(0.5, 0.5) == 0.5, f"w(0.5; 0.5) = {raw_weight(0.5, 0.5)!r}"))

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        raw = raw_weight(rng.integers(0, 9, size=rng.integers(1, 33)) / 8, 0.5)
        wv = normalize_batch(raw)
        if wv.active_set.size:
            worst = max(worst, abs(wv.normalized[wv.active_set].mean() - 1.0))
    out.append(("unit-mean", worst <= 1e-12, f"max |mean - 1| {worst:.2e}"))
    return out


def cmd_identity(args) -> int:
    ok = True
    for name, passed, detail in identity_checks():
        ok &= _report(name, passed, detail)
    return EXIT_OK if ok else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- flat advantage


def cmd_flat_advantage(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    task = config.task.build()
    if args.checkpoint:
        try:
            params, _ = load_checkpoint(args.checkpoint)
        except (OSError, ValueError, KeyError) as e:
            raise ConfigError(args.checkpoint, 1, f"bad checkpoint: {e}") from None
        if params.W.shape != (task.vocab_size, task.context_dim + task.seq_len + task.vocab_size):
            raise ConfigError(args.checkpoint, 1, "checkpoint shape does not match the task")
    else:
        params = init_params(task, feedback_gain=config.feedback_gain, ema_rate=config.ema_rate)
    if args.feedback_gain is not None:
        params = replace(params, feedback_gain=args.feedback_gain)
    seed = 0 if args.seed is None else args.seed
    temperature = config.eval_temperature if args.temperature is None else args.temperature
    bins = flat_advantage_profile(params, task, args.rollouts, args.top_k, temperature, seed)
    table = flat_advantage_csv(bins)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "flat_advantage.csv").write_bytes(table.encode())
    else:
        sys.stdout.write(table)
    ratio = flatness_ratio(bins)
    log.info("adv_jsd max/min over bins with >= 5 questions: %.3f", ratio)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    # global flags work before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")

    parser = argparse.ArgumentParser(prog="scsdpo", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", default=None)
    parser.add_argument("--config", default=None)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="train one configuration")
    p.add_argument("--steps", type=int, default=None, help="override the configured step count")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="methods x seeds from a spec file")
    p.add_argument("spec", nargs="?", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bounds", parents=[common], help="learnability bound table")
    p.add_argument("--p-grid", default=DEFAULT_P_GRID)
    p.add_argument("--beta-grid", default=DEFAULT_BETA_GRID)
    p.add_argument("--fit-betas", default="10,20,40,80")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=5, help="instances per loss variant")
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("identity", parents=[common], help="exact identity checks")
    p.set_defaults(func=cmd_identity)

    p = sub.add_parser("flat-advantage", parents=[common], help="per-token advantage vs pass rate")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--feedback-gain", type=float, default=None)
    p.add_argument("--rollouts", type=int, default=16)
    p.add_argument("--temperature", type=float, default=None, help="defaults to the config's eval_temperature")
    p.add_argument("--top-k", type=int, default=100)
    p.set_defaults(func=cmd_flat_advantage)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
