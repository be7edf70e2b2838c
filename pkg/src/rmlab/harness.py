"""Seeded experiment runs, CSV metrics, policy verification and scaling reports."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from .envs import (
    ResourceError, bfs_optimal_length, format_map, load_map, make_env, parse_map,
    random_delivery_map,
)
from .learners import (
    Hyperparams, Learner, ParameterError, greedy_rollout, learner_to_dict, load_learner,
    run_episode,
)
from .tasks import task_rm

METRIC_COLUMNS = ("step", "episode", "avg_reward_per_step", "episode_length", "success",
                  "update_count", "wall_clock")
AGGREGATE_COLUMNS = ("step", "median", "p25", "p75")
DEFAULT_VARIANT = {"qrm": "boolean", "crm": "boolean", "corm": "coupled", "corm0": "coupled"}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    domain: str = "delivery"
    map: Optional[str] = None
    map_height: int = 10
    map_width: int = 10
    n_objects: int = 2
    map_seed: int = 0
    algo: str = "corm"
    variant: Optional[str] = None
    alpha: float = 1e-5
    epsilon: float = 0.1
    gamma: float = 0.9
    xi: float = 0.1
    window: int = -1
    init_q: float = 1.0
    r_min: float = 0.0
    r_max: float = 0.0
    counterfactual: bool = True
    observation: str = "cell"
    step_limit: int = 1_000_000
    episode_cap: int = 1000
    log_every: int = 1000
    eval_every: int = 0
    max_states: int = 2_000_000
    seeds: tuple = tuple(range(10))
    output: str = "runs"

    def __post_init__(self):
        if self.algo not in DEFAULT_VARIANT:
            raise ConfigError(f"unknown algorithm {self.algo!r}")
        if self.variant is None:
            self.variant = DEFAULT_VARIANT[self.algo]
        coupled = self.algo in ("corm", "corm0")
        if coupled != (self.variant == "coupled"):
            raise ConfigError(f"{self.algo} cannot run on a {self.variant} machine")
        if self.algo == "corm0":
            self.window = -1
        if self.domain not in ("delivery", "office"):
            raise ConfigError(f"unknown domain {self.domain!r}")
        self.seeds = tuple(self.seeds)

    @property
    def learner_algo(self) -> str:
        return "corm" if self.algo == "corm0" else self.algo

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.alpha, self.epsilon, self.gamma, self.xi, self.window, self.init_q,
                           self.episode_cap, self.r_min, self.r_max, self.counterfactual,
                           self.observation)


def _parse_seeds(text):
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in text.replace(",", " ").split())


def parse_config(text: str) -> ExperimentConfig:
    """Read a flat ``key = value`` file; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = types[key]
        try:
            if key == "seeds":
                kw[key] = _parse_seeds(value)
            elif kind == "bool":
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                kw[key] = value.lower() in ("true", "1", "yes")
            elif kind == "int":
                kw[key] = int(float(value)) if "e" in value.lower() else int(value)
            elif kind == "float":
                kw[key] = float(value)
            else:
                kw[key] = value
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {value!r} for {key}") from None
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- tasks -------------------------------------------------------------------

@dataclass
class Task:
    map: object
    env: object
    rm: object
    optimal_length: Optional[int]
    n: int


def build_task(config: ExperimentConfig) -> Task:
    if config.domain == "delivery":
        if config.map:
            grid = load_map(config.map)
        else:
            grid = random_delivery_map(config.map_height, config.map_width, config.n_objects, config.map_seed)
        n = len(grid.boxes)
    else:
        grid = load_map(config.map or "office")
        if config.n_objects:
            grid = grid.with_offices(config.n_objects)
        n = len(grid.offices)
    env = make_env(grid)
    rm = task_rm(config.domain, n, config.variant)
    return Task(grid, env, rm, bfs_optimal_length(env, rm, config.max_states), n)


# -- runs --------------------------------------------------------------------

@dataclass
class MetricsRow:
    step: int
    episode: int
    avg_reward_per_step: float
    episode_length: int
    success: bool
    update_count: int
    wall_clock: float


@dataclass
class RunResult:
    seed: int
    rows: list
    learner: Learner
    optimal_length: Optional[int]
    first_optimal_step: Optional[int] = None
    error: Optional[str] = None


def _greedy_is_optimal(learner, task, observation):
    if task.optimal_length is None:
        return False
    rec = greedy_rollout(learner, task.env, task.rm, task.optimal_length, observation)
    return rec.success and rec.length == task.optimal_length


def train(config: ExperimentConfig, seed: int, task: Optional[Task] = None,
          stop_at_optimal: bool = False) -> RunResult:
    """Train one seed for ``config.step_limit`` steps, logging every ``log_every``.

    With ``eval_every`` set, the greedy policy is checked against the oracle
    length at that interval; the first success is ``first_optimal_step``.
    """
    task = task or build_task(config)
    hp = config.hyperparams()
    learner = Learner.create(config.learner_algo, hp, seed)
    rows = []
    total = [0.0]
    last = [0, False]
    first = [None]
    start = time.perf_counter()

    def on_step(lr, r):
        total[0] += r
        if lr.steps % config.log_every == 0:
            rows.append(MetricsRow(lr.steps, lr.episodes, total[0] / lr.steps, last[0], last[1],
                                   lr.updates, time.perf_counter() - start))
        if (config.eval_every and first[0] is None and lr.steps % config.eval_every == 0
                and _greedy_is_optimal(lr, task, config.observation)):
            first[0] = lr.steps

    while learner.steps < config.step_limit:
        rec = run_episode(learner, task.env, task.rm, hp, config.step_limit - learner.steps, on_step)
        last[0], last[1] = rec.length, rec.success
        if stop_at_optimal and first[0] is not None:
            break
    return RunResult(seed, rows, learner, task.optimal_length, first[0])


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r.step, r.episode, repr(r.avg_reward_per_step), r.episode_length,
                        int(r.success), r.update_count, f"{r.wall_clock:.6f}"])


def read_metrics(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MetricsRow(int(d["step"]), int(d["episode"]), float(d["avg_reward_per_step"]),
                           int(d["episode_length"]), d["success"] == "1", int(d["update_count"]),
                           float(d["wall_clock"]))
                for d in csv.DictReader(fh)]


def aggregate(runs) -> list:
    """Median and 25th/75th percentiles of average reward per logged step across runs."""
    by_step = {}
    for rows in runs:
        for r in rows:
            by_step.setdefault(r.step, []).append(r.avg_reward_per_step)
    out = []
    for step in sorted(by_step):
        vals = np.asarray(by_step[step])
        p25, med, p75 = np.percentile(vals, [25, 50, 75])
        out.append((step, float(med), float(p25), float(p75)))
    return out


def write_aggregate(path, agg) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(AGGREGATE_COLUMNS)
        for step, med, p25, p75 in agg:
            w.writerow([step, repr(med), repr(p25), repr(p75)])


def _task_info(config, task):
    return {"domain": config.domain, "n": task.n, "variant": config.variant,
            "map": format_map(task.map), "observation": config.observation,
            "episode_cap": config.episode_cap, "max_states": config.max_states}


@dataclass
class BatchResult:
    runs: list
    aggregate: list
    errors: dict = field(default_factory=dict)
    output: Optional[str] = None


def run_batch(config: ExperimentConfig, write: bool = True) -> BatchResult:
    """One run per seed plus an aggregate; a failing run is recorded, not fatal."""
    if write:
        os.makedirs(config.output, exist_ok=True)
    runs, errors = [], {}
    try:
        task = build_task(config)
    except (ResourceError, MemoryError) as exc:
        task = None
        errors = {s: f"{type(exc).__name__}: {exc}" for s in config.seeds}
    for seed in config.seeds if task is not None else ():
        try:
            res = train(config, seed, task)
        except (ResourceError, MemoryError) as exc:
            errors[seed] = f"{type(exc).__name__}: {exc}"
            continue
        runs.append(res)
        if write:
            write_metrics(os.path.join(config.output, f"run_seed{seed}.csv"), res.rows)
            data = learner_to_dict(res.learner)
            data["task"] = _task_info(config, task)
            with open(os.path.join(config.output, f"run_seed{seed}.ckpt.json"), "w", encoding="utf-8") as fh:
                json.dump(data, fh)
    agg = aggregate([r.rows for r in runs])
    if write:
        write_aggregate(os.path.join(config.output, "aggregate.csv"), agg)
        if errors:
            with open(os.path.join(config.output, "errors.json"), "w", encoding="utf-8") as fh:
                json.dump({str(k): v for k, v in errors.items()}, fh, indent=1)
    return BatchResult(runs, agg, errors, config.output)


# -- verification -------------------------------------------------------------

@dataclass
class Verdict:
    status: str
    length: Optional[int]
    optimal_length: Optional[int]

    def __str__(self):
        if self.status == "suboptimal":
            return f"suboptimal({self.length})"
        return self.status


def verify_policy(checkpoint, env=None, rm=None, cap: int = 1000, observation: str = "cell",
                  max_states: int = 2_000_000) -> Verdict:
    """Run the greedy policy once and compare its length with the oracle optimum.

    ``checkpoint`` is a :class:`Learner` (then ``env`` and ``rm`` are needed)
    or a path to a checkpoint that records its task.
    """
    if isinstance(checkpoint, Learner):
        learner = checkpoint
    else:
        learner, info = load_learner(checkpoint)
        if env is None or rm is None:
            if not info:
                raise ParameterError("checkpoint has no task; pass env and rm")
            env = make_env(parse_map(info["map"]))
            rm = task_rm(info["domain"], info["n"], info["variant"])
            observation = info.get("observation", observation)
            cap = info.get("episode_cap", cap)
            max_states = info.get("max_states", max_states)
    k_star = bfs_optimal_length(env, rm, max_states)
    rec = greedy_rollout(learner, env, rm, cap, observation)
    if not rec.success:
        return Verdict("failed", None, k_star)
    if rec.length == k_star:
        return Verdict("optimal", rec.length, k_star)
    return Verdict("suboptimal", rec.length, k_star)


# -- scaling -----------------------------------------------------------------

@dataclass
class ScalingRow:
    algo: str
    size: int
    steps: int
    updates: int
    updates_per_step: float
    peak_step_updates: int
    wall_clock: float
    timed_out: bool = False


@dataclass
class GrowthFit:
    algo: str
    statistic: str
    linear_r2: float
    exponential_r2: float
    log_slope: float

    @property
    def preferred(self) -> str:
        return "linear" if self.linear_r2 >= self.exponential_r2 else "exponential"


def _r2(y, pred):
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot


def fit_growth(sizes, values):
    """R² of a straight-line fit and of an exponential fit (both scored on the raw values)."""
    x = np.asarray(sizes, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(x) < 2:
        return math.nan, math.nan, math.nan
    lin = np.polyval(np.polyfit(x, y, 1), x)
    slope, icpt = np.polyfit(x, np.log(y), 1)
    exp = np.exp(icpt + slope * x)
    return _r2(y, lin), _r2(y, exp), float(slope)


@dataclass
class ScalingReport:
    """Per-cell measurements plus growth fits keyed by ``(algo, statistic)``.

    ``statistic`` is ``peak`` (largest update count in any single step, the
    per-step cost bound) or ``mean`` (updates divided by steps, which also
    depends on how far into the task the agent typically gets).
    """

    rows: list
    fits: dict

    def table(self) -> str:
        out = ["algo           size   steps     updates  mean/step  peak/step  seconds"]
        for r in self.rows:
            flag = "  timeout" if r.timed_out else ""
            out.append(f"{r.algo:<13} {r.size:>5} {r.steps:>7} {r.updates:>11} {r.updates_per_step:>10.2f}"
                       f" {r.peak_step_updates:>10} {r.wall_clock:>8.2f}{flag}")
        for f in self.fits.values():
            out.append(f"{f.algo} [{f.statistic}]: linear R2={f.linear_r2:.4f}"
                       f" exponential R2={f.exponential_r2:.4f} log-slope={f.log_slope:.3f} -> {f.preferred}")
        return "\n".join(out)


def _algo_variant(spec):
    algo, _, variant = spec.partition(":")
    return algo, variant or DEFAULT_VARIANT[algo]


def scaling_report(domain: str, sizes, algos, steps: int = 2000, seed: int = 0,
                   map_size=(10, 10), timeout: float = 600.0, alpha: float = 0.5) -> ScalingReport:
    """Synthetic-update counts and wall clock per algorithm and task size.

    ``algos`` entries are ``name`` or ``name:variant`` (e.g. ``crm:agenda``).
    """
    rows = []
    for spec in algos:
        algo, variant = _algo_variant(spec)
        for n in sizes:
            cfg = ExperimentConfig(domain=domain, n_objects=n, map_seed=seed, map_height=map_size[0],
                                   map_width=map_size[1], algo=algo, variant=variant, alpha=alpha,
                                   step_limit=steps, seeds=(seed,))
            start = time.perf_counter()
            try:
                grid = (random_delivery_map(map_size[0], map_size[1], n, seed) if domain == "delivery"
                        else load_map("office").with_offices(n))
                env = make_env(grid)
                rm = task_rm(domain, n, variant)
                hp = cfg.hyperparams()
                learner = Learner.create(cfg.learner_algo, hp, seed)
                timed_out = False
                while learner.steps < steps:
                    run_episode(learner, env, rm, hp, steps - learner.steps)
                    if time.perf_counter() - start > timeout:
                        timed_out = True
                        break
            except (ResourceError, MemoryError):
                rows.append(ScalingRow(spec, n, 0, 0, math.nan, 0, time.perf_counter() - start, True))
                continue
            wall = time.perf_counter() - start
            rows.append(ScalingRow(spec, n, learner.steps, learner.updates,
                                   learner.updates / max(learner.steps, 1), learner.peak_step_updates,
                                   wall, timed_out))
    fits = {}
    for spec in algos:
        mine = [r for r in rows if r.algo == spec and not r.timed_out]
        sizes_ok = [r.size for r in mine]
        for stat, vals in (("peak", [r.peak_step_updates for r in mine]),
                           ("mean", [r.updates_per_step for r in mine])):
            lin, exp, slope = fit_growth(sizes_ok, vals)
            fits[spec, stat] = GrowthFit(spec, stat, lin, exp, slope)
    return ScalingReport(rows, fits)


def config_with(config: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(config, **changes)
