"""Experiment harness: strict config files, seeded multi-run experiments, CSV output
and gap-aware EMA smoothing of learning curves."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import NeuralSoftQ, TabularSoftQ, value_iteration
from .envs import ENVIRONMENTS, make_env
from .errors import ConfigError, ContractViolation
from .loop import MODES, SorsConfig, run
from .reward_model import RewardEnsemble

log = logging.getLogger(__name__)

SUCCESS_RUN = 3
CURVE_HEADER = ("step", "seed", "raw_return", "smoothed_return", "mode", "env")
AGGREGATE_HEADER = ("step", "mean_return", "std_return", "mode", "env", "n_seeds")
REWARD_HEADER = ("step", "seed", "mean_loss", "holdout_accuracy", "skipped")
SUMMARY_HEADER = ("seed", "final_return", "steps_to_success", "final_holdout_accuracy", "episodes")
ECHO_NAME = "config.resolved"


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _fraction(v):
    return 0.0 < v < 1.0


def _discount(v):
    return 0.0 < v <= 1.0


@dataclass(frozen=True)
class Key:
    name: str
    kind: str  # int | float | bool | str | ints | cells
    default: object
    doc: str
    check: object = None
    choices: tuple = ()
    envs: tuple = ()  # environments the key applies to; empty = all


SCHEMA = (
    Key("env", "str", None, "environment name (required)", choices=tuple(sorted(ENVIRONMENTS))),
    Key("mode", "str", "sors", "reward source for the policy", choices=MODES),
    Key("seed", "int", 0, "base seed; run i uses seed + i", _non_negative),
    Key("num_seeds", "int", 5, "number of independent runs", _positive),
    Key("env.delay", "int", 20, "sparse-reward accumulation period K", _positive),
    Key("env.cap", "int", 0, "episode step cap, 0 for the environment default", _non_negative),
    Key("env.n", "int", 10, "chain length", lambda v: v >= 2, envs=("delayed_chain",)),
    Key("env.width", "int", 5, "grid width", _positive, envs=("sparse_grid",)),
    Key("env.height", "int", 5, "grid height", _positive, envs=("sparse_grid",)),
    Key("env.walls", "cells", (), "wall cells as x:y pairs separated by ';'", envs=("sparse_grid",)),
    Key("env.goal_x", "float", 0.5, "goal position x", envs=("point_mass",)),
    Key("env.goal_y", "float", 0.5, "goal position y", envs=("point_mass",)),
    Key("env.goal_radius", "float", 0.1, "goal radius", _positive, envs=("point_mass",)),
    Key("loop.total_steps", "int", 100_000, "environment interactions per run", _positive),
    Key("loop.initial_random_steps", "int", 2000, "uniform-random warm-up steps", _non_negative),
    Key("loop.policy_period", "int", 1, "steps between policy phases", _positive),
    Key("loop.policy_updates", "int", 1, "backend updates per policy phase", _positive),
    Key("loop.eval_period", "int", 1000, "steps between greedy evaluations", _positive),
    Key("loop.eval_episodes", "int", 1, "episodes per evaluation", _positive),
    Key("loop.gamma", "float", 0.95, "discount factor", _discount),
    Key("reward.period", "int", 1000, "steps between reward phases", _positive),
    Key("reward.updates", "int", 100, "gradient steps per reward phase", _positive),
    Key("reward.pair_batch_size", "int", 10, "trajectory pairs per gradient step", _positive),
    Key("reward.ensemble_size", "int", 4, "number of reward networks", _positive),
    Key("reward.hidden", "ints", (64, 64), "hidden layer widths", lambda v: all(h > 0 for h in v)),
    Key("reward.features", "int", 4, "width of the feature layer", _positive),
    Key("reward.lr", "float", 1e-3, "Adam learning rate", _positive),
    Key("reward.discounted", "bool", True, "discount learned returns inside the pair loss"),
    Key("reward.buffer_capacity", "int", 200, "trajectories kept for training", _positive),
    Key("reward.holdout_fraction", "float", 0.2, "share of episodes held out for ranking accuracy", _fraction),
    Key("reward.holdout_per_return", "int", 5, "held-out episodes kept per distinct return", _positive),
    Key("backend.kind", "str", "auto", "tabular, neural, or auto (tabular when the env is finite)",
        choices=("auto", "tabular", "neural")),
    Key("backend.alpha", "float", 0.01, "entropy temperature", _positive),
    Key("backend.replay_capacity", "int", 100_000, "transition replay size", _positive),
    Key("backend.tabular.lr", "float", 0.5, "tabular step size", lambda v: 0.0 < v <= 1.0),
    Key("backend.tabular.batch_size", "int", 32, "tabular minibatch size", _positive),
    Key("backend.neural.lr", "float", 3e-4, "Adam learning rate of the Q-network", _positive),
    Key("backend.neural.batch_size", "int", 100, "neural minibatch size", _positive),
    Key("backend.neural.hidden", "ints", (64, 64), "Q-network hidden widths", lambda v: all(h > 0 for h in v)),
    Key("backend.neural.target_period", "int", 100, "updates between target-network copies", _positive),
    Key("output.half_life", "float", 2000.0, "EMA half-life in environment steps", _positive),
    Key("output.workers", "int", 1, "processes used to run seeds", _positive),
    Key("output.reward_log", "bool", False, "also write per-phase reward-model diagnostics"),
)
KEYS = {k.name: k for k in SCHEMA}


def _convert(key: Key, raw: str, line):
    try:
        if key.kind == "int":
            value = int(raw)
        elif key.kind == "float":
            value = float(raw)
            if not np.isfinite(value):
                raise ValueError
        elif key.kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError
            value = low == "true"
        elif key.kind == "ints":
            value = tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        elif key.kind == "cells":
            cells = []
            for part in filter(None, (p.strip() for p in raw.split(";"))):
                x, y = part.split(":")
                cells.append((int(x), int(y)))
            value = tuple(cells)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"cannot read {raw!r} as {key.kind}", key.name, line) from None
    if key.choices and value not in key.choices:
        raise ConfigError(f"{value!r} is not one of {', '.join(key.choices)}", key.name, line)
    if key.check is not None and not key.check(value):
        raise ConfigError(f"{raw!r} violates the constraint: {key.doc}", key.name, line)
    return value


def _render(key: Key, value) -> str:
    if key.kind == "bool":
        return "true" if value else "false"
    if key.kind == "ints":
        return ",".join(map(str, value))
    if key.kind == "cells":
        return ";".join(f"{x}:{y}" for x, y in value)
    if key.kind == "float":
        return repr(float(value))
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    lines: dict = field(default_factory=dict, compare=False)

    def __getitem__(self, name):
        return self.values[name]

    @property
    def env_name(self) -> str:
        return self.values["env"]

    @property
    def mode(self) -> str:
        return self.values["mode"]

    @property
    def seeds(self) -> list:
        return [self.values["seed"] + i for i in range(self.values["num_seeds"])]

    def loop_config(self, seed: int) -> SorsConfig:
        v = self.values
        return SorsConfig(
            total_steps=v["loop.total_steps"], reward_period=v["reward.period"], reward_updates=v["reward.updates"],
            policy_period=v["loop.policy_period"], policy_updates=v["loop.policy_updates"],
            initial_random_steps=v["loop.initial_random_steps"], buffer_capacity=v["reward.buffer_capacity"],
            pair_batch_size=v["reward.pair_batch_size"], holdout_fraction=v["reward.holdout_fraction"],
            holdout_per_return=v["reward.holdout_per_return"], eval_period=v["loop.eval_period"],
            eval_episodes=v["loop.eval_episodes"], gamma=v["loop.gamma"], mode=self.mode, seed=seed)

    def env_params(self) -> dict:
        v = self.values
        name = self.env_name
        if name == "delayed_chain":
            params = {"n": v["env.n"]}
        elif name == "sparse_grid":
            params = {"width": v["env.width"], "height": v["env.height"], "walls": v["env.walls"]}
        else:
            params = {"goal": (v["env.goal_x"], v["env.goal_y"]), "goal_radius": v["env.goal_radius"]}
        if v["env.cap"]:
            params["cap"] = v["env.cap"]
        return params

    def with_values(self, **updates) -> "ExperimentConfig":
        """Copy with dotted keys given as ``loop__total_steps=...`` style arguments."""
        values = dict(self.values)
        for k, val in updates.items():
            name = k.replace("__", ".")
            if name not in KEYS:
                raise ConfigError("unknown key", name)
            values[name] = val
        return build_config(values)

    def echo(self) -> str:
        out = ["# resolved configuration; every key with its effective value"]
        for key in SCHEMA:
            if key.envs and self.env_name not in key.envs:
                continue
            out.append(f"{key.name} = {_render(key, self.values[key.name])}")
        return "\n".join(out) + "\n"


def build_config(values: dict, lines: dict | None = None, explicit=None) -> ExperimentConfig:
    """Fill defaults and cross-check fields. ``values`` holds already-typed entries.

    Environment-specific keys are rejected for other environments when listed in
    ``explicit`` (by default, those whose value differs from the default).
    """
    lines = lines or {}
    if explicit is None:
        explicit = [k for k, v in values.items() if k not in KEYS or v != KEYS[k].default]
    if values.get("env") is None:
        raise ConfigError("the environment must be set", "env")
    resolved = {k.name: values.get(k.name, k.default) for k in SCHEMA}
    for name in values:
        if name not in KEYS:
            raise ConfigError("unknown key", name, lines.get(name))
    for name in explicit:
        key = KEYS[name]
        if key.envs and resolved["env"] not in key.envs:
            raise ConfigError(f"does not apply to environment {resolved['env']}", name, lines.get(name))
    env_is_finite = ENVIRONMENTS[resolved["env"]].is_finite
    if resolved["backend.kind"] == "tabular" and not env_is_finite:
        raise ConfigError("a tabular backend needs a finite environment", "backend.kind", lines.get("backend.kind"))
    if resolved["loop.initial_random_steps"] > resolved["loop.total_steps"]:
        raise ConfigError("cannot exceed loop.total_steps", "loop.initial_random_steps",
                          lines.get("loop.initial_random_steps"))
    if resolved["env"] == "sparse_grid":
        w, h = resolved["env.width"], resolved["env.height"]
        if w * h < 2:
            raise ConfigError("grid needs at least two cells", "env.width", lines.get("env.width"))
        for x, y in resolved["env.walls"]:
            if not (0 <= x < w and 0 <= y < h) or (x, y) in ((0, 0), (w - 1, h - 1)):
                raise ConfigError(f"wall {x}:{y} is off the grid or on the start/goal", "env.walls",
                                  lines.get("env.walls"))
    return ExperimentConfig(resolved, dict(lines))


def parse_config_text(text: str) -> ExperimentConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError("expected 'key = value'", None, lineno)
        name, value = (part.strip() for part in body.split("=", 1))
        key = KEYS.get(name)
        if key is None:
            raise ConfigError("unknown key", name, lineno)
        if name in values:
            raise ConfigError(f"duplicate key (first set on line {lines[name]})", name, lineno)
        values[name] = _convert(key, value, lineno)
        lines[name] = lineno
    return build_config(values, lines, explicit=list(values))


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return parse_config_text(text)


def ema_smooth(series, half_life: float):
    """Gap-aware EMA over ``(step, value)`` pairs: the weight on history halves
    every ``half_life`` steps regardless of how the samples are spaced."""
    series = list(series)
    if not series:
        raise ContractViolation("cannot smooth an empty series")
    if not half_life > 0:
        raise ContractViolation("half_life must be positive")
    steps = np.array([s for s, _ in series], dtype=np.float64)
    if np.any(np.diff(steps) <= 0):
        raise ContractViolation("steps must be strictly increasing")
    beta = 2.0 ** (-1.0 / half_life)
    out = []
    y = None
    prev = None
    for step, x in series:
        if y is None:
            y = float(x)
        else:
            keep = beta ** (step - prev)
            y = keep * y + (1.0 - keep) * float(x)
        prev = step
        out.append((step, y))
    return out


def steps_to_sustained_success(evaluations, run_length: int = SUCCESS_RUN, target: float = 1.0, tol: float = 1e-9):
    """Step of the first evaluation opening ``run_length`` consecutive successes, or None."""
    streak = 0
    for k, rec in enumerate(evaluations):
        streak = streak + 1 if rec.sparse_return >= target - tol else 0
        if streak == run_length:
            return evaluations[k - run_length + 1].step
    return None


def greedy_matches_optimal(backend, env, gamma: float, tie_tol: float = 1e-9) -> bool:
    """Whether every greedy action along the backend's own rollout is optimal under the true sparse reward."""
    mdp, sparse = env.as_mdp_spec(gamma)
    optimal = value_iteration(mdp, sparse, tie_tol=tie_tol).optimal_actions
    obs = env.reset()
    while True:
        a = backend.act(obs, True, None)
        if a not in optimal[obs.state]:
            return False
        res = env.step(a)
        if res.done:
            return not res.truncated
        obs = res.observation


@dataclass
class SeedResult:
    seed: int
    runlog: object
    backend: object
    ensemble: object


def build_components(config: ExperimentConfig, seed: int):
    """Fresh (env, eval_env, backend, ensemble) for one seed."""
    v = config.values
    params = config.env_params()
    env = make_env(config.env_name, delay=v["env.delay"], **params)
    eval_env = make_env(config.env_name, delay=v["env.delay"], **params)
    backend_rng, reward_rng = (np.random.default_rng(s) for s in np.random.SeedSequence([seed, 1]).spawn(2))
    gamma = v["loop.gamma"]
    kind = v["backend.kind"]
    if kind == "auto":
        kind = "tabular" if env.is_finite else "neural"
    if kind == "tabular":
        backend = TabularSoftQ(env.num_states, env.num_actions, gamma, v["backend.alpha"], v["backend.tabular.lr"],
                               v["backend.tabular.batch_size"], v["backend.replay_capacity"], env.feature_dim)
    else:
        backend = NeuralSoftQ(env.feature_dim, env.num_actions, gamma, backend_rng, v["backend.alpha"],
                              v["backend.neural.lr"], v["backend.neural.hidden"], v["backend.neural.batch_size"],
                              v["backend.neural.target_period"], v["backend.replay_capacity"])
    ensemble = None
    if config.mode == "sors":
        ensemble = RewardEnsemble.create(env.feature_dim, env.num_actions, gamma, reward_rng, v["reward.ensemble_size"],
                                         v["reward.hidden"], v["reward.features"], v["reward.lr"],
                                         v["reward.discounted"])
    return env, eval_env, backend, ensemble


def run_seed(config: ExperimentConfig, seed: int) -> SeedResult:
    env, eval_env, backend, ensemble = build_components(config, seed)
    log.info("%s on %s, seed %d", config.mode, env.describe(), seed)
    runlog = run(config.loop_config(seed), env, backend, ensemble, eval_env)
    return SeedResult(seed, runlog, backend, ensemble)


def run_seeds(config: ExperimentConfig) -> list:
    seeds = config.seeds
    workers = min(config["output.workers"], len(seeds))
    if workers <= 1:
        return [run_seed(config, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_seed, [config] * len(seeds), seeds))


def _g(x) -> str:
    return "nan" if x is None or not np.isfinite(x) else f"{x:.9g}"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def curve_rows(result: SeedResult, config: ExperimentConfig):
    evals = result.runlog.evaluations
    smoothed = ema_smooth([(e.step, e.sparse_return) for e in evals], config["output.half_life"]) if evals else []
    return [(e.step, result.seed, _g(e.sparse_return), _g(y), config.mode, config.env_name)
            for e, (_, y) in zip(evals, smoothed)]


def aggregate_rows(per_seed_rows, config: ExperimentConfig):
    """Mean and population std of the smoothed curves, from the values exactly as written."""
    by_step: dict = {}
    for rows in per_seed_rows:
        for step, _, _, smoothed, _, _ in rows:
            by_step.setdefault(step, []).append(float(smoothed))
    out = []
    for step in sorted(by_step):
        vals = np.array(by_step[step])
        out.append((step, _g(vals.mean()), _g(vals.std()), config.mode, config.env_name, len(vals)))
    return out


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seeds: list
    files: dict = field(default_factory=dict)

    def summary_rows(self):
        rows = []
        for r in self.seeds:
            evals = r.runlog.evaluations
            final = evals[-1].sparse_return if evals else float("nan")
            reach = steps_to_sustained_success(evals)
            rows.append((r.seed, _g(final), "none" if reach is None else reach,
                         _g(r.runlog.final_holdout_accuracy), r.runlog.episodes))
        return rows

    def summary(self) -> str:
        return _csv_text(SUMMARY_HEADER, self.summary_rows())


def _write(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentResult:
    """Run every seed and write per-seed curves, the aggregate, a summary and the config echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{config.mode}_{config.env_name}"
    result = ExperimentResult(config, run_seeds(config))
    files = {"echo": out / ECHO_NAME}
    _write(files["echo"], config.echo())
    per_seed = []
    for r in result.seeds:
        rows = curve_rows(r, config)
        per_seed.append(rows)
        path = out / f"{stem}_seed{r.seed}.csv"
        _write(path, _csv_text(CURVE_HEADER, rows))
        files[f"seed{r.seed}"] = path
    files["aggregate"] = out / f"{stem}_aggregate.csv"
    _write(files["aggregate"], _csv_text(AGGREGATE_HEADER, aggregate_rows(per_seed, config)))
    files["summary"] = out / f"{stem}_summary.csv"
    _write(files["summary"], result.summary())
    if config["output.reward_log"] and config.mode == "sors":
        rows = [(p.step, r.seed, _g(p.mean_loss), _g(p.holdout_accuracy), str(p.skipped).lower())
                for r in result.seeds for p in r.runlog.reward_phases]
        files["reward"] = out / f"{stem}_reward_phases.csv"
        _write(files["reward"], _csv_text(REWARD_HEADER, rows))
    result.files = files
    return result


def smooth_csv(text: str, half_life: float) -> str:
    """Recompute ``smoothed_return`` for a curve CSV (per seed when a seed column exists)."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "step" not in reader.fieldnames:
        raise ContractViolation("input CSV needs a 'step' column")
    value_col = "raw_return" if "raw_return" in reader.fieldnames else "value"
    if value_col not in reader.fieldnames:
        raise ContractViolation("input CSV needs a 'raw_return' or 'value' column")
    rows = list(reader)
    header = list(reader.fieldnames)
    if "smoothed_return" not in header:
        header.append("smoothed_return")
    groups: dict = {}
    for k, row in enumerate(rows):
        groups.setdefault(row.get("seed"), []).append(k)
    for idx in groups.values():
        try:
            series = [(int(rows[k]["step"]), float(rows[k][value_col])) for k in idx]
        except ValueError as exc:
            raise ContractViolation(f"non-numeric entry: {exc}") from None
        for k, (_, y) in zip(idx, ema_smooth(series, half_life)):
            rows[k]["smoothed_return"] = _g(y)
    return _csv_text(header, [[row[h] for h in header] for row in rows])


__all__ = ["ExperimentConfig", "ExperimentResult", "SCHEMA", "SeedResult", "aggregate_rows", "build_components",
           "build_config", "curve_rows", "ema_smooth", "greedy_matches_optimal", "parse_config",
           "parse_config_text", "run_experiment", "run_seed", "run_seeds", "smooth_csv",
           "steps_to_sustained_success"]
