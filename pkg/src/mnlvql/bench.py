"""Seeded experiment runner and CSV writer.

A run is described by an :class:`ExperimentConfig`. Replication ``r`` builds
its environment and agent from seed ``base + r``; the environment's choice and
transition noise in episode ``k`` comes from a stream keyed on
``(base + r, k)``, so two agents run with the same config face identical
randomness wherever their trajectories agree.

Config files are INI-style::

    [env]
    kind = shopping      # shopping | hard
    n_items = 10

    [agent]
    kind = mnl_vql
    radius_scale = 0.01

    [run]
    episodes = 30000
    replications = 10
    seed = 0
    out = results.csv
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agents import AGENTS, AgentConfig, derive_rng, make_agent
from .envs import TabularEnv, dp_optimal_values, hard_instance_env, online_shopping_env, \
    policy_evaluation, step
from .values import SigmaMode

CSV_HEADER = ("agent", "seed", "episode", "return", "cum_regret_realized",
              "cum_regret_expected", "episode_ms")
FLOAT_FORMAT = "%.9g"
WARMUP_EPISODES = 5
ENV_STREAM = 3   # key namespace of the per-episode environment noise

ENV_KINDS = ("shopping", "hard", "custom")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class EnvSpec:
    """Environment recipe. ``None`` entries take the kind's own defaults.

    ``seed`` fixes the environment draw; when ``None`` replication ``r`` uses
    ``base_seed + r``. ``factory`` is only consulted for ``kind="custom"`` and
    maps a seed to a :class:`TabularEnv`.
    """

    kind: str = "shopping"
    n_items: int | None = None
    n_states: int | None = None
    horizon: int | None = None
    max_assortment: int | None = None
    d: int | None = None
    d_lin: int | None = None
    seed: int | None = None
    factory: Callable[[int], TabularEnv] | None = field(default=None, compare=False)

    def build(self, seed: int, n_episodes: int) -> TabularEnv:
        if self.kind == "shopping":
            kw = {k: v for k, v in (("n_items", self.n_items), ("n_states", self.n_states),
                                    ("horizon", self.horizon), ("d", self.d),
                                    ("max_assortment", self.max_assortment)) if v is not None}
            return online_shopping_env(seed=seed, **kw)
        if self.kind == "hard":
            kw = {k: v for k, v in (("d", self.d), ("d_lin", self.d_lin),
                                    ("horizon", self.horizon)) if v is not None}
            return hard_instance_env(n_episodes=n_episodes, seed=seed, **kw)
        return self.factory(seed)


@dataclass(frozen=True)
class AgentSpec:
    kind: str = "mnl_vql"
    radius_scale: float = 1.0
    beta_scale: float = 1.0
    u_scale: float = 1.0
    sigma_mode: str = "simple"
    lam: float | None = None
    delta: float = 0.1
    rho: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run.

    ``record_time`` writes measured wall times into the ``episode_ms``
    column; it is off by default so that output files are reproducible
    byte for byte.
    """

    env: EnvSpec = EnvSpec()
    agent: AgentSpec = AgentSpec()
    n_episodes: int = 1
    replications: int = 1
    seed: int = 0
    out: str | None = None
    record_time: bool = False

    def __post_init__(self):
        validate(self)


@dataclass(frozen=True)
class RunRecord:
    agent: str
    seed: int
    episode: int
    ret: float
    cum_regret_realized: float
    cum_regret_expected: float
    episode_ms: float


def validate(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` for the first invalid field."""
    if cfg.env.kind not in ENV_KINDS:
        raise ConfigError("env.kind", f"unknown environment {cfg.env.kind!r}; choose from {ENV_KINDS}")
    if cfg.env.kind == "custom" and cfg.env.factory is None:
        raise ConfigError("env.factory", "a custom environment needs a factory callable")
    for name in ("n_items", "n_states", "horizon", "max_assortment", "d", "d_lin"):
        v = getattr(cfg.env, name)
        if v is not None and v < 1:
            raise ConfigError(f"env.{name}", "must be a positive integer")
    if cfg.agent.kind not in AGENTS:
        raise ConfigError("agent.kind", f"unknown agent {cfg.agent.kind!r}; choose from {sorted(AGENTS)}")
    for name in ("radius_scale", "beta_scale", "u_scale"):
        if getattr(cfg.agent, name) < 0:
            raise ConfigError(f"agent.{name}", "must be non-negative")
    if cfg.agent.lam is not None and cfg.agent.lam <= 0:
        raise ConfigError("agent.lam", "must be positive")
    if not 0 < cfg.agent.delta < 1:
        raise ConfigError("agent.delta", "must lie in (0, 1)")
    if cfg.agent.rho <= 0:
        raise ConfigError("agent.rho", "must be positive")
    try:
        SigmaMode(cfg.agent.sigma_mode)
    except ValueError:
        raise ConfigError("agent.sigma_mode", f"expected one of {[m.value for m in SigmaMode]}") from None
    if cfg.n_episodes < 1:
        raise ConfigError("run.episodes", "must be at least 1")
    if cfg.replications < 1:
        raise ConfigError("run.replications", "must be at least 1")
    if cfg.seed < 0:
        raise ConfigError("run.seed", "must be non-negative")


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------


def run_replication(cfg: ExperimentConfig, r: int) -> list[RunRecord]:
    """Run one replication; seeds derive from ``cfg.seed + r``."""
    seed = cfg.seed + r
    env = cfg.env.build(seed if cfg.env.seed is None else cfg.env.seed, cfg.n_episodes)
    dp = dp_optimal_values(env)
    s0 = env.initial_state
    # evaluate the optimal map through the same routine as the agent's maps,
    # so the optimal agent's expected regret is exactly zero
    v_star = float(policy_evaluation(env, dp.policy)[0, s0])
    a = cfg.agent
    agent = make_agent(a.kind, env, AgentConfig(
        n_episodes=cfg.n_episodes, delta=a.delta, rho=a.rho, radius_scale=a.radius_scale,
        beta_scale=a.beta_scale, u_scale=a.u_scale, sigma_mode=a.sigma_mode, seed=seed,
        lam=a.lam,
    ), dp)
    weights = env.true_weights()
    records = []
    cum_real = cum_exp = 0.0
    for k in range(1, cfg.n_episodes + 1):
        t0 = time.perf_counter()
        agent.begin_episode(k)
        policy = agent.greedy_policy()
        t_eval = time.perf_counter()
        policy_value = float(policy_evaluation(env, policy, weights)[0, s0])
        t0 += time.perf_counter() - t_eval   # bookkeeping is not agent time
        rng = derive_rng(seed, ENV_STREAM, k)
        s, total = s0, 0.0
        for h in range(env.horizon):
            assortment = agent.act(h, s)
            outcome = step(env, h, s, assortment, rng)
            agent.observe(h, s, assortment, outcome)
            total += outcome.reward
            s = outcome.next_state
        ms = 1000.0 * (time.perf_counter() - t0)
        cum_real += v_star - total
        cum_exp += v_star - policy_value
        records.append(RunRecord(a.kind, seed, k, total, cum_real, cum_exp,
                                 ms if cfg.record_time else 0.0))
    return records


def run_experiment(cfg: ExperimentConfig, workers: int = 1,
                   progress: Callable[[str], None] | None = None) -> list[RunRecord]:
    """All replications, concatenated in seed order.

    With ``workers > 1`` replications run in separate processes; the output is
    the same as a serial run.
    """
    validate(cfg)
    reps = range(cfg.replications)
    out: list[RunRecord] = []
    if workers > 1 and cfg.env.factory is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for r, recs in zip(reps, pool.map(run_replication, [cfg] * len(reps), reps)):
                out.extend(recs)
                if progress:
                    progress(_progress_line(cfg, r, recs))
        return out
    for r in reps:
        recs = run_replication(cfg, r)
        out.extend(recs)
        if progress:
            progress(_progress_line(cfg, r, recs))
    return out


def _progress_line(cfg, r, recs):
    window = min(1000, len(recs))
    tail = np.mean([x.ret for x in recs[-window:]])
    return (f"{cfg.agent.kind} seed={cfg.seed + r} episodes={len(recs)} "
            f"final-{window} mean return={tail:.4f} cum regret={recs[-1].cum_regret_realized:.2f}")


# --------------------------------------------------------------------------
# Output and summaries
# --------------------------------------------------------------------------


def format_records(records) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for x in records:
        buf.write(f"{x.agent},{x.seed},{x.episode},{FLOAT_FORMAT % x.ret},"
                  f"{FLOAT_FORMAT % x.cum_regret_realized},{FLOAT_FORMAT % x.cum_regret_expected},"
                  f"{FLOAT_FORMAT % x.episode_ms}\n")
    return buf.getvalue()


def emit_csv(records, path) -> None:
    """Write records as CSV with LF line endings; IO errors propagate."""
    with open(path, "w", newline="\n", encoding="ascii") as fh:
        fh.write(format_records(records))


def read_csv(path) -> list[RunRecord]:
    with open(path, newline="", encoding="ascii") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        return [RunRecord(row[0], int(row[1]), int(row[2]), *map(float, row[3:])) for row in reader]


def final_window_mean(records, window: int = 1000) -> float:
    """Mean return over each replication's last ``window`` episodes, then over seeds."""
    by_seed: dict[int, list[float]] = {}
    for x in records:
        by_seed.setdefault(x.seed, []).append(x.ret)
    return float(np.mean([np.mean(v[-window:]) for v in by_seed.values()]))


def mean_episode_ms(records, warmup: int = WARMUP_EPISODES) -> float:
    """Average wall time per episode, skipping each replication's warm-up."""
    times = [x.episode_ms for x in records if x.episode > warmup]
    return float(np.mean(times)) if times else float("nan")


def files_identical(path_a, path_b) -> bool:
    return Path(path_a).read_bytes() == Path(path_b).read_bytes()


# --------------------------------------------------------------------------
# Config files and CLI
# --------------------------------------------------------------------------

_ENV_KEYS = {"kind": str, "n_items": int, "n_states": int, "horizon": int,
             "max_assortment": int, "d": int, "d_lin": int, "seed": int}
_AGENT_KEYS = {"kind": str, "radius_scale": float, "beta_scale": float, "u_scale": float,
               "sigma_mode": str, "lam": float, "delta": float, "rho": float}
_RUN_KEYS = {"episodes": int, "replications": int, "seed": int, "out": str, "record_time": bool}
_SECTIONS = {"env": _ENV_KEYS, "agent": _AGENT_KEYS, "run": _RUN_KEYS}


def _convert(section, key, raw, kind):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(raw)
            return low in ("1", "true", "yes", "on")
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_text(text: str) -> dict:
    """Parse INI text into ``{section: {key: value}}`` with typed values."""
    parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc).splitlines()[0]) from None
    out: dict = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, f"unknown section; expected one of {sorted(_SECTIONS)}")
        keys = _SECTIONS[section]
        out[section] = {}
        for key, raw in parser.items(section):
            if key not in keys:
                raise ConfigError(f"{section}.{key}", "unknown key")
            out[section][key] = _convert(section, key, raw, keys[key])
    return out


def config_from_dict(values: dict) -> ExperimentConfig:
    """Build a config from parsed sections; ``env.kind``, ``agent.kind`` and
    ``run.episodes`` are required."""
    env = dict(values.get("env", {}))
    agent = dict(values.get("agent", {}))
    run = dict(values.get("run", {}))
    for section, data, key in (("env", env, "kind"), ("agent", agent, "kind"), ("run", run, "episodes")):
        if data.get(key) is None:
            raise ConfigError(f"{section}.{key}", "missing required value")
    return ExperimentConfig(
        env=EnvSpec(**env),
        agent=AgentSpec(**agent),
        n_episodes=run["episodes"],
        replications=run.get("replications", 1),
        seed=run.get("seed", 0),
        out=run.get("out"),
        record_time=run.get("record_time", False),
    )


def load_config(path) -> ExperimentConfig:
    return config_from_dict(parse_config_text(Path(path).read_text()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mnlvql-bench", description="Run seeded assortment-RL experiments.")
    p.add_argument("--config", help="INI file with [env], [agent] and [run] sections")
    p.add_argument("--env", help="environment kind (overrides env.kind)")
    p.add_argument("--agent", help="agent kind (overrides agent.kind)")
    p.add_argument("--episodes", type=int, help="episodes per replication")
    p.add_argument("--replications", type=int, help="number of seeds")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out", help="CSV output path (default: standard output)")
    p.add_argument("--record-time", action="store_true", help="write wall times into episode_ms")
    p.add_argument("--workers", type=int, default=1, help="replications run in parallel")
    p.add_argument("--quiet", action="store_true", help="suppress progress lines")
    p.add_argument("--list-agents", action="store_true", help="print agent kinds and exit")
    p.add_argument("--list-envs", action="store_true", help="print environment kinds and exit")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.list_agents:
        print("\n".join(AGENTS))
        return 0
    if args.list_envs:
        print("\n".join(ENV_KINDS))
        return 0
    try:
        values = parse_config_text(Path(args.config).read_text()) if args.config else {}
        for section, key, flag in (("env", "kind", args.env), ("agent", "kind", args.agent),
                                   ("run", "episodes", args.episodes),
                                   ("run", "replications", args.replications),
                                   ("run", "seed", args.seed), ("run", "out", args.out)):
            if flag is not None:
                values.setdefault(section, {})[key] = flag
        if args.record_time:
            values.setdefault("run", {})["record_time"] = True
        cfg = config_from_dict(values)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    progress = None if args.quiet else (lambda line: print(line, file=sys.stderr))
    records = run_experiment(cfg, workers=args.workers, progress=progress)
    if cfg.out:
        emit_csv(records, cfg.out)
    else:
        sys.stdout.write(format_records(records))
    return 0


if __name__ == "__main__":
    sys.exit(main())
