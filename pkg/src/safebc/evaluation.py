"""End-to-end evaluation of nominal versus filtered boundary control.

Each episode draws an initial condition, runs the nominal controller closed
loop on the simulator, optionally rewrites the recorded input through the
safety filter, and then replays the final input open loop on the simulator
for scoring.  Replaying the unmodified input reproduces the closed-loop
states bitwise, so a disabled filter and a threshold of zero give identical
metrics.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .barrier import BarrierFunction
from .checkpoint import fmt
from .nets import subseed
from .neural_operator import BoundaryOperator
from .pde_sim import (ConfigurationError, SimulationDivergedError, rollout,
                      rollout_inputs, stabilization_reward)
from .safety_filter import FilterConfig, filter_trajectory
from .trajectories import label_safety


def feasible_steps(labels):
    """Length of the maximal all-safe suffix, or None when the final step is
    unsafe (the episode never settles into the safe set)."""
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0 or not labels[-1]:
        return None
    rev = np.logical_and.accumulate(labels[::-1])
    return int(rev.sum())


@dataclass
class EpisodeRecord:
    episode: int
    U0: float
    reward: float
    feasible: bool
    feasible_steps: int


@dataclass
class Metrics:
    reward_mean: float
    reward_std: float
    feasible_rate: float
    avg_feasible_steps: float
    episodes: int


def metrics_from_records(records):
    """Aggregate per-episode records; the step average runs over feasible
    episodes only and is 0 when there are none."""
    if not records:
        raise ValueError("no episodes to aggregate")
    rewards = np.array([r.reward for r in records], dtype=float)
    feasible = np.array([r.feasible for r in records], dtype=bool)
    if feasible.any():
        avg = float(np.mean([float(r.feasible_steps) for r in records
                             if r.feasible]))
    else:
        avg = 0.0
    return Metrics(float(rewards.mean()), float(rewards.std()),
                   float(feasible.mean()), avg, len(records))


def write_episode_csv(path, records):
    lines = ["episode,U0,reward,feasible,feasible_steps"]
    for r in records:
        lines.append(",".join([str(r.episode), fmt(r.U0), fmt(r.reward),
                               str(int(r.feasible)), str(r.feasible_steps)]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_episode_csv(path):
    records = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "episode,U0,reward,feasible,feasible_steps":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            ep, u0, rew, feas, steps = line.strip().split(",")
            records.append(EpisodeRecord(int(ep), float(u0), float(rew),
                                         bool(int(feas)), int(steps)))
    return records


@dataclass
class ExperimentSpec:
    env: object
    controller: object
    safe_set: object
    filter_on: bool = False
    filter: FilterConfig = field(default_factory=FilterConfig)
    operator_path: str = None
    bcbf_path: str = None
    episodes: int = 100
    U0_range: tuple = (1.0, 10.0)
    seed: int = 0


def _load_models(spec):
    for path in (spec.operator_path, spec.bcbf_path):
        if path is None or not os.path.isfile(path):
            raise ConfigurationError(
                f"filter is on but checkpoint {path!r} is missing")
    op = BoundaryOperator.load(spec.operator_path)
    if op.grid != spec.env.grid:
        raise ConfigurationError(
            "operator checkpoint grid does not match the environment grid")
    bar = BarrierFunction.load(spec.bcbf_path)
    return op, bar


def run_episodes(spec):
    """Per-episode records for an experiment; evaluate() aggregates these.

    Episode e draws U0 from a stream keyed by (seed, e) and seeds the
    controller with e, so arms sharing a spec seed see identical nominal
    trajectories.  Model checkpoints are only loaded when the filter is on.
    A diverged simulation counts as infeasible with reward -inf.
    """
    op = bar = None
    if spec.filter_on:
        op, bar = _load_models(spec)
    lo, hi = float(spec.U0_range[0]), float(spec.U0_range[1])
    records = []
    for e in range(spec.episodes):
        rng = np.random.default_rng(subseed(spec.seed, e))
        U0 = float(rng.uniform(lo, hi))
        try:
            nominal = rollout(spec.env, spec.controller, U0, episode_seed=e)
            U_final = nominal.U
            if spec.filter_on:
                U_final = filter_trajectory(op, bar, nominal.U,
                                            spec.filter).U_safe
            played = rollout_inputs(spec.env, U_final)
            reward = stabilization_reward(played.states)
            steps = feasible_steps(label_safety(played.Y, spec.safe_set))
        except SimulationDivergedError:
            reward, steps = float("-inf"), None
        records.append(EpisodeRecord(e, U0, reward, steps is not None,
                                     steps if steps is not None else 0))
    return records


def evaluate(spec, episodes_csv=None):
    """Run the experiment and aggregate. Optionally writes the per-episode
    CSV; re-aggregating that file reproduces the returned metrics exactly."""
    records = run_episodes(spec)
    if episodes_csv is not None:
        write_episode_csv(episodes_csv, records)
    return metrics_from_records(records)


def report(rows):
    """Markdown table over (name, Metrics) rows, kept in the given order."""
    if not rows:
        raise ValueError("no rows to report")
    header = ["name", "reward (mean +/- std)", "feasible rate",
              "avg feasible steps", "episodes"]
    body = []
    for name, m in rows:
        body.append([
            str(name),
            f"{m.reward_mean:.2f} +/- {m.reward_std:.2f}",
            f"{m.feasible_rate:.2f}",
            f"{m.avg_feasible_steps:.1f}",
            str(m.episodes),
        ])
    widths = [max(len(header[i]), *(len(r[i]) for r in body))
              for i in range(len(header))]
    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) \
            + " |"
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), rule] + [line(r) for r in body])


def threshold_sweep(spec, etas):
    """Evaluate the filtered arm at each threshold with shared seeds."""
    out = []
    for eta in etas:
        arm = replace(spec, filter_on=True,
                      filter=replace(spec.filter, eta=float(eta)))
        out.append((float(eta), evaluate(arm)))
    return out
