"""Post-training evaluation, the open-loop planner baseline, and the
ablation suite.

Evaluation rollouts act greedily with zero exploration noise.  Sensor
noise is modelled, when requested, as a Gaussian perturbation of the
normalized observation fed to the policy; the environment's ground
truth is never touched, so recorded trajectories stay physically valid.

Six metrics are collected per episode: success (any insertion),
time to first insertion in simulated seconds (episodes without an
insertion contribute the full episode duration), alignment error in
degrees at each insertion event (episodes without insertions contribute
no alignment samples), collision entries, the joint-rate energy proxy,
and RMS deviation of the pin tip from the straight reference segment in
millimetres.  Per-seed and pooled rows carry mean, standard deviation
and sample count; the pooled row is accumulated in a single streaming
pass over episodes.
"""

from __future__ import annotations

import csv
import json
import math
import shutil
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import (N_ACTIONS, PIN_AXIS, STATE_DIM, InsertionEnv,
                  collision_count, energy_proxy, rms_path_error)
from .kinematics import RrsGeometry
from .net import QNetwork
from .trainer import run_training, select_action

METRIC_NAMES = ("success_pct", "completion_time_s", "alignment_deg",
                "collisions", "energy", "rms_error_mm")

POLICY_SOURCES = ("checkpoint", "planner", "random")

# A training run counts as having reached the learning threshold at the
# first global step whose trailing-20-episode success rate is >= 1/2.
THRESHOLD_SUCCESS = 0.5
THRESHOLD_WINDOW = 20


class EvalError(ValueError):
    """Raised for malformed protocols or unusable policy sources."""


@dataclass(frozen=True)
class EvalProtocol:
    """How many rollouts to run and what drives them."""

    episodes: int = 100
    seeds: int = 5
    noise_sigma: float = 0.0
    source: str = "checkpoint"

    def validate(self) -> None:
        if self.episodes < 1 or self.seeds < 1:
            raise EvalError("episodes and seeds must be >= 1")
        if self.noise_sigma < 0.0:
            raise EvalError("noise_sigma must be >= 0")
        if self.source not in POLICY_SOURCES:
            raise EvalError(f"unknown policy source {self.source!r}")


@dataclass(frozen=True)
class MetricRow:
    mean: float
    std: float
    n: int


class Welford:
    """Streaming mean and population standard deviation."""

    def __init__(self):
        self.n = 0
        self._mean = 0.0
        self._m2 = 0.0

    def push(self, x: float) -> None:
        self.n += 1
        delta = x - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (x - self._mean)

    def row(self) -> MetricRow:
        if self.n == 0:
            return MetricRow(0.0, 0.0, 0)
        return MetricRow(self._mean, math.sqrt(self._m2 / self.n), self.n)


@dataclass
class MetricsTable:
    """Per-seed and pooled metric rows plus the raw episode records."""

    per_seed: dict = field(default_factory=dict)
    aggregate: dict = field(default_factory=dict)
    episodes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        def rows(d):
            return {k: {"mean": v.mean, "std": v.std, "n": v.n}
                    for k, v in d.items()}
        return {"per_seed": {str(s): rows(d)
                             for s, d in self.per_seed.items()},
                "aggregate": rows(self.aggregate)}


# ------------------------------------------------------------------ policies


class GreedyPolicy:
    """Masked greedy argmax over the network's expected action values."""

    def __init__(self, net: QNetwork):
        if net.state_dim != STATE_DIM or net.n_actions != N_ACTIONS:
            raise EvalError(
                f"checkpoint expects {net.state_dim} state components and "
                f"{net.n_actions} actions; the environment has "
                f"{STATE_DIM} and {N_ACTIONS}")
        self.net = net
        self._noise = net.zero_noise()

    def begin(self, env: InsertionEnv) -> None:
        pass

    def act(self, obs: np.ndarray, mask: np.ndarray) -> int:
        return select_action(self.net, self._noise, obs, mask)


class RandomPolicy:
    """Uniform choice over the currently valid actions."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def begin(self, env: InsertionEnv) -> None:
        pass

    def act(self, obs: np.ndarray, mask: np.ndarray) -> int:
        return int(self.rng.choice(np.nonzero(mask)[0]))


class PlannerPolicy:
    """Open-loop two-phase script computed once per episode.

    Phase one tilts the 3-RRS toward the lattice-rounded pose that
    points the target hole straight up; phase two walks the Delta along
    the axis-aligned segments to the hole mouth and then descends
    axially.  The queue is executed without feedback; once it is
    exhausted the policy marks time by oscillating along x until the
    episode ends on its own.
    """

    def __init__(self):
        self._queue = []
        self._pad = 0

    def begin(self, env: InsertionEnv) -> None:
        self._queue = plan_insertion(env)
        self._pad = 0

    def act(self, obs: np.ndarray, mask: np.ndarray) -> int:
        if self._queue:
            return self._queue.pop(0)
        self._pad += 1
        choice = 0 if self._pad % 2 else 1
        if not mask[choice]:
            choice = int(np.argmax(mask))
        return choice


def plan_insertion(env: InsertionEnv) -> list:
    """Action list of the two-phase script for the environment's current
    target, computed from geometry alone."""
    target = env.target
    if target is None:
        return []
    t = env.task
    aligned_cfg, _ = env.aligned_platform_pose(target)

    def repeats(delta, step, plus, minus):
        count = int(round(delta / step))
        return [plus if count > 0 else minus] * abs(count)

    plan = []
    plan += repeats(aligned_cfg.roll - env.cfg.roll, t.rot_step, 6, 7)
    plan += repeats(aligned_cfg.pitch - env.cfg.pitch, t.rot_step, 8, 9)
    plan += repeats(aligned_cfg.z - env.cfg.z, t.pos_step, 10, 11)

    mouth = env.hole_global(target, aligned_cfg)
    offset = mouth - env.pin_tip()
    plan += repeats(offset[0], t.pos_step, 0, 1)
    plan += repeats(offset[1], t.pos_step, 2, 3)
    plan += repeats(offset[2], t.pos_step, 4, 5)
    return plan


def planner_baseline(env: InsertionEnv):
    """Run the two-phase script on a freshly reset environment to its
    terminal state and return the recorded trajectory."""
    policy = PlannerPolicy()
    policy.begin(env)
    while not env.terminal:
        mask = env.valid_action_mask()
        obs = env.normalize(env.state())
        env.step(policy.act(obs, mask))
    return env.trajectory()


# ------------------------------------------------------------------ rollouts


def rollout(env: InsertionEnv, policy, reset_seed: int,
            noise_sigma: float = 0.0,
            noise_rng: np.random.Generator | None = None) -> dict:
    """One greedy episode; returns the per-episode metric record."""
    state = env.reset(seed=int(reset_seed))
    policy.begin(env)
    first_insert_t = None
    alignments = []
    while not env.terminal:
        obs = env.normalize(state)
        if noise_sigma > 0.0:
            obs = obs + noise_rng.normal(0.0, noise_sigma, size=obs.shape)
        mask = env.valid_action_mask()
        filled_before = env.filled.copy()
        out = env.step(policy.act(obs, mask))
        state = out.state
        if out.z:
            hit = int(np.nonzero(env.filled != filled_before)[0][0])
            normal = env.hole_normal_global(hit, env.cfg)
            cos_ang = float(np.dot(PIN_AXIS, -normal) / np.linalg.norm(normal))
            alignments.append(math.degrees(
                math.acos(min(1.0, max(-1.0, cos_ang)))))
            if first_insert_t is None:
                first_insert_t = out.info["t"]
    traj = env.trajectory()
    duration = env.steps_done * env.task.dt
    return {
        "reset_seed": int(reset_seed),
        "success": int(env.episode_success()),
        "success_pct": 100.0 * env.episode_success(),
        "completion_time_s":
            duration if first_insert_t is None else first_insert_t,
        "alignments_deg": alignments,
        "collisions": collision_count(traj),
        "energy": energy_proxy(traj),
        "rms_error_mm": 1000.0 * rms_path_error(traj),
        "insertions": env.n_inserted,
        "cause": env.cause,
        "duration_s": duration,
    }


def _make_policy(protocol: EvalProtocol, checkpoint, seed: int):
    if protocol.source == "checkpoint":
        if checkpoint is None:
            raise EvalError("checkpoint source needs a checkpoint")
        net = checkpoint if isinstance(checkpoint, QNetwork) \
            else QNetwork.load(checkpoint)[0]
        return GreedyPolicy(net)
    if protocol.source == "planner":
        return PlannerPolicy()
    return RandomPolicy(np.random.default_rng(
        np.random.SeedSequence((1009, seed))))


def evaluate(cfg: RunConfig, protocol: EvalProtocol,
             checkpoint=None) -> MetricsTable:
    """Run the protocol and aggregate the six metrics.

    ``checkpoint`` is a saved-network path or an in-memory network and
    is required for the checkpoint source.  Episode reset seeds are
    drawn per evaluation seed from fixed streams, so two calls with the
    same arguments see identical episodes.
    """
    protocol.validate()
    table = MetricsTable()
    pooled = {m: Welford() for m in METRIC_NAMES}
    for seed in range(protocol.seeds):
        policy = _make_policy(protocol, checkpoint, seed)
        env = InsertionEnv(cfg.delta, cfg.rrs, cfg.task)
        reset_rng = np.random.default_rng(np.random.SeedSequence((211, seed)))
        noise_rng = np.random.default_rng(np.random.SeedSequence((223, seed)))
        per_seed = {m: Welford() for m in METRIC_NAMES}
        for episode in range(protocol.episodes):
            rec = rollout(env, policy,
                          reset_seed=reset_rng.integers(2 ** 31),
                          noise_sigma=protocol.noise_sigma,
                          noise_rng=noise_rng)
            rec["seed"] = seed
            rec["episode"] = episode
            table.episodes.append(rec)
            for m in METRIC_NAMES:
                if m == "alignment_deg":
                    for a in rec["alignments_deg"]:
                        per_seed[m].push(a)
                        pooled[m].push(a)
                else:
                    per_seed[m].push(rec[m])
                    pooled[m].push(rec[m])
        table.per_seed[seed] = {m: w.row() for m, w in per_seed.items()}
    table.aggregate = {m: w.row() for m, w in pooled.items()}
    return table


# ------------------------------------------------------------------ ablation


ABLATION_CELLS = ("full", "no_double", "no_dueling", "no_per", "no_nstep",
                  "no_noisy", "no_distributional")
GEOMETRY_CELLS = ("geom_optimized", "geom_initial")


def _cell_config(cfg: RunConfig, cell: str, seed: int) -> RunConfig:
    train = replace(cfg.train, seed=seed)
    rrs = cfg.rrs
    if cell.startswith("no_"):
        train = replace(train, **{cell[3:]: False})
    elif cell == "geom_initial":
        rrs = RrsGeometry()
    return replace(cfg, train=train, rrs=rrs)


def steps_to_threshold(records: list) -> int | None:
    """First global step whose trailing-window success rate reaches the
    learning threshold, or None if the run never gets there."""
    window = []
    for rec in records:
        window.append(rec["success"])
        if len(window) > THRESHOLD_WINDOW:
            window.pop(0)
        if (len(window) == THRESHOLD_WINDOW
                and sum(window) / THRESHOLD_WINDOW >= THRESHOLD_SUCCESS):
            return rec["global_step"]
    return None


def _train_cell(cfg: RunConfig, out: Path) -> dict:
    run_training(cfg, out)
    summary = json.loads((out / "train_summary.json").read_text())
    records = [json.loads(line) for line in
               (out / "episodes.jsonl").read_text().splitlines()]
    causes = summary["causes"]
    return {
        "seed": cfg.train.seed,
        "success_rate_last20": summary["success_rate_last20"],
        "mean_reward": summary["mean_reward"],
        "steps_to_threshold": steps_to_threshold(records),
        "violation_steps": summary["violation_steps"],
        "bad_terminations": causes.get("singular", 0)
                            + causes.get("deadend", 0),
        "fault": None,
    }


def run_ablation_suite(cfg: RunConfig, seeds=(0, 1, 2, 3, 4),
                       out_dir=None, include_geometry: bool = True,
                       cells=None) -> dict:
    """Train the full agent, six single-component removals, and (when
    requested) both 3-RRS geometries under identical seeds and budget.

    ``cells`` restricts the run to a subset of cell names.  Returns a
    nested table keyed by cell name; a training fault in one cell-seed
    leaves a gap (``fault`` message, metrics None) instead of aborting
    the suite.  Identical configs and seeds reproduce the table exactly.
    """
    tmp = None
    if out_dir is None:
        tmp = tempfile.mkdtemp(prefix="ablation_")
        out_dir = tmp
    out_dir = Path(out_dir)
    if cells is None:
        cells = list(ABLATION_CELLS) + (
            list(GEOMETRY_CELLS) if include_geometry else [])
    else:
        known = set(ABLATION_CELLS) | set(GEOMETRY_CELLS)
        unknown = [c for c in cells if c not in known]
        if unknown:
            raise EvalError(f"unknown ablation cells {unknown}")
    table = {"budget": cfg.train.total_steps, "seeds": list(seeds),
             "cells": {}}
    try:
        for cell in cells:
            rows = []
            for seed in seeds:
                cell_cfg = _cell_config(cfg, cell, seed)
                cell_out = out_dir / cell / f"seed{seed}"
                try:
                    rows.append(_train_cell(cell_cfg, cell_out))
                except (RuntimeError, FloatingPointError,
                        ValueError) as exc:
                    rows.append({"seed": seed, "success_rate_last20": None,
                                 "mean_reward": None,
                                 "steps_to_threshold": None,
                                 "violation_steps": None,
                                 "bad_terminations": None,
                                 "fault": str(exc)})
            ok = [r for r in rows if r["fault"] is None]
            table["cells"][cell] = {
                "per_seed": rows,
                "mean_success":
                    (sum(r["success_rate_last20"] for r in ok) / len(ok)
                     if ok else None),
                "faults": sum(1 for r in rows if r["fault"] is not None),
            }
    finally:
        if tmp is not None:
            shutil.rmtree(tmp, ignore_errors=True)
    return table


def write_metrics_csv(table: MetricsTable, path) -> None:
    """Per-episode records as CSV, one row per episode."""
    cols = ["seed", "episode", "reset_seed", "success", "completion_time_s",
            "collisions", "energy", "rms_error_mm", "insertions",
            "cause", "duration_s", "alignments_deg"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in table.episodes:
            row = [rec[c] if c != "alignments_deg"
                   else ";".join(f"{a:.6f}" for a in rec[c])
                   for c in cols]
            writer.writerow(row)
