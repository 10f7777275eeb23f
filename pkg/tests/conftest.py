"""Shared fixtures.

The end-to-end checks (learning curves, geometry comparison, determinism,
noise robustness) all consume smoke-scale training runs.  Training is the
expensive part, so a session-scoped farm trains each (variant, seed) pair
at most once and hands the memoized artifacts to every test that asks.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import pytest

from deltarrs.config import RunConfig, TrainConfig, smoke_task, smoke_train
from deltarrs.kinematics import RrsGeometry
from deltarrs.trainer import run_training

VANILLA_OFF = {flag: False for flag in TrainConfig.ABLATION_FLAGS}


@dataclass
class SmokeRun:
    """Artifacts of one finished smoke-scale training run."""

    variant: str
    seed: int
    path: Path
    config: RunConfig
    summary: dict
    records: list = field(repr=False)
    train_seconds: float = 0.0

    @property
    def checkpoint(self) -> Path:
        return self.path / "checkpoint_final.bin"

    def success_rate(self, last=None) -> float:
        recs = self.records if last is None else self.records[-last:]
        return sum(r["success"] for r in recs) / len(recs)

    def quartile_rewards(self) -> list:
        rewards = [r["reward"] for r in self.records]
        n = len(rewards)
        edges = [i * n // 4 for i in range(5)]
        return [sum(rewards[a:b]) / max(1, b - a)
                for a, b in zip(edges, edges[1:])]

    def terminations(self, *causes) -> int:
        return sum(1 for r in self.records if r["cause"] in causes)


class SmokeRunFarm:
    """Trains named smoke-run variants on demand and memoizes the results.

    Variants: "rainbow" (all extensions, stock geometry), "vanilla"
    (every extension disabled), "optimized" (all extensions on the
    workspace-optimized platform geometry).
    """

    def __init__(self, root: Path):
        self.root = root
        self._runs = {}

    def config(self, variant: str, seed: int) -> RunConfig:
        from deltarrs.atlas import OPTIMIZED_RRS

        train = smoke_train(seed)
        rrs = RrsGeometry()
        if variant == "vanilla":
            train = replace(train, **VANILLA_OFF)
        elif variant == "optimized":
            rrs = OPTIMIZED_RRS
        elif variant != "rainbow":
            raise ValueError(f"unknown variant {variant!r}")
        return RunConfig(rrs=rrs, task=smoke_task(), train=train)

    def _train(self, variant: str, seed: int, out: Path) -> SmokeRun:
        cfg = self.config(variant, seed)
        start = time.perf_counter()
        summary = run_training(cfg, out)
        wall = time.perf_counter() - start
        with open(out / "episodes.jsonl", encoding="utf-8") as fh:
            records = [json.loads(line) for line in fh]
        return SmokeRun(variant, seed, out, cfg, summary, records, wall)

    def get(self, variant: str, seed: int) -> SmokeRun:
        key = (variant, seed)
        if key not in self._runs:
            self._runs[key] = self._train(
                variant, seed, self.root / f"{variant}_s{seed}")
        return self._runs[key]

    def fresh(self, variant: str, seed: int, name: str) -> SmokeRun:
        """Always retrains, into its own directory; never memoized."""
        return self._train(variant, seed, self.root / name)


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    return SmokeRunFarm(tmp_path_factory.mktemp("smoke_runs"))
