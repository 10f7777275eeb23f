"""Configuration model: one JSON document with sections
{delta, rrs, task, train, eval}, strict key checking, and presets.

Unknown keys are rejected with the line number where they appear, so a
typo in a hand-edited config fails loudly before any compute starts.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields

from .kinematics import DeltaParams, RrsGeometry
from .net import LOSS_MODES


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration content."""


@dataclass(frozen=True)
class TaskConfig:
    """Dome layout, timing, increments, thresholds and reset distribution.

    Holes are given in spherical coordinates on the dome (colatitude from
    the apex, azimuth about z); ``c0_holes`` lists the indices active in
    the first curriculum stage.  Reset spans are integer counts of
    position-lattice steps around the computed anchor pose.
    """

    dome_radius: float = 0.15
    hole_radius: float = 0.01
    hole_colat_deg: tuple = (0.0, 15.0, 35.0, 35.0, 35.0, 35.0)
    hole_azim_deg: tuple = (0.0, 0.0, 0.0, 90.0, 180.0, 270.0)
    c0_holes: tuple = (2, 3, 4, 5)
    apex_clearance: float = 0.05
    dt: float = 0.1
    t_max_steps: int = 1200
    t_task: float = 60.0
    pos_step: float = 0.02
    rot_step: float = 0.03
    insert_pos_tol: float = 0.005
    insert_ang_tol_deg: float = 2.0
    sigma_terminate: float = 0.15
    curriculum_window: int = 20
    curriculum_threshold: float = 0.75
    reset_xy_span: int = 5
    reset_z_min: int = 0
    reset_z_max: int = 12

    def validate(self) -> None:
        if len(self.hole_colat_deg) != len(self.hole_azim_deg):
            raise ConfigError("hole_colat_deg and hole_azim_deg lengths differ")
        n = len(self.hole_colat_deg)
        if n == 0:
            raise ConfigError("at least one hole is required")
        if not self.c0_holes:
            raise ConfigError("c0_holes must not be empty")
        for i in self.c0_holes:
            if not 0 <= int(i) < n:
                raise ConfigError(f"c0_holes index {i} out of range")
        for name in ("dome_radius", "hole_radius", "dt", "t_task",
                     "pos_step", "rot_step", "insert_pos_tol"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.t_max_steps < 1:
            raise ConfigError("t_max_steps must be >= 1")
        if not 0.0 < self.curriculum_threshold < 1.0:
            raise ConfigError("curriculum_threshold must be in (0, 1)")
        if self.reset_z_min > self.reset_z_max:
            raise ConfigError("reset_z_min must not exceed reset_z_max")


@dataclass
class TrainConfig:
    """Hyperparameters of the training loop and the six ablation flags."""

    lr: float = 1e-4
    weight_decay: float = 1e-5
    grad_clip: float = 5.0
    gamma: float = 0.99
    n_step: int = 3
    batch_size: int = 64
    tau: float = 1e-3
    atoms: int = 51
    v_min: float = -10.0
    v_max: float = 200.0
    hidden: tuple = (256, 128, 64)
    buffer_capacity: int = 1_000_000
    per_alpha: float = 0.6
    per_beta0: float = 0.4
    per_beta1: float = 1.0
    per_eps: float = 1e-3
    warmup: int = 1000
    total_steps: int = 100_000
    lr_decay: float = 0.999
    lr_floor: float = 1e-5
    loss: str = "huber"
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 10_000
    double: bool = True
    dueling: bool = True
    per: bool = True
    nstep: bool = True
    noisy: bool = True
    distributional: bool = True
    seed: int = 0

    ABLATION_FLAGS = ("double", "dueling", "per", "nstep", "noisy", "distributional")

    def effective_n(self) -> int:
        return self.n_step if self.nstep else 1

    def effective_alpha(self) -> float:
        return self.per_alpha if self.per else 0.0

    def validate(self) -> None:
        for name in ("lr", "grad_clip", "gamma", "tau", "batch_size",
                     "atoms", "n_step", "buffer_capacity"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.v_min >= self.v_max:
            raise ConfigError("v_min must be below v_max")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")


@dataclass
class EvalConfig:
    episodes: int = 100
    seeds: tuple = (0, 1, 2, 3, 4)
    noise_sigma: float = 0.0

    def validate(self) -> None:
        if self.episodes < 1 or len(self.seeds) < 1:
            raise ConfigError("episodes and seeds must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass
class RunConfig:
    delta: DeltaParams = field(default_factory=DeltaParams)
    rrs: RrsGeometry = field(default_factory=RrsGeometry)
    task: TaskConfig = field(default_factory=TaskConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.rrs.base_radius <= self.rrs.platform_radius:
            raise ConfigError("rrs base_radius must exceed platform_radius")
        if self.rrs.h_min >= self.rrs.h_max:
            raise ConfigError("rrs h_min must be below h_max")
        for name in ("active_rod_len", "passive_rod_len", "base_radius",
                     "platform_radius"):
            if getattr(self.delta, name) <= 0:
                raise ConfigError(f"delta {name} must be positive")
        if self.delta.pin_length < 0:
            raise ConfigError("delta pin_length must be >= 0")
        self.task.validate()
        self.train.validate()
        self.eval.validate()


_SECTIONS = {
    "delta": DeltaParams,
    "rrs": RrsGeometry,
    "task": TaskConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}

# JSON has no tuples; these fields are given as lists and converted.
_TUPLE_FIELDS = {"hole_colat_deg", "hole_azim_deg", "c0_holes", "hidden", "seeds"}


def _key_line(text: str, key: str) -> int:
    """1-based line of the first occurrence of a quoted key, 0 if absent."""
    pos = text.find(f'"{key}"')
    if pos < 0:
        return 0
    return text.count("\n", 0, pos) + 1


def _build_section(cls, data: dict, text: str, section: str):
    allowed = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in allowed:
            line = _key_line(text, key)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"unknown key {key!r} in section {section!r}{where}")
        if key in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section {section!r}: {exc}") from exc


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON config document."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    cfg = RunConfig()
    for key, value in data.items():
        if key not in _SECTIONS:
            line = _key_line(text, key)
            where = f" (line {line})" if line else ""
            raise ConfigError(f"unknown section {key!r}{where}")
        if not isinstance(value, dict):
            raise ConfigError(f"section {key!r} must be a JSON object")
        setattr(cfg, key, _build_section(_SECTIONS[key], value, text, key))
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to its JSON document form."""
    doc = {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}
    for section in doc.values():
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
    return json.dumps(doc, indent=2, sort_keys=True)


def smoke_task() -> TaskConfig:
    """Two facing near-apex holes, short episodes, and a tight reset box:
    the layout used by the quick training checks.

    The colatitude is 1.5 degrees, which keeps the flat home platform
    inside the 2-degree axis tolerance, and the hole centre sits 3.4 mm
    from the nearest reset-lattice point, inside the 5 mm position
    window.  Shaped position descent alone can therefore complete an
    insertion, which is what makes learning visible within a 10^4-step
    budget; tilting the platform one rotation step tightens the axis
    error further but is not required.
    """
    return TaskConfig(
        hole_colat_deg=(1.5, 1.5),
        hole_azim_deg=(0.0, 180.0),
        c0_holes=(0, 1),
        hole_radius=0.003,
        t_max_steps=120,
        reset_xy_span=2,
        reset_z_min=0,
        reset_z_max=4,
    )


def smoke_train(seed: int = 0, **overrides) -> TrainConfig:
    """Training hyperparameters for the 10^4-step smoke budget.

    The full-scale defaults assume hundreds of thousands of steps; at
    smoke scale the target network must track faster (tau 0.05 instead
    of 1e-3) and the optimiser can run hotter (lr 1e-3), with the
    cross-entropy distributional loss for its stronger gradients.  A
    short warmup leaves most of the budget for learning.
    """
    base = dict(seed=seed, total_steps=10_000, warmup=300,
                lr=1e-3, tau=0.05, loss="xent")
    base.update(overrides)
    return TrainConfig(**base)
