"""Cooperative peg-in-hole MDP.

The Delta arm carries a downward pin; the 3-RRS platform carries a dome
with target holes.  The 12 discrete actions jog one degree of freedom of
one robot per step.  Episodes end when every active hole is filled, the
step budget runs out, the agent is boxed in with no valid action, or an
executed platform move lands on a badly conditioned configuration.

Conventions: all global quantities (hole positions, normals, pin tip)
live in the Delta base frame.  The 3-RRS base is shifted down by a fixed
mounting offset so the dome apex at the platform home pose sits a small
clearance below the lowest reachable Delta platform position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import TaskConfig
from .kinematics import (
    DeltaParams,
    RrsConfig,
    RrsGeometry,
    delta_ik_batch,
    delta_inverse_kinematics,
    delta_workspace_contains,
    min_singular_value,
    rotation_rpy,
    rrs_jacobian,
    rrs_limb_angles,
    rrs_limb_angles_batch,
)

N_ACTIONS = 12
STATE_DIM = 12
PIN_AXIS = np.array([0.0, 0.0, -1.0])
_BOX_TOL = 1e-12

# Action table: index -> (dof, direction).  DoFs 0..2 translate the Delta
# platform, 3..5 move the 3-RRS (roll, pitch, heave).
ACTION_DOF = np.repeat(np.arange(6), 2)
ACTION_SIGN = np.array([+1.0, -1.0] * 6)

ACTION_NAMES = (
    "dx+", "dx-", "dy+", "dy-", "dz+", "dz-",
    "roll+", "roll-", "pitch+", "pitch-", "zr+", "zr-",
)


def shaped_reward(v: int, z: int, u: int, n_inserted: int, t: float,
                  d: float, d_prev: float, t_task: float = 60.0) -> float:
    """Per-step reward.

    v/z/u are the mutually exclusive violation, new-insertion and
    duplicate-insertion indicators; n_inserted counts insertions so far
    including the current one; t is episode time in seconds; d and d_prev
    are the current and previous pin-to-target distances.
    """
    if v:
        return -3.0
    if z:
        return 150.0 + 25.0 * n_inserted + 80.0 * (1.0 - t / t_task)
    if u:
        return -1.0
    delta_d = d_prev - d
    return (-0.01 - d + 50.0 * max(delta_d, 0.0)
            + 200.0 * max(0.03 - d, 0.0))


def insertion_check(p_pin, h_target, n_target, pin_axis=PIN_AXIS,
                    pos_tol: float = 0.005, ang_tol_deg: float = 2.0) -> bool:
    """True iff the pin tip is within pos_tol of the hole centre and the
    pin axis is within ang_tol of the inward hole direction."""
    if np.linalg.norm(np.asarray(p_pin) - np.asarray(h_target)) > pos_tol:
        return False
    cos_ang = float(np.dot(pin_axis, -np.asarray(n_target)))
    cos_ang /= float(np.linalg.norm(pin_axis) * np.linalg.norm(n_target))
    return cos_ang >= math.cos(math.radians(ang_tol_deg))


def curriculum_update(history, stage: int, window: int = 20,
                      threshold: float = 0.75) -> int:
    """Advance stage 0 -> 1 when the trailing-window success rate is
    strictly above the threshold; never regress."""
    if stage >= 1:
        return stage
    if len(history) < window:
        return stage
    rate = sum(history[-window:]) / window
    return 1 if rate > threshold else stage


@dataclass
class StepOutcome:
    reward: float
    state: np.ndarray
    terminal: bool
    v: int = 0
    z: int = 0
    u: int = 0
    cause: str = ""          # "", "complete", "timeout", "deadend", "singular"
    info: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    """Per-episode motion record plus the geometry the metrics need."""

    times: list = field(default_factory=list)
    pin_tips: list = field(default_factory=list)
    delta_joints: list = field(default_factory=list)
    rrs_joints: list = field(default_factory=list)
    rrs_configs: list = field(default_factory=list)
    dome_radius: float = 0.15
    hole_radius: float = 0.01
    holes_platform: np.ndarray = None
    dome_offset_z: float = 0.0
    reference_start: np.ndarray = None
    reference_end: np.ndarray = None


def collision_count(traj: Trajectory) -> int:
    """Entries of the pin tip into the dome shell outside every hole disc.

    A sample collides when the tip is inside the dome sphere, on the
    dome-side half in the platform frame, and farther than the hole
    radius from every hole centre.  A run of consecutive colliding
    samples counts as one entry.
    """
    count = 0
    inside_prev = False
    for tip, cfg in zip(traj.pin_tips, traj.rrs_configs):
        centre = np.array([0.0, 0.0, cfg[2] + traj.dome_offset_z])
        rel = np.asarray(tip) - centre
        rot = rotation_rpy(cfg[0], cfg[1])
        inside = (np.linalg.norm(rel) < traj.dome_radius) and (rot.T @ rel)[2] > 0.0
        if inside:
            holes_g = (rot @ traj.holes_platform.T).T + centre
            if np.min(np.linalg.norm(holes_g - tip, axis=1)) <= traj.hole_radius:
                inside = False
        if inside and not inside_prev:
            count += 1
        inside_prev = inside
    return count


def energy_proxy(traj: Trajectory) -> float:
    """Sum over samples of squared joint-rate magnitude times dt, both
    robots' active joints together."""
    total = 0.0
    for k in range(1, len(traj.times)):
        dt = traj.times[k] - traj.times[k - 1]
        if dt <= 0.0:
            continue
        dphi = np.asarray(traj.delta_joints[k]) - np.asarray(traj.delta_joints[k - 1])
        dth = np.asarray(traj.rrs_joints[k]) - np.asarray(traj.rrs_joints[k - 1])
        total += (float(dphi @ dphi) + float(dth @ dth)) / dt
    return total


def rms_path_error(traj: Trajectory) -> float:
    """RMS distance of the pin tip from the straight reference segment
    (initial tip to the first target hole, both frozen at reset)."""
    a = np.asarray(traj.reference_start, dtype=float)
    b = np.asarray(traj.reference_end, dtype=float)
    ab = b - a
    denom = float(ab @ ab)
    total = 0.0
    for tip in traj.pin_tips:
        tip = np.asarray(tip, dtype=float)
        s = 0.0 if denom == 0.0 else float(np.clip((tip - a) @ ab / denom, 0.0, 1.0))
        total += float(np.sum((tip - (a + s * ab)) ** 2))
    return math.sqrt(total / max(len(traj.pin_tips), 1))


class InsertionEnv:
    """Single-owner environment instance; see module docstring."""

    def __init__(self, delta: DeltaParams, rrs: RrsGeometry, task: TaskConfig):
        task.validate()
        self.delta = delta
        self.rrs = rrs
        self.task = task
        self.z_home = 0.5 * (rrs.h_min + rrs.h_max)
        # Mounting: dome apex at the home pose = lowest Delta platform
        # position minus the apex clearance.
        self.dome_offset_z = (-(delta.active_rod_len + delta.passive_rod_len)
                              - task.apex_clearance - self.z_home
                              - task.dome_radius)
        colat = np.radians(np.asarray(task.hole_colat_deg, dtype=float))
        azim = np.radians(np.asarray(task.hole_azim_deg, dtype=float))
        self.hole_normals_p = np.column_stack(
            [np.sin(colat) * np.cos(azim),
             np.sin(colat) * np.sin(azim),
             np.cos(colat)]
        )
        self.holes_p = task.dome_radius * self.hole_normals_p
        self.n_holes = len(self.holes_p)
        self.c0 = tuple(int(i) for i in task.c0_holes)
        self._anchor = self._insertion_anchor()
        self._norm_lo, self._norm_hi = self._normalization_bounds()
        self.stage = 0
        self.success_history = []
        self._rng = np.random.default_rng(0)
        self._episode_active = False
        self._mask = None

    # ------------------------------------------------------------ geometry

    def aligned_platform_pose(self, hole: int):
        """Lattice-rounded 3-RRS pose that points the hole normal up, and
        the Delta platform position placing the pin tip at the hole centre
        under that pose."""
        nx, ny, _ = self.hole_normals_p[hole]
        roll = math.asin(ny)
        pitch = math.asin(-nx / math.cos(roll))
        step = self.task.rot_step
        cfg = RrsConfig(step * round(roll / step), step * round(pitch / step),
                        self.z_home)
        platform = self.hole_global(hole, cfg) + np.array(
            [0.0, 0.0, self.delta.pin_length])
        return cfg, platform

    def hole_global(self, hole: int, cfg: RrsConfig) -> np.ndarray:
        rot = rotation_rpy(cfg.roll, cfg.pitch)
        return rot @ self.holes_p[hole] + np.array(
            [0.0, 0.0, cfg.z + self.dome_offset_z])

    def hole_normal_global(self, hole: int, cfg: RrsConfig) -> np.ndarray:
        return rotation_rpy(cfg.roll, cfg.pitch) @ self.hole_normals_p[hole]

    def _insertion_anchor(self) -> np.ndarray:
        """Delta-platform anchor of the reset lattice.

        Anchored at the aligned insertion pose of the first always-active
        hole so that insertion poses stay reachable on the discrete
        action lattice; a free-floating start could strand the tip up to
        half a diagonal cell (~17 mm) from every hole mouth, beyond the
        insertion tolerance.
        """
        cfg, platform = self.aligned_platform_pose(self.c0[0])
        if not delta_workspace_contains(platform, self.delta):
            raise ValueError("insertion anchor outside the Delta workspace")
        if delta_inverse_kinematics(platform, self.delta) is None:
            raise ValueError("insertion anchor is not IK-solvable")
        if rrs_limb_angles(cfg, self.rrs) is None:
            raise ValueError("aligned platform pose is not reachable")
        return platform

    def _normalization_bounds(self):
        d, r, t = self.delta, self.rrs, self.task
        r_max = 0.8 * min(d.active_rod_len, d.passive_rod_len)
        z_lo = -(d.active_rod_len + d.passive_rod_len)
        z_hi = -(d.active_rod_len - d.passive_rod_len)
        pin_lo, pin_hi = z_lo - d.pin_length, z_hi - d.pin_length
        hz_lo = r.h_min + self.dome_offset_z - t.dome_radius
        hz_hi = r.h_max + self.dome_offset_z + t.dome_radius
        lo = np.array([
            -r_max, -r_max, z_lo,
            -math.pi / 4, -math.pi / 4, r.h_min,
            -t.dome_radius - r_max, -t.dome_radius - r_max, hz_lo - pin_hi,
            -1.0, -1.0, -1.0,
        ])
        hi = np.array([
            r_max, r_max, z_hi,
            math.pi / 4, math.pi / 4, r.h_max,
            t.dome_radius + r_max, t.dome_radius + r_max, hz_hi - pin_lo,
            1.0, 1.0, 1.0,
        ])
        return lo, hi

    def normalize(self, state: np.ndarray) -> np.ndarray:
        return (state - self._norm_lo) / (self._norm_hi - self._norm_lo)

    # ----------------------------------------------------------- lifecycle

    def reset(self, seed=None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        t = self.task
        for _ in range(100):
            ij = self._rng.integers(-t.reset_xy_span, t.reset_xy_span + 1, size=2)
            k = self._rng.integers(t.reset_z_min, t.reset_z_max + 1)
            pose = self._anchor + t.pos_step * np.array([ij[0], ij[1], k])
            if delta_workspace_contains(pose, self.delta) and \
                    delta_inverse_kinematics(pose, self.delta) is not None:
                break
        else:
            raise RuntimeError("no valid reset pose found in 100 samples")
        self.p = pose
        self.cfg = RrsConfig(0.0, 0.0, self.z_home)
        self._mask = None
        self.filled = np.zeros(self.n_holes, dtype=bool)
        self.steps_done = 0
        self.n_inserted = 0
        self.violation_count = 0
        self.terminal = False
        self.cause = ""
        self._episode_active = True
        self._select_target()
        self.d_prev = self._target_distance()
        self._traj = Trajectory(
            dome_radius=t.dome_radius,
            hole_radius=t.hole_radius,
            holes_platform=self.holes_p,
            dome_offset_z=self.dome_offset_z,
            reference_start=self.pin_tip(),
            reference_end=self.hole_global(self.target, self.cfg),
        )
        self._record()
        return self.state()

    def active_holes(self):
        if self.stage == 0:
            return list(self.c0)
        return list(range(self.n_holes))

    def _select_target(self) -> None:
        tip = self.pin_tip()
        best, best_d = None, np.inf
        for i in self.active_holes():
            if self.filled[i]:
                continue
            d = float(np.linalg.norm(self.hole_global(i, self.cfg) - tip))
            if d < best_d:
                best, best_d = i, d
        self.target = best  # None once every active hole is filled

    def pin_tip(self) -> np.ndarray:
        return self.p + np.array([0.0, 0.0, -self.delta.pin_length])

    def _target_distance(self) -> float:
        if self.target is None:
            return 0.0
        return float(np.linalg.norm(
            self.hole_global(self.target, self.cfg) - self.pin_tip()))

    def state(self) -> np.ndarray:
        if self.target is None:
            e_rel = np.zeros(3)
            n = np.array([0.0, 0.0, 1.0])
        else:
            e_rel = self.hole_global(self.target, self.cfg) - self.pin_tip()
            n = self.hole_normal_global(self.target, self.cfg)
        return np.concatenate([
            self.p,
            [self.cfg.roll, self.cfg.pitch, self.cfg.z],
            e_rel,
            n,
        ])

    # ------------------------------------------------------------- masking

    def valid_action_mask(self) -> np.ndarray:
        if self._mask is None:
            t = self.task
            deltas = np.zeros((6, 3))
            deltas[[0, 1], 0] = (t.pos_step, -t.pos_step)
            deltas[[2, 3], 1] = (t.pos_step, -t.pos_step)
            deltas[[4, 5], 2] = (t.pos_step, -t.pos_step)
            delta_poses = self.p[None, :] + deltas
            _, ok = delta_ik_batch(delta_poses, self.delta)
            mask = np.zeros(N_ACTIONS, dtype=bool)
            for k in range(6):
                mask[k] = ok[k] and delta_workspace_contains(
                    delta_poses[k], self.delta)
            c = self.cfg
            rr = np.array([c.roll + t.rot_step, c.roll - t.rot_step,
                           c.roll, c.roll, c.roll, c.roll])
            pp = np.array([c.pitch, c.pitch,
                           c.pitch + t.rot_step, c.pitch - t.rot_step,
                           c.pitch, c.pitch])
            zz = np.array([c.z, c.z, c.z, c.z,
                           c.z + t.pos_step, c.z - t.pos_step])
            _, closes = rrs_limb_angles_batch(rr, pp, zz, self.rrs)
            box = (np.maximum(np.abs(rr), np.abs(pp)) <= math.pi / 4 + _BOX_TOL) \
                & (self.rrs.h_min - _BOX_TOL <= zz) \
                & (zz <= self.rrs.h_max + _BOX_TOL)
            mask[6:] = closes & box
            self._mask = mask
        return self._mask.copy()

    def valid_actions(self) -> set:
        return set(int(a) for a in np.nonzero(self.valid_action_mask())[0])

    # ---------------------------------------------------------------- step

    def step(self, action: int) -> StepOutcome:
        if not self._episode_active or self.terminal:
            raise RuntimeError("step on a finished episode")
        t = self.task
        t_now = self.steps_done * t.dt
        dof = int(ACTION_DOF[action])
        sign = float(ACTION_SIGN[action])

        new_p = self.p.copy()
        new_cfg = self.cfg
        if dof < 3:
            new_p[dof] += sign * t.pos_step
            valid = delta_workspace_contains(new_p, self.delta) and \
                delta_inverse_kinematics(new_p, self.delta) is not None
        else:
            vals = [self.cfg.roll, self.cfg.pitch, self.cfg.z]
            vals[dof - 3] += sign * (t.rot_step if dof < 5 else t.pos_step)
            new_cfg = RrsConfig(*vals)
            valid = (max(abs(new_cfg.roll), abs(new_cfg.pitch))
                     <= math.pi / 4 + _BOX_TOL
                     and self.rrs.h_min - _BOX_TOL <= new_cfg.z
                     <= self.rrs.h_max + _BOX_TOL
                     and rrs_limb_angles(new_cfg, self.rrs) is not None)

        v = z = u = 0
        cause = ""
        sigma = None
        if not valid:
            v = 1
            reward = shaped_reward(1, 0, 0, self.n_inserted, t_now,
                                   0.0, 0.0, t.t_task)
        else:
            self.p = new_p
            self.cfg = new_cfg
            self._mask = None
            if dof >= 3:
                sigma = self._sigma_after_move()
                if sigma < t.sigma_terminate:
                    cause = "singular"
            tip = self.pin_tip()
            for i in np.nonzero(self.filled)[0]:
                if self._hole_hit(tip, int(i)):
                    u = 1
                    break
            hit = None
            if not u:
                order = [h for h in self.active_holes() if not self.filled[h]]
                if self.target in order:
                    order.remove(self.target)
                    order.insert(0, self.target)
                for i in order:
                    if self._hole_hit(tip, i):
                        hit = i
                        break
            if hit is not None:
                z = 1
                self.filled[hit] = True
                self.n_inserted += 1
            d = self._target_distance()
            if cause == "singular" and not (z or u):
                # Landing below the conditioning floor ends the episode
                # as a violation even though the move itself closed.
                v = 1
                reward = shaped_reward(1, 0, 0, self.n_inserted, t_now,
                                       0.0, 0.0, t.t_task)
            else:
                reward = shaped_reward(0, z, u, self.n_inserted, t_now,
                                       d, self.d_prev, t.t_task)
            if z:
                self._select_target()
                self.d_prev = self._target_distance()
            else:
                self.d_prev = d

        self.steps_done += 1
        self._record()

        if cause == "singular":
            self.terminal = True
        elif all(self.filled[i] for i in self.active_holes()):
            self.terminal, cause = True, "complete"
        elif self.steps_done >= t.t_max_steps:
            self.terminal, cause = True, "timeout"
        elif not self.valid_action_mask().any():
            self.terminal, cause = True, "deadend"
            if not (z or u):
                v = 1
                reward = shaped_reward(1, 0, 0, self.n_inserted, t_now,
                                       0.0, 0.0, t.t_task)

        if v:
            self.violation_count += 1
        if self.terminal:
            self.cause = cause
            self._episode_active = False
            self.success_history.append(1 if self.n_inserted > 0 else 0)
            self.stage = curriculum_update(
                self.success_history, self.stage,
                t.curriculum_window, t.curriculum_threshold)

        info = {"d": self.d_prev, "t": self.steps_done * t.dt}
        if sigma is not None:
            info["sigma"] = sigma
        return StepOutcome(reward, self.state(), self.terminal, v, z, u,
                           cause, info)

    def _hole_hit(self, tip, hole: int) -> bool:
        t = self.task
        return insertion_check(
            tip, self.hole_global(hole, self.cfg),
            self.hole_normal_global(hole, self.cfg),
            pos_tol=t.insert_pos_tol, ang_tol_deg=t.insert_ang_tol_deg)

    def _sigma_after_move(self) -> float:
        try:
            return min_singular_value(rrs_jacobian(self.cfg, self.rrs))
        except ValueError:
            # Valid config whose difference stencil crosses the closure
            # boundary: treat as fully degenerate.
            return 0.0

    def _record(self) -> None:
        phi = delta_inverse_kinematics(self.p, self.delta)
        theta = rrs_limb_angles(self.cfg, self.rrs)
        tr = self._traj
        tr.times.append(self.steps_done * self.task.dt)
        tr.pin_tips.append(self.pin_tip())
        tr.delta_joints.append(np.zeros(3) if phi is None else phi)
        tr.rrs_joints.append(np.zeros(3) if theta is None else theta)
        tr.rrs_configs.append((self.cfg.roll, self.cfg.pitch, self.cfg.z))

    def trajectory(self) -> Trajectory:
        return self._traj

    def episode_success(self) -> bool:
        return self.n_inserted > 0


class TracedInsertionEnv(InsertionEnv):
    """Environment reporting every step to a sink callable as a dict
    with the episode index, time, state, action, reward and events."""

    def __init__(self, delta: DeltaParams, rrs: RrsGeometry,
                 task: TaskConfig, sink):
        super().__init__(delta, rrs, task)
        self.sink = sink
        self._episode = -1

    def reset(self, seed=None) -> np.ndarray:
        state = super().reset(seed)
        self._episode += 1
        return state

    def step(self, action: int) -> StepOutcome:
        out = super().step(action)
        self.sink({
            "episode": self._episode,
            "t": self.steps_done * self.task.dt,
            "action": int(action),
            "reward": out.reward,
            "state": [float(x) for x in out.state],
            "events": {"v": out.v, "z": out.z, "u": out.u},
            "terminal": out.terminal,
            "cause": out.cause,
        })
        return out
