"""Training loop: masked action selection, distributional double-DQN
targets with categorical projection, Adam with soft target updates, and
the episode-level schedules (learning-rate decay, beta annealing,
curriculum via the environment).

Runs are deterministic for a fixed seed: the environment, exploration,
noise, and replay sampling each draw from their own child stream of one
seed sequence, and the episode log and checkpoints are byte-stable.
Exploration uses parameter noise when the noisy flag is on; with it off
(the vanilla baseline and the no-noisy ablation) an epsilon-greedy
schedule over the valid actions takes its place.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .env import N_ACTIONS, STATE_DIM, InsertionEnv
from .net import QNetwork
from .replay import NStepQueue, PrioritizedBuffer


def select_action(net: QNetwork, noise: dict, state: np.ndarray,
                  mask: np.ndarray) -> int:
    """Greedy action over expected values with invalid actions at -inf.

    Ties break toward the lowest action index.
    """
    q = net.q_values(state[None, :], noise)[0]
    return int(np.argmax(np.where(mask, q, -np.inf)))


def projection_matrix(shifts, scales, support) -> np.ndarray:
    """Per-sample matrices of the categorical projection.

    Entry (i, j) of each matrix is the fraction of source atom j's mass
    that lands on support atom i after the affine map
    ``z -> clip(shift + scale * z)``; columns sum to one, so applying a
    matrix to a distribution yields a distribution.
    """
    shifts = np.atleast_1d(np.asarray(shifts, dtype=float))
    scales = np.atleast_1d(np.asarray(scales, dtype=float))
    atoms = support.shape[0]
    dz = support[1] - support[0]
    tz = np.clip(shifts[:, None] + scales[:, None] * support[None, :],
                 support[0], support[-1])
    b = (tz - support[0]) / dz
    low = np.minimum(np.floor(b).astype(int), atoms - 1)
    frac = b - low
    high = np.minimum(low + 1, atoms - 1)
    batch = shifts.shape[0]
    mats = np.zeros((batch, atoms, atoms))
    rows = np.repeat(np.arange(batch), atoms)
    src = np.tile(np.arange(atoms), batch)
    np.add.at(mats, (rows, low.ravel(), src), (1.0 - frac).ravel())
    np.add.at(mats, (rows, high.ravel(), src), frac.ravel())
    return mats


def project_distribution(dist, shifts, scales, support) -> np.ndarray:
    """Project distributions through the affine map onto the support."""
    mats = projection_matrix(shifts, scales, support)
    return np.einsum("bij,bj->bi", mats, np.atleast_2d(dist))


def identity_like_projection(atoms: int) -> np.ndarray:
    return np.eye(atoms)


class Adam:
    """Adam with weight decay added to the gradient before the moments."""

    def __init__(self, params: dict, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        step_size = self.lr / (1.0 - self.beta1 ** self.t)
        bc2_root = np.sqrt(1.0 - self.beta2 ** self.t)
        for key, p in params.items():
            g = grads[key]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = np.sqrt(v)
            denom /= bc2_root
            denom += self.eps
            p -= step_size * m / denom


def polyak_update(target: QNetwork, online: QNetwork, tau: float) -> None:
    """Soft target update: theta_tgt <- (1 - tau) theta_tgt + tau theta.

    Written in delta form so equal parameters are a bitwise fixed point.
    """
    if tau == 1.0:
        target.copy_params_from(online)
        return
    for key, tgt in target.params.items():
        tgt += tau * (online.params[key] - tgt)


class Trainer:
    """Owns the networks, replay, optimizer, and schedules for one run."""

    def __init__(self, cfg: RunConfig, env: InsertionEnv | None = None):
        cfg.validate()
        self.cfg = cfg
        tc = cfg.train
        self.env = env if env is not None else InsertionEnv(
            cfg.delta, cfg.rrs, cfg.task)
        self.online = QNetwork(
            state_dim=STATE_DIM, n_actions=N_ACTIONS, hidden=tc.hidden,
            atoms=tc.atoms, v_min=tc.v_min, v_max=tc.v_max,
            dueling=tc.dueling, noisy=tc.noisy,
            distributional=tc.distributional, seed=tc.seed)
        self.target = self.online.clone()
        self.support = self.online.support
        self.buffer = PrioritizedBuffer(
            tc.buffer_capacity, alpha=tc.effective_alpha(), eps=tc.per_eps)
        self.queue = NStepQueue(n=tc.effective_n(), gamma=tc.gamma)
        streams = np.random.SeedSequence(tc.seed).spawn(3)
        self.noise_rng = np.random.default_rng(streams[0])
        self.replay_rng = np.random.default_rng(streams[1])
        self.explore_rng = np.random.default_rng(streams[2])
        self.adam = Adam(self.online.params, lr=tc.lr,
                         weight_decay=tc.weight_decay)
        self._zero_noise = self.online.zero_noise()
        self.global_step = 0
        self.episode_idx = 0

    # ----------------------------------------------------------- schedules

    def epsilon(self) -> float:
        tc = self.cfg.train
        if tc.noisy:
            return 0.0
        frac = min(1.0, self.global_step / tc.eps_decay_steps)
        return tc.eps_start + (tc.eps_end - tc.eps_start) * frac

    def beta(self) -> float:
        tc = self.cfg.train
        frac = min(1.0, self.global_step / tc.total_steps)
        return tc.per_beta0 + (tc.per_beta1 - tc.per_beta0) * frac

    # ------------------------------------------------------------- targets

    def build_target(self, rewards, scales, next_states, next_masks):
        """Bootstrap target for a batch of n-step transitions.

        ``scales`` holds (1 - done) * gamma**horizon per sample.  With
        the double flag on, the online net (zero noise) selects the
        bootstrap action and the target net evaluates it; with it off
        the target net does both.  Returns the per-sample target needed
        by the configured loss: projected distributions for ``huber``
        and ``xent``, (targets, prediction-projection matrices) for
        ``huber-proj-pred``, and scalars for the plain head.
        """
        tc = self.cfg.train
        rows = np.arange(next_states.shape[0])
        out_tgt = self.target.forward(next_states, self._zero_noise)
        if tc.distributional:
            q_tgt = out_tgt @ self.support
        else:
            q_tgt = out_tgt
        if tc.double:
            q_sel = self.online.q_values(next_states, self._zero_noise)
        else:
            q_sel = q_tgt
        a_star = np.argmax(np.where(next_masks, q_sel, -np.inf), axis=1)
        if not tc.distributional:
            return rewards + scales * q_tgt[rows, a_star]
        dist_next = out_tgt[rows, a_star]
        if tc.loss in ("huber", "xent"):
            return project_distribution(dist_next, rewards, scales,
                                        self.support)
        # Alternative operator placement: re-express the prediction on
        # the bootstrap support via the inverse map (z - r) / scale and
        # compare against the raw next-state distribution.  Collapsed
        # rows (scale 0) fall back to the standard placement: identity
        # on the prediction, point mass at the clipped return.
        live = scales > 0.0
        mats = np.broadcast_to(
            identity_like_projection(tc.atoms),
            (len(rows), tc.atoms, tc.atoms)).copy()
        targets = project_distribution(dist_next, rewards,
                                       np.zeros_like(scales), self.support)
        if np.any(live):
            mats[live] = projection_matrix(-rewards[live] / scales[live],
                                           1.0 / scales[live], self.support)
            targets[live] = dist_next[live]
        return targets, mats

    # ---------------------------------------------------------- train step

    def train_step(self) -> dict:
        """One sample / loss / update / priority / Polyak cycle."""
        tc = self.cfg.train
        idx, transitions, weights = self.buffer.sample(
            tc.batch_size, self.beta(), self.replay_rng)
        states = np.stack([t.state for t in transitions])
        actions = np.array([t.action for t in transitions])
        rewards = np.array([t.reward for t in transitions])
        next_states = np.stack([t.next_state for t in transitions])
        next_masks = np.stack([t.next_mask for t in transitions])
        scales = np.array([(1.0 - t.done) * tc.gamma ** t.horizon
                           for t in transitions])

        built = self.build_target(rewards, scales, next_states, next_masks)
        proj = None
        if tc.distributional and tc.loss == "huber-proj-pred":
            targets, proj = built
        else:
            targets = built
        batch_noise = (self.online.sample_noise(self.noise_rng)
                       if tc.noisy else self.online.zero_noise())
        grads, _, info = self.online.gradients(
            states, actions, targets, weights, batch_noise,
            loss=tc.loss, clip=tc.grad_clip, proj=proj)
        self.adam.step(self.online.params, grads)
        for key in self.online.sigma_keys():
            np.maximum(self.online.params[key], 0.0,
                       out=self.online.params[key])

        if tc.distributional:
            if tc.loss == "huber-proj-pred":
                y_scalar = np.clip(rewards + scales * (targets @ self.support),
                                   tc.v_min, tc.v_max)
            else:
                y_scalar = targets @ self.support
        else:
            y_scalar = targets
        td_errors = info["pred_q"] - y_scalar
        self.buffer.update_priorities(idx, td_errors)
        polyak_update(self.target, self.online, tc.tau)
        return {"loss": info["loss"], "max_q": info["max_q"],
                "grad_norm": info["grad_norm"], "td_errors": td_errors}

    # ------------------------------------------------------------ episodes

    def run_episode(self) -> dict | None:
        """Play one episode, training after each step once the buffer is
        warm.  Returns the episode record, or None if the step budget
        ran out mid-episode (the partial episode is not logged)."""
        tc = self.cfg.train
        env = self.env
        state = env.reset(seed=tc.seed if self.episode_idx == 0 else None)
        norm_state = env.normalize(state)
        reward_sum = 0.0
        losses, max_qs, grad_norms, noise_mags = [], [], [], []
        while True:
            if self.global_step >= tc.total_steps:
                return None
            mask = env.valid_action_mask()
            if tc.noisy:
                act_noise = self.online.sample_noise(self.noise_rng)
                noise_mags.append(self.online.noise_magnitude(act_noise))
            else:
                act_noise = self._zero_noise
            eps = self.epsilon()
            if eps > 0.0 and self.explore_rng.random() < eps:
                action = int(self.explore_rng.choice(np.flatnonzero(mask)))
            else:
                action = select_action(self.online, act_noise,
                                       norm_state, mask)
            outcome = env.step(action)
            next_norm = env.normalize(outcome.state)
            next_mask = env.valid_action_mask()
            reward_sum += outcome.reward
            for tr in self.queue.push(norm_state, action, outcome.reward,
                                      next_norm, outcome.terminal, next_mask):
                self.buffer.insert(tr)
            self.global_step += 1
            if len(self.buffer) >= max(tc.warmup, tc.batch_size):
                diag = self.train_step()
                losses.append(diag["loss"])
                max_qs.append(diag["max_q"])
                grad_norms.append(diag["grad_norm"])
            norm_state = next_norm
            if outcome.terminal:
                break
        record = {
            "episode": self.episode_idx,
            "global_step": self.global_step,
            "steps": env.steps_done,
            "duration_s": env.steps_done * self.cfg.task.dt,
            "stage": env.stage,
            "reward": reward_sum,
            "holes": env.n_inserted,
            "success": env.episode_success(),
            "cause": outcome.cause,
            "violations": env.violation_count,
            "loss": float(np.mean(losses)) if losses else None,
            "max_q": float(np.mean(max_qs)) if max_qs else None,
            "grad_norm": float(np.mean(grad_norms)) if grad_norms else None,
            "lr": self.adam.lr,
            "epsilon": self.epsilon(),
            "noise_mag": float(np.mean(noise_mags)) if noise_mags else 0.0,
        }
        self.episode_idx += 1
        self.adam.lr = max(tc.lr_floor, self.adam.lr * tc.lr_decay)
        return record


def run_training(cfg: RunConfig, out_dir, env: InsertionEnv | None = None,
                 trace=None) -> dict:
    """Train to the step budget, writing logs and checkpoints.

    ``out_dir`` receives ``checkpoint_init.bin``, ``episodes.jsonl``,
    ``checkpoint_final.bin`` and ``train_summary.json``; everything
    written is byte-stable for a fixed config.  Returns the summary
    dict.  ``trace``, when given, is called with each episode record.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, env=env)
    trainer.online.save(out / "checkpoint_init.bin",
                        meta={"global_step": 0, "episode": 0})
    records = []
    log_path = out / "episodes.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:
        while trainer.global_step < cfg.train.total_steps:
            try:
                record = trainer.run_episode()
            except FloatingPointError as exc:
                _dump_divergence(out, trainer, exc)
                raise RuntimeError(
                    f"training diverged at step {trainer.global_step}; "
                    f"diagnostics in {out / 'diverged.json'}") from exc
            if record is None:
                break
            records.append(record)
            log.write(json.dumps(record, sort_keys=True) + "\n")
            if trace is not None:
                trace(record)
    trainer.online.save(out / "checkpoint_final.bin",
                        meta={"global_step": trainer.global_step,
                              "episode": trainer.episode_idx})
    summary = summarize(cfg, records, trainer.global_step)
    with open(out / "train_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return summary


def summarize(cfg: RunConfig, records: list, global_steps: int) -> dict:
    rewards = [r["reward"] for r in records]
    quarter = max(1, len(records) // 4) if records else 0
    causes = {}
    for r in records:
        causes[r["cause"]] = causes.get(r["cause"], 0) + 1
    last20 = records[-20:]
    return {
        "seed": cfg.train.seed,
        "episodes": len(records),
        "global_steps": global_steps,
        "final_stage": records[-1]["stage"] if records else 0,
        "success_rate_last20":
            (sum(1 for r in last20 if r["success"]) / len(last20)
             if last20 else 0.0),
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "first_quartile_mean_reward":
            float(np.mean(rewards[:quarter])) if records else 0.0,
        "last_quartile_mean_reward":
            float(np.mean(rewards[-quarter:])) if records else 0.0,
        "violation_steps":
            sum(r["violations"] for r in records),
        "causes": causes,
        "final_lr": records[-1]["lr"] if records else cfg.train.lr,
        "flags": {name: getattr(cfg.train, name)
                  for name in cfg.train.ABLATION_FLAGS},
        "loss_mode": cfg.train.loss,
    }


def _dump_divergence(out: Path, trainer: Trainer, exc: Exception) -> None:
    payload = {
        "error": str(exc),
        "global_step": trainer.global_step,
        "episode": trainer.episode_idx,
        "lr": trainer.adam.lr,
        "buffer_size": len(trainer.buffer),
        "param_extrema": {
            k: [float(v.min()), float(v.max())]
            for k, v in trainer.online.params.items()},
    }
    with open(out / "diverged.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
