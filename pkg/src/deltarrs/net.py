"""Q-network with dueling, distributional, and noisy-linear options.

Hand-rolled on numpy with analytic gradients so the backward pass can be
cross-checked against a finite-difference oracle.  The backbone is three
dense blocks (256, 128, 64 by default) with rectifier activations; the
last hidden layer and both output streams are noisy-linear (factorized
Gaussian) when the noisy flag is on.  The distributional head emits, per
action, a categorical distribution over a fixed value support; the
scalar head emits plain Q-values.

Loss modes on the distributional head:

* ``huber``          per-atom Huber against the projected target,
* ``xent``           cross-entropy against the projected target,
* ``huber-proj-pred``  per-atom Huber with the shift projection applied
  to the prediction instead, compared against the raw bootstrap
  distribution (the alternative operator placement).

The scalar head always uses a Huber loss on Q minus target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

LOSS_MODES = ("huber", "xent", "huber-proj-pred")

_MAGIC = b"DRSNET01"


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str        # "dense" | "noisy"
    fan_in: int
    fan_out: int


def value_support(v_min: float, v_max: float, atoms: int) -> np.ndarray:
    return np.linspace(v_min, v_max, atoms)


def expected_value(dist: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Mean of a categorical value distribution; broadcasts over leading
    axes."""
    return np.asarray(dist) @ np.asarray(support)


def _factorized(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.sqrt(np.abs(x))


def _huber(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax <= 1.0, 0.5 * x * x, ax - 0.5)


def _huber_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


class QNetwork:
    """Feed-forward Q-network over normalized 12-component states."""

    def __init__(self, state_dim: int = 12, n_actions: int = 12,
                 hidden=(256, 128, 64), atoms: int = 51,
                 v_min: float = -10.0, v_max: float = 200.0,
                 dueling: bool = True, noisy: bool = True,
                 distributional: bool = True, seed: int = 0):
        self.state_dim = int(state_dim)
        self.n_actions = int(n_actions)
        self.hidden = tuple(int(h) for h in hidden)
        self.atoms = int(atoms)
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.dueling = bool(dueling)
        self.noisy = bool(noisy)
        self.distributional = bool(distributional)
        self.support = value_support(self.v_min, self.v_max, self.atoms)

        per_action = self.atoms if self.distributional else 1
        self._arch = []
        fan = self.state_dim
        for i, width in enumerate(self.hidden):
            last_hidden = i == len(self.hidden) - 1
            kind = "noisy" if (self.noisy and last_hidden) else "dense"
            self._arch.append(LayerSpec(f"h{i}", kind, fan, width))
            fan = width
        head_kind = "noisy" if self.noisy else "dense"
        if self.dueling:
            self._arch.append(LayerSpec("v", head_kind, fan, per_action))
        self._arch.append(
            LayerSpec("a", head_kind, fan, self.n_actions * per_action))

        self.params = {}
        rng = np.random.default_rng(seed)
        for spec in self._arch:
            bound = 1.0 / np.sqrt(spec.fan_in)
            w = rng.uniform(-bound, bound, size=(spec.fan_out, spec.fan_in))
            b = rng.uniform(-bound, bound, size=spec.fan_out)
            if spec.kind == "noisy":
                self.params[f"{spec.name}.Wmu"] = w
                self.params[f"{spec.name}.bmu"] = b
                sigma0 = 0.5 / np.sqrt(spec.fan_in)
                self.params[f"{spec.name}.Wsig"] = np.full_like(w, sigma0)
                self.params[f"{spec.name}.bsig"] = np.full_like(b, sigma0)
            else:
                self.params[f"{spec.name}.W"] = w
                self.params[f"{spec.name}.b"] = b

    # ------------------------------------------------------------- cloning

    def clone(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.__dict__.update({
            k: v for k, v in self.__dict__.items() if k != "params"})
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def copy_params_from(self, other: "QNetwork") -> None:
        for k, v in other.params.items():
            self.params[k][...] = v

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def sigma_keys(self):
        return [k for k in self.params if k.endswith("sig")]

    # --------------------------------------------------------------- noise

    def noisy_layers(self):
        return [s for s in self._arch if s.kind == "noisy"]

    def sample_noise(self, rng: np.random.Generator) -> dict:
        noise = {}
        for spec in self.noisy_layers():
            eps_in = rng.standard_normal(spec.fan_in)
            eps_out = rng.standard_normal(spec.fan_out)
            noise[spec.name] = (_factorized(eps_in), _factorized(eps_out))
        return noise

    def zero_noise(self) -> dict:
        return {spec.name: (np.zeros(spec.fan_in), np.zeros(spec.fan_out))
                for spec in self.noisy_layers()}

    def noise_magnitude(self, noise: dict) -> float:
        total = 0.0
        for spec in self.noisy_layers():
            f_in, f_out = noise[spec.name]
            w = self.params[f"{spec.name}.Wsig"] * np.outer(f_out, f_in)
            b = self.params[f"{spec.name}.bsig"] * f_out
            total += float(np.sum(w * w) + np.sum(b * b))
        return float(np.sqrt(total))

    def _effective(self, spec: LayerSpec, noise: dict):
        if spec.kind == "dense":
            return self.params[f"{spec.name}.W"], self.params[f"{spec.name}.b"]
        f_in, f_out = noise[spec.name]
        if not f_out.any() and not f_in.any():
            # zero noise: the sigma terms vanish, skip the outer product
            return self.params[f"{spec.name}.Wmu"], self.params[f"{spec.name}.bmu"]
        w = self.params[f"{spec.name}.Wmu"] \
            + self.params[f"{spec.name}.Wsig"] * np.outer(f_out, f_in)
        b = self.params[f"{spec.name}.bmu"] \
            + self.params[f"{spec.name}.bsig"] * f_out
        return w, b

    # ------------------------------------------------------------- forward

    def _forward_full(self, states: np.ndarray, noise: dict):
        x = np.atleast_2d(np.asarray(states, dtype=float))
        cache = {"inputs": [], "pre": [], "weights": []}
        h = x
        n_hidden = len(self.hidden)
        for spec in self._arch[:n_hidden]:
            w, b = self._effective(spec, noise)
            z = h @ w.T + b
            cache["inputs"].append(h)
            cache["pre"].append(z)
            cache["weights"].append(w)
            h = np.maximum(z, 0.0)
        cache["features"] = h
        head_specs = self._arch[n_hidden:]
        head_out = {}
        for spec in head_specs:
            w, b = self._effective(spec, noise)
            head_out[spec.name] = h @ w.T + b
            cache[f"W.{spec.name}"] = w
        a_lin = head_out["a"]
        batch = a_lin.shape[0]
        if self.distributional:
            a_logits = a_lin.reshape(batch, self.n_actions, self.atoms)
            if self.dueling:
                logits = (head_out["v"][:, None, :] + a_logits
                          - a_logits.mean(axis=1, keepdims=True))
            else:
                logits = a_logits
            shifted = logits - logits.max(axis=2, keepdims=True)
            expl = np.exp(shifted)
            probs = expl / expl.sum(axis=2, keepdims=True)
            cache["probs"] = probs
            out = probs
        else:
            if self.dueling:
                out = head_out["v"] + a_lin - a_lin.mean(axis=1, keepdims=True)
            else:
                out = a_lin
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("non-finite network output")
        return out, cache

    def forward(self, states: np.ndarray, noise: dict) -> np.ndarray:
        """Distributions (B, actions, atoms) in distributional mode, else
        Q-values (B, actions)."""
        return self._forward_full(states, noise)[0]

    def q_values(self, states: np.ndarray, noise: dict) -> np.ndarray:
        out = self.forward(states, noise)
        if self.distributional:
            return expected_value(out, self.support)
        return out

    # ------------------------------------------------------------ backward

    def gradients(self, states, actions, targets, weights, noise,
                  loss: str = "huber", clip=5.0, proj=None):
        """Analytic gradients of the weighted loss over a batch.

        ``targets`` holds per-sample target distributions (B, atoms) in
        distributional mode or scalar targets (B,) otherwise; ``proj``
        supplies per-sample projection matrices (B, atoms, atoms) for the
        ``huber-proj-pred`` mode.  Returns (gradient dict, per-sample
        losses, info dict); gradients are L2-clipped at ``clip`` jointly
        across all parameters.
        """
        if loss not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {loss!r}")
        actions = np.asarray(actions, dtype=int)
        weights = np.asarray(weights, dtype=float)
        out, cache = self._forward_full(states, noise)
        batch = out.shape[0]
        rows = np.arange(batch)
        scale = weights / batch

        if self.distributional:
            probs = cache["probs"]
            p_taken = probs[rows, actions]                # (B, atoms)
            targets = np.atleast_2d(np.asarray(targets, dtype=float))
            if loss == "huber":
                resid = p_taken - targets
                per_sample = _huber(resid).sum(axis=1)
                dp = _huber_grad(resid)
            elif loss == "xent":
                logp = np.log(np.clip(p_taken, 1e-300, None))
                per_sample = -(targets * logp).sum(axis=1)
                dp = None                                  # handled below
            else:
                if proj is None:
                    raise ValueError("huber-proj-pred needs projection "
                                     "matrices")
                projected = np.einsum("bij,bj->bi", proj, p_taken)
                resid = projected - targets
                per_sample = _huber(resid).sum(axis=1)
                dp = np.einsum("bij,bi->bj", proj, _huber_grad(resid))
            pred_q = p_taken @ self.support
            q_all = probs @ self.support
            if loss == "xent":
                dl_taken = scale[:, None] * (p_taken - targets)
            else:
                dot = (dp * p_taken).sum(axis=1, keepdims=True)
                dl_taken = scale[:, None] * p_taken * (dp - dot)
            dlogits = np.zeros_like(probs)
            dlogits[rows, actions] = dl_taken
            if self.dueling:
                dv = dlogits.sum(axis=1)
                da = (dlogits - dlogits.mean(axis=1, keepdims=True)
                      ).reshape(batch, -1)
            else:
                dv = None
                da = dlogits.reshape(batch, -1)
        else:
            q_taken = out[rows, actions]
            targets = np.asarray(targets, dtype=float).reshape(batch)
            resid = q_taken - targets
            per_sample = _huber(resid)
            pred_q = q_taken
            q_all = out
            dq = np.zeros_like(out)
            dq[rows, actions] = scale * _huber_grad(resid)
            if self.dueling:
                dv = dq.sum(axis=1, keepdims=True)
                da = dq - dq.mean(axis=1, keepdims=True)
            else:
                dv = None
                da = dq

        grads = {}
        features = cache["features"]
        dh = np.zeros_like(features)
        head_grads = [("a", da)]
        if self.dueling:
            head_grads.append(("v", dv))
        n_hidden = len(self.hidden)
        for name, dout in head_grads:
            spec = next(s for s in self._arch[n_hidden:] if s.name == name)
            w_eff = cache[f"W.{name}"]
            self._accumulate(grads, spec, noise, dout.T @ features,
                             dout.sum(axis=0))
            dh = dh + dout @ w_eff
        for idx in range(n_hidden - 1, -1, -1):
            spec = self._arch[idx]
            dz = dh * (cache["pre"][idx] > 0.0)
            self._accumulate(grads, spec, noise,
                             dz.T @ cache["inputs"][idx], dz.sum(axis=0))
            dh = dz @ cache["weights"][idx]

        flat_sq = sum(float(np.sum(g * g)) for g in grads.values())
        norm = float(np.sqrt(flat_sq))
        info = {"loss": float(np.sum(weights * per_sample) / batch),
                "grad_norm_preclip": norm,
                "pred_q": pred_q,
                "max_q": float(q_all.max(axis=1).mean())}
        if clip is not None and norm > clip:
            factor = clip / norm
            for g in grads.values():
                g *= factor
        info["grad_norm"] = min(norm, clip) if clip is not None else norm
        if not np.isfinite(info["loss"]) or not np.isfinite(norm):
            raise FloatingPointError("non-finite loss or gradient")
        return grads, per_sample, info

    def _accumulate(self, grads, spec, noise, dw, db):
        if spec.kind == "dense":
            grads[f"{spec.name}.W"] = dw
            grads[f"{spec.name}.b"] = db
        else:
            f_in, f_out = noise[spec.name]
            grads[f"{spec.name}.Wmu"] = dw
            grads[f"{spec.name}.Wsig"] = dw * np.outer(f_out, f_in)
            grads[f"{spec.name}.bmu"] = db
            grads[f"{spec.name}.bsig"] = db * f_out

    # ---------------------------------------------------------- checkpoint

    def config(self) -> dict:
        return {
            "state_dim": self.state_dim, "n_actions": self.n_actions,
            "hidden": list(self.hidden), "atoms": self.atoms,
            "v_min": self.v_min, "v_max": self.v_max,
            "dueling": self.dueling, "noisy": self.noisy,
            "distributional": self.distributional,
        }

    def save(self, path, meta: dict | None = None) -> None:
        names = sorted(self.params)
        header = {
            "version": 1,
            "config": self.config(),
            "arrays": [[n, list(self.params[n].shape)] for n in names],
            "meta": meta or {},
        }
        blob = json.dumps(header, sort_keys=True,
                          separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for n in names:
                fh.write(self.params[n].astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(len(_MAGIC)) != _MAGIC:
                raise ValueError(f"{path}: not a network checkpoint")
            size = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(size).decode())
            net = cls(seed=0, **header["config"])
            for name, shape in header["arrays"]:
                count = int(np.prod(shape, dtype=np.int64)) if shape else 1
                data = np.frombuffer(fh.read(count * 8), dtype="<f8")
                expected = net.params[name].shape
                if tuple(shape) != expected:
                    raise ValueError(
                        f"{path}: shape mismatch for {name}: "
                        f"{tuple(shape)} vs {expected}")
                net.params[name] = data.reshape(shape).astype(float)
        return net, header["meta"]
