"""Experience replay: n-step transition assembly and a proportional
prioritized buffer backed by a vectorized sum tree.

The queue turns raw environment steps into discounted n-step transitions,
one per step once it is warm, and drains itself with shortened horizons
when an episode terminates.  The buffer stores priorities as ``p**alpha``
in a perfect binary sum tree, samples by stratified prefix-sum descent,
and evicts first-in-first-out at capacity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    """An assembled n-step transition ready for the learner.

    ``reward`` is the discounted n-step return, ``horizon`` the number of
    raw steps it spans (the bootstrap discount is gamma**horizon),
    ``done`` whether the final raw step terminated the episode, and
    ``next_mask`` the valid-action mask at ``next_state`` so bootstrap
    action selection can exclude invalid actions.
    """

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    horizon: int
    next_mask: np.ndarray


class NStepQueue:
    """Assembles discounted n-step transitions from raw steps.

    Once ``n`` raw steps are pending, every further push emits exactly
    one transition; a terminal push drains the queue, emitting the
    remaining entries with shortened horizons.  ``n = 1`` degenerates to
    ordinary one-step replay.
    """

    def __init__(self, n: int = 3, gamma: float = 0.99):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.n = n
        self.gamma = gamma
        self._pending: list[tuple] = []

    def __len__(self) -> int:
        return len(self._pending)

    def push(self, state, action, reward, next_state, done, next_mask):
        """Add one raw step and return the transitions it releases."""
        self._pending.append(
            (state, action, float(reward), next_state, bool(done), next_mask))
        if done:
            return self.flush()
        if len(self._pending) == self.n:
            out = [self._assemble(0)]
            self._pending.pop(0)
            return out
        return []

    def flush(self):
        """Drain the queue, emitting every pending transition."""
        out = [self._assemble(i) for i in range(len(self._pending))]
        self._pending.clear()
        return out

    def _assemble(self, start: int) -> Transition:
        chunk = self._pending[start:]
        ret = 0.0
        for k, raw in enumerate(chunk):
            ret += self.gamma ** k * raw[2]
        last = chunk[-1]
        return Transition(state=chunk[0][0], action=chunk[0][1], reward=ret,
                          next_state=last[3], done=last[4],
                          horizon=len(chunk), next_mask=last[5])


class SumTree:
    """Flat-array perfect binary sum tree over a fixed number of slots.

    The leaf count is rounded up to a power of two; parent nodes are
    recomputed from their children on every update, so the root never
    drifts from the leaf sum.  Updates and prefix-sum descents accept
    index arrays and are vectorized.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._leaves = 1 << max(1, (capacity - 1).bit_length())
        self._depth = self._leaves.bit_length() - 1
        self._tree = np.zeros(2 * self._leaves)

    def set(self, indices, values) -> None:
        idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
        self._tree[self._leaves + idx] = np.atleast_1d(values)
        nodes = np.unique(self._leaves + idx)
        while nodes[0] > 1:
            nodes = np.unique(nodes >> 1)
            self._tree[nodes] = self._tree[2 * nodes] + self._tree[2 * nodes + 1]

    def get(self, indices):
        return self._tree[self._leaves + np.asarray(indices, dtype=np.int64)]

    def total(self) -> float:
        return float(self._tree[1])

    def leaf_sum(self) -> float:
        """Direct sum over the leaves, for consistency checks."""
        return float(self._tree[self._leaves:self._leaves + self.capacity].sum())

    def find(self, prefixes):
        """Descend to the leaf whose cumulative range holds each prefix."""
        p = np.array(prefixes, dtype=np.float64)
        node = np.ones(p.shape, dtype=np.int64)
        for _ in range(self._depth):
            left = node << 1
            left_sum = self._tree[left]
            go_left = p < left_sum
            node = np.where(go_left, left, left + 1)
            p = np.where(go_left, p, p - left_sum)
        return node - self._leaves


class PrioritizedBuffer:
    """Proportional prioritized replay with FIFO eviction.

    New transitions enter at the running maximum raw priority (1.0 on an
    empty buffer) so they are sampled at least once before their first
    priority update.  Sampling probability is proportional to
    ``priority**alpha``; importance weights are normalized by the batch
    maximum, so they always lie in (0, 1].  ``alpha = 0`` gives uniform
    sampling with every weight exactly 1.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, eps: float = 1e-3):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must be in [0, 1]")
        self.capacity = capacity
        self.alpha = alpha
        self.eps = eps
        self.tree = SumTree(capacity)
        self.p_max = 1.0
        self._items: list = [None] * capacity
        self._size = 0
        self._next = 0

    def __len__(self) -> int:
        return self._size

    def insert(self, transition: Transition, priority: float | None = None):
        """Store a transition, evicting the oldest slot at capacity."""
        raw = self.p_max if priority is None else float(priority)
        self._items[self._next] = transition
        self.tree.set(self._next, raw ** self.alpha)
        self._next = (self._next + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, beta: float, rng: np.random.Generator):
        """Stratified sample of ``batch_size`` transitions.

        Returns ``(indices, transitions, weights)``; indices feed back
        into :meth:`update_priorities` after the learner computes errors.
        """
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total()
        strata = (np.arange(batch_size) + rng.random(batch_size)) / batch_size
        idx = np.minimum(self.tree.find(strata * total), self._size - 1)
        probs = self.tree.get(idx) / total
        weights = (self._size * probs) ** -beta
        weights = weights / weights.max()
        return idx, [self._items[i] for i in idx], weights

    def update_priorities(self, indices, td_errors) -> None:
        """Set priority |error| + eps for each index; track the max."""
        raw = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.eps
        self.tree.set(indices, raw ** self.alpha)
        self.p_max = max(self.p_max, float(raw.max()))
