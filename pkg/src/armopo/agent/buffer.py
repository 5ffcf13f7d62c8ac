from __future__ import annotations

import numpy as np


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._ptr = 0

    def __len__(self) -> int:
        return self.size

    def add_batch(self, s, a, r, s_next, done) -> None:
        s = np.atleast_2d(s)
        n = s.shape[0]
        arrays = (s, np.atleast_2d(a), np.atleast_1d(r), np.atleast_2d(s_next))
        if not all(np.all(np.isfinite(x)) for x in arrays):
            raise ValueError("refusing to store non-finite transitions")
        if n > self.capacity:
            s, a, r, s_next, done = (x[-self.capacity :] for x in (s, a, r, s_next, np.atleast_1d(done)))
            n = self.capacity
        idx = (self._ptr + np.arange(n)) % self.capacity
        self.s[idx] = s
        self.a[idx] = a
        self.r[idx] = r
        self.s_next[idx] = s_next
        self.done[idx] = done
        self._ptr = int((self._ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx]
