"""Episode wrapper around the simulator: observations, rewards and episode ends."""
from __future__ import annotations

import time
from collections import deque

import numpy as np

from ..mdpcore import CoreCaps, reward, scale_action
from ..obsfeat import ObservationBuilder, stack
from ..simenv import Simulator, TelemetrySample, Topology


class AllocationEnv:
    """One simulated service driven by fractional per-microservice actions.

    Episodes start with :meth:`reset`, which empties the system and warms it
    up at full caps; ``done`` is raised on the ``e_time``-th step.
    """

    def __init__(self, topology: Topology, qos_ms: float, alpha: float, k: int, m_max: int,
                 e_time: int, warmup: int, seed=None, t_length: float = 1.0, realtime: bool = False):
        self.topology = topology
        self.sim = Simulator(topology, rng=np.random.default_rng(seed))
        self.caps = topology.caps
        self.core_caps = CoreCaps(topology.caps)
        self.qos_ms = qos_ms
        self.alpha = alpha
        self.k = k
        self.m_max = m_max
        self.e_time = e_time
        self.warmup = warmup
        self.t_length = t_length
        self.realtime = realtime
        self.builder = ObservationBuilder(qos_ms, m_max)
        self.history: deque = deque(maxlen=k)
        self.episode_step = 0
        self.needs_reset = True
        self.last_sample: TelemetrySample | None = None
        self._deadline = None

    @property
    def size(self) -> int:
        return self.topology.size

    @property
    def users(self) -> int:
        return self.sim.users

    @property
    def utilization(self) -> np.ndarray:
        return self.last_sample.utilization

    def state(self) -> np.ndarray:
        return stack(list(self.history), self.k)

    def reset(self, users: int) -> np.ndarray:
        full = np.ones(self.size)
        samples = self.sim.reset_and_warmup(users, self.warmup, dt=self.t_length)
        if not samples:
            # no warmup: one full-cap interval provides the first observation
            samples = [self.sim.step(self.caps, dt=self.t_length)]
        self.builder.reset()
        self.history.clear()
        for s in samples[-(self.k + 1):]:
            self.history.append(self.builder(s, full))
        self.last_sample = samples[-1]
        self.episode_step = 0
        self.needs_reset = False
        self._deadline = None
        return self.state()

    def reset_random(self, rng: np.random.Generator) -> np.ndarray:
        wl = self.topology.workload
        return self.reset(int(rng.integers(wl.user_min, wl.user_max + 1)))

    def step(self, action):
        """Apply ``action`` (fractions of the caps) for one interval.

        Returns ``(next_state, reward, done, telemetry)``; the reward scores
        the latency measured while ``action`` was in force.
        """
        if self.needs_reset:
            raise RuntimeError("episode finished; call reset() first")
        action = np.clip(np.asarray(action, dtype=np.float64), 0.0, 1.0)
        sample = self.sim.step(scale_action(action, self.core_caps), dt=self.t_length)
        if self.realtime:
            self._pace()
        self.history.append(self.builder(sample, action))
        self.last_sample = sample
        r = reward(sample.p99_ms, self.qos_ms, action, self.core_caps, self.alpha)
        self.episode_step += 1
        done = self.episode_step >= self.e_time
        self.needs_reset = done
        return self.state(), r, done, sample

    def _pace(self) -> None:
        now = time.monotonic()
        if self._deadline is None:
            self._deadline = now
        self._deadline += self.t_length
        if self._deadline > now:
            time.sleep(self._deadline - now)
