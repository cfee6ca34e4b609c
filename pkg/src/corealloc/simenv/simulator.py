"""Discrete-time (one step = one feature interval) microservice simulator."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .topology import Topology, TopologyError

LATENCY_PERCENTILES = (50.0, 66.0, 75.0, 80.0, 90.0, 95.0, 98.0, 99.0, 99.9, 99.99, 99.999, 100.0)
P99_INDEX = LATENCY_PERCENTILES.index(99.0)

MIN_ALLOCATION = 0.1  # cores; docker refuses --cpus=0

# Telemetry synthesis constants (shared by every microservice).
PACKET_BYTES = 1460.0
RSS_BASE = 64.0 * 2**20
CACHE_BASE = 16.0 * 2**20
CACHE_PER_REQUEST = 4096.0
FAULTS_PER_SECOND = 2.0
FAULTS_PER_REQUEST = 0.25

_INITIAL_CAPACITY = 1024


def generate_arrivals(users: int, rate: float, dt: float, rng: np.random.Generator) -> int:
    """Number of requests issued by ``users`` clients over ``dt`` seconds.

    Exponential inter-arrival times per user make the total a Poisson count.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    mean = users * rate * dt
    if mean <= 0:
        return 0
    return int(rng.poisson(mean))


def latency_percentiles(window: Sequence[float] | np.ndarray,
                        percentiles: Sequence[float] = LATENCY_PERCENTILES,
                        previous: np.ndarray | None = None) -> np.ndarray:
    """Nearest-rank percentiles of ``window``.

    An empty window carries ``previous`` forward (zeros when there is none).
    """
    pct = np.asarray(percentiles, dtype=np.float64)
    if np.any(pct <= 0) or np.any(pct > 100):
        raise ValueError("percentiles must lie in (0, 100]")
    values = np.asarray(window, dtype=np.float64)
    if values.size == 0:
        if previous is None:
            return np.zeros(pct.size)
        return np.array(previous, dtype=np.float64, copy=True)
    return kernels.nearest_rank(np.sort(values), pct, np.empty(pct.size))


@dataclass
class TelemetrySample:
    """Everything observable after one step.

    Counter arrays (packets, bytes, cpu time, io, page faults) are cumulative
    since the last reset; ``rss`` and ``cache`` are gauges.
    """

    step: int
    clock: float
    dt: float
    allocations: np.ndarray
    packets_rx: np.ndarray
    packets_tx: np.ndarray
    bytes_rx: np.ndarray
    bytes_tx: np.ndarray
    rss: np.ndarray
    cache: np.ndarray
    page_faults: np.ndarray
    cpu_time: np.ndarray
    io_bytes: np.ndarray
    io_services: np.ndarray
    utilization: np.ndarray
    queue_depth: np.ndarray
    queue_area: np.ndarray
    latency_ms: np.ndarray
    latencies: np.ndarray = field(repr=False)
    arrivals: int = 0
    completed: int = 0
    failed: int = 0

    @property
    def p99_ms(self) -> float:
        return float(self.latency_ms[P99_INDEX])

    @property
    def requests_per_sec(self) -> float:
        return self.arrivals / self.dt

    @property
    def failures_per_sec(self) -> float:
        return self.failed / self.dt

    @property
    def size(self) -> int:
        return self.allocations.shape[0]


class SimState:
    """Mutable simulator state: request pool, per-node FIFO rings, counters."""

    COUNTERS = ("packets_rx", "packets_tx", "bytes_rx", "bytes_tx", "page_faults",
                "cpu_time", "io_bytes", "io_services")

    def __init__(self, m: int, capacity: int = _INITIAL_CAPACITY):
        self.m = m
        self._alloc_pool(capacity)
        self.clock = 0.0
        self.step = 0
        self.counters = {name: np.zeros(m) for name in self.COUNTERS}
        self.last_latency_ms = np.zeros(len(LATENCY_PERCENTILES))
        self.total_arrivals = 0
        self.total_completed = 0
        self.total_failed = 0
        self.completed_this_step = np.zeros(0)
        self.failed_this_step = 0

    def _alloc_pool(self, capacity: int) -> None:
        self.capacity = capacity
        self.req_arrival = np.zeros(capacity)
        self.req_path = np.zeros(capacity, dtype=np.int64)
        self.req_pos = np.zeros(capacity, dtype=np.int64)
        self.req_rem = np.zeros(capacity)
        self.free_stack = np.arange(capacity - 1, -1, -1, dtype=np.int64)
        self.free_top = np.array([capacity], dtype=np.int64)
        self.queue = np.zeros((self.m, capacity), dtype=np.int64)
        self.q_head = np.zeros(self.m, dtype=np.int64)
        self.q_len = np.zeros(self.m, dtype=np.int64)
        self.out_latency = np.zeros(capacity)

    @property
    def in_flight(self) -> int:
        return int(self.q_len.sum())

    def ensure_free(self, n: int) -> None:
        """Grow the request pool so that ``n`` more requests fit."""
        if self.free_top[0] >= n:
            return
        old_cap = self.capacity
        new_cap = old_cap
        while new_cap - (old_cap - int(self.free_top[0])) < n:
            new_cap *= 2
        queue = np.zeros((self.m, new_cap), dtype=np.int64)
        for i in range(self.m):
            idx = (self.q_head[i] + np.arange(self.q_len[i])) % old_cap
            queue[i, : self.q_len[i]] = self.queue[i, idx]
        free = np.concatenate([np.arange(new_cap - 1, old_cap - 1, -1, dtype=np.int64),
                               self.free_stack[: self.free_top[0]]])
        for name in ("req_arrival", "req_path", "req_pos", "req_rem"):
            old = getattr(self, name)
            grown = np.zeros(new_cap, dtype=old.dtype)
            grown[:old_cap] = old
            setattr(self, name, grown)
        self.queue = queue
        self.q_head[:] = 0
        self.free_stack = np.zeros(new_cap, dtype=np.int64)
        self.free_stack[: free.size] = free
        self.free_top[0] = free.size
        self.out_latency = np.zeros(new_cap)
        self.capacity = new_cap


class Simulator:
    """Queueing-network stand-in for a containerized microservice deployment.

    >>> from corealloc.simenv import default_topology
    >>> sim = Simulator(default_topology(), seed=0)
    >>> sample = sim.step(sim.caps, arrivals=100)
    >>> sample.arrivals
    100
    """

    def __init__(self, topology: Topology, seed: int | None = None,
                 rng: np.random.Generator | None = None):
        self.topology = topology
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self.caps = topology.caps
        self._demand = topology.demands
        self._paths = np.ascontiguousarray(topology.paths)
        self._path_lengths = np.ascontiguousarray(topology.path_lengths)
        self._path_probs = topology.path_probs
        self.users = topology.workload.user_min
        self.state = SimState(topology.size)

    @property
    def size(self) -> int:
        return self.topology.size

    def reset(self) -> None:
        """Empty every queue and zero all counters."""
        self.state = SimState(self.size, capacity=self.state.capacity)

    def set_users(self, users: int) -> None:
        wl = self.topology.workload
        if not wl.user_min <= users <= wl.user_max:
            raise TopologyError(f"users={users} outside [{wl.user_min}, {wl.user_max}]")
        self.users = int(users)

    def draw_arrivals(self, dt: float = 1.0) -> int:
        return generate_arrivals(self.users, self.topology.workload.requests_per_user_per_sec, dt, self.rng)

    def check_allocations(self, allocations) -> np.ndarray:
        alloc = np.asarray(allocations, dtype=np.float64)
        if alloc.shape != (self.size,):
            raise TopologyError(f"expected {self.size} allocations, got shape {alloc.shape}")
        if np.any(~np.isfinite(alloc)) or np.any(alloc <= 0):
            raise ValueError("allocations must be positive")
        if np.any(alloc > self.caps * (1 + 1e-12)):
            raise ValueError("allocation exceeds core cap")
        return np.maximum(alloc, np.minimum(MIN_ALLOCATION, self.caps))

    def step(self, allocations, arrivals: int | None = None, dt: float = 1.0) -> TelemetrySample:
        """Run one interval with fixed per-microservice core allocations."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        alloc = self.check_allocations(allocations)
        if arrivals is None:
            arrivals = self.draw_arrivals(dt)
        st = self.state
        st.ensure_free(arrivals)
        if self._path_probs.size == 1:
            new_paths = np.zeros(arrivals, dtype=np.int64)
        else:
            new_paths = self.rng.choice(self._path_probs.size, size=arrivals, p=self._path_probs).astype(np.int64)

        m = self.size
        received = np.zeros(m, dtype=np.int64)
        departed = np.zeros(m, dtype=np.int64)
        cpu_used = np.zeros(m)
        area = np.zeros(m)
        n_done, n_failed = kernels.advance_step(
            st.clock, dt, alloc, self._demand, self._paths, self._path_lengths, new_paths,
            self.topology.workload.request_timeout,
            st.req_arrival, st.req_path, st.req_pos, st.req_rem, st.free_stack, st.free_top,
            st.queue, st.q_head, st.q_len,
            st.out_latency, received, departed, cpu_used, area)

        st.clock += dt
        st.step += 1
        latencies = st.out_latency[:n_done].copy()
        st.completed_this_step = latencies
        st.failed_this_step = int(n_failed)
        st.total_arrivals += arrivals
        st.total_completed += int(n_done)
        st.total_failed += int(n_failed)
        st.last_latency_ms = latency_percentiles(latencies * 1000.0, previous=st.last_latency_ms)
        return self._telemetry(alloc, dt, received, departed, cpu_used, area, latencies, arrivals, n_done, n_failed)

    def _telemetry(self, alloc, dt, received, departed, cpu_used, area, latencies, arrivals, n_done, n_failed):
        st = self.state
        c = st.counters
        specs = self.topology.services
        bpr = np.array([s.bytes_per_request for s in specs])
        iopr = np.array([s.io_per_request for s in specs])
        mpq = np.array([s.mem_per_queued for s in specs])
        pkts = np.ceil(bpr / PACKET_BYTES)
        c["packets_rx"] += received * pkts
        c["packets_tx"] += departed * pkts
        c["bytes_rx"] += received * bpr
        c["bytes_tx"] += departed * bpr
        c["page_faults"] += FAULTS_PER_SECOND * dt + FAULTS_PER_REQUEST * departed
        c["cpu_time"] += cpu_used
        c["io_bytes"] += departed * iopr
        c["io_services"] += departed
        depth = st.q_len.astype(np.float64)
        return TelemetrySample(
            step=st.step,
            clock=st.clock,
            dt=dt,
            allocations=alloc.copy(),
            packets_rx=c["packets_rx"].copy(),
            packets_tx=c["packets_tx"].copy(),
            bytes_rx=c["bytes_rx"].copy(),
            bytes_tx=c["bytes_tx"].copy(),
            rss=RSS_BASE + mpq * depth,
            cache=CACHE_BASE + CACHE_PER_REQUEST * departed,
            page_faults=c["page_faults"].copy(),
            cpu_time=c["cpu_time"].copy(),
            io_bytes=c["io_bytes"].copy(),
            io_services=c["io_services"].copy(),
            utilization=np.clip(cpu_used / (alloc * dt), 0.0, 1.0),
            queue_depth=depth,
            queue_area=area,
            latency_ms=st.last_latency_ms.copy(),
            latencies=latencies,
            arrivals=int(arrivals),
            completed=int(n_done),
            failed=int(n_failed),
        )

    def reset_and_warmup(self, users: int, warmup: int, dt: float = 1.0) -> list[TelemetrySample]:
        """Empty the system and run ``warmup`` steps at full caps.

        Returns the warmup telemetry so callers can seed observation history.
        """
        self.set_users(users)
        self.reset()
        return [self.step(self.caps, dt=dt) for _ in range(warmup)]


def reset_and_warmup(topology: Topology, users: int, warmup: int,
                     rng: np.random.Generator) -> SimState:
    """Functional form of :meth:`Simulator.reset_and_warmup`."""
    sim = Simulator(topology, rng=rng)
    sim.reset_and_warmup(users, warmup)
    return sim.state


TRACE_FIELDS = ("step", "microservice", "allocation", "utilization", "queue_depth",
                "packets_rx", "packets_tx", "bytes_rx", "bytes_tx", "rss", "cache",
                "page_faults", "cpu_time", "io_bytes", "io_services",
                "p99_ms", "requests_per_sec", "failures_per_sec")


class TraceWriter:
    """Per-step telemetry dump, one CSV row per (step, microservice)."""

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TRACE_FIELDS)

    def write(self, sample: TelemetrySample) -> None:
        for i in range(sample.size):
            self._writer.writerow([
                sample.step, i, repr(float(sample.allocations[i])), repr(float(sample.utilization[i])),
                int(sample.queue_depth[i]),
                repr(float(sample.packets_rx[i])), repr(float(sample.packets_tx[i])),
                repr(float(sample.bytes_rx[i])), repr(float(sample.bytes_tx[i])),
                repr(float(sample.rss[i])), repr(float(sample.cache[i])),
                repr(float(sample.page_faults[i])), repr(float(sample.cpu_time[i])),
                repr(float(sample.io_bytes[i])), repr(float(sample.io_services[i])),
                repr(sample.p99_ms), repr(sample.requests_per_sec), repr(sample.failures_per_sec),
            ])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
