"""Per-microservice feature rows, observation stacking and standardization.

Row layout (``n = 27 + m_max`` columns)::

    0-3    packets rx, packets tx, bytes rx, bytes tx   (per-interval deltas)
    4-6    rss, cache (gauges), page faults (delta)
    7-8    cpu time (delta, core-seconds), current core allocation
    9-10   io bytes, io services (deltas)
    11-22  end-to-end latency percentiles in ms
    23     QoS target in ms
    24-25  requests/s, failures/s
    26..   one-hot microservice identifier (m_max wide)
    last   previously selected action in [0, 1]

Latency and request columns are service-level and therefore identical in
every row of a given step.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .simenv import LATENCY_PERCENTILES, TelemetrySample

_BASE_FEATURES = [
    ("communication", "packets_received"),
    ("communication", "packets_sent"),
    ("communication", "bytes_received"),
    ("communication", "bytes_sent"),
    ("memory", "resident_set_size"),
    ("memory", "cache_memory"),
    ("memory", "page_faults"),
    ("cpu", "cpu_time"),
    ("cpu", "max_core_allocation"),
    ("io", "io_bytes"),
    ("io", "io_services"),
] + [("latency", f"p{p:g}_latency_ms") for p in LATENCY_PERCENTILES] + [
    ("latency", "qos_requirement_ms"),
    ("request_service", "requests_per_second"),
    ("request_service", "failures_per_second"),
]
ID_OFFSET = len(_BASE_FEATURES)  # 26
NON_ID_FEATURES = ID_OFFSET + 1  # base features plus previous action
STD_EPS = 1e-8


class FeatureError(ValueError):
    pass


def n_features(m_max: int) -> int:
    return NON_ID_FEATURES + m_max


def prev_action_index(m_max: int) -> int:
    return ID_OFFSET + m_max


def feature_schema(m_max: int) -> list[tuple[int, str, str]]:
    """(index, category, name) for every column of a feature row."""
    rows = [(i, cat, name) for i, (cat, name) in enumerate(_BASE_FEATURES)]
    rows += [(ID_OFFSET + j, "other", f"unique_id_{j}") for j in range(m_max)]
    rows.append((prev_action_index(m_max), "other", "previous_action"))
    return rows


def assemble_observation(telemetry: TelemetrySample, prev_action, qos_ms: float, m_max: int,
                         previous: TelemetrySample | None = None) -> np.ndarray:
    """Build the ``M x n`` observation for one step.

    Counters are differenced against ``previous``; with no previous sample
    every delta is zero.
    """
    m = telemetry.size
    prev_action = np.asarray(prev_action, dtype=np.float64)
    if prev_action.shape != (m,):
        raise FeatureError(f"missing microservice row: telemetry has {m} rows, action has {prev_action.shape}")
    if m > m_max:
        raise FeatureError(f"{m} microservices exceed m_max={m_max}")
    if previous is not None and previous.size != m:
        raise FeatureError("previous telemetry covers a different set of microservices")

    def delta(name):
        cur = getattr(telemetry, name)
        if previous is None:
            return np.zeros(m)
        return cur - getattr(previous, name)

    obs = np.zeros((m, n_features(m_max)))
    obs[:, 0] = delta("packets_rx")
    obs[:, 1] = delta("packets_tx")
    obs[:, 2] = delta("bytes_rx")
    obs[:, 3] = delta("bytes_tx")
    obs[:, 4] = telemetry.rss
    obs[:, 5] = telemetry.cache
    obs[:, 6] = delta("page_faults")
    obs[:, 7] = delta("cpu_time")
    obs[:, 8] = telemetry.allocations
    obs[:, 9] = delta("io_bytes")
    obs[:, 10] = delta("io_services")
    obs[:, 11:23] = telemetry.latency_ms
    obs[:, 23] = qos_ms
    obs[:, 24] = telemetry.requests_per_sec
    obs[:, 25] = telemetry.failures_per_sec
    obs[np.arange(m), ID_OFFSET + np.arange(m)] = 1.0
    obs[:, prev_action_index(m_max)] = prev_action
    return obs


class ObservationBuilder:
    """Stateful wrapper that remembers the previous sample for deltas."""

    def __init__(self, qos_ms: float, m_max: int):
        self.qos_ms = qos_ms
        self.m_max = m_max
        self._previous: TelemetrySample | None = None

    def reset(self) -> None:
        self._previous = None

    def __call__(self, telemetry: TelemetrySample, prev_action) -> np.ndarray:
        obs = assemble_observation(telemetry, prev_action, self.qos_ms, self.m_max, self._previous)
        self._previous = telemetry
        return obs


def stack(history: Sequence[np.ndarray], k: int) -> np.ndarray:
    """Concatenate the ``k`` most recent observations column-wise, newest last.

    Short histories are padded by repeating the oldest observation.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not history:
        raise ValueError("history is empty")
    recent = list(history[-k:])
    recent = [recent[0]] * (k - len(recent)) + recent
    return np.concatenate(recent, axis=1)


@dataclass
class StandardizationStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def identity(cls, n: int) -> "StandardizationStats":
        return cls(np.zeros(n), np.ones(n), 0)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    def tiled(self, k: int, m_max: int) -> tuple[np.ndarray, np.ndarray]:
        """Shift and scale vectors for a ``k``-stacked row; exempt columns map to (0, 1)."""
        shift = self.mean.copy()
        scale = np.sqrt(self.var + STD_EPS)
        exempt = list(range(ID_OFFSET, ID_OFFSET + m_max)) + [prev_action_index(m_max)]
        shift[exempt] = 0.0
        scale[exempt] = 1.0
        return np.tile(shift, k), np.tile(scale, k)


def recompute_stats(states, n: int, chunk: int = 4096) -> StandardizationStats:
    """Global per-feature mean and population variance over every feature row.

    ``states`` is anything exposing an array of shape ``(N, M, k*n)``
    (a replay buffer's ``states`` works). Two chunked passes keep memory flat.
    """
    data = states.states() if hasattr(states, "states") else np.asarray(states)
    if data.shape[0] == 0:
        raise ValueError("cannot compute statistics from an empty buffer")
    total = 0
    acc = np.zeros(n)
    for start in range(0, data.shape[0], chunk):
        rows = data[start:start + chunk].reshape(-1, n)
        acc += rows.sum(axis=0)
        total += rows.shape[0]
    mean = acc / total
    sq = np.zeros(n)
    for start in range(0, data.shape[0], chunk):
        rows = data[start:start + chunk].reshape(-1, n)
        sq += ((rows - mean) ** 2).sum(axis=0)
    return StandardizationStats(mean, sq / total, total)


def standardize(state: np.ndarray, stats: StandardizationStats, k: int, m_max: int) -> np.ndarray:
    """``(x - mean) / sqrt(var + eps)`` per feature; identifier and previous-action columns pass through."""
    shift, scale = stats.tiled(k, m_max)
    return (state - shift) / scale


def network_input_columns(k: int, m_max: int) -> np.ndarray:
    """Columns of a stacked row that feed the networks.

    The identifier is constant over the stack, so only the newest copy is
    kept; this leaves one input weight per hidden unit per microservice.
    """
    n = n_features(m_max)
    cols = []
    for block in range(k):
        base = block * n
        for j in range(n):
            is_id = ID_OFFSET <= j < ID_OFFSET + m_max
            if is_id and block != k - 1:
                continue
            cols.append(base + j)
    return np.array(cols, dtype=np.int64)


def identifier_input_positions(k: int, m_max: int) -> np.ndarray:
    """Positions of the identifier columns within :func:`network_input_columns`."""
    start = (k - 1) * NON_ID_FEATURES + ID_OFFSET
    return np.arange(start, start + m_max)
