"""Action scaling, reward, transitions and the replay buffer."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .simenv import MIN_ALLOCATION


@dataclass(frozen=True)
class CoreCaps:
    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.float64)
        if u.ndim != 1 or np.any(u <= 0):
            raise ValueError("core caps must be a vector of positive values")
        object.__setattr__(self, "u", u)

    @property
    def Z(self) -> float:
        return float(self.u.sum())


def scale_action(a, caps: CoreCaps | np.ndarray, floor: float = MIN_ALLOCATION) -> np.ndarray:
    """Fractions of each cap to cores, never below ``floor`` (nor above the cap)."""
    u = caps.u if isinstance(caps, CoreCaps) else np.asarray(caps, dtype=np.float64)
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    return np.maximum(a * u, np.minimum(floor, u))


def reward(latency_p99: float, qos: float, a_prev, caps: CoreCaps | np.ndarray, alpha: float) -> float:
    """-1 on a QoS violation, otherwise ``alpha * (1 - u.a / Z)``.

    ``latency_p99`` and ``qos`` must share a unit (milliseconds throughout
    this package). ``a_prev`` is the action whose effect was measured.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if latency_p99 > qos:
        return -1.0
    u = caps.u if isinstance(caps, CoreCaps) else np.asarray(caps, dtype=np.float64)
    return alpha * (1.0 - float(u @ np.asarray(a_prev, dtype=np.float64)) / float(u.sum()))


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    d: bool


class Batch(NamedTuple):
    s: np.ndarray   # (B, M, W)
    a: np.ndarray   # (B, M)
    r: np.ndarray   # (B,)
    s2: np.ndarray  # (B, M, W)
    d: np.ndarray   # (B,)


_MAGIC = b"CARB"
_VERSION = 1
_HEADER = struct.Struct("<4sHxxQQQQ")  # magic, version, capacity, count, rows, width


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions with uniform sampling.

    Storage is allocated on the first push, when the state shape is known.
    Indexing is chronological: ``buf[0]`` is the oldest stored transition.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._size = 0
        self._next = 0
        self._s = self._s2 = self._a = self._r = self._d = None

    def __len__(self) -> int:
        return self._size

    @property
    def shape(self) -> tuple[int, int] | None:
        return None if self._s is None else self._s.shape[1:]

    def _allocate(self, rows: int, width: int) -> None:
        n = self.capacity
        self._s = np.zeros((n, rows, width))
        self._s2 = np.zeros((n, rows, width))
        self._a = np.zeros((n, rows))
        self._r = np.zeros(n)
        self._d = np.zeros(n, dtype=bool)

    def push(self, t: Transition) -> None:
        s = np.asarray(t.s, dtype=np.float64)
        if self._s is None:
            self._allocate(*s.shape)
        elif s.shape != self._s.shape[1:]:
            raise ValueError(f"state shape {s.shape} does not match buffer {self._s.shape[1:]}")
        i = self._next
        self._s[i] = s
        self._s2[i] = t.s2
        self._a[i] = t.a
        self._r[i] = t.r
        self._d[i] = t.d
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slot(self, idx):
        """Chronological index -> storage slot."""
        start = self._next - self._size if self._size < self.capacity else self._next
        return (start + np.asarray(idx)) % self.capacity

    def __getitem__(self, idx: int) -> Transition:
        if not -self._size <= idx < self._size:
            raise IndexError(idx)
        j = int(self._slot(idx % self._size))
        return Transition(self._s[j].copy(), self._a[j].copy(), float(self._r[j]),
                          self._s2[j].copy(), bool(self._d[j]))

    def gather(self, idx) -> Batch:
        j = self._slot(idx)
        return Batch(self._s[j], self._a[j], self._r[j], self._s2[j], self._d[j])

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """``batch_size`` uniform draws with replacement."""
        return self.gather(self.sample_indices(batch_size, rng))

    def states(self) -> np.ndarray:
        """Stored states (storage order; order is irrelevant for statistics)."""
        if self._s is None:
            return np.zeros((0, 0, 0))
        return self._s[: self._size] if self._size < self.capacity else self._s

    def chronological(self, field: str) -> np.ndarray:
        arr = {"a": self._a, "r": self._r, "d": self._d}[field]
        return arr[self._slot(np.arange(self._size))]

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        """Write a versioned binary file: header then fixed-width records.

        Each record is little-endian float64: s (rows*width), a (rows), r,
        s2 (rows*width), d. Records are written oldest first.
        """
        rows, width = self.shape if self._s is not None else (0, 0)
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, self.capacity, self._size, rows, width))
            if self._size:
                j = self._slot(np.arange(self._size))
                rec = np.concatenate([
                    self._s[j].reshape(self._size, -1),
                    self._a[j],
                    self._r[j, None],
                    self._s2[j].reshape(self._size, -1),
                    self._d[j, None].astype(np.float64),
                ], axis=1)
                fh.write(rec.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) != _HEADER.size:
                raise ValueError("truncated replay buffer file")
            magic, version, capacity, count, rows, width = _HEADER.unpack(head)
            if magic != _MAGIC:
                raise ValueError("not a replay buffer file")
            if version != _VERSION:
                raise ValueError(f"unsupported replay buffer version {version}")
            buf = cls(capacity)
            if count == 0:
                return buf
            rec_len = 2 * rows * width + rows + 2
            data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != count * rec_len:
            raise ValueError("replay buffer file size does not match its header")
        data = data.reshape(count, rec_len).astype(np.float64)
        sw = rows * width
        buf._allocate(rows, width)
        buf._s[:count] = data[:, :sw].reshape(count, rows, width)
        buf._a[:count] = data[:, sw:sw + rows]
        buf._r[:count] = data[:, sw + rows]
        buf._s2[:count] = data[:, sw + rows + 1:2 * sw + rows + 1].reshape(count, rows, width)
        buf._d[:count] = data[:, -1] != 0
        buf._size = count
        buf._next = count % capacity
        return buf
