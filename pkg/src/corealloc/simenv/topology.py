"""Static description of a simulated microservice application."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed microservice graphs or workload settings."""


@dataclass(frozen=True)
class MicroserviceSpec:
    id: int
    name: str
    core_cap: float
    service_demand: float
    downstream: tuple[int, ...] = ()
    # When set, a request picks exactly one child with these weights instead
    # of calling every child in turn.
    branch_weights: tuple[float, ...] | None = None
    bytes_per_request: float = 2048.0
    mem_per_queued: float = 65536.0
    io_per_request: float = 512.0

    def __post_init__(self):
        if not self.core_cap > 0:
            raise TopologyError(f"microservice {self.id}: core_cap must be positive")
        if not self.service_demand > 0:
            raise TopologyError(f"microservice {self.id}: service_demand must be positive")
        if self.branch_weights is not None:
            if len(self.branch_weights) != len(self.downstream):
                raise TopologyError(f"microservice {self.id}: one branch weight per downstream id")
            if any(w < 0 for w in self.branch_weights) or sum(self.branch_weights) <= 0:
                raise TopologyError(f"microservice {self.id}: branch weights must be non-negative with positive sum")


@dataclass(frozen=True)
class WorkloadConfig:
    user_min: int
    user_max: int
    requests_per_user_per_sec: float
    request_entry_id: int = 0
    request_timeout: float = 10.0

    def __post_init__(self):
        if not 0 < self.user_min <= self.user_max:
            raise TopologyError("need 0 < user_min <= user_max")
        if not self.requests_per_user_per_sec > 0:
            raise TopologyError("requests_per_user_per_sec must be positive")
        if not self.request_timeout > 0:
            raise TopologyError("request_timeout must be positive")


@dataclass(frozen=True)
class Topology:
    """Validated application graph plus the request paths it induces.

    ``paths`` holds every distinct sequence of microservice visits a request
    can make (padded with -1); ``path_probs`` gives their probabilities.
    """

    services: tuple[MicroserviceSpec, ...]
    workload: WorkloadConfig
    order: tuple[int, ...]
    paths: np.ndarray = field(repr=False)
    path_lengths: np.ndarray = field(repr=False)
    path_probs: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.services)

    @property
    def caps(self) -> np.ndarray:
        return np.array([s.core_cap for s in self.services], dtype=np.float64)

    @property
    def demands(self) -> np.ndarray:
        return np.array([s.service_demand for s in self.services], dtype=np.float64)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.services]

    def visits_per_request(self) -> np.ndarray:
        """Expected number of stage visits each microservice gets per request."""
        visits = np.zeros(self.size)
        for path, n, p in zip(self.paths, self.path_lengths, self.path_probs):
            for node in path[:n]:
                visits[node] += p
        return visits


def _topological_order(specs: Sequence[MicroserviceSpec]) -> tuple[int, ...]:
    indegree = {s.id: 0 for s in specs}
    children = {s.id: list(s.downstream) for s in specs}
    for s in specs:
        for c in s.downstream:
            indegree[c] += 1
    # Kahn's algorithm, smallest id first for a deterministic order.
    ready = sorted(i for i, d in indegree.items() if d == 0)
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for c in children[node]:
            indegree[c] -= 1
            if indegree[c] == 0:
                ready.append(c)
                ready.sort()
    if len(order) != len(specs):
        raise TopologyError("cycle detected in microservice graph")
    return tuple(order)


def _enumerate_paths(specs: Sequence[MicroserviceSpec], entry: int) -> list[tuple[tuple[int, ...], float]]:
    by_id = {s.id: s for s in specs}

    def visit(node: int) -> list[tuple[tuple[int, ...], float]]:
        spec = by_id[node]
        if not spec.downstream:
            return [((node,), 1.0)]
        if spec.branch_weights is not None:
            total = float(sum(spec.branch_weights))
            out = []
            for child, w in zip(spec.downstream, spec.branch_weights):
                if w == 0:
                    continue
                for tail, p in visit(child):
                    out.append(((node,) + tail, p * w / total))
            return out
        # Sequential fan-out: call each child in turn, depth first.
        combos = [((node,), 1.0)]
        for child in spec.downstream:
            sub = visit(child)
            combos = [(head + tail, p * q) for head, p in combos for tail, q in sub]
        return combos

    merged: dict[tuple[int, ...], float] = {}
    for seq, p in visit(entry):
        merged[seq] = merged.get(seq, 0.0) + p
    return sorted(merged.items())


def build_topology(specs: Sequence[MicroserviceSpec], workload: WorkloadConfig) -> Topology:
    """Validate ``specs`` and freeze them into a :class:`Topology`.

    Ids must be exactly ``0..M-1`` so they double as row indices.
    """
    if not specs:
        raise TopologyError("at least one microservice is required")
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise TopologyError("duplicate microservice id")
    specs = sorted(specs, key=lambda s: s.id)
    if [s.id for s in specs] != list(range(len(specs))):
        raise TopologyError("microservice ids must be 0..M-1")
    valid = set(ids)
    for s in specs:
        for c in s.downstream:
            if c not in valid:
                raise TopologyError(f"dangling id {c} downstream of microservice {s.id}")
    if workload.request_entry_id not in valid:
        raise TopologyError(f"dangling id {workload.request_entry_id} as request entry")
    order = _topological_order(specs)

    paths = _enumerate_paths(specs, workload.request_entry_id)
    width = max(len(p) for p, _ in paths)
    table = np.full((len(paths), width), -1, dtype=np.int64)
    lengths = np.zeros(len(paths), dtype=np.int64)
    probs = np.zeros(len(paths))
    for row, (seq, p) in enumerate(paths):
        table[row, : len(seq)] = seq
        lengths[row] = len(seq)
        probs[row] = p
    probs /= probs.sum()
    for arr in (table, lengths, probs):
        arr.setflags(write=False)
    return Topology(tuple(specs), workload, order, table, lengths, probs)


def topology_from_dict(data: Mapping[str, Any]) -> Topology:
    """Build a topology from the parsed ``microservices``/``workload`` mapping."""
    try:
        services = data["microservices"]
        wl = data["workload"]
    except KeyError as exc:
        raise TopologyError(f"topology is missing section {exc.args[0]!r}") from None
    specs = []
    for i, item in enumerate(services):
        item = dict(item)
        item.setdefault("id", i)
        item.setdefault("name", f"ms{item['id']}")
        item["downstream"] = tuple(item.get("downstream", ()))
        if item.get("branch_weights") is not None:
            item["branch_weights"] = tuple(float(w) for w in item["branch_weights"])
        specs.append(MicroserviceSpec(**item))
    return build_topology(specs, WorkloadConfig(**wl))


def topology_to_dict(topo: Topology) -> dict[str, Any]:
    services = []
    for s in topo.services:
        item = {
            "id": s.id,
            "name": s.name,
            "core_cap": s.core_cap,
            "service_demand": s.service_demand,
            "downstream": list(s.downstream),
            "bytes_per_request": s.bytes_per_request,
            "mem_per_queued": s.mem_per_queued,
            "io_per_request": s.io_per_request,
        }
        if s.branch_weights is not None:
            item["branch_weights"] = list(s.branch_weights)
        services.append(item)
    w = topo.workload
    return {
        "microservices": services,
        "workload": {
            "user_min": w.user_min,
            "user_max": w.user_max,
            "requests_per_user_per_sec": w.requests_per_user_per_sec,
            "request_entry_id": w.request_entry_id,
            "request_timeout": w.request_timeout,
        },
    }
