"""Queueing-network simulator of a microservice application."""
from importlib import resources
from pathlib import Path

import yaml

from .simulator import (LATENCY_PERCENTILES, MIN_ALLOCATION, P99_INDEX, SimState, Simulator,
                        TelemetrySample, TraceWriter, generate_arrivals, latency_percentiles,
                        reset_and_warmup)
from .topology import (MicroserviceSpec, Topology, TopologyError, WorkloadConfig, build_topology,
                       topology_from_dict, topology_to_dict)


def load_topology(path) -> Topology:
    with open(path) as fh:
        return topology_from_dict(yaml.safe_load(fh))


def default_topology() -> Topology:
    text = resources.files("corealloc").joinpath("data/desk_topology.yaml").read_text()
    return topology_from_dict(yaml.safe_load(text))


__all__ = [
    "LATENCY_PERCENTILES", "MIN_ALLOCATION", "P99_INDEX", "MicroserviceSpec", "SimState",
    "Simulator", "TelemetrySample", "Topology", "TopologyError", "TraceWriter", "WorkloadConfig",
    "build_topology", "default_topology", "generate_arrivals", "latency_percentiles",
    "load_topology", "reset_and_warmup", "topology_from_dict", "topology_to_dict",
]
