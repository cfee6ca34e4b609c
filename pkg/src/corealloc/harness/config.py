"""Experiment configuration: defaults, YAML loading and validation."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..explore import AutoScaleConfig
from ..sacagent import NetShape, SacHyper
from ..simenv import Topology, default_topology, load_topology


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # environment
    topology: str | None = None       # YAML path; None selects the bundled desk topology
    qos_ms: float = 200.0
    alpha: float = 1.0
    user_min: int | None = None       # None defers to the topology workload
    user_max: int | None = None
    m_max: int | None = None          # identifier width; None means the topology size
    e_time: int = 300
    warmup: int = 60
    t_length: float = 1.0
    k: int = 5
    # schedule
    total_steps: int = 260000
    asa: int = 130000
    ca: int = 50000
    rsc: int = 100000
    replay_size: int = 200000
    # learner
    fc_layers: int = 7
    hidden_units: int = 256
    learning_rate: float = 3e-5
    entropy_learning_rate: float | None = None
    max_grad_norm: float = 40.0
    gamma: float = 0.9
    batch_size: int = 100
    polyak: float = 0.995
    initial_entropy_coef: float = 1.0
    target_entropy_per_microservice: float | None = None
    input_clip: float | None = None
    # classifier-guided exploration
    classifier_hidden: int | None = None
    classifier_learning_rate: float = 1e-3
    classifier_updates: int = 10000
    classifier_threshold: float = 0.8
    augment_noise: float = 0.01
    # autoscaler
    autoscale: dict = field(default_factory=lambda: dataclasses.asdict(AutoScaleConfig()))
    # evaluation
    eval_users: list = field(default_factory=lambda: [50, 150, 250, 350, 450])
    eval_duration: int = 300
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 5000
    update_log_every: int = 1
    # transfer schedule as fractions of total_steps
    transfer_asa_fraction: float = 70000 / 260000
    transfer_ca_fraction: float = 50000 / 260000
    transfer_total_fraction: float = 120000 / 260000
    milestone_every: int = 500
    milestone_users: list = field(default_factory=lambda: [100, 300, 500])
    milestone_duration: int = 60

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.warmup < 0:
            raise ConfigError("warmup must be >= 0")
        if min(self.e_time, self.k, self.total_steps, self.replay_size, self.batch_size, self.rsc) < 1:
            raise ConfigError("e_time, k, total_steps, replay_size, batch_size and rsc must be positive")
        if not 0 <= self.asa <= self.total_steps:
            raise ConfigError("asa must lie in [0, total_steps]")
        if self.ca < 0 or self.ca > self.total_steps - self.asa:
            raise ConfigError("ca must lie in [0, total_steps - asa]")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 <= self.gamma <= 1 or not 0 <= self.polyak <= 1:
            raise ConfigError("gamma and polyak must lie in [0, 1]")
        if self.qos_ms <= 0 or self.t_length <= 0:
            raise ConfigError("qos_ms and t_length must be positive")
        if self.input_clip is not None and self.input_clip <= 0:
            raise ConfigError("input_clip must be positive")
        unknown = set(self.autoscale) - {f.name for f in dataclasses.fields(AutoScaleConfig)}
        if unknown:
            raise ConfigError(f"unknown autoscale keys: {sorted(unknown)}")

    # derived objects ------------------------------------------------------

    def load_topology(self) -> Topology:
        topo = default_topology() if self.topology is None else load_topology(self.topology)
        if self.user_min is not None or self.user_max is not None:
            from ..simenv import WorkloadConfig, build_topology
            w = topo.workload
            workload = WorkloadConfig(self.user_min if self.user_min is not None else w.user_min,
                                      self.user_max if self.user_max is not None else w.user_max,
                                      w.requests_per_user_per_sec, w.request_entry_id, w.request_timeout)
            topo = build_topology(topo.services, workload)
        return topo

    def resolved_m_max(self, topology: Topology) -> int:
        m_max = topology.size if self.m_max is None else self.m_max
        if m_max < topology.size:
            raise ConfigError(f"m_max={m_max} is smaller than the topology ({topology.size} microservices)")
        return m_max

    def sac_hyper(self) -> SacHyper:
        return SacHyper(gamma=self.gamma, lr=self.learning_rate, entropy_lr=self.entropy_learning_rate,
                        max_grad_norm=self.max_grad_norm, polyak=self.polyak, batch_size=self.batch_size,
                        initial_entropy_coef=self.initial_entropy_coef,
                        target_entropy_per_microservice=self.target_entropy_per_microservice,
                        input_clip=self.input_clip)

    def net_shape(self) -> NetShape:
        return NetShape(hidden=self.hidden_units, policy_layers=self.fc_layers)

    def autoscale_config(self) -> AutoScaleConfig:
        return AutoScaleConfig(**self.autoscale)

    def transfer_schedule(self) -> tuple[int, int, int]:
        """(asa, ca, total) for a fine-tuning run."""
        return (round(self.transfer_asa_fraction * self.total_steps),
                round(self.transfer_ca_fraction * self.total_steps),
                round(self.transfer_total_fraction * self.total_steps))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    data = dict(data)
    if "autoscale" in data:
        data["autoscale"] = {**dataclasses.asdict(AutoScaleConfig()), **data["autoscale"]}
    topo = data.get("topology")
    if topo is not None and base_dir is not None and not Path(topo).is_absolute():
        data["topology"] = str((base_dir / topo).resolve())
    return ExperimentConfig(**data)


def load_config(path) -> ExperimentConfig:
    """Read a YAML config; relative topology paths resolve against the file's directory."""
    path = Path(path)
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return config_from_dict(data, path.parent)
