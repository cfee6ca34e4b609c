"""Fine-tuning a pretrained agent on a new topology, compared against training from scratch."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..obsfeat import NON_ID_FEATURES
from ..sacagent import SacAgent
from .config import ConfigError, ExperimentConfig
from .evaluate import evaluate, evaluate_autoscale
from .metrics import RunMetrics
from .train import RunState, Schedule, TrainResult, seed_streams, train


@dataclass
class MilestoneTracker:
    """Quick evaluations during training until the agent matches the autoscaler.

    Parity means no QoS violation on the quick sweep and a mean allocation no
    larger than the autoscaler's on the same sweep. Steps are learner updates.
    """

    config: ExperimentConfig
    stop_on_parity: bool = True
    baseline_cores: float = field(init=False)
    reached_at: int | None = None
    history: list = field(default_factory=list)
    _next: int = 0

    def __post_init__(self):
        auto = evaluate_autoscale(self.config, self.config.milestone_users, self.config.milestone_duration,
                                  seed_offset=1)
        self.baseline_cores = auto.overall()["mean_cores"]

    def check(self, agent: SacAgent, rl_steps: int) -> bool:
        m = evaluate(agent, self.config, self.config.milestone_users, self.config.milestone_duration,
                     seed_offset=1).overall()
        self.history.append((rl_steps, m["violation_rate"], m["mean_cores"]))
        if self.reached_at is None and m["violation_rate"] == 0 and m["mean_cores"] <= self.baseline_cores:
            self.reached_at = rl_steps
        return self.reached_at is not None

    def __call__(self, run: RunState) -> bool:
        if run.rl_steps < self._next:
            return False
        self._next = (run.rl_steps // self.config.milestone_every + 1) * self.config.milestone_every
        return self.check(run.agent, run.rl_steps) and self.stop_on_parity

    def steps_to_parity(self, budget: int) -> int:
        """Updates until parity, censored at ``budget`` when never reached."""
        return budget if self.reached_at is None else self.reached_at


def prepare_transfer(source: SacAgent, config: ExperimentConfig, rng: np.random.Generator) -> SacAgent:
    """Adopt the target's learner settings and reinitialize identifier inputs."""
    topology = config.load_topology()
    if source.k != config.k:
        raise ConfigError(f"source stacks {source.k} observations, target expects {config.k}")
    if source.n_inputs - source.m_max != config.k * NON_ID_FEATURES:
        raise ConfigError("source network has an incompatible feature schema")
    source.hyper = config.sac_hyper()
    source.resize_identifiers(config.resolved_m_max(topology), rng)
    return source


@dataclass
class TransferRun:
    result: TrainResult
    tracker: MilestoneTracker
    steps_to_parity: int


@dataclass
class TransferResult:
    transfer: TransferRun
    scratch: TransferRun
    transfer_eval: RunMetrics
    scratch_eval: RunMetrics
    schedule: Schedule

    @property
    def ratio(self) -> float:
        return self.transfer.steps_to_parity / max(self.scratch.steps_to_parity, 1)


def _tracked(config, out_dir, schedule, agent=None, stop_on_parity=True) -> TransferRun:
    tracker = MilestoneTracker(config, stop_on_parity)
    res = train(config, out_dir, resume=False, agent=agent, schedule=schedule, on_episode=tracker)
    return TransferRun(res, tracker, tracker.steps_to_parity(schedule.rl_steps))


def transfer(source_checkpoint, config: ExperimentConfig, out_dir, stop_on_parity: bool = False) -> TransferResult:
    """Fine-tune ``source_checkpoint`` on ``config``'s topology and train a scratch agent on the same budget."""
    out_dir = Path(out_dir)
    schedule = Schedule(*config.transfer_schedule())
    rng = np.random.default_rng(seed_streams(config.seed)["agent"].spawn(1)[0])
    agent = prepare_transfer(SacAgent.load(source_checkpoint), config, rng)
    pre = _tracked(config, out_dir / "transfer", schedule, agent, stop_on_parity)
    scratch = _tracked(config, out_dir / "scratch", schedule, None, stop_on_parity)
    result = TransferResult(pre, scratch, evaluate(pre.result.agent, config), evaluate(scratch.result.agent, config),
                            schedule)
    write_comparison(result, out_dir / "comparison.csv")
    return result


COMPARISON_FIELDS = ["run", "steps_to_parity", "rl_budget", "mean_cores", "violation_rate"]


def write_comparison(result: TransferResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_FIELDS)
        for name, run, ev in (("transfer", result.transfer, result.transfer_eval),
                              ("scratch", result.scratch, result.scratch_eval)):
            o = ev.overall()
            w.writerow([name, run.steps_to_parity, result.schedule.rl_steps, repr(o["mean_cores"]),
                        repr(o["violation_rate"])])
