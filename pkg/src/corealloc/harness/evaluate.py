"""Evaluation sweeps over user counts for learned and baseline policies."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..explore import AutoScalePolicy
from ..sacagent import SacAgent
from .config import ConfigError, ExperimentConfig
from .env import AllocationEnv
from .metrics import RunMetrics
from .train import make_env, seed_streams

# policy(state, env) -> action fractions; reset(env) is called before each user count
Policy = Callable[[np.ndarray, AllocationEnv], np.ndarray]


class AgentPolicy:
    """Mean-mode actions from a trained agent."""

    def __init__(self, agent: SacAgent):
        self.agent = agent

    def reset(self, env) -> None:
        pass

    def __call__(self, state, env) -> np.ndarray:
        return self.agent.act(state, "mean")


class AutoScaleBaseline:
    def __init__(self, caps, cfg):
        self.policy = AutoScalePolicy(caps, cfg)

    def reset(self, env) -> None:
        self.policy.reset()

    def __call__(self, state, env) -> np.ndarray:
        return self.policy.action(env.utilization)


class ConstantPolicy:
    def __init__(self, fraction):
        self.fraction = fraction

    def reset(self, env) -> None:
        pass

    def __call__(self, state, env) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fraction, dtype=np.float64), (env.size,)).copy()


def _fingerprint(agent: SacAgent) -> bytes:
    return b"".join(p.tobytes() for p in agent.trainable()) + agent.stats.mean.tobytes() + agent.stats.var.tobytes()


def run_sweep(policy, env: AllocationEnv, user_counts: Sequence[int], duration: int) -> RunMetrics:
    metrics = RunMetrics(env.size)
    step = 0
    for users in user_counts:
        state = env.reset(int(users))
        policy.reset(env)
        for _ in range(duration):
            a = policy(state, env)
            state, r, _, sample = env.step(a)
            metrics.add(step, users, sample.p99_ms, env.qos_ms, float(sample.allocations.sum()), r, a)
            step += 1
    return metrics


def eval_env(config: ExperimentConfig, m_max: int | None = None, seed_offset: int = 0) -> AllocationEnv:
    """A fresh environment on the evaluation seed stream; episodes never end early."""
    topology = config.load_topology()
    m_max = config.resolved_m_max(topology) if m_max is None else m_max
    seq = seed_streams(config.seed)["eval"]
    seed = seq.spawn(seed_offset + 1)[-1] if seed_offset else seq
    env = make_env(config, topology, m_max, seed)
    env.e_time = 2 ** 62
    return env


def evaluate(agent: SacAgent, config: ExperimentConfig, user_counts: Sequence[int] | None = None,
             duration: int | None = None, seed_offset: int = 0) -> RunMetrics:
    """Mean-mode sweep; raises if any agent parameter changes during the sweep."""
    topology = config.load_topology()
    if agent.m_max < topology.size:
        raise ConfigError(f"checkpoint identifier width {agent.m_max} is smaller than the topology "
                          f"({topology.size} microservices)")
    if agent.k != config.k:
        raise ConfigError(f"checkpoint stacks {agent.k} observations, config expects {config.k}")
    env = eval_env(config, agent.m_max, seed_offset)
    before = _fingerprint(agent)
    metrics = run_sweep(AgentPolicy(agent), env, user_counts or config.eval_users,
                        duration or config.eval_duration)
    if _fingerprint(agent) != before:
        raise AssertionError("network parameters changed during evaluation")
    return metrics


def evaluate_checkpoint(path, config: ExperimentConfig, user_counts=None, duration=None) -> RunMetrics:
    return evaluate(SacAgent.load(path), config, user_counts, duration)


def evaluate_autoscale(config: ExperimentConfig, user_counts: Sequence[int] | None = None,
                       duration: int | None = None, seed_offset: int = 0) -> RunMetrics:
    env = eval_env(config, seed_offset=seed_offset)
    return run_sweep(AutoScaleBaseline(env.caps, config.autoscale_config()), env,
                     user_counts or config.eval_users, duration or config.eval_duration)


def evaluate_policy(policy, config: ExperimentConfig, user_counts=None, duration=None,
                    seed_offset: int = 0) -> RunMetrics:
    env = eval_env(config, seed_offset=seed_offset)
    return run_sweep(policy, env, user_counts or config.eval_users, duration or config.eval_duration)
