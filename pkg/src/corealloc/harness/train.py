"""Training loop: seed collection, classifier-guided episodes, one learner update per step."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ..explore import QosClassifier, anneal, augment_action, classifier_dataset, collect_seed
from ..mdpcore import ReplayBuffer, Transition
from ..neuralnet import load_checkpoint, save_checkpoint
from ..obsfeat import n_features, recompute_stats
from ..sacagent import SacAgent, UpdateLog
from .config import ConfigError, ExperimentConfig
from .env import AllocationEnv
from .metrics import RunMetrics, export_metrics, export_summary

CHECKPOINT = "checkpoint.npz"
BUFFER = "buffer.bin"
UPDATES = "updates.csv"
METRICS = "metrics.csv"
SUMMARY = "summary.csv"


def seed_streams(seed: int) -> dict[str, np.random.SeedSequence]:
    names = ("sim", "explore", "agent", "classifier", "eval")
    return dict(zip(names, np.random.SeedSequence(seed).spawn(len(names))))


@dataclass
class Schedule:
    asa: int
    ca: int
    total: int

    @property
    def rl_steps(self) -> int:
        return self.total - self.asa

    def episodes(self, e_time: int) -> int:
        return -(-self.rl_steps // e_time)


@dataclass
class RunState:
    config: ExperimentConfig
    schedule: Schedule
    env: AllocationEnv
    agent: SacAgent
    buffer: ReplayBuffer
    classifier: QosClassifier | None
    rng: np.random.Generator          # users, seed-phase jitter, augmentation draws
    clf_rng: np.random.Generator
    metrics: RunMetrics
    env_steps: int = 0
    rl_steps: int = 0
    episodes: int = 0


def make_env(config: ExperimentConfig, topology, m_max: int, seed, realtime: bool = False) -> AllocationEnv:
    return AllocationEnv(topology, config.qos_ms, config.alpha, config.k, m_max, config.e_time, config.warmup,
                         seed=seed, t_length=config.t_length, realtime=realtime)


def new_agent(config: ExperimentConfig, m_max: int, seed) -> SacAgent:
    return SacAgent(m_max, config.k, config.sac_hyper(), config.net_shape(), seed=seed)


def _new_classifier(config, agent, rng) -> QosClassifier:
    return QosClassifier.build(agent.n_inputs, config.classifier_hidden or config.hidden_units, rng,
                               lr=config.classifier_learning_rate, batch_size=config.batch_size)


def _record(run: RunState, sample, action, r) -> None:
    run.metrics.add(run.env_steps, run.env.users, sample.p99_ms, run.env.qos_ms,
                    float(sample.allocations.sum()), r, action)
    run.env_steps += 1


def _maybe_recompute_stats(run: RunState) -> None:
    if run.env_steps % run.config.rsc == 0 and len(run.buffer):
        run.agent.stats = recompute_stats(run.buffer, n_features(run.agent.m_max))


def _fit_classifier(run: RunState) -> None:
    x, a, labels = classifier_dataset(run.buffer, run.agent.prepare)
    if len(x):
        run.classifier.fit(x, a, labels, run.config.classifier_updates, run.clf_rng)


def _seed_phase(run: RunState) -> None:
    def on_step(t: Transition, sample):
        _record(run, sample, t.a, t.r)
        if run.env_steps % run.config.rsc == 0 and run.env_steps < run.schedule.asa:
            run.agent.stats = recompute_stats(run.buffer, n_features(run.agent.m_max))

    if run.schedule.asa > 0:
        collect_seed(run.env, run.schedule.asa, run.rng, run.buffer, run.config.autoscale_config(), on_step)
        run.agent.stats = recompute_stats(run.buffer, n_features(run.agent.m_max))
    if run.classifier is not None and run.schedule.ca > 0:
        _fit_classifier(run)
    run.env.needs_reset = True


def _episode(run: RunState, log: UpdateLog | None) -> None:
    cfg, agent, env = run.config, run.agent, run.env
    state = env.reset_random(run.rng)
    done = False
    while not done:
        x = agent.prepare(state)
        a = agent.policy_forward(x[None], "sample").action[0]
        if run.rl_steps < run.schedule.ca and run.classifier is not None:
            a = augment_action(run.classifier, x, a, anneal(run.rl_steps, run.schedule.ca), run.rng,
                               cfg.classifier_threshold, cfg.augment_noise)
        state2, r, done, sample = env.step(a)
        run.buffer.push(Transition(state, a, r, state2, done))
        _record(run, sample, a, r)
        _maybe_recompute_stats(run)
        m = agent.sac_update(run.buffer)
        if log is not None:
            log.write(m)
        run.rl_steps += 1
        state = state2
    run.episodes += 1
    if run.classifier is not None and run.rl_steps < run.schedule.ca:
        _fit_classifier(run)


# persistence ----------------------------------------------------------------

def save_run(run: RunState, out_dir: Path) -> Path:
    arrays, agent_meta = run.agent.state_arrays()
    meta = {"agent": agent_meta, "run": {
        "config": run.config.to_dict(), "schedule": dataclasses.asdict(run.schedule),
        "env_steps": run.env_steps, "rl_steps": run.rl_steps, "episodes": run.episodes,
        "rng": run.rng.bit_generator.state, "clf_rng": run.clf_rng.bit_generator.state,
        "sim_rng": run.env.sim.rng.bit_generator.state, "m": run.env.size,
    }}
    if run.classifier is not None:
        c_arrays, c_meta = run.classifier.state()
        arrays.update(c_arrays)
        meta["classifier"] = c_meta
    arrays.update(run.metrics.to_arrays())
    tmp = out_dir / (CHECKPOINT + ".tmp")
    save_checkpoint(tmp, arrays, meta)
    run.buffer.save(out_dir / (BUFFER + ".tmp"))
    os.replace(out_dir / (BUFFER + ".tmp"), out_dir / BUFFER)
    os.replace(tmp, out_dir / CHECKPOINT)
    return out_dir / CHECKPOINT


def load_run(out_dir: Path, config: ExperimentConfig, realtime: bool = False) -> RunState:
    arrays, meta = load_checkpoint(out_dir / CHECKPOINT)
    info = meta["run"]
    if info["config"] != config.to_dict():
        raise ConfigError("checkpoint was written with a different configuration")
    topology = config.load_topology()
    agent = SacAgent.from_arrays(arrays, meta["agent"])
    env = make_env(config, topology, agent.m_max, None, realtime)
    env.sim.rng.bit_generator.state = info["sim_rng"]
    rng = np.random.default_rng()
    rng.bit_generator.state = info["rng"]
    clf_rng = np.random.default_rng()
    clf_rng.bit_generator.state = info["clf_rng"]
    clf = QosClassifier.from_state(arrays, meta["classifier"]) if "classifier" in meta else None
    return RunState(config, Schedule(**info["schedule"]), env, agent, ReplayBuffer.load(out_dir / BUFFER), clf,
                    rng, clf_rng, RunMetrics.from_arrays(arrays, info["m"]), info["env_steps"],
                    info["rl_steps"], info["episodes"])


def _trim_update_log(path: Path, updates: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= updates]
    path.write_text("".join(keep))


# entry point ----------------------------------------------------------------

@dataclass
class TrainResult:
    agent: SacAgent
    metrics: RunMetrics
    checkpoint: Path
    finished: bool
    run: RunState


def train(config: ExperimentConfig, out_dir, *, resume: bool = True, agent: SacAgent | None = None,
          schedule: Schedule | None = None, on_episode: Callable[[RunState], bool | None] | None = None,
          stop_after: int | None = None, realtime: bool = False) -> TrainResult:
    """Run (or resume) a training job writing checkpoints and CSVs under ``out_dir``.

    ``agent`` supplies initial weights (fine-tuning); ``schedule`` overrides
    the configured step budget. ``on_episode`` runs after seed collection
    and after every episode; returning True stops training early.
    ``stop_after`` stops at the first checkpoint at or beyond that many
    environment steps, leaving a resumable directory.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = schedule or Schedule(config.asa, config.ca, config.total_steps)
    if resume and (out_dir / CHECKPOINT).exists():
        run = load_run(out_dir, config, realtime)
        _trim_update_log(out_dir / UPDATES, run.agent.updates)
    else:
        for name in (UPDATES, CHECKPOINT, BUFFER):
            (out_dir / name).unlink(missing_ok=True)
        streams = seed_streams(config.seed)
        topology = config.load_topology()
        m_max = config.resolved_m_max(topology)
        if agent is None:
            agent = new_agent(config, m_max, streams["agent"])
        elif agent.m_max != m_max:
            raise ConfigError(f"agent identifier width {agent.m_max} does not match m_max={m_max}")
        env = make_env(config, topology, m_max, streams["sim"], realtime)
        clf_rng = np.random.default_rng(streams["classifier"])
        clf = _new_classifier(config, agent, clf_rng) if schedule.ca > 0 else None
        run = RunState(config, schedule, env, agent, ReplayBuffer(config.replay_size), clf,
                       np.random.default_rng(streams["explore"]), clf_rng, RunMetrics(topology.size))
        _seed_phase(run)
        save_run(run, out_dir)
        if on_episode is not None and on_episode(run):
            return _finish(run, out_dir, finished=True)

    last_ckpt = run.env_steps
    with UpdateLog(out_dir / UPDATES, config.update_log_every) as log:
        while run.episodes < schedule.episodes(config.e_time):
            _episode(run, log)
            stop = bool(on_episode(run)) if on_episode is not None else False
            done = run.episodes >= schedule.episodes(config.e_time) or stop
            crossed = run.env_steps // config.checkpoint_every > last_ckpt // config.checkpoint_every
            if crossed or done:
                save_run(run, out_dir)
                last_ckpt = run.env_steps
                if stop_after is not None and run.env_steps >= stop_after and not done:
                    return _finish(run, out_dir, finished=False)
            if stop:
                break
    return _finish(run, out_dir, finished=True)


def _finish(run: RunState, out_dir: Path, finished: bool) -> TrainResult:
    export_metrics(run.metrics, out_dir / METRICS)
    export_summary(run.metrics, out_dir / SUMMARY)
    return TrainResult(run.agent, run.metrics, out_dir / CHECKPOINT, finished, run)
