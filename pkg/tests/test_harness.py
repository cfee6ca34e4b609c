import csv
import dataclasses

import numpy as np
import pytest
import yaml

from corealloc import cli
from corealloc.explore import AutoScalePolicy
from corealloc.harness import (AllocationEnv, ConfigError, ConstantPolicy, ExperimentConfig, RunMetrics,
                               Schedule, evaluate, evaluate_autoscale, evaluate_policy, export_metrics,
                               load_config, prepare_transfer, read_metrics, train)
from corealloc.harness.train import CHECKPOINT, METRICS, UPDATES, new_agent, seed_streams
from corealloc.mdpcore import reward
from corealloc.neuralnet import load_checkpoint
from corealloc.sacagent import SacAgent
from corealloc.simenv import default_topology, topology_to_dict

TINY = dict(total_steps=400, asa=200, ca=100, rsc=150, replay_size=1000, e_time=50, warmup=5, k=2,
            hidden_units=8, fc_layers=3, batch_size=16, classifier_updates=20, checkpoint_every=100, m_max=8,
            eval_users=[100, 400], eval_duration=20, milestone_users=[100, 400], milestone_duration=10)


def tiny(**kw):
    return ExperimentConfig(**{**TINY, **kw})


def test_defaults_match_published_table():
    c = ExperimentConfig()
    assert (c.alpha, c.k, c.gamma, c.replay_size, c.batch_size, c.polyak) == (1.0, 5, 0.9, 200000, 100, 0.995)
    assert (c.learning_rate, c.max_grad_norm, c.e_time, c.warmup, c.t_length) == (3e-5, 40.0, 300, 60, 1.0)
    assert (c.rsc, c.asa, c.ca, c.total_steps, c.initial_entropy_coef) == (100000, 130000, 50000, 260000, 1.0)
    assert (c.fc_layers, c.hidden_units) == (7, 256)
    assert c.transfer_schedule() == (70000, 50000, 120000)


@pytest.mark.parametrize("bad", [dict(ca=300), dict(warmup=-1), dict(asa=500), dict(alpha=-1), dict(input_clip=0.0),
                                 dict(autoscale={"bogus": 1})])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        tiny(**bad)


def test_load_config_resolves_relative_topology(tmp_path):
    (tmp_path / "topo.yaml").write_text(yaml.safe_dump(topology_to_dict(default_topology())))
    (tmp_path / "c.yaml").write_text("topology: topo.yaml\nqos_ms: 150\nautoscale: {high: 0.6}\n")
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.load_topology().size == 6 and cfg.qos_ms == 150
    assert cfg.autoscale_config().high == 0.6 and cfg.autoscale_config().mid == 0.3
    (tmp_path / "d.yaml").write_text("nonsense_key: 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "d.yaml")


def test_bundled_desk_config_loads():
    cfg = load_config("configs/desk.yaml")
    assert (cfg.asa, cfg.ca, cfg.total_steps) == (20000, 10000, 50000)


def make_env(e_time=10, seed=0):
    return AllocationEnv(default_topology(), 200.0, 1.0, 3, 8, e_time, 4, seed=seed)


def test_env_episode_and_reward():
    env = make_env()
    s = env.reset(300)
    assert s.shape == (6, 3 * 35)
    for i in range(10):
        a = np.full(6, 0.3 + 0.05 * i)
        s, r, done, sample = env.step(a)
        assert r == reward(sample.p99_ms, 200.0, a, env.caps, 1.0)
        assert done == (i == 9)
    with pytest.raises(RuntimeError):
        env.step(np.ones(6))


def test_env_zero_warmup_still_observes():
    env = AllocationEnv(default_topology(), 200.0, 1.0, 2, 8, 5, 0, seed=0)
    assert env.reset(100).shape == (6, 70)


def test_degenerate_schedule_leaves_policy_untouched(tmp_path):
    cfg = tiny(total_steps=200, ca=0)
    res = train(cfg, tmp_path)
    fresh = new_agent(cfg, 8, seed_streams(cfg.seed)["agent"])
    for p, q in zip(res.agent.policy.params(), fresh.policy.params()):
        assert p.tobytes() == q.tobytes()
    assert res.agent.stats.count == 200 * 6 * cfg.k
    assert len(res.metrics) == 200


def test_episode_accounting_and_outputs(tmp_path):
    cfg = tiny()
    res = train(cfg, tmp_path)
    assert res.run.env_steps == cfg.asa + res.run.episodes * cfg.e_time
    assert res.run.episodes == 4 and res.agent.updates == 200
    rows = list(csv.DictReader(open(tmp_path / UPDATES)))
    assert [int(r["step"]) for r in rows] == list(range(1, 201))
    logged = read_metrics(tmp_path / METRICS)
    acts = logged.action_matrix()
    caps = default_topology().caps
    for i in range(len(logged)):
        expect = reward(logged.columns["p99_ms"][i], cfg.qos_ms, acts[i], caps, cfg.alpha)
        assert logged.columns["reward"][i] == expect


def test_seeded_runs_are_bit_identical(tmp_path):
    cfg = tiny()
    train(cfg, tmp_path / "a")
    train(cfg, tmp_path / "b")
    assert (tmp_path / "a" / METRICS).read_bytes() == (tmp_path / "b" / METRICS).read_bytes()
    assert (tmp_path / "a" / UPDATES).read_bytes() == (tmp_path / "b" / UPDATES).read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    cfg = tiny()
    full = train(cfg, tmp_path / "full")
    part = train(cfg, tmp_path / "part", stop_after=300)
    assert not part.finished and part.run.env_steps < cfg.total_steps
    resumed = train(cfg, tmp_path / "part")
    assert resumed.finished
    for name in (METRICS, UPDATES):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()
    a, _ = load_checkpoint(tmp_path / "full" / CHECKPOINT)
    b, _ = load_checkpoint(tmp_path / "part" / CHECKPOINT)
    assert a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_resume_rejects_changed_config(tmp_path):
    train(tiny(total_steps=200, ca=0), tmp_path)
    with pytest.raises(ConfigError):
        train(tiny(total_steps=200, ca=0, gamma=0.5), tmp_path)


def test_full_allocation_never_violates():
    cfg = tiny()
    m = evaluate_policy(ConstantPolicy(1.0), cfg, [50, 275, 500], 30)
    assert m.overall()["violation_rate"] == 0
    assert m.overall()["mean_cores"] == pytest.approx(default_topology().caps.sum())


def test_floor_allocation_collapses_at_peak_load():
    cfg = tiny()
    m = evaluate_policy(ConstantPolicy(0.0), cfg, [500], 60)
    flags = m.array("qos_violation")
    assert flags[5:].mean() > 0.9


def test_aggregate_is_step_weighted():
    m = evaluate_policy(ConstantPolicy(0.5), tiny(), [100, 300], 25)
    rows = m.summary()
    total = sum(r["mean_cores"] * r["steps"] for r in rows[:-1]) / sum(r["steps"] for r in rows[:-1])
    assert rows[-1]["mean_cores"] == pytest.approx(total, rel=1e-12)
    assert rows[-1]["users"] == "all" and [r["users"] for r in rows[:-1]] == [100, 300]


def test_autoscale_contracts_and_fixed_point():
    cfg = tiny()
    m = evaluate_autoscale(cfg, [50, 500], 60)
    assert m.overall()["violation_rate"] == 0
    acts = m.action_matrix()
    low = acts[m.array("users") == 50]
    # steady load: once every utilization sits in the dead band the allocation freezes
    env = make_env(e_time=10 ** 6, seed=1)
    env.reset(200)
    pol = AutoScalePolicy(env.caps)
    prev = None
    frozen = 0
    for _ in range(80):
        util = env.utilization
        a = pol.action(util)
        if prev is not None and np.all((util > 0.1) & (util < 0.3)):
            frozen += 1
            np.testing.assert_array_equal(a, prev)
        prev = a
        env.step(a)
    assert frozen > 0
    assert low[-1].sum() < low[0].sum()


def test_evaluation_freezes_weights_and_checks_schema(monkeypatch):
    cfg = tiny()
    agent = new_agent(cfg, 8, 0)
    before = [p.copy() for p in agent.trainable()]
    m = evaluate(agent, cfg, [100], 10)
    assert len(m) == 10
    assert all(p.tobytes() == q.tobytes() for p, q in zip(before, agent.trainable()))

    real_act = agent.act

    def sneaky(state, mode="sample", rng=None):
        agent.policy.layers[0].b += 1e-9
        return real_act(state, mode, rng)
    monkeypatch.setattr(agent, "act", sneaky)
    with pytest.raises(AssertionError):
        evaluate(agent, cfg, [100], 3)
    with pytest.raises(ConfigError):
        evaluate(new_agent(cfg.replace(m_max=4), 4, 0), cfg, [100], 3)
    with pytest.raises(ConfigError):
        evaluate(agent, cfg.replace(k=3), [100], 3)


def test_export_metrics(tmp_path):
    empty = RunMetrics(3)
    export_metrics(empty, tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "step,users,p99_ms,qos_violation,total_cores,reward,a0,a1,a2\n"
    m = evaluate_policy(ConstantPolicy(0.3), tiny(), [450], 30)
    export_metrics(m, tmp_path / "m.csv")
    back = read_metrics(tmp_path / "m.csv")
    assert back.columns == m.columns
    np.testing.assert_array_equal(back.action_matrix(), m.action_matrix())
    recomputed = np.mean(np.array(back.columns["p99_ms"]) > 200.0)
    assert recomputed == back.overall()["violation_rate"]


def test_transfer_preparation_handles_new_sizes(tmp_path):
    src = new_agent(tiny(), 8, 0)
    topo = topology_to_dict(default_topology())
    topo["microservices"] = topo["microservices"][:4]
    for ms, down in zip(topo["microservices"], ([1, 2], [3], [3], [])):
        ms["downstream"] = down
    (tmp_path / "t.yaml").write_text(yaml.safe_dump(topo))
    cfg = tiny(topology=str(tmp_path / "t.yaml"), m_max=10)
    agent = prepare_transfer(src, cfg, np.random.default_rng(0))
    assert agent.m_max == 10
    m = evaluate(agent, cfg, [100], 5)
    assert m.action_matrix().shape == (5, 4)
    with pytest.raises(ConfigError):
        prepare_transfer(new_agent(tiny(), 8, 0), tiny(k=3), np.random.default_rng(0))


def test_cli_round_trip(tmp_path, capsys):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump({**TINY, "total_steps": 250, "asa": 200, "ca": 0}))
    out = tmp_path / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(out)]) == 0
    assert (out / CHECKPOINT).exists()
    assert cli.main(["eval", "--checkpoint", str(out / CHECKPOINT), "--config", str(cfg_path),
                     "--users", "100,200", "--duration", "5", "--out", str(tmp_path / "e.csv")]) == 0
    assert len(read_metrics(tmp_path / "e.csv")) == 10
    assert cli.main(["autoscale-eval", "--config", str(cfg_path), "--users", "100", "--duration", "4",
                     "--summary", str(tmp_path / "s.csv")]) == 0
    assert cli.main(["export", "--from", str(out), "--out", str(tmp_path / "x.csv")]) == 0
    assert (tmp_path / "x.csv").read_bytes() == (out / METRICS).read_bytes()
    capsys.readouterr()
    assert cli.main(["features", "--schema", "--m-max", "4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "index,category,name" and len(lines) == 1 + 27 + 4


def test_checkpoint_agent_loads_standalone(tmp_path):
    res = train(tiny(total_steps=250, ca=0), tmp_path)
    agent = SacAgent.load(tmp_path / CHECKPOINT)
    assert agent.updates == res.agent.updates
    assert dataclasses.asdict(agent.hyper) == dataclasses.asdict(res.agent.hyper)
