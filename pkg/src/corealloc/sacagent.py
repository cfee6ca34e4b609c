"""Soft actor-critic learner over per-microservice rows.

Every network sees one row per microservice and shares its parameters
across rows. The policy emits a (mean, log-std) pair per row; actions are
sigmoid-squashed Gaussian samples. Critics append the row's action after
their second layer and average their per-row scalars.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .mdpcore import Batch
from .neuralnet import Adam, SplitStack, Stack, clip_grad_norm, load_checkpoint, polyak_update, save_checkpoint
from .obsfeat import (ID_OFFSET, StandardizationStats, identifier_input_positions, n_features,
                      network_input_columns)

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
HEAD_SCALE = 1e-2
_HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


@dataclass
class SacHyper:
    gamma: float = 0.9
    lr: float = 3e-5
    entropy_lr: float | None = None  # falls back to lr
    max_grad_norm: float = 40.0
    polyak: float = 0.995
    batch_size: int = 100
    initial_entropy_coef: float = 1.0
    # None: total target -1/M per state. A number c: total target c*M.
    target_entropy_per_microservice: float | None = None
    # bound on standardized inputs; None leaves them unbounded
    input_clip: float | None = None

    def target_entropy(self, m: int) -> float:
        if self.target_entropy_per_microservice is None:
            return -1.0 / m
        return self.target_entropy_per_microservice * m


@dataclass
class NetShape:
    hidden: int = 256
    policy_layers: int = 7
    critic_pre_layers: int = 2
    critic_post_layers: int = 5


class PolicyOutput(NamedTuple):
    mean: np.ndarray      # (B, M)
    log_std: np.ndarray   # (B, M), clipped
    pre_squash: np.ndarray
    action: np.ndarray    # (B, M) in (0, 1)
    log_prob: np.ndarray  # (B,) summed over rows


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def build_policy(n_in: int, shape: NetShape, rng) -> Stack:
    return Stack.build([n_in] + [shape.hidden] * shape.policy_layers + [2], rng,
                       relu_last=False, last_scale=HEAD_SCALE)


def build_critic(n_in: int, shape: NetShape, rng) -> SplitStack:
    return SplitStack.build(n_in, shape.hidden, shape.critic_pre_layers, shape.critic_post_layers, 1, rng)


def shared_parameter_fraction(policy: Stack, m_max: int, k: int) -> tuple[float, float]:
    """Fraction of policy parameters not tied to identifier inputs.

    Returns (per-microservice, all-identifiers): the first counts only the
    one identifier column a given microservice activates, the second every
    identifier column of the input layer.
    """
    total = policy.n_params()
    per_column = policy.layers[0].W.shape[0]
    ids = identifier_input_positions(k, m_max).size
    return 1.0 - per_column / total, 1.0 - ids * per_column / total


def _resize_identifier_columns(W: np.ndarray, start: int, old: int, new: int, rng) -> np.ndarray:
    bound = np.sqrt(6.0 / (W.shape[1] - old + new))
    fresh = rng.uniform(-bound, bound, size=(W.shape[0], new))
    return np.hstack([W[:, :start], fresh, W[:, start + old:]])


class SacAgent:
    def __init__(self, m_max: int, k: int, hyper: SacHyper | None = None, shape: NetShape | None = None,
                 seed: int | None = 0):
        self.m_max = m_max
        self.k = k
        self.hyper = hyper or SacHyper()
        self.shape = shape or NetShape()
        self.rng = np.random.default_rng(seed)
        self.columns = network_input_columns(k, m_max)
        d = self.columns.size
        self.policy = build_policy(d, self.shape, self.rng)
        self.q1 = build_critic(d, self.shape, self.rng)
        self.q2 = build_critic(d, self.shape, self.rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        self.log_eta = np.array([np.log(self.hyper.initial_entropy_coef)])
        self.stats = StandardizationStats.identity(n_features(m_max))
        self.updates = 0
        self._make_optimizers()

    def _make_optimizers(self):
        h = self.hyper
        self.opt_pi = Adam(self.policy.params(), lr=h.lr)
        self.opt_q1 = Adam(self.q1.params(), lr=h.lr)
        self.opt_q2 = Adam(self.q2.params(), lr=h.lr)
        self.opt_eta = Adam([self.log_eta], lr=h.entropy_lr if h.entropy_lr is not None else h.lr)

    @property
    def eta(self) -> float:
        return float(np.exp(self.log_eta[0]))

    @property
    def n_inputs(self) -> int:
        return self.columns.size

    # inputs ---------------------------------------------------------------

    def prepare(self, states: np.ndarray) -> np.ndarray:
        """Standardize raw stacked states ``(..., M, k*n)`` and keep network columns."""
        shift, scale = self.stats.tiled(self.k, self.m_max)
        cols = self.columns
        x = (states[..., cols] - shift[cols]) / scale[cols]
        if self.hyper.input_clip is not None:
            np.clip(x, -self.hyper.input_clip, self.hyper.input_clip, out=x)
        return x

    # forward passes -------------------------------------------------------

    def _policy_raw(self, x: np.ndarray):
        b, m, d = x.shape
        raw, cache = self.policy.forward(x.reshape(b * m, d))
        if not np.all(np.isfinite(raw)):
            raise FloatingPointError("policy produced non-finite outputs")
        return raw[:, 0].reshape(b, m), raw[:, 1].reshape(b, m), cache

    def policy_forward(self, x: np.ndarray, mode: str = "sample", rng=None, _cache: bool = False):
        """Actions for prepared inputs ``x`` of shape ``(B, M, d)``."""
        mean, raw_log_std, cache = self._policy_raw(x)
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        if mode == "sample":
            eps = (rng or self.rng).standard_normal(mean.shape)
        elif mode == "mean":
            eps = np.zeros_like(mean)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        u = mean + np.exp(log_std) * eps
        # Gaussian log-density minus log|d sigmoid/du| = -log(s(1-s)) = softplus(u) + softplus(-u)
        per_row = -0.5 * eps ** 2 - log_std - _HALF_LOG_2PI + _softplus(u) + _softplus(-u)
        out = PolicyOutput(mean, log_std, u, _sigmoid(u), per_row.sum(axis=1))
        if _cache:
            return out, (cache, eps, raw_log_std)
        return out

    def act(self, state: np.ndarray, mode: str = "sample", rng=None) -> np.ndarray:
        """One action vector for a single raw stacked state ``(M, k*n)``."""
        x = self.prepare(state)[None]
        return self.policy_forward(x, mode, rng).action[0]

    def q_forward(self, net: SplitStack, x: np.ndarray, a: np.ndarray, _cache: bool = False):
        """Mean over rows of the per-row critic scalar; ``x`` is ``(B, M, d)``."""
        b, m, d = x.shape
        rows, cache = net.forward(x.reshape(b * m, d), a.reshape(-1))
        q = rows.reshape(b, m).mean(axis=1)
        return (q, cache) if _cache else q

    def min_q(self, x: np.ndarray, a: np.ndarray):
        """``min(Q1, Q2)`` and its gradient with respect to ``a``."""
        b, m, _ = x.shape
        q1, c1 = self.q1_forward_cached(x, a)
        q2, c2 = self.q2_forward_cached(x, a)
        use1 = q1 <= q2
        dq = np.full((b * m, 1), 1.0 / m)
        _, _, da1 = self.q1.backward(c1, dq, param_grads=False)
        _, _, da2 = self.q2.backward(c2, dq, param_grads=False)
        da = np.where(use1[:, None], da1.reshape(b, m), da2.reshape(b, m))
        return np.minimum(q1, q2), da

    def q1_forward_cached(self, x, a):
        return self.q_forward(self.q1, x, a, _cache=True)

    def q2_forward_cached(self, x, a):
        return self.q_forward(self.q2, x, a, _cache=True)

    # learning steps -------------------------------------------------------

    def compute_targets(self, x2: np.ndarray, r: np.ndarray, d: np.ndarray) -> np.ndarray:
        """``r + gamma (1 - d) [min target Q(s', a') - eta log pi(a'|s')]`` with fresh ``a'``."""
        nxt = self.policy_forward(x2, "sample")
        qt = np.minimum(self.q_forward(self.q1_target, x2, nxt.action),
                        self.q_forward(self.q2_target, x2, nxt.action))
        return target_values(r, d, qt, self.eta, -nxt.log_prob, self.hyper.gamma)

    def critic_gradients(self, net: SplitStack, x: np.ndarray, a: np.ndarray, y: np.ndarray):
        """Mean squared error to ``y`` and its parameter gradients."""
        b, m, _ = x.shape
        q, cache = self.q_forward(net, x, a, _cache=True)
        err = q - y
        dq = np.repeat(2.0 * err / (b * m), m)[:, None]
        grads, _, _ = net.backward(cache, dq)
        return float(np.mean(err ** 2)), grads

    def update_critics(self, x: np.ndarray, a: np.ndarray, y: np.ndarray) -> tuple[float, float]:
        """One clipped Adam step per critic."""
        losses = []
        for net, opt in ((self.q1, self.opt_q1), (self.q2, self.opt_q2)):
            loss, grads = self.critic_gradients(net, x, a, y)
            opt.step(clip_grad_norm(grads, self.hyper.max_grad_norm)[0])
            losses.append(loss)
        return losses[0], losses[1]

    def actor_gradients(self, x: np.ndarray, critic: Callable | None = None, rng=None):
        """Loss ``mean(eta log pi - Q)`` over reparameterized samples, and its gradients."""
        b, m, _ = x.shape
        out, (cache, eps, raw_log_std) = self.policy_forward(x, "sample", rng=rng, _cache=True)
        q, dq_da = (critic or self.min_q)(x, out.action)
        eta = self.eta
        loss = float(np.mean(eta * out.log_prob - q))
        s = out.action
        # d log_pi / du = 2 s - 1 from the squashing correction
        dl_du = (eta * (2.0 * s - 1.0) - dq_da * s * (1.0 - s)) / b
        dl_dlogstd = -eta / b + dl_du * np.exp(out.log_std) * eps
        dl_dlogstd = dl_dlogstd * ((raw_log_std >= LOG_STD_MIN) & (raw_log_std <= LOG_STD_MAX))
        dy = np.stack([dl_du.reshape(-1), dl_dlogstd.reshape(-1)], axis=1)
        grads, _ = self.policy.backward(cache, dy, input_grad=False)
        return loss, grads

    def update_actor(self, x: np.ndarray, critic: Callable | None = None) -> float:
        """Gradient ascent on ``min Q(s, a~pi) - eta log pi``.

        ``critic(x, a) -> (q, dq/da)`` defaults to the twin-critic minimum.
        """
        loss, grads = self.actor_gradients(x, critic)
        self.opt_pi.step(clip_grad_norm(grads, self.hyper.max_grad_norm)[0])
        return loss

    def update_entropy(self, x: np.ndarray, log_prob: np.ndarray | None = None) -> float:
        """Temperature step on ``-mean(log_eta * (log_pi + target))``.

        The gradient is ``-mean(log_pi + target)``: when the policy is more
        deterministic than the target (log_pi > -target) log_eta rises.
        """
        if log_prob is None:
            log_prob = self.policy_forward(x, "sample").log_prob
        target = self.hyper.target_entropy(x.shape[1])
        gap = float(np.mean(log_prob + target))
        self.opt_eta.step([np.array([-gap])])
        return -float(self.log_eta[0]) * gap

    def update(self, batch: Batch) -> dict:
        """Critic, actor, entropy and target steps on one raw batch."""
        x = self.prepare(batch.s)
        x2 = self.prepare(batch.s2)
        y = self.compute_targets(x2, batch.r, batch.d.astype(np.float64))
        l1, l2 = self.update_critics(x, batch.a, y)
        actor_loss = self.update_actor(x)
        logp = self.policy_forward(x, "sample").log_prob
        self.update_entropy(x, logp)
        polyak_update(self.q1_target.params(), self.q1.params(), self.hyper.polyak)
        polyak_update(self.q2_target.params(), self.q2.params(), self.hyper.polyak)
        self.updates += 1
        return {"step": self.updates, "critic1_loss": l1, "critic2_loss": l2, "actor_loss": actor_loss,
                "eta": self.eta, "entropy": float(-np.mean(logp))}

    def sac_update(self, buffer, rng: np.random.Generator | None = None) -> dict:
        if len(buffer) == 0:
            raise ValueError("replay buffer is empty")
        return self.update(buffer.sample(self.hyper.batch_size, rng or self.rng))

    def trainable(self) -> list[np.ndarray]:
        return (self.policy.params() + self.q1.params() + self.q2.params()
                + self.q1_target.params() + self.q2_target.params() + [self.log_eta])

    # identifiers ----------------------------------------------------------

    def resize_identifiers(self, m_max: int, rng: np.random.Generator | None = None) -> None:
        """Reinitialize identifier input columns (resized to ``m_max``); keep all else.

        Optimizer state restarts because parameter shapes may change.
        """
        rng = rng or self.rng
        start = int(identifier_input_positions(self.k, self.m_max)[0])
        nets = [self.policy.layers[0], self.q1.pre.layers[0], self.q2.pre.layers[0]]
        for layer in nets:
            layer.W = _resize_identifier_columns(layer.W, start, self.m_max, m_max, rng)
        self.q1_target.pre.layers[0].W = self.q1.pre.layers[0].W.copy()
        self.q2_target.pre.layers[0].W = self.q2.pre.layers[0].W.copy()
        old_stats = self.stats
        self.m_max = m_max
        self.columns = network_input_columns(self.k, m_max)
        base = ID_OFFSET
        mean = np.concatenate([old_stats.mean[:base], np.zeros(m_max), old_stats.mean[-1:]])
        var = np.concatenate([old_stats.var[:base], np.ones(m_max), old_stats.var[-1:]])
        self.stats = StandardizationStats(mean, var, old_stats.count)
        self._make_optimizers()

    # persistence ----------------------------------------------------------

    def state_arrays(self) -> tuple[dict, dict]:
        arrays = {}
        for name, net in (("policy", self.policy), ("q1", self.q1), ("q2", self.q2),
                          ("q1_target", self.q1_target), ("q2_target", self.q2_target)):
            arrays.update(net.state(name))
        for name, opt in (("opt_pi", self.opt_pi), ("opt_q1", self.opt_q1), ("opt_q2", self.opt_q2),
                          ("opt_eta", self.opt_eta)):
            arrays.update(opt.state(name))
        arrays["log_eta"] = self.log_eta
        arrays["stats.mean"] = self.stats.mean
        arrays["stats.var"] = self.stats.var
        meta = {
            "m_max": self.m_max, "k": self.k, "updates": self.updates,
            "stats_count": int(self.stats.count),
            "hyper": vars(self.hyper), "shape": vars(self.shape),
            "spec": {"policy": self.policy.spec(), "q1": self.q1.spec(), "q2": self.q2.spec()},
            "rng": self.rng.bit_generator.state,
        }
        return arrays, meta

    def save(self, path) -> None:
        arrays, meta = self.state_arrays()
        save_checkpoint(path, arrays, {"agent": meta})

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict) -> "SacAgent":
        agent = cls.__new__(cls)
        agent.m_max = meta["m_max"]
        agent.k = meta["k"]
        agent.hyper = SacHyper(**meta["hyper"])
        agent.shape = NetShape(**meta["shape"])
        agent.rng = np.random.default_rng()
        agent.rng.bit_generator.state = meta["rng"]
        agent.columns = network_input_columns(agent.k, agent.m_max)
        spec = meta["spec"]
        agent.policy = Stack.from_state(arrays, "policy", spec["policy"])
        agent.q1 = SplitStack.from_state(arrays, "q1", spec["q1"])
        agent.q2 = SplitStack.from_state(arrays, "q2", spec["q2"])
        agent.q1_target = SplitStack.from_state(arrays, "q1_target", spec["q1"])
        agent.q2_target = SplitStack.from_state(arrays, "q2_target", spec["q2"])
        agent.log_eta = np.array(arrays["log_eta"], dtype=np.float64)
        agent.stats = StandardizationStats(np.array(arrays["stats.mean"]), np.array(arrays["stats.var"]),
                                           meta["stats_count"])
        agent.updates = meta["updates"]
        agent._make_optimizers()
        for name, opt in (("opt_pi", agent.opt_pi), ("opt_q1", agent.opt_q1), ("opt_q2", agent.opt_q2),
                          ("opt_eta", agent.opt_eta)):
            opt.load_state(arrays, name)
        return agent

    @classmethod
    def load(cls, path) -> "SacAgent":
        arrays, meta = load_checkpoint(path)
        return cls.from_arrays(arrays, meta["agent"])


def target_values(r, d, min_target_q, eta, entropy, gamma):
    """``r + gamma (1 - d) (min_target_q + eta * entropy)``."""
    r = np.asarray(r, dtype=np.float64)
    return r + gamma * (1.0 - np.asarray(d, dtype=np.float64)) * (min_target_q + eta * entropy)


class UpdateLog:
    """Appends per-update metrics to a CSV file."""

    FIELDS = ["step", "critic1_loss", "critic2_loss", "actor_loss", "eta", "entropy"]

    def __init__(self, path, every: int = 1):
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        self._fh = open(path, "a", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=self.FIELDS, extrasaction="ignore", lineterminator="\n")
        self.every = every
        if new:
            self._writer.writeheader()

    def write(self, metrics: dict) -> None:
        if metrics["step"] % self.every == 0:
            self._writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in metrics.items()})

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
