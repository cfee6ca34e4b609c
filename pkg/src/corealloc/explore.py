"""Exploration helpers: the threshold autoscaler and the QoS-probability classifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mdpcore import ReplayBuffer, Transition
from .neuralnet import Adam, SplitStack, load_checkpoint, save_checkpoint
from .simenv import MIN_ALLOCATION

HORIZON = 5
CANDIDATE_FACTORS = (0.9, 0.95, 0.99, 1.0, 1.01, 1.05, 1.1)


@dataclass(frozen=True)
class AutoScaleConfig:
    """Utilization bands and the multiplier applied in each."""

    high: float = 0.5         # util >= high -> * high_factor
    high_factor: float = 1.3
    mid: float = 0.3          # mid <= util < high -> * mid_factor
    mid_factor: float = 1.1
    low: float = 0.1          # util <= low -> * low_factor
    low_factor: float = 0.9
    noise: float = 0.05       # seed-phase multiplicative jitter half-width


def autoscale_step(allocations, utilization, caps, cfg: AutoScaleConfig = AutoScaleConfig(),
                   floor: float = MIN_ALLOCATION) -> np.ndarray:
    """One threshold-rule update per microservice, clamped to ``[floor, cap]``."""
    alloc = np.asarray(allocations, dtype=np.float64)
    util = np.clip(np.asarray(utilization, dtype=np.float64), 0.0, 1.0)
    factor = np.ones_like(alloc)
    factor[util <= cfg.low] = cfg.low_factor
    factor[(util >= cfg.mid) & (util < cfg.high)] = cfg.mid_factor
    factor[util >= cfg.high] = cfg.high_factor
    caps = np.asarray(caps, dtype=np.float64)
    return np.clip(alloc * factor, np.minimum(floor, caps), caps)


class AutoScalePolicy:
    """Stateful autoscaler driven by the environment's last utilization reading."""

    def __init__(self, caps, cfg: AutoScaleConfig = AutoScaleConfig(), floor: float = MIN_ALLOCATION):
        self.caps = np.asarray(caps, dtype=np.float64)
        self.cfg = cfg
        self.floor = floor
        self.allocations = self.caps.copy()

    def reset(self) -> None:
        self.allocations = self.caps.copy()

    def __call__(self, utilization, rng: np.random.Generator | None = None) -> np.ndarray:
        """Next allocation (cores); ``rng`` adds the seed-phase jitter."""
        alloc = autoscale_step(self.allocations, utilization, self.caps, self.cfg, self.floor)
        if rng is not None and self.cfg.noise > 0:
            alloc = alloc * rng.uniform(1 - self.cfg.noise, 1 + self.cfg.noise, alloc.shape)
            alloc = np.clip(alloc, np.minimum(self.floor, self.caps), self.caps)
        self.allocations = alloc
        return alloc

    def action(self, utilization, rng=None) -> np.ndarray:
        """Next allocation as fractions of the caps."""
        return np.clip(self(utilization, rng) / self.caps, 0.0, 1.0)


def collect_seed(env, steps: int, rng: np.random.Generator, buffer: ReplayBuffer | None = None,
                 cfg: AutoScaleConfig = AutoScaleConfig(), on_step: Callable | None = None,
                 noisy: bool = True) -> list[Transition] | ReplayBuffer:
    """Run the (jittered) autoscaler for ``steps`` environment steps.

    ``env`` must offer ``caps``, ``needs_reset``, ``reset_random(rng)``,
    ``utilization`` and ``step(action) -> (state2, reward, done, sample)``.
    Transitions go into ``buffer`` when given, otherwise into a returned list.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    policy = AutoScalePolicy(env.caps, cfg)
    out = [] if buffer is None else buffer
    state = None
    for _ in range(steps):
        if env.needs_reset or state is None:
            state = env.reset_random(rng)
            policy.reset()
        a = policy.action(env.utilization, rng if noisy else None)
        state2, r, done, sample = env.step(a)
        t = Transition(state, a, r, state2, done)
        (out.append if buffer is None else out.push)(t)
        if on_step is not None:
            on_step(t, sample)
        state = state2
    return out


def anneal(t: int, ca: int) -> float:
    """Probability of keeping the learner's action: ``min(t / ca, 1)``."""
    if ca <= 0:
        raise ValueError("CA must be positive")
    return min(max(t, 0) / ca, 1.0)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class QosClassifier:
    """Per-row network giving P(QoS met at each of the next HORIZON steps | row, action)."""

    net: SplitStack
    lr: float = 1e-3
    batch_size: int = 100
    opt: Adam = field(init=False)

    def __post_init__(self):
        self.opt = Adam(self.net.params(), lr=self.lr)

    @classmethod
    def build(cls, n_in: int, hidden: int, rng: np.random.Generator, lr: float = 1e-3,
              batch_size: int = 100, pre_layers: int = 2, post_layers: int = 5) -> "QosClassifier":
        return cls(SplitStack.build(n_in, hidden, pre_layers, post_layers, HORIZON, rng), lr, batch_size)

    def logits(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        """``x`` is ``(..., d)`` prepared rows, ``a`` matching scalars; returns ``(..., HORIZON)``."""
        lead = x.shape[:-1]
        z = self.net(x.reshape(-1, x.shape[-1]), np.asarray(a).reshape(-1))
        return z.reshape(*lead, HORIZON)

    def predict(self, x: np.ndarray, a: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(x, a))

    def loss_and_grads(self, x: np.ndarray, a: np.ndarray, labels: np.ndarray):
        """Mean binary cross-entropy over rows and heads.

        ``x`` is ``(B, M, d)``, ``a`` ``(B, M)``, ``labels`` ``(B, HORIZON)``
        (service-level outcomes shared by every row of a state).
        """
        b, m, d = x.shape
        z, cache = self.net.forward(x.reshape(b * m, d), a.reshape(-1))
        y = np.repeat(labels, m, axis=0)
        # log(1 + e^z) - y z
        loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
        dz = (_sigmoid(z) - y) / z.size
        grads, _, _ = self.net.backward(cache, dz)
        return loss, grads

    def fit(self, x: np.ndarray, a: np.ndarray, labels: np.ndarray, max_updates: int,
            rng: np.random.Generator) -> float:
        """Up to ``max_updates`` minibatch Adam steps; returns the last batch loss."""
        if len(x) == 0:
            raise ValueError("classifier dataset is empty")
        loss = float("nan")
        for _ in range(max_updates):
            idx = rng.integers(0, len(x), size=min(self.batch_size, len(x)))
            loss, grads = self.loss_and_grads(x[idx], a[idx], labels[idx])
            self.opt.step(grads)
        return loss

    def state(self, prefix: str = "clf") -> tuple[dict, dict]:
        return ({**self.net.state(prefix), **self.opt.state(prefix + "_opt")},
                {"spec": self.net.spec(), "lr": self.lr, "batch_size": self.batch_size})

    @classmethod
    def from_state(cls, arrays: dict, meta: dict, prefix: str = "clf") -> "QosClassifier":
        clf = cls(SplitStack.from_state(arrays, prefix, meta["spec"]), meta["lr"], meta["batch_size"])
        clf.opt.load_state(arrays, prefix + "_opt")
        return clf

    def save(self, path) -> None:
        arrays, meta = self.state()
        save_checkpoint(path, arrays, {"classifier": meta})

    @classmethod
    def load(cls, path) -> "QosClassifier":
        arrays, meta = load_checkpoint(path)
        return cls.from_state(arrays, meta["classifier"])


def qos_labels(rewards: np.ndarray, done: np.ndarray, horizon: int = HORIZON):
    """Indices with a complete label window, and their labels.

    Transition ``i`` gets ``met[i .. i+horizon-1]`` where ``met`` means the
    reward was not the violation penalty. Windows may not cross an episode
    end, so the newest ``horizon - 1`` items of the buffer and the last ones
    of each episode are dropped.
    """
    rewards = np.asarray(rewards)
    done = np.asarray(done, dtype=bool)
    n = rewards.size
    if n < horizon:
        return np.zeros(0, dtype=np.int64), np.zeros((0, horizon))
    met = (rewards != -1.0).astype(np.float64)
    starts = np.arange(n - horizon + 1)
    window = starts[:, None] + np.arange(horizon)
    # a terminal flag anywhere before the window's last item breaks it
    crosses = done[window[:, :-1]].any(axis=1)
    keep = starts[~crosses]
    return keep, met[keep[:, None] + np.arange(horizon)]


def classifier_dataset(buffer: ReplayBuffer, prepare: Callable, horizon: int = HORIZON):
    """Prepared states, actions and labels from the replay buffer's chronology."""
    idx, labels = qos_labels(buffer.chronological("r"), buffer.chronological("d"), horizon)
    batch = buffer.gather(idx)
    return prepare(batch.s), batch.a, labels


def augment_action(clf: QosClassifier, x: np.ndarray, a_rl: np.ndarray, keep_prob: float,
                   rng: np.random.Generator, threshold: float = 0.8, noise: float = 0.01,
                   factors=CANDIDATE_FACTORS) -> np.ndarray:
    """Replace the learner's action by the cheapest classifier-approved variant.

    ``x`` is the prepared ``(M, d)`` state. With probability ``keep_prob``
    the learner's action is kept; otherwise each microservice independently
    takes the smallest candidate whose every horizon probability reaches
    ``threshold``, falling back to the candidate with the best worst-horizon
    probability (ties go to the larger allocation). Both branches finish
    with multiplicative ``1 +/- noise`` jitter and clamping to ``[0, 1]``.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    a_rl = np.asarray(a_rl, dtype=np.float64)
    if rng.random() < keep_prob:
        a = a_rl.copy()
    else:
        a = choose_candidates(clf, x, a_rl, threshold, factors)
    return np.clip(a * rng.uniform(1 - noise, 1 + noise, a.shape), 0.0, 1.0)


def choose_candidates(clf: QosClassifier, x: np.ndarray, a_rl: np.ndarray, threshold: float = 0.8,
                      factors=CANDIDATE_FACTORS) -> np.ndarray:
    m = a_rl.size
    order = np.argsort(factors, kind="stable")
    f = np.asarray(factors, dtype=np.float64)[order]
    cand = np.clip(a_rl[None, :] * f[:, None], 0.0, 1.0)           # (C, M), ascending
    probs = clf.predict(np.broadcast_to(x, (f.size,) + x.shape), cand)  # (C, M, H)
    worst = probs.min(axis=2)
    chosen = np.empty(m)
    for i in range(m):
        ok = np.flatnonzero(worst[:, i] >= threshold)
        if ok.size:
            chosen[i] = cand[ok[0], i]
        else:
            best = np.flatnonzero(worst[:, i] == worst[:, i].max())
            chosen[i] = cand[best[-1], i]
    return chosen
