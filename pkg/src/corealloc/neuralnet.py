"""Dense layers applied row-wise with shared parameters, plus optimizer utilities.

An input is an ``R x d`` matrix whose rows are processed independently by the
same weights (one row per microservice, possibly for several states at
once). Gradients from all rows accumulate into the shared parameters.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    relu: bool = True

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


def init_dense(n_in: int, n_out: int, rng: np.random.Generator, relu: bool = True,
               scale: float = 1.0) -> Dense:
    """Fan-in scaled uniform weights (He bound for ReLU layers), zero bias."""
    bound = np.sqrt(6.0 / n_in) if relu else np.sqrt(1.0 / n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in)) * scale
    return Dense(W, np.zeros(n_out), relu)


class Stack:
    """A sequence of :class:`Dense` layers."""

    def __init__(self, layers: Sequence[Dense]):
        self.layers = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ShapeError("consecutive layer widths do not match")

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, relu_last: bool = True,
              last_scale: float = 1.0) -> "Stack":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            layers.append(init_dense(n_in, n_out, rng, relu=relu_last or not last,
                                     scale=last_scale if last else 1.0))
        return cls(layers)

    @property
    def in_features(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_features(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "Stack":
        return Stack([Dense(l.W.copy(), l.b.copy(), l.relu) for l in self.layers])

    def forward(self, x: np.ndarray):
        """Returns ``(y, cache)``; ``cache`` feeds :meth:`backward`."""
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"expected (rows, {self.in_features}) input, got {x.shape}")
        cache = []
        h = x
        for layer in self.layers:
            z = h @ layer.W.T + layer.b
            if layer.relu:
                mask = z > 0
                cache.append((h, mask))
                h = z * mask
            else:
                cache.append((h, None))
                h = z
        return h, cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, dy: np.ndarray, param_grads: bool = True, input_grad: bool = True):
        """Reverse pass. Returns ``(grads, dx)`` where ``grads`` lines up with
        :meth:`params` (or is ``None`` when ``param_grads`` is false)."""
        if dy.shape[1] != self.out_features or dy.shape[0] != cache[0][0].shape[0]:
            raise ShapeError(f"upstream gradient shape {dy.shape} does not match the forward pass")
        grads = [None] * (2 * len(self.layers)) if param_grads else None
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h_in, mask = cache[i]
            if mask is not None:
                g = g * mask
            if param_grads:
                grads[2 * i] = g.T @ h_in
                grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ layer.W
        return grads, (g if input_grad else None)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.{i}.W"] = layer.W
            out[f"{prefix}.{i}.b"] = layer.b
        return out

    def spec(self) -> list[dict]:
        return [{"in": l.W.shape[1], "out": l.W.shape[0], "relu": bool(l.relu)} for l in self.layers]

    @classmethod
    def from_state(cls, arrays: dict, prefix: str, spec: list[dict]) -> "Stack":
        layers = []
        for i, s in enumerate(spec):
            W = np.array(arrays[f"{prefix}.{i}.W"], dtype=np.float64)
            b = np.array(arrays[f"{prefix}.{i}.b"], dtype=np.float64)
            if W.shape != (s["out"], s["in"]):
                raise ShapeError(f"{prefix}.{i}: stored weight shape {W.shape} disagrees with spec")
            layers.append(Dense(W, b, bool(s["relu"])))
        return cls(layers)


def forward_shared(params: Stack, x: np.ndarray) -> np.ndarray:
    """Apply ``params`` to every row of ``x``."""
    return params(x)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


@dataclass
class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    params: list[np.ndarray]
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default=None)
    v: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in self.params]
        if self.v is None:
            self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter is required")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state(self, arrays: dict, prefix: str) -> None:
        self.t = int(arrays[f"{prefix}.t"])
        for i in range(len(self.params)):
            m = arrays[f"{prefix}.m{i}"]
            v = arrays[f"{prefix}.v{i}"]
            if m.shape != self.params[i].shape:
                raise ShapeError(f"{prefix}: moment shape mismatch")
            self.m[i][...] = m
            self.v[i][...] = v


def adam_step(state: Adam, grads: Sequence[np.ndarray]) -> list[np.ndarray]:
    state.step(grads)
    return state.params


def polyak_update(target: Sequence[np.ndarray], online: Sequence[np.ndarray], rho: float) -> None:
    """``target <- rho * target + (1 - rho) * online``, in place."""
    if len(target) != len(online):
        raise ShapeError("target and online networks differ in structure")
    for t, o in zip(target, online):
        if t.shape != o.shape:
            raise ShapeError(f"shape mismatch {t.shape} vs {o.shape}")
        t *= rho
        t += (1.0 - rho) * o


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write arrays and JSON metadata to an uncompressed ``.npz`` container."""
    payload = dict(arrays)
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    payload["__version__"] = np.array(CHECKPOINT_VERSION, dtype=np.int64)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        if "__version__" not in data.files:
            raise ValueError(f"{path} is not a checkpoint")
        version = int(data["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k not in ("__meta__", "__version__")}
    return arrays, meta


class SplitStack:
    """Two stacks with a per-row scalar appended between them.

    ``pre`` sees the state row; its output plus the scalar (an action)
    feeds ``post``. Used by the critics and the QoS classifier.
    """

    def __init__(self, pre: Stack, post: Stack):
        if post.in_features != pre.out_features + 1:
            raise ShapeError("post stack must take the pre output plus one scalar")
        self.pre = pre
        self.post = post

    @classmethod
    def build(cls, n_in: int, hidden: int, n_pre: int, n_post: int, n_out: int,
              rng: np.random.Generator) -> "SplitStack":
        pre = Stack.build([n_in] + [hidden] * n_pre, rng)
        post = Stack.build([hidden + 1] + [hidden] * n_post + [n_out], rng, relu_last=False)
        return cls(pre, post)

    @property
    def in_features(self) -> int:
        return self.pre.in_features

    @property
    def out_features(self) -> int:
        return self.post.out_features

    def params(self) -> list[np.ndarray]:
        return self.pre.params() + self.post.params()

    def n_params(self) -> int:
        return self.pre.n_params() + self.post.n_params()

    def copy(self) -> "SplitStack":
        return SplitStack(self.pre.copy(), self.post.copy())

    def forward(self, x: np.ndarray, a: np.ndarray):
        a = np.asarray(a, dtype=np.float64).reshape(-1, 1)
        if a.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} rows but {a.shape[0]} action scalars")
        h, c_pre = self.pre.forward(x)
        y, c_post = self.post.forward(np.hstack([h, a]))
        return y, (c_pre, c_post)

    def __call__(self, x, a) -> np.ndarray:
        return self.forward(x, a)[0]

    def backward(self, cache, dy: np.ndarray, param_grads: bool = True, input_grad: bool = False):
        """Returns ``(grads, dx, da)``; ``dx`` is ``None`` unless requested."""
        c_pre, c_post = cache
        g_post, dz = self.post.backward(c_post, dy, param_grads=param_grads)
        g_pre, dx = self.pre.backward(c_pre, dz[:, :-1], param_grads=param_grads, input_grad=input_grad)
        grads = g_pre + g_post if param_grads else None
        return grads, dx, dz[:, -1]

    def state(self, prefix: str) -> dict[str, np.ndarray]:
        return {**self.pre.state(prefix + ".pre"), **self.post.state(prefix + ".post")}

    def spec(self) -> dict:
        return {"pre": self.pre.spec(), "post": self.post.spec()}

    @classmethod
    def from_state(cls, arrays: dict, prefix: str, spec: dict) -> "SplitStack":
        return cls(Stack.from_state(arrays, prefix + ".pre", spec["pre"]),
                   Stack.from_state(arrays, prefix + ".post", spec["post"]))
