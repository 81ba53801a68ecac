"""Small function approximators with hand-written backprop, and optimizers.

Both approximators map ``(t, states)`` to an unconstrained output of shape
``(N, *out_shape)``; callers turn that into logits, log-guidance or log-ratio.
Parameters live in one flat float64 vector so optimizers and gradient checks
stay generic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .statespace import StateSpace


def time_bucket(t, n_buckets: int, n: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    return np.clip((t * n_buckets).astype(np.int64), 0, n_buckets - 1)


class Tabular:
    """Lookup table indexed by (time bucket, flat state index)."""

    kind = "tabular"

    def __init__(self, space: StateSpace, n_buckets: int, out_shape: Sequence[int], init: float = 0.0):
        space.check_enumerable()
        self.space = space
        self.n_buckets = int(n_buckets)
        self.out_shape = tuple(out_shape)
        self.table_shape = (self.n_buckets, space.n_states) + self.out_shape
        self.params = np.full(int(np.prod(self.table_shape)), float(init))

    @property
    def size(self) -> int:
        return self.params.size

    def forward(self, t, states, params: Optional[np.ndarray] = None):
        p = (self.params if params is None else params).reshape(self.table_shape)
        states = np.asarray(states)
        b = time_bucket(t, self.n_buckets, states.shape[0])
        si = self.space.index_of(states)
        return p[b, si], (b, si)

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        b, si = cache
        g = np.zeros(self.table_shape)
        np.add.at(g, (b, si), grad_out)
        return g.reshape(-1)

    def config(self) -> dict:
        return {"kind": "tabular", "n_buckets": self.n_buckets, "out_shape": list(self.out_shape)}


def _act(name: str):
    if name == "tanh":
        return np.tanh, lambda z, a: 1.0 - a * a
    if name == "relu":
        return (lambda z: np.maximum(z, 0.0)), (lambda z, a: (z > 0).astype(float))
    raise ValueError(f"unknown activation {name!r}")


class MLP:
    """Fully connected network on [t, encoded state] features.

    ``encoding="onehot"`` feeds one-hot symbols; ``"scalar"`` feeds each symbol
    as a real coordinate s / (|S| - 1), which makes input gradients meaningful.
    """

    kind = "mlp"

    def __init__(
        self,
        space: StateSpace,
        hidden: Sequence[int],
        out_shape: Sequence[int],
        activation: str = "tanh",
        encoding: str = "onehot",
        seed: int = 0,
        out_scale: float = 0.0,
    ):
        if encoding not in ("onehot", "scalar"):
            raise ValueError(f"unknown encoding {encoding!r}")
        self.space = space
        self.hidden = tuple(int(h) for h in hidden)
        self.out_shape = tuple(out_shape)
        self.activation = activation
        self.encoding = encoding
        self._f, self._df = _act(activation)
        n_in = 1 + (space.dims * space.alphabet_size if encoding == "onehot" else space.dims)
        widths = (n_in,) + self.hidden + (int(np.prod(self.out_shape)),)
        self.shapes = []
        for a, b in zip(widths[:-1], widths[1:]):
            self.shapes += [(a, b), (b,)]
        rng = np.random.default_rng(seed)
        parts = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            scale = out_scale if last else np.sqrt(1.0 / a)
            parts += [rng.normal(0.0, 1.0, (a, b)).ravel() * scale, np.zeros(b)]
        self.params = np.concatenate(parts)

    @property
    def size(self) -> int:
        return self.params.size

    def _unpack(self, params):
        out, i = [], 0
        for shp in self.shapes:
            n = int(np.prod(shp))
            out.append(params[i : i + n].reshape(shp))
            i += n
        return out

    def features(self, t, states) -> np.ndarray:
        states = np.asarray(states)
        n = states.shape[0]
        tt = np.broadcast_to(np.asarray(t, dtype=float), (n,))[:, None]
        if self.encoding == "onehot":
            enc = np.eye(self.space.alphabet_size)[states].reshape(n, -1)
        else:
            enc = states / (self.space.alphabet_size - 1.0)
        return np.concatenate([tt, enc], axis=1)

    def forward_features(self, feats: np.ndarray, params: Optional[np.ndarray] = None):
        ws = self._unpack(self.params if params is None else params)
        acts = [feats]
        pre = []
        a = feats
        for i in range(0, len(ws) - 2, 2):
            z = a @ ws[i] + ws[i + 1]
            a = self._f(z)
            pre.append(z)
            acts.append(a)
        out = a @ ws[-2] + ws[-1]
        return out.reshape((feats.shape[0],) + self.out_shape), (ws, pre, acts)

    def forward(self, t, states, params: Optional[np.ndarray] = None):
        return self.forward_features(self.features(t, states), params)

    def _backprop(self, cache, grad_out):
        ws, pre, acts = cache
        g = grad_out.reshape(grad_out.shape[0], -1)
        grads = [None] * len(ws)
        grads[-2] = acts[-1].T @ g
        grads[-1] = g.sum(axis=0)
        for layer in range(len(pre) - 1, -1, -1):
            g = (g @ ws[2 * layer + 2].T) * self._df(pre[layer], acts[layer + 1])
            grads[2 * layer] = acts[layer].T @ g
            grads[2 * layer + 1] = g.sum(axis=0)
        return grads, g @ ws[0].T

    def backward(self, cache, grad_out: np.ndarray) -> np.ndarray:
        grads, _ = self._backprop(cache, grad_out)
        return np.concatenate([g.ravel() for g in grads])

    def input_grad(self, cache, grad_out: np.ndarray) -> np.ndarray:
        """Gradient with respect to the input features (column 0 is time)."""
        _, gin = self._backprop(cache, grad_out)
        return gin

    def config(self) -> dict:
        return {
            "kind": "mlp",
            "hidden": list(self.hidden),
            "out_shape": list(self.out_shape),
            "activation": self.activation,
            "encoding": self.encoding,
        }


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 1e-2
    batch_size: int = 512
    steps: int = 2000
    seed: int = 0
    lam: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    lr_decay: bool = True  # linear decay to 10% of lr over the run

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.lam < 0:
            raise ValueError("regularization weight must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")


class Optimizer:
    """Adam or plain SGD on a flat parameter vector, updated in place."""

    def __init__(self, params: np.ndarray, config: OptimizerConfig):
        self.params = params
        self.config = config
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self.k = 0

    def lr(self) -> float:
        c = self.config
        if not c.lr_decay:
            return c.lr
        frac = min(self.k / c.steps, 1.0)
        return c.lr * (1.0 - 0.9 * frac)

    def step(self, grad: np.ndarray) -> None:
        c = self.config
        lr = self.lr()
        self.k += 1
        if c.algorithm == "sgd":
            self.params -= lr * grad
            return
        b1, b2 = c.betas
        self.m *= b1
        self.m += (1 - b1) * grad
        self.v *= b2
        self.v += (1 - b2) * grad * grad
        mhat = self.m / (1 - b1**self.k)
        vhat = self.v / (1 - b2**self.k)
        self.params -= lr * mhat / (np.sqrt(vhat) + c.eps)


def make_approximator(space: StateSpace, out_shape, backend: dict):
    """Build an approximator from a plain config dict (``kind`` plus options)."""
    kind = backend.get("kind", "tabular")
    if kind == "tabular":
        return Tabular(space, backend.get("n_buckets", 32), out_shape)
    if kind == "mlp":
        return MLP(
            space,
            backend.get("hidden", (64, 64)),
            out_shape,
            activation=backend.get("activation", "tanh"),
            encoding=backend.get("encoding", "onehot"),
            seed=backend.get("seed", 0),
        )
    raise ValueError(f"unknown approximator kind {kind!r}")
