"""A small fully-connected network kernel: ReLU MLPs, two losses, backprop, Adam.

Everything is plain numpy.  Parameters are kept as a flat list of arrays
``[W0, b0, W1, b1, ...]`` so the optimizer and the finite-difference tests
can treat them uniformly.  ``W_l`` has shape ``(fan_out, fan_in)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_VERSION = "tinynn-1"


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Mlp:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValueError("need at least input and output layers")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("parameter count does not match layer sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_sizes[i + 1], self.layer_sizes[i]):
                raise ValueError(f"layer {i} weight shape {w.shape}")
            if b.shape != (self.layer_sizes[i + 1],):
                raise ValueError(f"layer {i} bias shape {b.shape}")

    @classmethod
    def init(cls, layer_sizes: Sequence[int], seed: int = 0) -> Mlp:
        """He-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            limit = np.sqrt(6.0 / fan_in)
            ws.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        return cls(list(layer_sizes), ws, bs)

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int]) -> Mlp:
        sizes = list(layer_sizes)
        return cls(sizes, [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o) for o in sizes[1:]])

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.asarray(p, dtype=float) for p in params[0::2]]
        self.biases = [np.asarray(p, dtype=float) for p in params[1::2]]

    def copy(self) -> Mlp:
        return Mlp(list(self.layer_sizes), [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.layer_sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, net expects {net.layer_sizes[0]}")
    return x


def forward(net: Mlp, x) -> np.ndarray:
    """Forward pass for one vector ``(n_in,)`` or a batch ``(batch, n_in)``."""
    h = _check_input(net, x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def _forward_cache(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


# -- losses ----------------------------------------------------------------
# Both losses average over every output element; each returns (loss, dL/ds).

def mse_loss(s, y) -> tuple[float, np.ndarray]:
    s, y = np.asarray(s, dtype=float), np.asarray(y, dtype=float)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {y.shape}")
    d = s - y
    n = d.size
    return float(np.sum(d * d) / n), 2.0 * d / n


def weighted_loss_b(s, y, c: float = 1e-8) -> tuple[float, np.ndarray]:
    """Mean of ((y / (y + c)) * (s - y))^2.

    A zero label gives weight exactly 0, so that term contributes neither loss
    nor gradient; for labels much larger than ``c`` this is plain MSE.
    """
    s, y = np.asarray(s, dtype=float), np.asarray(y, dtype=float)
    if s.shape != y.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {y.shape}")
    if c <= 0:
        raise ValueError("c must be positive")
    if np.any(y < 0):
        raise ValueError("labels must be nonnegative")
    wgt = y / (y + c)
    d = wgt * (s - y)
    n = d.size
    return float(np.sum(d * d) / n), 2.0 * wgt * d / n


LOSSES = {"mse": mse_loss, "weighted_b": weighted_loss_b}


def backward(net: Mlp, x, out_grad) -> list[np.ndarray]:
    """Parameter gradients given dL/d(output) for a batch ``x``."""
    x = np.atleast_2d(_check_input(net, x))
    return _backward(net, _forward_cache(net, x), np.atleast_2d(out_grad))


def _backward(net: Mlp, acts: list[np.ndarray], delta: np.ndarray) -> list[np.ndarray]:
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))  # type: ignore[list-item]
    for i in range(len(net.weights) - 1, -1, -1):
        grads[2 * i] = delta.T @ acts[i]
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i]) * (acts[i] > 0)
    return grads


def backprop(net: Mlp, x, y, loss: str = "mse") -> tuple[float, list[np.ndarray]]:
    """Loss on a batch and its gradient w.r.t. ``net.params`` (same order)."""
    x = np.atleast_2d(_check_input(net, x))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    acts = _forward_cache(net, x)
    value, delta = LOSSES[loss](acts[-1], y)
    return value, _backward(net, acts, delta)


# -- Adam ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eta: float = 1e-3
    epsilon: float = 1e-8
    m_hat: list[np.ndarray] = field(default_factory=list, repr=False)
    v_hat: list[np.ndarray] = field(default_factory=list, repr=False)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> AdamState:
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> list[np.ndarray]:
    """One bias-corrected Adam update.

    m_t = b1 m + (1 - b1) g;  v_t = b2 v + (1 - b2) g^2
    theta <- theta - eta * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient {i} has {bad} non-finite entries at step {state.t + 1}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    out, m_hat, v_hat = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mh = state.m[i] / (1 - b1 ** state.t)
        vh = state.v[i] / (1 - b2 ** state.t)
        out.append(p - state.eta * mh / (np.sqrt(vh) + state.epsilon))
        m_hat.append(mh)
        v_hat.append(vh)
    state.m_hat, state.v_hat = m_hat, v_hat
    return out


# -- normalization and training --------------------------------------------

@dataclass
class MinMax:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> MinMax:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return cls(x.min(axis=0), x.max(axis=0))

    @classmethod
    def identity(cls, n: int) -> MinMax:
        return cls(np.zeros(n), np.ones(n))

    def _span(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span > 0, span, 1.0)

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lo) / self._span()

    def invert(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) * self._span() + self.lo


def train(net: Mlp, x, y, loss: str = "mse", epochs: int = 100, batch: int = 64,
          seed: int = 0, adam: AdamState | None = None, **hyper) -> list[float]:
    """Minibatch Adam training in place; returns the per-epoch mean batch loss."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0:
        raise ValueError("empty dataset")
    if len(x) != len(y):
        raise ValueError("x and y lengths differ")
    rng = np.random.default_rng(seed)
    state = adam or AdamState.for_params(net.params, **hyper)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(x))
        losses = []
        for start in range(0, len(x), batch):
            idx = order[start:start + batch]
            value, grads = backprop(net, x[idx], y[idx], loss)
            net.set_params(adam_step(net.params, grads, state))
            losses.append(value)
        history.append(float(np.mean(losses)))
    return history


# -- checkpoints -----------------------------------------------------------

def to_dict(net: Mlp, x_norm: MinMax | None = None, y_norm: MinMax | None = None,
            meta: dict | None = None) -> dict:
    doc = {
        "version": CHECKPOINT_VERSION,
        "layer_sizes": list(net.layer_sizes),
        "weights": [w.tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
        "meta": meta or {},
    }
    for key, norm in (("x_norm", x_norm), ("y_norm", y_norm)):
        if norm is not None:
            doc[key] = {"lo": norm.lo.tolist(), "hi": norm.hi.tolist()}
    return doc


def from_dict(doc: dict) -> tuple[Mlp, MinMax | None, MinMax | None, dict]:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    net = Mlp(list(doc["layer_sizes"]), [np.array(w, dtype=float) for w in doc["weights"]],
              [np.array(b, dtype=float) for b in doc["biases"]])
    norms = []
    for key in ("x_norm", "y_norm"):
        d = doc.get(key)
        norms.append(None if d is None else MinMax(np.array(d["lo"]), np.array(d["hi"])))
    return net, norms[0], norms[1], doc.get("meta", {})


def save(path: str | Path, net: Mlp, x_norm: MinMax | None = None,
         y_norm: MinMax | None = None, meta: dict | None = None) -> None:
    Path(path).write_text(json.dumps(to_dict(net, x_norm, y_norm, meta)))


def load(path: str | Path) -> tuple[Mlp, MinMax | None, MinMax | None, dict]:
    return from_dict(json.loads(Path(path).read_text()))
