"""Dense feed-forward network with hand-written backpropagation.

Layers are ``z_l = a_{l-1} W_l^T + b_l`` followed by a PReLU with one learnable
slope per hidden layer; the output layer is linear. Besides the usual
parameter gradient, the net exposes the input-gradient map ``x -> J(x)^T e``
and the parameter gradient *of* that map, which gradient-penalty regularizers
need (double backpropagation).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ShapeMismatch, StaleCache

Array = np.ndarray
CHECKPOINT_VERSION = "cfm-net-v1"


def prelu(z: Array, slope: float) -> Array:
    return np.where(z > 0, z, slope * z)


class FeedForwardNet:
    """``widths = [d0, d1, ..., dL]``; weights ``W_l`` have shape ``(d_l, d_{l-1})``."""

    def __init__(self, widths: Sequence[int], seed: int = 0, slope_init: float = 0.25):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        self.widths = [int(w) for w in widths]
        rng = np.random.default_rng(seed)
        self.weights: list[Array] = []
        self.biases: list[Array] = []
        for d_in, d_out in zip(self.widths[:-1], self.widths[1:]):
            lim = math.sqrt(6.0 / (d_in + d_out))
            self.weights.append(rng.uniform(-lim, lim, (d_out, d_in)))
            self.biases.append(np.zeros(d_out))
        self.slopes = np.full(len(self.widths) - 2, float(slope_init))
        self.cache: Optional[dict] = None

    @property
    def depth(self) -> int:
        return len(self.weights)

    # -- parameters ----------------------------------------------------------

    def params(self) -> list[Array]:
        """Live parameter arrays: ``[W1, b1, ..., WL, bL, slopes]``."""
        out: list[Array] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        out.append(self.slopes)
        return out

    def zero_grads(self) -> list[Array]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "FeedForwardNet":
        new = FeedForwardNet.__new__(FeedForwardNet)
        new.widths = list(self.widths)
        new.weights = [w.copy() for w in self.weights]
        new.biases = [b.copy() for b in self.biases]
        new.slopes = self.slopes.copy()
        new.cache = None
        return new

    def flat_params(self) -> Array:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, flat: Array) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size

    # -- forward / backward --------------------------------------------------

    def forward(self, x: Array, train: bool = False) -> Array:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.widths[0]:
            raise ShapeMismatch(f"input has {x.shape[1]} columns, net expects {self.widths[0]}")
        acts, zs = [x], []
        a = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w.T + b
            zs.append(z)
            a = prelu(z, self.slopes[l]) if l < self.depth - 1 else z
            acts.append(a)
        if train:
            self.cache = {"acts": acts, "zs": zs}
        return a[0] if single else a

    __call__ = forward

    def backward(self, grad_out: Array, cache: Optional[dict] = None) -> tuple[list[Array], Array]:
        """Parameter gradients and input gradient for upstream ``grad_out``."""
        cache = cache if cache is not None else self.cache
        if cache is None:
            raise StaleCache("backward called before a training forward pass")
        acts, zs = cache["acts"], cache["zs"]
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        if g.shape != zs[-1].shape:
            raise StaleCache(f"upstream gradient {g.shape} does not match cached output {zs[-1].shape}")
        grads_w, grads_b = [None] * self.depth, [None] * self.depth
        grad_slopes = np.zeros_like(self.slopes)
        for l in range(self.depth - 1, -1, -1):
            if l < self.depth - 1:
                z = zs[l]
                neg = z <= 0
                grad_slopes[l] = np.sum(g * z * neg)
                g = g * np.where(neg, self.slopes[l], 1.0)
            grads_w[l] = g.T @ acts[l]
            grads_b[l] = g.sum(axis=0)
            g = g @ self.weights[l]
        out: list[Array] = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        out.append(grad_slopes)
        return out, g

    # -- input gradients and their parameter gradients -----------------------

    def input_vjp(self, x: Array, e: Array) -> tuple[Array, dict]:
        """Rows of ``J(x)^T e`` where ``J`` is the Jacobian of the output in ``x``.

        ``e`` may be a callable of the net output. The returned context feeds
        :meth:`input_vjp_param_grad`.
        """
        out = self.forward(x, train=True)
        cache = self.cache
        zs = cache["zs"]
        if callable(e):
            e = e(out)
        e = np.atleast_2d(np.asarray(e, dtype=float))
        deltas = [None] * self.depth
        ts = [None] * self.depth
        d = e
        for l in range(self.depth - 1, -1, -1):
            deltas[l] = d
            t = d @ self.weights[l]
            ts[l] = t
            if l > 0:
                d = t * np.where(zs[l - 1] > 0, 1.0, self.slopes[l - 1])
        return ts[0], {"cache": cache, "deltas": deltas, "ts": ts, "out": out}

    def input_vjp_param_grad(self, ctx: dict, c: Array) -> tuple[list[Array], Array]:
        """Gradient of ``sum(c * J(x)^T e)`` in the parameters, with ``e`` held fixed.

        Also returns ``J(x) c`` (the gradient of the same scalar in ``e``), which
        the caller chains into ``e``'s own dependence on the output.
        """
        zs = ctx["cache"]["zs"]
        deltas, ts = ctx["deltas"], ctx["ts"]
        c = np.atleast_2d(np.asarray(c, dtype=float))
        grads_w = [None] * self.depth
        grads_b = [np.zeros_like(b) for b in self.biases]
        grad_slopes = np.zeros_like(self.slopes)
        bar_t = c
        for l in range(self.depth):
            grads_w[l] = deltas[l].T @ bar_t
            bar_delta = bar_t @ self.weights[l].T
            if l < self.depth - 1:
                neg = zs[l] <= 0
                grad_slopes[l] = np.sum(bar_delta * ts[l + 1] * neg)
                bar_t = bar_delta * np.where(neg, self.slopes[l], 1.0)
            else:
                bar_e = bar_delta
        out: list[Array] = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        out.append(grad_slopes)
        return out, bar_e

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "widths": self.widths,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "slopes": self.slopes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeedForwardNet":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
        net = cls.__new__(cls)
        net.widths = [int(w) for w in d["widths"]]
        net.weights = [
            np.asarray(w, dtype=float).reshape(o, i)
            for w, i, o in zip(d["weights"], net.widths[:-1], net.widths[1:])
        ]
        net.biases = [np.asarray(b, dtype=float) for b in d["biases"]]
        net.slopes = np.asarray(d["slopes"], dtype=float)
        net.cache = None
        return net

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "FeedForwardNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def add_grads(acc: list[Array], more: list[Array], scale: float = 1.0) -> list[Array]:
    for a, m in zip(acc, more):
        a += scale * m
    return acc


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)


def adam_step(state: AdamState, params: list[Array], grads: list[Array]) -> None:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ShapeMismatch("parameter and gradient lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step_count += 1
    t = state.step_count
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------------------
# norms and the complexity diagnostic
# ---------------------------------------------------------------------------


def spectral_norm(m: Array, iters: int = 100, seed: int = 0) -> float:
    """Largest singular value by power iteration on ``M^T M``."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    m = np.atleast_2d(np.asarray(m, dtype=float))
    x = np.random.default_rng(seed).standard_normal(m.shape[1])
    nrm = np.linalg.norm(x)
    if nrm == 0:
        return 0.0
    x /= nrm
    for _ in range(iters):
        y = m.T @ (m @ x)
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        x = y / nrm
    return float(np.linalg.norm(m @ x))


def norm_2_1(m: Array) -> float:
    """Sum of the Euclidean norms of the columns."""
    return float(np.sum(np.linalg.norm(np.atleast_2d(m), axis=0)))


def rademacher_bound(
    net: FeedForwardNet,
    sample_count: int,
    input_bound: float,
    lipschitz: Optional[Sequence[float]] = None,
) -> float:
    """Norm-based Rademacher complexity bound of the embedding family at the current weights.

    ``lipschitz`` defaults to ``max(1, |slope|)`` for hidden PReLU layers and 1
    for the linear output layer.
    """
    if sample_count < 1 or input_bound <= 0:
        raise ValueError("sample_count must be >= 1 and input_bound > 0")
    if lipschitz is None:
        lipschitz = [max(1.0, abs(s)) for s in net.slopes] + [1.0]
    spn = [spectral_norm(w) for w in net.weights]
    if any(s == 0 for s in spn):
        warnings.warn("a layer has zero spectral norm; bound reported as 0", stacklevel=2)
        return 0.0
    prod = math.prod(lam * s for lam, s in zip(lipschitz, spn))
    # cbrt keeps the 2/3 and 3/2 powers exact on perfect cubes
    ratio_sum = sum(float(np.cbrt(norm_2_1(w) / s)) ** 2 for w, s in zip(net.weights, spn))
    return input_bound**2 * prod**2 * ratio_sum * math.sqrt(ratio_sum) / math.sqrt(sample_count)
