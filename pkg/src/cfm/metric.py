"""Oracle causal fair metric and protected causal perturbation (PCP) balls.

The oracle distance between two instances is a base metric applied to their
non-sensitive exogenous coordinates, so sensitive twins sit at distance zero.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import NonzeroRadius
from .scm import Scm, SemiLatentPoint

Array = np.ndarray

# membership slack for round-off in abduction
MEMBERSHIP_ATOL = 1e-9


@dataclass(frozen=True)
class BaseMetric:
    """Metric on the non-sensitive exogenous subspace.

    ``kind`` is ``"euclidean"``, ``"weighted"`` (``param`` holds weights) or
    ``"mahalanobis"`` (``param`` holds a PSD matrix). The Mahalanobis form is
    ``sqrt(d^T Sigma d)`` so the triangle inequality holds.
    """

    kind: str = "euclidean"
    param: Optional[Array] = None

    def __post_init__(self):
        if self.kind == "euclidean":
            return
        p = np.asarray(self.param, dtype=float)
        if self.kind == "weighted":
            if p.ndim != 1 or np.any(p < 0):
                raise ValueError("weights must be a nonnegative vector")
        elif self.kind == "mahalanobis":
            if p.ndim != 2 or p.shape[0] != p.shape[1] or not np.allclose(p, p.T):
                raise ValueError("Sigma must be a symmetric square matrix")
            if np.linalg.eigvalsh(p).min() < -1e-10:
                raise ValueError("Sigma must be positive semidefinite")
        else:
            raise ValueError(f"unknown base metric {self.kind!r}")
        object.__setattr__(self, "param", p)

    def matrix(self, dim: int) -> Array:
        if self.kind == "euclidean":
            return np.eye(dim)
        if self.kind == "weighted":
            return np.diag(self.param)
        return self.param

    def __call__(self, x: Array, y: Array) -> Array:
        diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        if self.kind == "euclidean":
            sq = np.sum(diff**2, axis=-1)
        elif self.kind == "weighted":
            sq = np.sum(self.param * diff**2, axis=-1)
        else:
            sq = np.einsum("...i,ij,...j->...", diff, self.param, diff)
        return np.sqrt(np.maximum(sq, 0.0))

    def gradient(self, x: Array, y: Array) -> tuple[Array, Array]:
        """Distance and its gradient with respect to ``x`` (rows)."""
        diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        m = self.matrix(diff.shape[-1])
        md = diff @ m
        d = np.sqrt(np.maximum(np.sum(diff * md, axis=-1), 0.0))
        g = md / np.maximum(d, 1e-12)[..., None]
        return d, g

    def ball_transform(self, dim: int) -> Array:
        """Matrix ``T`` such that ``{T z : |z| <= r}`` is the base-metric ball of radius ``r``.

        Directions in the null space of a singular Sigma are left unperturbed.
        """
        if self.kind == "euclidean":
            return np.eye(dim)
        vals, vecs = np.linalg.eigh(self.matrix(dim))
        keep = vals > 1e-12
        return vecs[:, keep] / np.sqrt(vals[keep])

    def to_config(self):
        if self.kind == "euclidean":
            return "euclidean"
        return {self.kind: np.asarray(self.param).tolist()}

    @classmethod
    def from_config(cls, cfg) -> "BaseMetric":
        if cfg in (None, "euclidean"):
            return cls()
        if isinstance(cfg, dict) and "base" in cfg:
            return cls.from_config(cfg["base"])
        if isinstance(cfg, dict) and len(cfg) == 1:
            (kind, param), = cfg.items()
            return cls(kind, np.asarray(param, dtype=float))
        raise ValueError(f"bad metric config {cfg!r}")


@dataclass(frozen=True, eq=False)
class OracleMetric:
    scm: Scm
    base: BaseMetric = BaseMetric()

    def project(self, v: Array) -> Array:
        """Non-sensitive semi-latent coordinates of ``v``."""
        return self.scm.to_semilatent(v).latent

    def distance(self, v: Array, w: Array) -> Array:
        return self.base(self.project(v), self.project(w))

    __call__ = distance


def mahalanobis_semilatent(scm: Scm, sigma: Array, v: Array, w: Array) -> Array:
    """Inner-product form on full semi-latent vectors, ``sqrt(dq^T Sigma dq)``."""
    qv, qw = _full_q(scm, v), _full_q(scm, w)
    diff = qv - qw
    return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", diff, sigma, diff), 0.0))


def latent_projection_matrix(scm: Scm) -> Array:
    p = np.zeros((scm.n, scm.n))
    for i in scm.latent_idx:
        p[i, i] = 1.0
    return p


def _full_q(scm: Scm, v: Array) -> Array:
    q = scm.to_semilatent(v)
    out = np.zeros(np.shape(v))
    out[..., list(scm.sensitive_idx)] = q.sensitive
    out[..., list(scm.latent_idx)] = q.latent
    return out


# ---------------------------------------------------------------------------
# PCP ball
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PcpBall:
    center: Array
    radius: float
    metric: OracleMetric

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    @property
    def scm(self) -> Scm:
        return self.metric.scm

    def contains(self, w: Array) -> Array:
        return self.metric.distance(self.center, w) <= self.radius + MEMBERSHIP_ATOL

    def sample(self, count: int, seed: int | np.random.Generator) -> Array:
        """Uniform sensitive level, uniform radius and direction in the latent ball."""
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = np.random.default_rng(seed)
        q = self.scm.to_semilatent(self.center)
        levels = self.scm.sensitive_levels
        lv = levels[rng.integers(len(levels), size=count)]
        delta = sample_in_ball(self.metric.base, len(q.latent), self.radius, count, rng)
        return self.scm.from_semilatent(SemiLatentPoint(lv, q.latent + delta))

    def twin_set(self) -> Array:
        if self.radius > 0:
            raise NonzeroRadius(f"twin set is the zero-radius ball; radius is {self.radius}")
        return self.scm.twins(self.center)

    def decomposition_check(self, probes: Array) -> "DecompositionResult":
        return ball_decomposition_check(self, probes)


def sample_in_ball(
    base: BaseMetric, dim: int, radius: float, count: int, rng: np.random.Generator
) -> Array:
    """Offsets with base-metric norm ``r ~ U[0, radius)`` in a uniform direction."""
    t = base.ball_transform(dim)
    z = rng.standard_normal((count, t.shape[1]))
    z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-300)
    r = radius * rng.random(count)
    return (z * r[:, None]) @ t.T


def sample_in_shell(
    base: BaseMetric, dim: int, inner: float, outer: float, count: int, rng: np.random.Generator
) -> Array:
    """Offsets with base-metric norm uniform in ``(inner, outer]``."""
    t = base.ball_transform(dim)
    z = rng.standard_normal((count, t.shape[1]))
    z /= np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-300)
    r = outer - (outer - inner) * rng.random(count)
    return (z * r[:, None]) @ t.T


@dataclass(frozen=True)
class DecompositionResult:
    agrees: bool
    checked: int
    skipped: int
    inside: int = 0

    def __bool__(self) -> bool:
        return self.agrees


def _safe_semilatent(scm: Scm, probes: Array) -> tuple[Array, Array, Array]:
    """Semi-latent coordinates of the probes that can be abducted and sit at a declared level."""
    probes = np.atleast_2d(np.asarray(probes, dtype=float))
    ok = np.ones(len(probes), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.empty_like(probes)
        for i in scm.graph.order:
            pa = probes[:, list(scm.graph.parents[i])]
            u[:, i] = scm.equations[i].noise_invert(probes[:, i], pa)
    ok &= np.all(np.isfinite(u), axis=1)
    sens = probes[:, list(scm.sensitive_idx)]
    if scm.sensitive_idx:
        at_level = (sens[:, None, :] == scm.sensitive_levels[None]).all(axis=2).any(axis=1)
        ok &= at_level
    return ok, sens, u[:, list(scm.latent_idx)]


def ball_decomposition_check(ball: PcpBall, probes: Array) -> DecompositionResult:
    """Compare direct ball membership with membership in the union of per-twin causal balls.

    Probes that cannot be abducted, or whose sensitive value is not a declared
    level, are skipped and counted.
    """
    scm, base = ball.scm, ball.metric.base
    ok, sens, lat = _safe_semilatent(scm, probes)
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} probe(s) outside the model support", stacklevel=2)
    sens, lat = sens[ok], lat[ok]

    center_lat = ball.metric.project(ball.center)
    direct = base(center_lat, lat) <= ball.radius + MEMBERSHIP_ATOL

    twins = scm.twins(ball.center)
    twin_q = scm.to_semilatent(twins)
    union = np.zeros(len(lat), dtype=bool)
    for s, x in zip(np.atleast_2d(twin_q.sensitive), np.atleast_2d(twin_q.latent)):
        same_level = np.all(sens == s, axis=1) if scm.sensitive_idx else np.ones(len(lat), bool)
        union |= same_level & (base(x, lat) <= ball.radius + MEMBERSHIP_ATOL)
    return DecompositionResult(
        bool(np.array_equal(direct, union)), int(ok.sum()), skipped, int(direct.sum())
    )


def is_twin_of(scm: Scm, center: Array, samples: Array, atol: float = 1e-9) -> Array:
    """Row-wise flag: is each sample (within ``atol``) one of the twins of ``center``."""
    twins = scm.twins(center)
    samples = np.atleast_2d(samples)
    close = np.abs(samples[:, None, :] - twins[None]) <= atol
    return close.all(axis=2).any(axis=1)


def distance(m: OracleMetric, v: Array, w: Array) -> Array:
    return m.distance(v, w)


def ball_contains(b: PcpBall, w: Array) -> Array:
    return b.contains(w)


def ball_sample(b: PcpBall, count: int, seed) -> Array:
    return b.sample(count, seed)


def twin_set(b: PcpBall) -> Array:
    return b.twin_set()
