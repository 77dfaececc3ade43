"""Structural causal models with closed-form noise abduction.

Instances are rows of a float array. Every operation accepts either a single
instance of shape ``(n,)`` or a batch of shape ``(N, n)`` and returns the same
rank it was given.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NotDifferentiable, OutOfSupport, SingularDesign

Array = np.ndarray


# ---------------------------------------------------------------------------
# graph and noise distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dag:
    node_count: int
    parents: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.parents) != self.node_count:
            raise ValueError("one parent list per node is required")
        for i, pa in enumerate(self.parents):
            for p in pa:
                if not 0 <= p < self.node_count:
                    raise ValueError(f"parent index {p} of node {i} out of range")
                if p == i:
                    raise ValueError(f"self-loop on node {i}")
        # raises graphlib.CycleError on cycles
        object.__setattr__(self, "_order", self._topological_order())

    @classmethod
    def from_lists(cls, parents: Sequence[Sequence[int]]) -> "Dag":
        return cls(len(parents), tuple(tuple(int(p) for p in pa) for pa in parents))

    def _topological_order(self) -> tuple[int, ...]:
        sorter = graphlib.TopologicalSorter(
            {i: set(pa) for i, pa in enumerate(self.parents)}
        )
        # static_order is not stable across set orderings; sort each ready batch
        sorter.prepare()
        order: list[int] = []
        while sorter.is_active():
            ready = sorted(sorter.get_ready())
            order.extend(ready)
            sorter.done(*ready)
        return tuple(order)

    @property
    def order(self) -> tuple[int, ...]:
        return self._order  # type: ignore[attr-defined]


@dataclass(frozen=True)
class Bernoulli:
    p: float

    def sample(self, rng: np.random.Generator, size: int) -> Array:
        return (rng.random(size) < self.p).astype(float)


@dataclass(frozen=True)
class Normal:
    mean: float = 0.0
    std: float = 1.0

    def sample(self, rng: np.random.Generator, size: int) -> Array:
        return rng.normal(self.mean, self.std, size)


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng: np.random.Generator, size: int) -> Array:
        return rng.uniform(self.low, self.high, size)


@dataclass(frozen=True)
class StructuralEquation:
    """``v_i = forward(parents, u_i)`` together with its closed-form inverse in ``u_i``.

    ``partials(parents, u)`` returns ``(d f / d parents, d f / d u)`` with shapes
    ``(N, p)`` and ``(N,)``; it is optional and only needed by gradient-based
    perturbation code.
    """

    forward: Callable[[Array, Array], Array]
    noise_invert: Callable[[Array, Array], Array]
    partials: Optional[Callable[[Array, Array], tuple[Array, Array]]] = None


# ---------------------------------------------------------------------------
# interventions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Hard:
    """``do(V_I := values)``; severs the structural equations of ``indices``."""

    indices: tuple[int, ...]
    values: tuple[float, ...]


@dataclass(frozen=True)
class Shift:
    """``V_i := f_i(pa, u_i) + delta_i``."""

    delta: tuple[float, ...]


@dataclass(frozen=True)
class NoiseShift:
    """``V_i := f_i(pa, u_i + delta_i)``."""

    delta: tuple[float, ...]


Intervention = Hard | Shift | NoiseShift


@dataclass(frozen=True)
class SemiLatentPoint:
    """Observed sensitive coordinates plus exogenous non-sensitive coordinates."""

    sensitive: Array
    latent: Array


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scm:
    graph: Dag
    equations: tuple[StructuralEquation, ...]
    noise_dist: tuple[Bernoulli | Normal | Uniform, ...]
    sensitive_idx: tuple[int, ...]
    sensitive_levels: Array = field(default_factory=lambda: np.zeros((1, 0)))
    feature_names: tuple[str, ...] = ()
    name: str = "scm"

    def __post_init__(self):
        n = self.graph.node_count
        if len(self.equations) != n or len(self.noise_dist) != n:
            raise ValueError("need exactly one equation and one noise per node")
        if any(not 0 <= i < n for i in self.sensitive_idx):
            raise ValueError("sensitive index out of range")
        object.__setattr__(self, "sensitive_idx", tuple(sorted(self.sensitive_idx)))
        levels = np.asarray(self.sensitive_levels, dtype=float)
        if levels.ndim == 1:
            levels = levels[:, None]
        if levels.shape[1] != len(self.sensitive_idx):
            raise ValueError("level vectors must match the number of sensitive features")
        levels.setflags(write=False)
        object.__setattr__(self, "sensitive_levels", levels)
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"v{i}" for i in range(n)))

    @property
    def n(self) -> int:
        return self.graph.node_count

    @property
    def latent_idx(self) -> tuple[int, ...]:
        """Indices of the non-sensitive coordinates (the space the base metric acts on)."""
        s = set(self.sensitive_idx)
        return tuple(i for i in range(self.n) if i not in s)

    # -- reduced form -------------------------------------------------------

    def reduce(
        self,
        u: Array,
        hard: Optional[Hard] = None,
        shift: Optional[Array] = None,
        noise_shift: Optional[Array] = None,
    ) -> Array:
        """Push exogenous values through the (possibly modified) structural equations."""
        u, single = _as_batch(u, self.n)
        v = np.empty_like(u)
        fixed = dict(zip(hard.indices, hard.values)) if hard is not None else {}
        for i in self.graph.order:
            if i in fixed:
                v[:, i] = fixed[i]
                continue
            pa = v[:, list(self.graph.parents[i])]
            ui = u[:, i] if noise_shift is None else u[:, i] + noise_shift[i]
            v[:, i] = self.equations[i].forward(pa, ui)
            if shift is not None:
                v[:, i] += shift[i]
        return v[0] if single else v

    def sample(self, count: int, seed: int) -> tuple[Array, Array]:
        """Draw ``count`` instances; returns ``(v, u)`` with ``v = reduce(u)``."""
        if count < 1:
            raise ValueError("count must be >= 1")
        rng = np.random.default_rng(seed)
        return self.sample_rng(count, rng)

    def sample_rng(self, count: int, rng: np.random.Generator) -> tuple[Array, Array]:
        u = np.column_stack([d.sample(rng, count) for d in self.noise_dist])
        return self.reduce(u), u

    def abduct(self, v: Array) -> Array:
        v, single = _as_batch(v, self.n)
        u = np.empty_like(v)
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in self.graph.order:
                pa = v[:, list(self.graph.parents[i])]
                u[:, i] = self.equations[i].noise_invert(v[:, i], pa)
        if not np.all(np.isfinite(u)):
            bad = np.flatnonzero(~np.all(np.isfinite(u), axis=1))
            raise OutOfSupport(f"{len(bad)} instance(s) cannot be abducted, first row {bad[0]}")
        return u[0] if single else u

    # -- counterfactuals ------------------------------------------------------

    def counterfactual(self, v: Array, iv: Intervention) -> Array:
        u = self.abduct(v)
        if isinstance(iv, Hard):
            return self.reduce(u, hard=iv)
        if isinstance(iv, Shift):
            return self.reduce(u, shift=np.asarray(iv.delta, dtype=float))
        if isinstance(iv, NoiseShift):
            return self.reduce(u, noise_shift=np.asarray(iv.delta, dtype=float))
        raise TypeError(f"unknown intervention {iv!r}")

    def twins(self, v: Array, levels: Optional[Array] = None) -> Array:
        """Counterfactual twins of ``v`` at each sensitive level.

        Returns shape ``(L, n)`` for a single instance and ``(N, L, n)`` for a
        batch. With no sensitive features the only twin is ``v`` itself.
        """
        levels = self._levels(levels)
        v = np.asarray(v, dtype=float)
        if not self.sensitive_idx:
            return v[None] if v.ndim == 1 else v[:, None, :]
        q = self.to_semilatent(v)
        out = [
            self.from_semilatent(
                SemiLatentPoint(np.broadcast_to(lv, q.sensitive.shape), q.latent)
            )
            for lv in levels
        ]
        return np.stack(out, axis=-2)

    def twins_by_intervention(self, v: Array, levels: Optional[Array] = None) -> Array:
        """Same as :meth:`twins` but computed through explicit hard interventions."""
        levels = self._levels(levels)
        v = np.asarray(v, dtype=float)
        if not self.sensitive_idx:
            return v[None] if v.ndim == 1 else v[:, None, :]
        out = [
            self.counterfactual(v, Hard(self.sensitive_idx, tuple(float(x) for x in lv)))
            for lv in levels
        ]
        return np.stack(out, axis=-2)

    def _levels(self, levels: Optional[Array]) -> Array:
        if levels is None:
            return self.sensitive_levels
        levels = np.asarray(levels, dtype=float)
        if levels.ndim == 1:
            levels = levels[:, None]
        return levels

    # -- semi-latent space ---------------------------------------------------

    def to_semilatent(self, v: Array) -> SemiLatentPoint:
        v = np.asarray(v, dtype=float)
        u = self.abduct(v)
        return SemiLatentPoint(
            v[..., list(self.sensitive_idx)], u[..., list(self.latent_idx)]
        )

    def from_semilatent(self, q: SemiLatentPoint) -> Array:
        sens, s_single = _as_batch(q.sensitive, len(self.sensitive_idx))
        lat, l_single = _as_batch(q.latent, len(self.latent_idx))
        single = s_single and l_single
        rows = max(len(sens), len(lat))
        u = np.zeros((rows, self.n))
        u[:, list(self.latent_idx)] = lat
        sens = np.broadcast_to(sens, (rows, sens.shape[1]))
        # a hard intervention with per-row values on the sensitive nodes
        s_col = dict(zip(self.sensitive_idx, sens.T))
        v = np.empty_like(u)
        for i in self.graph.order:
            if i in s_col:
                v[:, i] = s_col[i]
            else:
                pa = v[:, list(self.graph.parents[i])]
                v[:, i] = self.equations[i].forward(pa, u[:, i])
        return v[0] if single else v

    def latent_jacobian(self, q: SemiLatentPoint) -> Array:
        """Jacobian of :meth:`from_semilatent` with respect to the latent coordinates.

        Returns shape ``(N, n, k)`` with ``k = len(latent_idx)``.
        """
        v = self.from_semilatent(q)
        v, _ = _as_batch(v, self.n)
        lat, _ = _as_batch(q.latent, len(self.latent_idx))
        lat = np.broadcast_to(lat, (len(v), lat.shape[1]))
        col = {j: c for c, j in enumerate(self.latent_idx)}
        sens = set(self.sensitive_idx)
        jac = np.zeros((len(v), self.n, len(self.latent_idx)))
        for i in self.graph.order:
            if i in sens:
                continue
            eq = self.equations[i]
            if eq.partials is None:
                raise NotDifferentiable(f"equation {i} of {self.name} has no partials")
            parents = list(self.graph.parents[i])
            d_pa, d_u = eq.partials(v[:, parents], lat[:, col[i]])
            if parents:
                jac[:, i, :] = np.einsum("np,npk->nk", d_pa, jac[:, parents, :])
            jac[:, i, col[i]] += d_u
        return jac


def _as_batch(x: Array, width: int) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x.reshape(1, width), True
    return x, False


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------


def _root(forward=lambda pa, u: u, invert=lambda v, pa: v, partials=None):
    if partials is None:
        partials = lambda pa, u: (np.zeros((len(u), 0)), np.ones_like(u))  # noqa: E731
    return StructuralEquation(forward, invert, partials)


def lin() -> Scm:
    """Linear model: ``S := U_S``, ``X1 := 2S + U1``, ``X2 := S - X1 + U2``."""
    eqs = (
        _root(),
        StructuralEquation(
            lambda pa, u: 2 * pa[:, 0] + u,
            lambda v, pa: v - 2 * pa[:, 0],
            lambda pa, u: (np.full((len(u), 1), 2.0), np.ones_like(u)),
        ),
        StructuralEquation(
            lambda pa, u: pa[:, 0] - pa[:, 1] + u,
            lambda v, pa: v - pa[:, 0] + pa[:, 1],
            lambda pa, u: (np.tile([1.0, -1.0], (len(u), 1)), np.ones_like(u)),
        ),
    )
    return Scm(
        Dag.from_lists([[], [0], [0, 1]]),
        eqs,
        (Bernoulli(0.5), Normal(0, 1), Normal(0, 1)),
        (0,),
        np.array([[0.0], [1.0]]),
        ("s", "x1", "x2"),
        "lin",
    )


def nlm() -> Scm:
    """Non-linear model: ``S := U_S``, ``X1 := 2S^2 + U1``, ``X2 := S - X1^2 + U2``."""
    eqs = (
        _root(),
        StructuralEquation(
            lambda pa, u: 2 * pa[:, 0] ** 2 + u,
            lambda v, pa: v - 2 * pa[:, 0] ** 2,
            lambda pa, u: ((4 * pa[:, 0])[:, None], np.ones_like(u)),
        ),
        StructuralEquation(
            lambda pa, u: pa[:, 0] - pa[:, 1] ** 2 + u,
            lambda v, pa: v - pa[:, 0] + pa[:, 1] ** 2,
            lambda pa, u: (np.column_stack([np.ones_like(u), -2 * pa[:, 1]]), np.ones_like(u)),
        ),
    )
    return Scm(
        Dag.from_lists([[], [0], [0, 1]]),
        eqs,
        (Bernoulli(0.5), Normal(0, 1), Normal(0, 1)),
        (0,),
        np.array([[0.0], [1.0]]),
        ("s", "x1", "x2"),
        "nlm",
    )


def example1() -> Scm:
    """Two Bernoulli noises, ``V1 := 2(U1 - 0.5)``, ``V2 := V1 * U2``; ``V2`` is sensitive."""

    def inv2(v, pa):
        out = v / pa[:, 0]
        out[pa[:, 0] == 0] = np.nan
        return out

    eqs = (
        _root(
            lambda pa, u: 2 * (u - 0.5),
            lambda v, pa: 0.5 * v + 0.5,
            lambda pa, u: (np.zeros((len(u), 0)), np.full_like(u, 2.0)),
        ),
        StructuralEquation(
            lambda pa, u: pa[:, 0] * u,
            inv2,
            lambda pa, u: (u[:, None].copy(), pa[:, 0].copy()),
        ),
    )
    return Scm(
        Dag.from_lists([[], [0]]),
        eqs,
        (Bernoulli(0.5), Bernoulli(0.5)),
        (1,),
        np.array([[-1.0], [0.0], [1.0]]),
        ("v1", "v2"),
        "example1",
    )


def example2(variant: str = "a", big_n: float = 2.0) -> Scm:
    """The pair of models that agree on every observational and interventional
    distribution but disagree on counterfactuals.

    Noise values that the data cannot pin down are abducted to a canonical
    representative: ``u2 = 0`` when ``v1 = 0``, and ``u3 = N/2`` when
    ``v1 != v2`` and ``v3 = v1`` (any positive ``u3`` reproduces ``v``).
    """
    if variant not in ("a", "b"):
        raise ValueError("variant must be 'a' or 'b'")

    def f3(pa, u):
        v1, v2 = pa[:, 0], pa[:, 1]
        tail = u if variant == "a" else big_n - u
        return np.where(v1 != v2, np.where(u > 0, v1, v2), tail)

    def inv2(v, pa):
        v1 = pa[:, 0]
        out = np.zeros_like(v)
        nz = v1 != 0
        out[nz] = 1 - v[nz] / v1[nz]
        out[~nz & (v != 0)] = np.nan
        return out

    def inv3(v, pa):
        v1, v2 = pa[:, 0], pa[:, 1]
        differ = v1 != v2
        out = np.full_like(v, np.nan)
        out[differ & (v == v2)] = 0.0
        out[differ & (v == v1)] = big_n / 2
        same = ~differ
        out[same] = v[same] if variant == "a" else big_n - v[same]
        out[same & ((out < 0) | (out > big_n))] = np.nan
        return out

    eqs = (
        _root(),
        StructuralEquation(lambda pa, u: pa[:, 0] * (1 - u), inv2),
        StructuralEquation(f3, inv3),
    )
    return Scm(
        Dag.from_lists([[], [0], [0, 1]]),
        eqs,
        (Bernoulli(0.5), Bernoulli(0.5), Uniform(0.0, big_n)),
        (0,),
        np.array([[0.0], [1.0]]),
        ("v1", "v2", "v3"),
        f"example2{variant}",
    )


BUILTINS: dict[str, Callable[[], Scm]] = {
    "lin": lin,
    "nlm": nlm,
    "example1": example1,
    "example2a": lambda: example2("a"),
    "example2b": lambda: example2("b"),
}


# ---------------------------------------------------------------------------
# fitting a linear additive-noise model to data
# ---------------------------------------------------------------------------


def _linear_equation(intercept: float, coefs: Array) -> StructuralEquation:
    coefs = np.asarray(coefs, dtype=float)
    return StructuralEquation(
        lambda pa, u: intercept + pa @ coefs + u,
        lambda v, pa: v - intercept - pa @ coefs,
        lambda pa, u: (np.tile(coefs, (len(u), 1)), np.ones_like(u)),
    )


def fit_linear_anm(
    data: Array,
    dag: Dag,
    sensitive_idx: Sequence[int],
    feature_names: Sequence[str] = (),
    max_levels: int = 32,
) -> Scm:
    """Least-squares linear ANM on a known graph.

    Nodes with parents get ``f_i = b0 + b . pa`` and ``Normal(0, residual var)``
    noise. Root columns whose values lie in {0, 1} get a ``Bernoulli(mean)``
    noise; other roots get ``f_i = 0`` and ``Normal(mean, var)`` noise.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim != 2 or data.shape[1] != dag.node_count:
        raise ValueError(f"data must have {dag.node_count} columns")
    if len(data) < 2:
        raise ValueError("need at least two rows")

    equations, noises = [], []
    coefficients = {}
    for i in range(dag.node_count):
        parents = list(dag.parents[i])
        col = data[:, i]
        if not parents:
            equations.append(_root())
            if np.all(np.isin(col, (0.0, 1.0))):
                noises.append(Bernoulli(float(col.mean())))
            else:
                noises.append(Normal(float(col.mean()), float(col.std())))
            continue
        design = np.column_stack([np.ones(len(data)), data[:, parents]])
        if np.linalg.matrix_rank(design) < design.shape[1]:
            raise SingularDesign(f"design for node {i} is rank deficient")
        beta, *_ = np.linalg.lstsq(design, col, rcond=None)
        resid = col - design @ beta
        equations.append(_linear_equation(float(beta[0]), beta[1:]))
        noises.append(Normal(0.0, float(resid.std())))
        coefficients[i] = beta

    s_idx = tuple(sorted(int(i) for i in sensitive_idx))
    if s_idx:
        levels = np.unique(data[:, list(s_idx)], axis=0)
        if len(levels) > max_levels:
            raise ValueError(
                f"sensitive features take {len(levels)} distinct values; "
                "only finite level sets are supported"
            )
    else:
        levels = np.zeros((1, 0))
    scm = Scm(
        dag, tuple(equations), tuple(noises), s_idx, levels, tuple(feature_names), "fit"
    )
    object.__setattr__(scm, "coefficients", coefficients)
    return scm


def load_csv(path) -> tuple[list[str], Array]:
    import csv

    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    header, body = rows[0], rows[1:]
    return header, np.array([[float(x) for x in r] for r in body if r], dtype=float)


def write_csv(path, header: Sequence[str], data: Array) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in np.asarray(data):
            w.writerow([repr(float(x)) for x in row])


def scm_from_config(cfg: dict, base_dir=".") -> Scm:
    """Build an SCM from ``{"builtin": name}`` or ``{"fit": {...}}``."""
    from pathlib import Path

    if "builtin" in cfg:
        name = cfg["builtin"]
        if name not in BUILTINS:
            raise KeyError(f"unknown builtin SCM {name!r}; choose from {sorted(BUILTINS)}")
        if name.startswith("example2") and "N" in cfg:
            return example2(name[-1], float(cfg["N"]))
        return BUILTINS[name]()
    if "fit" in cfg:
        fit = cfg["fit"]
        path = Path(base_dir) / fit["csv"]
        header, data = load_csv(path)
        return fit_linear_anm(data, Dag.from_lists(fit["dag"]), fit.get("sensitive", []), header)
    raise KeyError("SCM config needs a 'builtin' or 'fit' key")
