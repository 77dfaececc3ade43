"""Binary classifiers under ERM, adversarial learning, CAPIFY and ECAPIFY,
plus counterfactual-fairness and robustness evaluation.

All losses are taken on the logit ``o``: ``l(o, y) = softplus(o) - y o``,
whose derivative is ``sigmoid(o) - y``. The gradient-penalty terms need the
parameter gradient of an input gradient, which ``FeedForwardNet`` provides.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyTestSet, MissingLevel
from .metric import MEMBERSHIP_ATOL, BaseMetric, OracleMetric, sample_in_ball
from .metric_learning import LearnedMetric, confusion, mcc_from_confusion
from .scm import Scm, SemiLatentPoint
from .tensor_nn import AdamState, FeedForwardNet, adam_step, add_grads

Array = np.ndarray

BCE_CLAMP = 1e-7
METHODS = ("ERM", "AL", "CAPIFY", "ECAPIFY")


def sigmoid(o):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(o, dtype=float)))


def bce_loss(p, y):
    p = np.clip(np.asarray(p, dtype=float), BCE_CLAMP, 1 - BCE_CLAMP)
    return -y * np.log(p) - (1 - y) * np.log(1 - p)


def logit_loss(o, y):
    """BCE on a logit, computed stably."""
    o = np.asarray(o, dtype=float)
    return np.logaddexp(0.0, o) - y * o


def logit_loss_grad(o, y):
    return sigmoid(o) - y


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


@dataclass
class LabeledDataset:
    x: Array
    y: Array
    train_idx: Array
    test_idx: Array

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("instances and labels differ in length")
        both = np.concatenate([self.train_idx, self.test_idx])
        if len(np.unique(both)) != len(both) or len(both) != len(self.x):
            raise ValueError("split must be disjoint and exhaustive")

    @property
    def x_train(self) -> Array:
        return self.x[self.train_idx]

    @property
    def y_train(self) -> Array:
        return self.y[self.train_idx]

    @property
    def x_test(self) -> Array:
        return self.x[self.test_idx]

    @property
    def y_test(self) -> Array:
        return self.y[self.test_idx]


def synthetic_labels(scm: Scm, x: Array, rng: np.random.Generator, noise_std: float = 0.1) -> Array:
    """``1[sum of non-sensitive features + noise > median]``."""
    score = x[:, list(scm.latent_idx)].sum(axis=1) + rng.normal(0.0, noise_std, len(x))
    return (score > np.median(score)).astype(float)


def make_dataset(scm: Scm, count: int, seed: int, test_frac: float = 0.3) -> LabeledDataset:
    rng = np.random.default_rng(seed)
    x = scm.sample_rng(count, rng)[0]
    y = synthetic_labels(scm, x, rng)
    perm = rng.permutation(count)
    n_test = int(round(test_frac * count))
    return LabeledDataset(x, y, np.sort(perm[n_test:]), np.sort(perm[:n_test]))


# ---------------------------------------------------------------------------
# classifier and config
# ---------------------------------------------------------------------------


@dataclass
class Classifier:
    net: FeedForwardNet

    def logit(self, x: Array) -> Array:
        return np.atleast_2d(self.net.forward(np.asarray(x, dtype=float)))[:, 0]

    def prob(self, x: Array) -> Array:
        return sigmoid(self.logit(x))

    def predict(self, x: Array) -> Array:
        return (self.logit(x) >= 0).astype(int)


@dataclass
class TrainerConfig:
    method: str = "ERM"
    delta: float = 0.01
    mu: tuple = (1.0, 1.0, 1.0)
    pgd_steps: int = 10
    pgd_step_size: Optional[float] = None
    pgd_restarts: int = 8
    epochs: int = 30
    batch: int = 64
    seed: int = 0
    lr: float = 1e-3
    hidden: tuple = (32, 32)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.delta < 0 or any(m < 0 for m in self.mu):
            raise ValueError("delta and mu must be nonnegative")
        if self.pgd_restarts < 1:
            raise ValueError("pgd_restarts must be >= 1")
        self.mu = tuple(float(m) for m in self.mu)
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def step_size(self) -> float:
        return self.delta / 4 if self.pgd_step_size is None else self.pgd_step_size


def new_classifier(n_features: int, cfg: TrainerConfig) -> Classifier:
    return Classifier(FeedForwardNet([n_features, *cfg.hidden, 1], seed=cfg.seed))


# ---------------------------------------------------------------------------
# input gradients
# ---------------------------------------------------------------------------


def input_loss_grad(net: FeedForwardNet, x: Array, y: Array) -> tuple[Array, Array, dict]:
    """Per-row loss, its gradient in ``x``, and the context for double backprop."""
    g, ctx = net.input_vjp(x, lambda out: logit_loss_grad(out[:, 0], y)[:, None])
    o = ctx["out"][:, 0]
    return logit_loss(o, y), g, ctx


def _double_backprop(net: FeedForwardNet, ctx: dict, c: Array) -> list[Array]:
    """Parameter gradient of ``sum(c * grad_x l)`` including the path through ``sigmoid(o)``."""
    grads, bar_e = net.input_vjp_param_grad(ctx, c)
    s = sigmoid(ctx["out"][:, 0])
    more, _ = net.backward(bar_e * (s * (1 - s))[:, None], cache=ctx["cache"])
    return add_grads(grads, more)


def _loss_backward(net: FeedForwardNet, x: Array, y: Array, weight: Array) -> list[Array]:
    """Parameter gradient of ``sum(weight * l(h(x), y))``."""
    o = net.forward(x, train=True)[:, 0]
    grads, _ = net.backward((weight * logit_loss_grad(o, y))[:, None])
    return grads


# ---------------------------------------------------------------------------
# adversarial learning
# ---------------------------------------------------------------------------


def pgd_feature(
    clf: Classifier, x: Array, y: Array, delta: float, steps: int, step: float
) -> Array:
    """Projected gradient ascent of the loss over the l2 ball of radius ``delta``, from 0."""
    adv = np.array(x, dtype=float)
    if delta <= 0 or steps <= 0:
        return adv
    for _ in range(steps):
        _, g, _ = input_loss_grad(clf.net, adv, y)
        nrm = np.linalg.norm(g, axis=1, keepdims=True)
        adv = adv + step * np.divide(g, nrm, out=np.zeros_like(g), where=nrm > 0)
        off = adv - x
        on = np.linalg.norm(off, axis=1, keepdims=True)
        adv = x + off * np.minimum(1.0, delta / np.maximum(on, 1e-300))
    return adv


# ---------------------------------------------------------------------------
# CAPIFY (oracle SCM)
# ---------------------------------------------------------------------------


@dataclass
class RegularizerOutput:
    value: Array
    grads: Optional[list[Array]] = None
    detail: dict = field(default_factory=dict)


def _latent_pgd(
    clf: Classifier,
    scm: Scm,
    oracle: OracleMetric,
    q: SemiLatentPoint,
    y: Array,
    base_loss: Array,
    a: Array,
    delta: float,
    steps: int,
    step: float,
    rng: np.random.Generator,
    restarts: int = 1,
) -> tuple[Array, Array]:
    """Maximize ``|l(w(d)) - l(v) - d.a|`` over the latent ball; returns the best ``d`` and value."""
    n_pts, k = q.latent.shape
    if restarts > 1:
        q = SemiLatentPoint(np.tile(q.sensitive, (restarts, 1)), np.tile(q.latent, (restarts, 1)))
        y, base_loss, a = np.tile(y, restarts), np.tile(base_loss, restarts), np.tile(a, (restarts, 1))
    t = oracle.base.ball_transform(k)
    z = sample_in_ball(BaseMetric(), t.shape[1], delta, len(y), rng)

    def residual(zz):
        d = zz @ t.T
        w = scm.from_semilatent(SemiLatentPoint(q.sensitive, q.latent + d))
        loss, g, _ = input_loss_grad(clf.net, w, y)
        return loss - base_loss - np.sum(d * a, axis=1), d, w, g

    res, d, w, g = residual(z)
    best_val, best_d = np.abs(res), d
    for _ in range(steps):
        jac = scm.latent_jacobian(SemiLatentPoint(q.sensitive, q.latent + d))
        grad_d = np.einsum("nik,ni->nk", jac, g) - a
        grad_z = np.sign(res)[:, None] * (grad_d @ t)
        nrm = np.linalg.norm(grad_z, axis=1, keepdims=True)
        z = z + step * np.divide(grad_z, nrm, out=np.zeros_like(grad_z), where=nrm > 0)
        zn = np.linalg.norm(z, axis=1, keepdims=True)
        z = z * np.minimum(1.0, delta / np.maximum(zn, 1e-300))
        res, d, w, g = residual(z)
        better = np.abs(res) > best_val
        best_val = np.where(better, np.abs(res), best_val)
        best_d = np.where(better[:, None], d, best_d)
    if restarts > 1:
        pick = np.argmax(best_val.reshape(restarts, n_pts), axis=0)
        rows = pick * n_pts + np.arange(n_pts)
        return best_d[rows], best_val[rows]
    return best_d, best_val


def capify_regularizer(
    scm: Scm,
    oracle: OracleMetric,
    clf: Classifier,
    x: Array,
    y: Array,
    cfg: TrainerConfig,
    rng: Optional[np.random.Generator] = None,
    with_grad: bool = False,
    weight: float = 1.0,
) -> RegularizerOutput:
    """Per-row CAPIFY penalty (and the gradient of ``weight * sum``).

    ``gamma`` is found by latent PGD and held fixed at its maximizer for the
    gradient.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    mu1, mu2, mu3 = cfg.mu
    net = clf.net
    value = np.zeros(len(x))
    grads = net.zero_grads() if with_grad else None
    detail: dict = {}
    if mu1 == mu2 == mu3 == 0:
        return RegularizerOutput(value, grads, detail)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    if mu1 > 0:
        tw = scm.twins(x)
        n_lv = tw.shape[1]
        flat = tw.reshape(-1, x.shape[1])
        y_rep = np.repeat(y, n_lv)
        losses = logit_loss(net.forward(flat)[:, 0], y_rep).reshape(len(x), n_lv)
        pick = np.argmax(losses, axis=1)
        value += mu1 * losses[np.arange(len(x)), pick]
        detail["twin_loss"] = losses.max(axis=1)
        if with_grad:
            add_grads(grads, _loss_backward(net, tw[np.arange(len(x)), pick], y, weight * mu1))

    if mu2 == 0 and mu3 == 0:
        return RegularizerOutput(value, grads, detail)

    q = scm.to_semilatent(x)
    jac = scm.latent_jacobian(q)
    base_loss, g_v, ctx = input_loss_grad(net, x, y)
    a = np.einsum("nik,ni->nk", jac, g_v)
    c = np.zeros_like(x)
    if mu2 > 0:
        an = np.linalg.norm(a, axis=1)
        value += mu2 * an
        detail["grad_norm"] = an
        unit = np.divide(a, an[:, None], out=np.zeros_like(a), where=an[:, None] > 0)
        c += mu2 * np.einsum("nik,nk->ni", jac, unit)
    if mu3 > 0 and cfg.delta > 0:
        d_star, gamma = _latent_pgd(
            clf, scm, oracle, q, y, base_loss, a, cfg.delta, cfg.pgd_steps, cfg.step_size, rng,
            cfg.pgd_restarts,
        )
        value += mu3 * gamma
        detail["gamma"] = gamma
        if with_grad:
            w = scm.from_semilatent(SemiLatentPoint(q.sensitive, q.latent + d_star))
            res = logit_loss(net.forward(w)[:, 0], y) - base_loss - np.sum(d_star * a, axis=1)
            sgn = np.sign(res)
            add_grads(grads, _loss_backward(net, w, y, weight * mu3 * sgn))
            add_grads(grads, _loss_backward(net, x, y, -weight * mu3 * sgn))
            c -= mu3 * sgn[:, None] * np.einsum("nik,nk->ni", jac, d_star)
    if with_grad and np.any(c):
        add_grads(grads, _double_backprop(net, ctx, weight * c))
    return RegularizerOutput(value, grads, detail)


# ---------------------------------------------------------------------------
# ECAPIFY (estimated twins, feature space)
# ---------------------------------------------------------------------------


def ecapify_regularizer(
    clf: Classifier,
    x: Array,
    y: Array,
    twins_est: Array,
    delta: float,
    mu: tuple,
    with_grad: bool = False,
    weight: float = 1.0,
) -> RegularizerOutput:
    """Max over estimated twins of ``mu1 l + mu2 delta |grad| + mu3 |first-order residual|``.

    ``twins_est`` has shape ``(N, L, n)`` (or ``(L, n)`` for one instance).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    tw = np.asarray(twins_est, dtype=float)
    if tw.ndim == 2:
        tw = tw[None]
    mu1, mu2, mu3 = (float(m) for m in mu)
    net = clf.net
    N, L, n = tw.shape
    grads = net.zero_grads() if with_grad else None
    if mu1 == mu2 == mu3 == 0:
        return RegularizerOutput(np.zeros(N), grads)

    flat = tw.reshape(-1, n)
    y_rep = np.repeat(y, L)
    loss_w, g, ctx = input_loss_grad(net, flat, y_rep)
    gn = np.linalg.norm(g, axis=1)
    u = np.divide(g, gn[:, None], out=np.zeros_like(g), where=gn[:, None] > 0)
    w2 = flat + delta * u
    loss_w2, g2, _ = input_loss_grad(net, w2, y_rep)
    res = loss_w2 - loss_w - delta * gn
    score = (mu1 * loss_w + mu2 * delta * gn + mu3 * np.abs(res)).reshape(N, L)
    pick = np.argmax(score, axis=1)
    value = score[np.arange(N), pick]
    if not with_grad:
        return RegularizerOutput(value, None, {"pick": pick})

    rows = np.arange(N) * L + pick
    sel = np.zeros(N * L, dtype=bool)
    sel[rows] = True
    sgn = np.sign(res) * sel
    # upstream on the twin-point input gradient g
    proj = g2 - u * np.sum(u * g2, axis=1, keepdims=True)
    c = mu2 * delta * u + (mu3 * sgn)[:, None] * delta * (
        np.divide(proj, gn[:, None], out=np.zeros_like(proj), where=gn[:, None] > 0) - u
    )
    c *= sel[:, None]
    add_grads(grads, _double_backprop(net, ctx, weight * c))
    add_grads(grads, _loss_backward(net, flat, y_rep, weight * (mu1 * sel - mu3 * sgn)))
    add_grads(grads, _loss_backward(net, w2, y_rep, weight * mu3 * sgn))
    return RegularizerOutput(value, grads, {"pick": pick})


def _embedder(metric):
    if isinstance(metric, LearnedMetric):
        return metric.embed, metric.embed_metric
    if isinstance(metric, OracleMetric):
        return metric.project, metric.base
    raise TypeError(f"cannot estimate twins with {type(metric).__name__}")


def estimate_twins(
    v: Array,
    levels: Array,
    lm,
    pool: Array,
    sensitive_idx: tuple,
    chunk: int = 256,
) -> Array:
    """Nearest neighbour (in the metric) at every other sensitive level; ``v`` at its own.

    Returns ``(L, n)`` for one instance, ``(N, L, n)`` for a batch.
    """
    v = np.asarray(v, dtype=float)
    single = v.ndim == 1
    v = np.atleast_2d(v)
    pool = np.atleast_2d(np.asarray(pool, dtype=float))
    levels = np.asarray(levels, dtype=float)
    if levels.ndim == 1:
        levels = levels[:, None]
    sidx = list(sensitive_idx)
    embed, base = _embedder(lm)
    ev = embed(v)
    out = np.empty((len(v), len(levels), v.shape[1]))
    for li, lv in enumerate(levels):
        members = np.all(pool[:, sidx] == lv, axis=1)
        if not members.any():
            raise MissingLevel(f"no pool instance at sensitive level {lv.tolist()}")
        cand = pool[members]
        ec = embed(cand)
        own = np.all(v[:, sidx] == lv, axis=1)
        for start in range(0, len(v), chunk):
            blk = slice(start, start + chunk)
            dist = base(ev[blk][:, None, :], ec[None, :, :])
            out[blk, li] = cand[np.argmin(dist, axis=1)]
        out[own, li] = v[own]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def train_classifier(
    data: LabeledDataset,
    cfg: TrainerConfig,
    scm: Optional[Scm] = None,
    oracle: Optional[OracleMetric] = None,
    twins_est: Optional[Array] = None,
) -> tuple[Classifier, list[float]]:
    """Minibatch Adam on mean BCE plus the method's regularizer.

    CAPIFY needs ``scm``; ECAPIFY needs ``twins_est`` aligned with the
    training split. Shuffling and the regularizers' random starts use
    separate generators, so a zero-strength regularizer reproduces ERM.
    """
    x, y = data.x_train, data.y_train
    if len(x) == 0:
        raise EmptyTestSet("empty training split")
    if cfg.method == "CAPIFY" and scm is None:
        raise ValueError("CAPIFY needs the SCM")
    if cfg.method == "ECAPIFY" and twins_est is None:
        raise ValueError("ECAPIFY needs estimated twins")
    if scm is not None and oracle is None:
        oracle = OracleMetric(scm)
    clf = new_classifier(x.shape[1], cfg)
    net = clf.net
    state = AdamState(lr=cfg.lr)
    shuffle = np.random.default_rng(cfg.seed)
    inner = np.random.default_rng([cfg.seed, 1])
    log: list[float] = []
    for _ in range(cfg.epochs):
        perm = shuffle.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch):
            idx = perm[start : start + cfg.batch]
            xb, yb = x[idx], y[idx]
            m = len(idx)
            if cfg.method == "AL":
                xb = pgd_feature(clf, xb, yb, cfg.delta, cfg.pgd_steps, cfg.step_size)
            o = net.forward(xb, train=True)[:, 0]
            loss = float(np.mean(logit_loss(o, yb)))
            grads, _ = net.backward((logit_loss_grad(o, yb) / m)[:, None])
            if cfg.method == "CAPIFY":
                reg = capify_regularizer(
                    scm, oracle, clf, xb, yb, cfg, inner, with_grad=True, weight=1.0 / m
                )
                loss += float(np.mean(reg.value))
                add_grads(grads, reg.grads)
            elif cfg.method == "ECAPIFY":
                reg = ecapify_regularizer(
                    clf, xb, yb, twins_est[idx], cfg.delta, cfg.mu, with_grad=True, weight=1.0 / m
                )
                loss += float(np.mean(reg.value))
                add_grads(grads, reg.grads)
            adam_step(state, net.params(), grads)
            total += loss * m
        log.append(total / len(x))
    net.cache = None
    return clf, log


def train_erm(data: LabeledDataset, cfg: TrainerConfig) -> Classifier:
    return train_classifier(data, TrainerConfig(**{**asdict(cfg), "method": "ERM"}))[0]


def train_al(data: LabeledDataset, cfg: TrainerConfig) -> Classifier:
    return train_classifier(data, TrainerConfig(**{**asdict(cfg), "method": "AL"}))[0]


def train_capify(data: LabeledDataset, cfg: TrainerConfig, scm: Scm) -> Classifier:
    cfg = TrainerConfig(**{**asdict(cfg), "method": "CAPIFY"})
    return train_classifier(data, cfg, scm=scm)[0]


def train_ecapify(
    data: LabeledDataset, cfg: TrainerConfig, lm, levels: Array, sensitive_idx: tuple
) -> Classifier:
    """Estimate twins of the training split from the training pool, then train."""
    cfg = TrainerConfig(**{**asdict(cfg), "method": "ECAPIFY"})
    tw = estimate_twins(data.x_train, levels, lm, data.x_train, sensitive_idx)
    return train_classifier(data, cfg, twins_est=tw)[0]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class FairnessReport:
    method: str
    dataset: str
    delta: float
    acc: float
    mcc: float
    unfair_area: float
    cf_unfair_area: float
    nonrobust_area: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def fairness_flags(
    clf: Classifier, scm: Scm, oracle: OracleMetric, x: Array, delta: float, K: int, seed: int = 0
) -> dict:
    """Per-point flip indicators: ``cf`` (twins), ``nonrobust`` (own-level ball), ``unfair`` (both + all levels)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    rng = np.random.default_rng(seed)
    pred = clf.predict(x)
    tw = scm.twins(x)
    n_lv = tw.shape[1]
    cf = np.any(clf.predict(tw.reshape(-1, x.shape[1])).reshape(len(x), n_lv) != pred[:, None], axis=1)
    q = scm.to_semilatent(x)
    k = q.latent.shape[1]
    levels = scm.sensitive_levels
    own = np.zeros(len(x), dtype=bool)
    other = np.zeros(len(x), dtype=bool)
    for _ in range(K):
        lat = q.latent + sample_in_ball(oracle.base, k, delta, len(x), rng)
        flip = clf.predict(scm.from_semilatent(SemiLatentPoint(q.sensitive, lat))) != pred
        own |= flip
        for lv in levels:
            probe = scm.from_semilatent(SemiLatentPoint(np.broadcast_to(lv, q.sensitive.shape), lat))
            other |= clf.predict(probe) != pred
    return {"cf": cf, "nonrobust": own, "unfair": cf | own | other}


def eval_fairness(
    clf: Classifier,
    scm: Scm,
    oracle: OracleMetric,
    x_test: Array,
    y_test: Array,
    delta: float = 0.01,
    K: int = 100,
    seed: int = 0,
    method: str = "",
    dataset: str = "",
) -> FairnessReport:
    x_test = np.atleast_2d(np.asarray(x_test, dtype=float))
    if len(x_test) == 0 or np.size(y_test) == 0:
        raise EmptyTestSet("no test points")
    flags = fairness_flags(clf, scm, oracle, x_test, delta, K, seed)
    pred = clf.predict(x_test)
    tp, tn, fp, fn = confusion(pred == 1, np.asarray(y_test) == 1)
    return FairnessReport(
        method=method,
        dataset=dataset or scm.name,
        delta=float(delta),
        acc=(tp + tn) / len(x_test),
        mcc=mcc_from_confusion(tp, tn, fp, fn),
        unfair_area=float(flags["unfair"].mean()),
        cf_unfair_area=float(flags["cf"].mean()),
        nonrobust_area=float(flags["nonrobust"].mean()),
        seed=int(seed),
    )


def audit_individual_fairness(
    clf: Classifier, metric, a: Array, b: Array, eps: float, delta_thr: float, lipschitz: float
) -> dict:
    """Count pairs violating the epsilon-delta and the Lipschitz formulations."""
    out = np.abs(clf.prob(a) - clf.prob(b))
    d = np.asarray(metric(a, b), dtype=float)
    eps_delta = (d <= delta_thr + MEMBERSHIP_ATOL) & (out > eps)
    lip = out > lipschitz * d + 1e-12
    return {"eps_delta_violations": int(eps_delta.sum()), "lipschitz_violations": int(lip.sum())}
