"""Deep metric learning of a causal fair metric from tagged examples.

Three supervision regimes are supported: real distance tags (Huber loss),
similar/dissimilar labels (contrastive loss) and anchor/positive/negative
triplets (triplet loss). An optional decorrelation penalty pushes the
embedding coordinates toward independence.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateBatch, EmptyTestSet, LengthMismatch, NonpositiveDelta
from .metric import (
    MEMBERSHIP_ATOL,
    BaseMetric,
    OracleMetric,
    sample_in_ball,
    sample_in_shell,
)
from .scm import Scm, SemiLatentPoint
from .tensor_nn import AdamState, FeedForwardNet, adam_step

Array = np.ndarray

TWIN_PROB = 0.1
OUTER_FACTOR = 4.0


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class PairDataset:
    """Rows ``a[i], b[i]`` with a distance tag or a 0/1 label (1 = dissimilar)."""

    a: Array
    b: Array
    tag: Array
    mode: str

    def __len__(self) -> int:
        return len(self.tag)

    def subset(self, idx: Array) -> "PairDataset":
        return PairDataset(self.a[idx], self.b[idx], self.tag[idx], self.mode)


@dataclass
class TripletDataset:
    anchor: Array
    positive: Array
    negative: Array

    def __len__(self) -> int:
        return len(self.anchor)

    def subset(self, idx: Array) -> "TripletDataset":
        return TripletDataset(self.anchor[idx], self.positive[idx], self.negative[idx])


def _inside_partners(scm: Scm, oracle: OracleMetric, anchors: Array, delta: float, rng) -> Array:
    q = scm.to_semilatent(anchors)
    levels = scm.sensitive_levels
    lv = levels[rng.integers(len(levels), size=len(anchors))]
    off = sample_in_ball(oracle.base, q.latent.shape[1], delta, len(anchors), rng)
    off[rng.random(len(anchors)) < TWIN_PROB] = 0.0
    return scm.from_semilatent(SemiLatentPoint(lv, q.latent + off))


def _outside_partners(scm: Scm, oracle: OracleMetric, anchors: Array, delta: float, rng) -> Array:
    """Half shell offsets in ``(delta, 4 delta]``, half independent draws; the
    draws that land inside the ball are replaced by shell offsets."""
    count = len(anchors)
    q = scm.to_semilatent(anchors)
    levels = scm.sensitive_levels
    lv = levels[rng.integers(len(levels), size=count)]
    off = sample_in_shell(oracle.base, q.latent.shape[1], delta, OUTER_FACTOR * delta, count, rng)
    shell = scm.from_semilatent(SemiLatentPoint(lv, q.latent + off))
    fresh = scm.sample_rng(count, rng)[0]
    use_fresh = rng.random(count) < 0.5
    use_fresh &= oracle.distance(anchors, fresh) > delta + MEMBERSHIP_ATOL
    return np.where(use_fresh[:, None], fresh, shell)


def build_pairs(
    scm: Scm, oracle: OracleMetric, delta: float, count: int, seed: int, mode: str = "distance"
) -> PairDataset:
    if count < 2:
        raise ValueError("count must be >= 2")
    if mode not in ("distance", "label"):
        raise ValueError(f"unknown pair mode {mode!r}")
    rng = np.random.default_rng(seed)
    anchors = scm.sample_rng(count, rng)[0]
    n_in = count // 2
    partners = np.vstack(
        [
            _inside_partners(scm, oracle, anchors[:n_in], delta, rng),
            _outside_partners(scm, oracle, anchors[n_in:], delta, rng),
        ]
    )
    perm = rng.permutation(count)
    return tag_pairs(oracle, anchors[perm], partners[perm], delta, mode)


def tag_pairs(oracle: OracleMetric, a: Array, b: Array, delta: float, mode: str = "distance") -> PairDataset:
    """Oracle distance tags, or labels ``1[d > delta]`` (1 = dissimilar)."""
    a, b = np.atleast_2d(a).astype(float), np.atleast_2d(b).astype(float)
    d = np.atleast_1d(oracle.distance(a, b))
    tag = d if mode == "distance" else (d > delta + MEMBERSHIP_ATOL).astype(float)
    return PairDataset(a, b, tag, mode)


def build_triplets(
    scm: Scm, oracle: OracleMetric, delta: float, count: int, seed: int
) -> TripletDataset:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    anchors = scm.sample_rng(count, rng)[0]
    pos = _inside_partners(scm, oracle, anchors, delta, rng)
    neg = _outside_partners(scm, oracle, anchors, delta, rng)
    return TripletDataset(anchors, pos, neg)


# ---------------------------------------------------------------------------
# losses (value and derivative in the learned distance)
# ---------------------------------------------------------------------------


def huber_loss(pred, target, delta: float = 1.0):
    if delta <= 0:
        raise NonpositiveDelta("Huber delta must be positive")
    e = np.abs(np.asarray(pred, dtype=float) - target)
    return np.where(e <= delta, 0.5 * e**2, delta * e - 0.5 * delta**2)


def huber_grad(pred, target, delta: float = 1.0):
    e = np.asarray(pred, dtype=float) - target
    return np.clip(e, -delta, delta)


def contrastive_loss(d, y, margin: float):
    d = np.asarray(d, dtype=float)
    return (1 - y) * d + y * np.maximum(margin - d, 0.0)


def contrastive_grad(d, y, margin: float):
    d = np.asarray(d, dtype=float)
    return (1 - y) - y * (margin - d > 0)


def triplet_loss(d_ap, d_an, margin: float = 0.0):
    return np.maximum(np.asarray(d_ap, dtype=float) - d_an + margin, 0.0)


def triplet_grad(d_ap, d_an, margin: float = 0.0):
    active = (np.asarray(d_ap, dtype=float) - d_an + margin > 0).astype(float)
    return active, -active


# ---------------------------------------------------------------------------
# XIcor and the decorrelation penalty
# ---------------------------------------------------------------------------


def xicor(x, y) -> float:
    """Chatterjee's rank correlation; ties broken by index order."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise LengthMismatch(f"x and y must be 1-D of equal length, got {x.shape} and {y.shape}")
    n = len(x)
    if n < 2:
        raise ValueError("need at least two observations")
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(y, kind="stable")] = np.arange(1, n + 1)
    r = ranks[np.argsort(x, kind="stable")]
    # integer numerator: one rounding, so rational cases come out exact
    total = int(np.abs(np.diff(r)).sum())
    return (n * n - 1 - 3 * total) / (n * n - 1)


def xicor_matrix(emb: Array) -> Array:
    k = emb.shape[1]
    out = np.eye(k)
    for i in range(k):
        for j in range(k):
            if i != j:
                out[i, j] = xicor(emb[:, i], emb[:, j])
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def soft_xicor_matrix(
    emb: Array, tau: float = 1.0, standardize: bool = True
) -> tuple[Array, dict]:
    """Differentiable XIcor surrogate: exact ordering by the first argument,
    sigmoid soft ranks of the second.

    Coordinates are standardized first so the surrogate, like the exact
    statistic, ignores scale. With ``standardize=False`` the soft ranks
    flatten when a coordinate's spread is small next to ``tau``, which makes
    the penalty also push the embedding scale up.
    """
    emb = np.asarray(emb, dtype=float)
    n, k = emb.shape
    sd = emb.std(axis=0)
    const = sd < 1e-12
    if standardize:
        z = (emb - emb.mean(axis=0)) / np.where(const, 1.0, sd)
    else:
        z = emb
    soft_rank, pmat = [], []
    for j in range(k):
        diff = (z[:, j][:, None] - z[:, j][None, :]) / tau
        s = _sigmoid(diff)
        soft_rank.append(0.5 + s.sum(axis=1))
        pmat.append(s * (1 - s))
    orders = [np.argsort(emb[:, i], kind="stable") for i in range(k)]
    xi = np.eye(k)
    signs = {}
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            if const[i] or const[j]:
                xi[i, j] = 0.0
                continue
            r = soft_rank[j][orders[i]]
            step = np.diff(r)
            signs[i, j] = np.sign(step)
            xi[i, j] = 1.0 - 3.0 * np.abs(step).sum() / (n * n - 1)
    for i in np.flatnonzero(const):
        xi[i, i] = 0.0
    ctx = dict(z=z, sd=sd, const=const, standardize=standardize, pmat=pmat, orders=orders, signs=signs, tau=tau, n=n)
    return xi, ctx


def decorrelation_penalty(
    emb: Array, tau: float = 1.0, strict: bool = True, standardize: bool = True
) -> float:
    return decorrelation_penalty_grad(emb, tau, strict, standardize)[0]


def decorrelation_penalty_grad(
    emb: Array, tau: float = 1.0, strict: bool = True, standardize: bool = True
) -> tuple[float, Array]:
    """``|I - Xi_soft|_F`` and its gradient in the embedding rows.

    A constant coordinate has no rank information: its diagonal entry is
    taken as 0 (so it contributes 1 to the norm), its off-diagonal entries as
    0, and it receives no gradient. That convention applies only with
    ``strict=False`` (as in training); otherwise a constant coordinate raises.
    """
    emb = np.asarray(emb, dtype=float)
    n, k = emb.shape
    if n < 4:
        raise DegenerateBatch("decorrelation needs a batch of at least 4")
    xi, ctx = soft_xicor_matrix(emb, tau, standardize)
    if strict and ctx["const"].any():
        raise DegenerateBatch("constant embedding coordinate")
    resid = np.eye(k) - xi
    value = float(np.sqrt(np.sum(resid**2)))
    grad = np.zeros_like(emb)
    if value == 0.0:
        return value, grad
    bar_rank = [np.zeros(n) for _ in range(k)]
    for (i, j), sgn in ctx["signs"].items():
        # d value / d xi_ij = -resid_ij / value ; d xi / d S = -3 / (n^2 - 1)
        coef = (resid[i, j] / value) * 3.0 / (n * n - 1)
        g_sorted = np.zeros(n)
        g_sorted[1:] += sgn
        g_sorted[:-1] -= sgn
        bar_rank[j][ctx["orders"][i]] += coef * g_sorted
    for j in range(k):
        if ctx["const"][j] or not bar_rank[j].any():
            continue
        p = ctx["pmat"][j]
        br = bar_rank[j]
        bar_z = (br * p.sum(axis=1) - br @ p) / ctx["tau"]
        if ctx["standardize"]:
            z = ctx["z"][:, j]
            grad[:, j] = (bar_z - bar_z.mean() - z * np.mean(bar_z * z)) / ctx["sd"][j]
        else:
            grad[:, j] = bar_z
    return value, grad


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

PRESETS = {
    "desk": dict(count=2000, batch_size=200, epochs=30),
    "paper": dict(count=10000, batch_size=1000, epochs=100),
}


@dataclass
class MetricTrainConfig:
    scenario: str = "distance"
    delta: float = 0.1
    epochs: int = 30
    batch_size: int = 200
    count: int = 2000
    margin: Optional[float] = None
    lambda_dec: float = 0.0
    embedding: str = "known"
    depth: int = 5
    width: int = 100
    seed: int = 0
    lr: float = 1e-3
    huber_delta: float = 1.0
    tau: float = 1.0
    standardize_dec: bool = True

    def __post_init__(self):
        if self.scenario not in ("distance", "label", "triplet"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.embedding not in ("known", "unknown"):
            raise ValueError("embedding must be 'known' or 'unknown'")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.margin is None:
            self.margin = self.delta if self.scenario == "label" else 0.0

    @classmethod
    def preset(cls, name: str, **overrides) -> "MetricTrainConfig":
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class LearnedMetric:
    net: FeedForwardNet
    embed_metric: BaseMetric = field(default_factory=BaseMetric)

    def embed(self, v: Array) -> Array:
        return self.net.forward(np.asarray(v, dtype=float))

    def distance(self, v: Array, w: Array) -> Array:
        return self.embed_metric(self.embed(v), self.embed(w))

    __call__ = distance


def embedding_shape(scm: Scm, oracle: OracleMetric, cfg: MetricTrainConfig):
    if cfg.embedding == "known":
        return len(scm.latent_idx), oracle.base
    return max(1, scm.n // 2), BaseMetric()


def make_training_data(scm: Scm, oracle: OracleMetric, cfg: MetricTrainConfig, seed=None):
    seed = cfg.seed if seed is None else seed
    if cfg.scenario == "triplet":
        return build_triplets(scm, oracle, cfg.delta, cfg.count, seed)
    mode = "distance" if cfg.scenario == "distance" else "label"
    return build_pairs(scm, oracle, cfg.delta, cfg.count, seed, mode)


def scenario_loss_and_grad(
    lm: LearnedMetric, batch, cfg: MetricTrainConfig, with_grad: bool = True
) -> tuple[float, Optional[list[Array]]]:
    """Mean scenario loss plus the decorrelation term, and its parameter gradient."""
    net, base = lm.net, lm.embed_metric
    if isinstance(batch, TripletDataset):
        blocks = [batch.anchor, batch.positive, batch.negative]
    else:
        blocks = [batch.a, batch.b]
    m = len(blocks[0])
    emb = net.forward(np.vstack(blocks), train=with_grad)
    parts = [emb[i * m : (i + 1) * m] for i in range(len(blocks))]
    g_emb = np.zeros_like(emb)

    if isinstance(batch, TripletDataset):
        d_ap, g_ap = base.gradient(parts[0], parts[1])
        d_an, g_an = base.gradient(parts[0], parts[2])
        loss = triplet_loss(d_ap, d_an, cfg.margin)
        c_ap, c_an = triplet_grad(d_ap, d_an, cfg.margin)
        c_ap, c_an = c_ap[:, None] / m, c_an[:, None] / m
        g_emb[:m] = c_ap * g_ap + c_an * g_an
        g_emb[m : 2 * m] = -c_ap * g_ap
        g_emb[2 * m :] = -c_an * g_an
    else:
        d, g = base.gradient(parts[0], parts[1])
        if cfg.scenario == "distance":
            loss = huber_loss(d, batch.tag, cfg.huber_delta)
            c = huber_grad(d, batch.tag, cfg.huber_delta)
        else:
            loss = contrastive_loss(d, batch.tag, cfg.margin)
            c = contrastive_grad(d, batch.tag, cfg.margin)
        c = c[:, None] / m
        g_emb[:m] = c * g
        g_emb[m:] = -c * g
    total = float(np.mean(loss))

    if cfg.lambda_dec > 0:
        pen, g_pen = decorrelation_penalty_grad(
            emb, cfg.tau, strict=False, standardize=cfg.standardize_dec
        )
        total += cfg.lambda_dec * pen
        g_emb += cfg.lambda_dec * g_pen

    if not with_grad:
        return total, None
    grads, _ = net.backward(g_emb)
    return total, grads


def train_metric(
    scm: Scm,
    cfg: MetricTrainConfig,
    data=None,
    oracle: Optional[OracleMetric] = None,
) -> tuple[LearnedMetric, list[float]]:
    """Minibatch Adam on the scenario loss; returns the metric and per-epoch mean losses."""
    oracle = oracle or OracleMetric(scm)
    if data is None:
        data = make_training_data(scm, oracle, cfg)
    if cfg.scenario == "triplet" and not isinstance(data, TripletDataset):
        raise TypeError("triplet scenario needs a TripletDataset")
    if cfg.scenario != "triplet" and not isinstance(data, PairDataset):
        raise TypeError(f"{cfg.scenario} scenario needs a PairDataset")

    k, embed_metric = embedding_shape(scm, oracle, cfg)
    net = FeedForwardNet([scm.n] + [cfg.width] * cfg.depth + [k], seed=cfg.seed)
    lm = LearnedMetric(net, embed_metric)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 7919)
    log: list[float] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(len(data))
        losses = []
        for start in range(0, len(data), cfg.batch_size):
            batch = data.subset(perm[start : start + cfg.batch_size])
            if len(batch) < 4 and cfg.lambda_dec > 0:
                continue
            loss, grads = scenario_loss_and_grad(lm, batch, cfg)
            adam_step(state, net.params(), grads)
            losses.append(loss)
        log.append(float(np.mean(losses)))
    net.cache = None
    return lm, log


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class MetricReport:
    acc: float
    fn: float
    fp: float
    mcc: float
    mae: float
    rmse: float
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def mcc_from_confusion(tp: float, tn: float, fp: float, fn: float) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(den))


def confusion(pred: Array, truth: Array) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    tn = int(np.sum(~pred & ~truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, tn, fp, fn


def eval_metric(lm, oracle: OracleMetric, delta: float, pairs: PairDataset) -> MetricReport:
    """Threshold the learned distance at ``delta`` and compare with the oracle.

    Predicted label is ``1[d > delta]`` (dissimilar). The confusion counts
    treat "inside the ball" as the positive class, so FN counts in-ball pairs
    the learned metric pushes out (robustness misses) and FP counts outside
    pairs pulled in. FN and FP are rates within the true class.
    """
    if len(pairs) == 0:
        raise EmptyTestSet("no test pairs")
    true_d = oracle.distance(pairs.a, pairs.b)
    learned = lm.distance(pairs.a, pairs.b)
    inside = true_d <= delta + MEMBERSHIP_ATOL
    pred_inside = learned <= delta + MEMBERSHIP_ATOL
    tp, tn, fp, fn = confusion(pred_inside, inside)
    err = learned - true_d
    return MetricReport(
        acc=(tp + tn) / len(pairs),
        fn=fn / (fn + tp) if fn + tp else 0.0,
        fp=fp / (fp + tn) if fp + tn else 0.0,
        mcc=mcc_from_confusion(tp, tn, fp, fn),
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(np.mean(err**2))),
        n=len(pairs),
    )
