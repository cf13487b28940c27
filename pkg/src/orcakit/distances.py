"""Distances between labeled datasets: OTDD (exact / Gaussian / class-wise
subsampled), MMD, the pairwise-Euclidean alignment baseline, sequence-mean
feature reduction, and k-means pseudo-labeling."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .ot import GaussianStats, default_eps, gaussian_w2, sinkhorn_log
from .tensor import make_rng, pairwise_sq_dists

CAP_PER_CLASS = 256  # sample cap per class for exact-mode label distances


@dataclass
class LabeledDataset:
    features: np.ndarray  # (n, d) after reduction, or (n, S, D) before
    labels: np.ndarray    # (n,) integer class ids

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels)
        if self.features.ndim not in (2, 3):
            raise ShapeError(f"features must be rank 2 or 3, got {self.features.ndim}")
        n = self.features.shape[0]
        if n < 1:
            raise ContractError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ShapeError(f"labels shape {self.labels.shape} vs n={n}")
        if np.any(self.labels < 0):
            raise ContractError("negative label id")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def reduced(self) -> np.ndarray:
        if self.features.ndim == 3:
            return seq_mean_reduce(self.features)
        return np.asarray(self.features, dtype=np.float64)

    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


@dataclass
class ClassConditional:
    label: int
    indices: np.ndarray
    mean: np.ndarray
    cov: np.ndarray

    def samples(self, features: np.ndarray) -> np.ndarray:
        return features[self.indices]


@dataclass
class DistanceReport:
    metric: str
    value: float
    per_class: dict = field(default_factory=dict)   # class id -> d_i
    class_weights: dict = field(default_factory=dict)  # class id -> w_i
    converged: bool = True
    wall_time: float = 0.0

    def __post_init__(self):
        if self.value < 0:
            raise ContractError("distance value must be nonnegative")
        if self.class_weights:
            total = sum(self.class_weights.values())
            if abs(total - 1.0) > 1e-9:
                raise ContractError(f"class weights sum to {total:.12g}")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "class_weights": {str(k): v for k, v in self.class_weights.items()},
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


def seq_mean_reduce(features: np.ndarray) -> np.ndarray:
    """(n, S, D) -> (n, D) by averaging along the sequence dimension."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise ShapeError(f"expected rank-3 features, got rank {features.ndim}")
    return features.mean(axis=1)


def fit_label_conditionals(ds: LabeledDataset, ridge: float | None = None) -> list[ClassConditional]:
    """Empirical mean/covariance per present class; ridge defaults to
    1e-6 * trace/d so single-sample classes stay nonsingular."""
    feats = ds.reduced()
    d = feats.shape[1]
    out = []
    for label in ds.classes():
        idx = np.flatnonzero(ds.labels == label)
        if idx.size == 0:
            raise ContractError(f"class {label} has no samples")
        x = feats[idx]
        mean = x.mean(axis=0)
        if idx.size > 1:
            cov = np.cov(x, rowvar=False).reshape(d, d)
        else:
            cov = np.zeros((d, d))
        r = ridge
        if r is None:
            r = 1e-6 * max(np.trace(cov), 1.0) / d
        cov = cov + r * np.eye(d)
        out.append(ClassConditional(label=int(label), indices=idx, mean=mean, cov=cov))
    return out


def _class_subsample(idx: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if idx.size <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def label_distance_matrix(
    src: list[ClassConditional],
    tgt: list[ClassConditional],
    src_features: np.ndarray,
    tgt_features: np.ndarray,
    mode: str = "exact",
    eps: float | None = None,
    cap_per_class: int = CAP_PER_CLASS,
    seed: int = 0,
) -> np.ndarray:
    """W2 between class conditionals, (n_tgt_classes x n_src_classes).

    Gaussian mode uses the closed-form Bures distance of the fitted moments;
    exact mode solves entropic OT on the (capped) member samples.
    """
    if mode not in ("exact", "gaussian"):
        raise ContractError(f"unknown label-distance mode {mode!r}")
    if src_features.shape[1] != tgt_features.shape[1]:
        raise ShapeError("feature dimension mismatch between datasets")
    w = np.zeros((len(tgt), len(src)))
    for i, ct in enumerate(tgt):
        for j, cs in enumerate(src):
            if ct.indices.size == 0 or cs.indices.size == 0:
                raise ContractError("empty class conditional")
            if mode == "gaussian":
                w[i, j] = gaussian_w2(
                    GaussianStats(ct.mean, ct.cov), GaussianStats(cs.mean, cs.cov)
                )
            else:
                rng = make_rng(seed, "label_dist", ct.label, cs.label)
                xi = tgt_features[_class_subsample(ct.indices, cap_per_class, rng)]
                xj = src_features[_class_subsample(cs.indices, cap_per_class, rng)]
                cost = pairwise_sq_dists(xi, xj)
                na, nb = xi.shape[0], xj.shape[0]
                plan = sinkhorn_log(cost, np.full(na, 1.0 / na), np.full(nb, 1.0 / nb), eps=eps)
                w[i, j] = np.sqrt(max(plan.value, 0.0))
    return w


def _otdd_solve(
    tgt: LabeledDataset,
    src: LabeledDataset,
    mode: str = "exact",
    eps: float | None = None,
    seed: int = 0,
    cap_per_class: int = CAP_PER_CLASS,
):
    """Shared core: returns (plan, augmented cost, label matrix, class index maps)."""
    zt = tgt.reduced()
    zs = src.reduced()
    if zt.shape[1] != zs.shape[1]:
        raise ShapeError("feature dimension mismatch after reduction")
    ct = fit_label_conditionals(tgt)
    cs = fit_label_conditionals(src)
    w = label_distance_matrix(cs, ct, zs, zt, mode=mode, eps=eps,
                              cap_per_class=cap_per_class, seed=seed)
    ti = {c.label: i for i, c in enumerate(ct)}
    si = {c.label: j for j, c in enumerate(cs)}
    rows = np.array([ti[int(y)] for y in tgt.labels])
    cols = np.array([si[int(y)] for y in src.labels])
    cost = pairwise_sq_dists(zt, zs) + (w ** 2)[np.ix_(rows, cols)]
    if not np.all(np.isfinite(cost)):
        raise NumericError("otdd: non-finite augmented cost")
    n, m = cost.shape
    plan = sinkhorn_log(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m), eps=eps)
    return plan, cost, w, rows, cols


def otdd(
    tgt: LabeledDataset,
    src: LabeledDataset,
    mode: str = "exact",
    eps: float | None = None,
    seed: int = 0,
    cap_per_class: int = CAP_PER_CLASS,
) -> DistanceReport:
    """OT dataset distance with the label-augmented squared-Euclidean ground
    cost; the report value is the square root of the OT value (p = 2)."""
    t0 = time.perf_counter()
    plan, _, _, _, _ = _otdd_solve(tgt, src, mode=mode, eps=eps, seed=seed,
                                   cap_per_class=cap_per_class)
    return DistanceReport(
        metric=f"otdd-{mode}",
        value=float(np.sqrt(max(plan.value, 0.0))),
        converged=plan.converged,
        wall_time=time.perf_counter() - t0,
    )


def otdd_subsampled(
    tgt: LabeledDataset,
    src: LabeledDataset,
    b: int,
    rounds: int = 1,
    seed: int = 0,
    mode: str = "exact",
    eps: float | None = None,
    cap_per_class: int = CAP_PER_CLASS,
) -> DistanceReport:
    """Class-wise subsampled OTDD approximation.

    Per class i: draw `b` samples uniformly without replacement (`rounds`
    times; with replacement when the class is smaller than `b`), average the
    per-round distances to the full source, and combine with class weights
    n_i / n. When `b` covers the whole class the draw is the class itself, so
    rounds=1 reproduces the class-wise exact sum bit for bit.
    """
    full = b in (None, "full", 0)
    if not full and (not isinstance(b, (int, np.integer)) or b < 1):
        raise ContractError("subsample size must be >= 1 or 'full'")
    if rounds < 1:
        raise ContractError("rounds must be >= 1")
    t0 = time.perf_counter()
    n = tgt.n
    per_class: dict[int, float] = {}
    weights: dict[int, float] = {}
    converged = True
    for label in tgt.classes():
        idx = np.flatnonzero(tgt.labels == label)
        if idx.size == 0:
            raise ContractError(f"class {label} has no samples")
        weights[int(label)] = idx.size / n
        b_eff = idx.size if full else b
        vals = []
        for r in range(rounds):
            rng = make_rng(seed, "otdd_sub", int(label), r)
            if idx.size == b_eff:
                sub = idx
            elif idx.size < b_eff:
                sub = np.sort(rng.choice(idx, size=b_eff, replace=True))
            else:
                sub = np.sort(rng.choice(idx, size=b_eff, replace=False))
            ds_sub = LabeledDataset(tgt.features[sub], tgt.labels[sub])
            rep = otdd(ds_sub, src, mode=mode, eps=eps, seed=seed, cap_per_class=cap_per_class)
            converged = converged and rep.converged
            vals.append(rep.value)
        per_class[int(label)] = float(np.mean(vals))
    value = float(sum(weights[c] * per_class[c] for c in per_class))
    return DistanceReport(
        metric="otdd-subsampled",
        value=value,
        per_class=per_class,
        class_weights=weights,
        converged=converged,
        wall_time=time.perf_counter() - t0,
    )


def otdd_grad(
    tgt: LabeledDataset,
    src: LabeledDataset,
    eps: float | None = None,
    seed: int = 0,
    cap_per_class: int = CAP_PER_CLASS,
    include_label_term: bool = True,
    max_iter: int = 1000,
):
    """Exact-mode OTDD value and its envelope (Danskin) gradient w.r.t. the
    target's reduced features.

    All transport plans (the outer coupling and the inner per-class-pair
    couplings behind the label distances) are held fixed at their entropic
    optima; the gradient flows only through the quadratic cost terms.
    Returns (value, grad (n, d), converged).
    """
    zt = tgt.reduced()
    zs = src.reduced()
    if zt.shape[1] != zs.shape[1]:
        raise ShapeError("feature dimension mismatch after reduction")
    ct = fit_label_conditionals(tgt)
    cs = fit_label_conditionals(src)
    n, d = zt.shape
    m = zs.shape[0]
    converged = True

    # inner solves: per class pair, keep plan and subsample indices
    kt, ks = len(ct), len(cs)
    w2 = np.zeros((kt, ks))
    inner = {}
    for i, cc in enumerate(ct):
        for j, sc in enumerate(cs):
            rng = make_rng(seed, "label_dist", cc.label, sc.label)
            ti = _class_subsample(cc.indices, cap_per_class, rng)
            si = _class_subsample(sc.indices, cap_per_class, rng)
            cost = pairwise_sq_dists(zt[ti], zs[si])
            na, nb = ti.size, si.size
            plan = sinkhorn_log(cost, np.full(na, 1.0 / na), np.full(nb, 1.0 / nb),
                                eps=eps, max_iter=max_iter)
            converged = converged and plan.converged
            w2[i, j] = max(plan.value, 0.0)
            inner[(i, j)] = (ti, si, plan.matrix)

    ti_of = {c.label: i for i, c in enumerate(ct)}
    si_of = {c.label: j for j, c in enumerate(cs)}
    rows = np.array([ti_of[int(y)] for y in tgt.labels])
    cols = np.array([si_of[int(y)] for y in src.labels])
    cost = pairwise_sq_dists(zt, zs) + w2[np.ix_(rows, cols)]
    if not np.all(np.isfinite(cost)):
        raise NumericError("otdd_grad: non-finite augmented cost")
    outer = sinkhorn_log(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m),
                         eps=eps, max_iter=max_iter)
    converged = converged and outer.converged
    value_sq = max(outer.value, 0.0)
    pi = outer.matrix

    grad = 2.0 * (pi.sum(axis=1)[:, None] * zt - pi @ zs)
    if include_label_term:
        # class-pair mass under the outer plan weights each inner gradient
        mass = np.zeros((kt, ks))
        for i in range(kt):
            for j in range(ks):
                mass[i, j] = pi[np.ix_(rows == i, cols == j)].sum()
        for (i, j), (ti, si, mu) in inner.items():
            if mass[i, j] <= 0:
                continue
            g_local = 2.0 * (mu.sum(axis=1)[:, None] * zt[ti] - mu @ zs[si])
            np.add.at(grad, ti, mass[i, j] * g_local)

    value = float(np.sqrt(value_sq))
    if value > 0:
        grad = grad / (2.0 * value)
    return value, grad, converged


def _rbf_kernel(sq: np.ndarray, bandwidth: float) -> np.ndarray:
    return np.exp(-sq / (2.0 * bandwidth ** 2))


def mmd(a: np.ndarray, b: np.ndarray, kernel: str = "rbf", bandwidth=None) -> float:
    """Biased (V-statistic) MMD between samples, reported as sqrt(MMD^2).

    RBF bandwidth defaults to the median pairwise distance of the pooled
    sample; the linear kernel reduces to the mean-embedding distance."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"mmd: incompatible shapes {a.shape} and {b.shape}")
    if kernel == "linear":
        k_aa = float(np.mean(a @ a.T))
        k_bb = float(np.mean(b @ b.T))
        k_ab = float(np.mean(a @ b.T))
    elif kernel == "rbf":
        if bandwidth is None or bandwidth == "auto":
            pooled = np.vstack([a, b])
            sq = pairwise_sq_dists(pooled, pooled)
            med = float(np.median(np.sqrt(sq[np.triu_indices_from(sq, k=1)])))
            bandwidth = med if med > 0 else 1.0
        if bandwidth <= 0:
            raise ContractError("mmd: bandwidth must be positive")
        k_aa = float(np.mean(_rbf_kernel(pairwise_sq_dists(a, a), bandwidth)))
        k_bb = float(np.mean(_rbf_kernel(pairwise_sq_dists(b, b), bandwidth)))
        k_ab = float(np.mean(_rbf_kernel(pairwise_sq_dists(a, b), bandwidth)))
    else:
        raise ContractError(f"unknown kernel {kernel!r}")
    return float(np.sqrt(max(k_aa + k_bb - 2.0 * k_ab, 0.0)))


def euclidean_align(a: np.ndarray, b: np.ndarray, seed: int | None = 0) -> float:
    """Mean squared Euclidean distance over min(n, m) random disjoint
    pairings; seed=None keeps both sides in index order (identity pairing)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"euclidean_align: incompatible shapes {a.shape} and {b.shape}")
    k = min(a.shape[0], b.shape[0])
    if seed is None:
        ia = np.arange(k)
        ib = np.arange(k)
    else:
        rng = make_rng(seed, "euclid_pairing")
        ia = rng.permutation(a.shape[0])[:k]
        ib = rng.permutation(b.shape[0])[:k]
    diff = a[ia] - b[ib]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def kmeans_pseudolabels(features: np.ndarray, k: int, seed: int = 0, iters: int = 100) -> np.ndarray:
    """Deterministic k-means++ / Lloyd clustering; ties go to the lowest
    centroid index. Used to pseudo-label dense-prediction targets."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"kmeans: expected rank-2 features, got {x.ndim}")
    n = x.shape[0]
    if k > n:
        raise ContractError(f"kmeans: k={k} exceeds n={n}")
    if k < 1:
        raise ContractError("kmeans: k must be >= 1")
    rng = make_rng(seed, "kmeans")

    # k-means++ seeding
    centroids = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = pairwise_sq_dists(x, np.asarray(centroids)).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centroids.append(x[rng.integers(n)])
            continue
        probs = d2 / total
        centroids.append(x[rng.choice(n, p=probs)])
    centroids = np.asarray(centroids)

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        d2 = pairwise_sq_dists(x, centroids)
        new_labels = np.argmin(d2, axis=1)  # argmin takes the lowest index on ties
        if np.array_equal(new_labels, labels) and _ > 0:
            break
        labels = new_labels
        for c in range(k):
            members = x[labels == c]
            if members.shape[0] > 0:
                centroids[c] = members.mean(axis=0)
    return labels.astype(np.int64)
