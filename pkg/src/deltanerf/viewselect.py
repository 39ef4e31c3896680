"""Depth-aware view selection.

Pipeline: embed every view -> normalize -> PCA -> k-means -> cluster
representatives -> greedy depth-range expansion -> prune -> rank leftovers
by silhouette -> validate facet completeness.

Embeddings are hand-made image / depth / metadata statistics, so the
whole thing is deterministic and cheap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError

GRAD_BINS = np.array([0.0, 0.01, 0.02, 0.04, 0.08, 0.16, np.inf])
DEPTH_QUANTILES = (0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)
BLOCKS = ("appearance", "terrain", "meta")
FACETS = ("appearance", "terrain", "meta", "joint")


@dataclass
class ViewEmbedding:
    appearance: np.ndarray
    terrain: np.ndarray
    meta: np.ndarray
    depth_range: tuple  # (min, max) of the view's depth map, meters

    def block(self, name):
        return getattr(self, name)

    def raw(self):
        return np.concatenate([self.appearance, self.terrain, self.meta])


def _luma(rgb):
    return rgb @ np.array([0.299, 0.587, 0.114])


def embed_view(view):
    rgb = np.asarray(view.rgb, float)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got {rgb.shape}")
    lum = _luma(rgb)
    gy, gx = np.gradient(lum)
    energy = gx**2 + gy**2
    hist = np.histogram(energy, bins=GRAD_BINS)[0] / energy.size
    appearance = np.concatenate([rgb.mean(axis=(0, 1)), rgb.var(axis=(0, 1)), hist])

    depth = np.asarray(view.depth_gt, float)
    dy, dx = np.gradient(depth)
    terrain = np.concatenate([np.quantile(depth, DEPTH_QUANTILES), [np.ptp(depth), np.mean(np.hypot(dx, dy))]])

    sx, sy, sz = view.sun_dir
    az = np.arctan2(sy, sx)
    meta = np.array([np.cos(az), np.sin(az), np.degrees(np.arcsin(np.clip(sz, -1.0, 1.0))), view.timestamp])
    return ViewEmbedding(appearance, terrain, meta, (float(depth.min()), float(depth.max())))


def standardize(X):
    """Column z-scores; constant columns map to 0 instead of dividing by zero."""
    X = np.asarray(X, float)
    mu, sd = X.mean(axis=0), X.std(axis=0)
    safe = np.where(sd > 1e-12, sd, 1.0)
    return np.where(sd > 1e-12, (X - mu) / safe, 0.0)


def embedding_matrices(embeddings):
    """Per-block standardized matrices plus the joint (concatenated) matrix."""
    out = {b: standardize(np.stack([e.block(b) for e in embeddings])) for b in BLOCKS}
    out["joint"] = np.concatenate([out[b] for b in BLOCKS], axis=1)
    return out


# ---------------------------------------------------------------- PCA


@dataclass
class PCAResult:
    scores: np.ndarray  # (n, k)
    basis: np.ndarray  # (k, dim), rows are components
    mean: np.ndarray
    explained: np.ndarray  # per-component variance ratio
    eigvals: np.ndarray  # all covariance eigenvalues, descending

    @property
    def explained_total(self):
        return float(self.explained.sum())

    def reconstruct(self, scores=None):
        s = self.scores if scores is None else scores
        return s @ self.basis + self.mean


def pca_reduce(X, k):
    X = np.asarray(X, float)
    n, dim = X.shape
    if not 1 <= k <= min(n, dim):
        raise ContractError(f"k={k} outside [1, min(n_views, dim)={min(n, dim)}]")
    mean = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=False)
    eig = sv**2 / max(n - 1, 1)
    total = eig.sum()
    ratio = eig / total if total > 0 else np.r_[1.0, np.zeros(len(eig) - 1)]
    basis = vt[:k]
    return PCAResult((X - mean) @ basis.T, basis, mean, ratio[:k], eig)


def components_for(X, target=0.95):
    """Smallest k whose cumulative explained variance reaches ``target``."""
    full = pca_reduce(X, min(np.shape(X)))
    cum = np.cumsum(full.explained)
    return int(min(np.searchsorted(cum, target - 1e-12) + 1, len(cum)))


# ---------------------------------------------------------------- k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list  # inertia after each assignment step
    representatives: np.ndarray  # per cluster: index of the point nearest its centroid
    n_iter: int


def kmeans(X, k, seed=0, max_iter=100):
    """Lloyd's algorithm from k distinct random points.

    An empty cluster is re-seeded at the point farthest from its current
    centroid, which can only lower the inertia.
    """
    X = np.asarray(X, float)
    n = len(X)
    if not 1 <= k <= n:
        raise ContractError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = X[np.sort(rng.choice(n, size=k, replace=False))].copy()
    history, labels = [], None
    for it in range(1, max_iter + 1):
        d2 = cdist(X, C, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        for c in range(k):
            if not np.any(new == c):
                far = int(np.argmax(d2[np.arange(n), new]))
                new[far] = c
                C[c] = X[far]
                d2 = cdist(X, C, "sqeuclidean")
        history.append(float(d2[np.arange(n), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
    d2 = cdist(X, C, "sqeuclidean")
    inertia = float(d2[np.arange(n), labels].sum())
    reps = np.array([np.flatnonzero(labels == c)[np.argmin(d2[labels == c, c])] for c in range(k)])
    return KMeansResult(labels, C, inertia, history, reps, it)


# ---------------------------------------------------------------- coverage


def coverage(S, I, depth_ranges):
    """range(S) / range(I) for the scalar depth range spanned by each set.

    ``depth_ranges`` maps a view id to its (min, max) depth.
    """
    S, I = list(S), list(I)
    if not I:
        raise ContractError("view pool is empty")
    if not set(S) <= set(I):
        raise ContractError("S must be a subset of I")
    if not S:
        return 0.0
    lo_i = min(depth_ranges[i][0] for i in I)
    hi_i = max(depth_ranges[i][1] for i in I)
    if hi_i <= lo_i:
        return 1.0
    lo_s = min(depth_ranges[i][0] for i in S)
    hi_s = max(depth_ranges[i][1] for i in S)
    return float((hi_s - lo_s) / (hi_i - lo_i))


def _represented(S, labels):
    return labels is None or {labels[i] for i in S} == set(labels.values())


def greedy_expand(S0, I, depth_ranges, tau, labels=None):
    """Grow S from S0 until C(S) >= tau, then prune.

    Each step adds the view with the largest coverage gain (lowest id wins
    ties).  Pruning walks S in reverse addition order and drops a view if
    coverage stays >= tau and, when ``labels`` (view id -> cluster) is
    given, every cluster keeps a member.  S is never emptied.
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"coverage threshold {tau} outside [0, 1]")
    I = sorted(I)
    S = list(dict.fromkeys(S0))
    if tau == 0.0:
        return S
    cur = coverage(S, I, depth_ranges)
    while cur < tau:
        best, best_c = None, cur
        for v in I:
            if v in S:
                continue
            c = coverage(S + [v], I, depth_ranges)
            if c > best_c:
                best, best_c = v, c
        if best is None:  # cannot happen while cur < 1, kept as a guard
            raise ContractError("coverage cannot grow further")
        S.append(best)
        cur = best_c
    for v in reversed(list(S)):
        if len(S) == 1:
            break
        rest = [s for s in S if s != v]
        if coverage(rest, I, depth_ranges) >= tau and _represented(rest, labels):
            S = rest
    return S


# ---------------------------------------------------------------- silhouette


def silhouette_samples(X, labels):
    """Per-point silhouette (b - a) / max(a, b); 0 for singleton clusters."""
    X, labels = np.asarray(X, float), np.asarray(labels)
    D = cdist(X, X)
    out = np.zeros(len(X))
    uniq = np.unique(labels)
    for i in range(len(X)):
        own = labels == labels[i]
        if own.sum() == 1:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in uniq if c != labels[i])
        m = max(a, b)
        out[i] = 0.0 if m == 0 else (b - a) / m
    return out


def point_silhouette(x, X_S, labels_S):
    """Silhouette of a new point joining the clustering of S.

    It joins the cluster whose centroid is nearest.
    """
    labels_S = np.asarray(labels_S)
    uniq = np.unique(labels_S)
    cents = np.stack([X_S[labels_S == c].mean(axis=0) for c in uniq])
    own = uniq[np.argmin(np.linalg.norm(cents - x, axis=1))]
    d = np.linalg.norm(X_S - x, axis=1)
    a = d[labels_S == own].mean()
    b = min(d[labels_S == c].mean() for c in uniq if c != own)
    m = max(a, b)
    return 0.0 if m == 0 else float((b - a) / m)


def silhouette_rank(S, residuals, X, labels):
    """Order residual views, most preferred first.

    With at least two clusters in S: by the residual's own silhouette
    (descending), ties going to the view farther from S, then lower id.
    With one cluster: by distance to the S centroid, descending.
    Returns a list of (view id, score).
    """
    S, residuals = list(S), list(residuals)
    X = np.asarray(X, float)
    lab = np.array([labels[i] for i in S])
    X_S = X[S]
    scored = []
    if len(np.unique(lab)) < 2:
        c = X_S.mean(axis=0)
        for r in residuals:
            dist = float(np.linalg.norm(X[r] - c))
            scored.append((r, dist, dist))
    else:
        for r in residuals:
            sep = float(np.min(np.linalg.norm(X_S - X[r], axis=1)))
            scored.append((r, point_silhouette(X[r], X_S, lab), sep))
    scored.sort(key=lambda t: (-t[1], -t[2], t[0]))
    return [(r, s) for r, s, _ in scored]


# ---------------------------------------------------------------- validation


def facet_score(B_S, B_I):
    """1 - (max over the pool of the distance to the nearest selected view) / pool diameter."""
    diam = cdist(B_I, B_I).max()
    if diam <= 0:
        return 1.0
    gap = cdist(B_I, B_S).min(axis=1).max()
    return float(np.clip(1.0 - gap / diam, 0.0, 1.0))


def validate_selection(S, I, matrices, floor=0.5):
    """Facet scores for appearance, terrain, meta and joint embeddings.

    ``matrices`` holds per-block matrices whose rows are the views of I in
    order.  Returns (passed, {facet: score}).
    """
    S, I = list(S), list(I)
    if not S:
        raise ContractError("empty selection")
    pos = {v: k for k, v in enumerate(I)}
    rows = [pos[s] for s in S]
    scores = {f: facet_score(matrices[f][rows], matrices[f]) for f in FACETS}
    return all(v >= floor for v in scores.values()), scores


# ---------------------------------------------------------------- pipeline


@dataclass
class SelectionReport:
    pool: list  # view ids
    selected: list
    coverage: float
    clusters: dict  # view id -> cluster label
    representatives: list
    ranking: list  # (view id, score) for views left out
    passed: bool
    facets: dict
    pca_components: int
    explained: float
    tau: float
    floor: float
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"pool": self.pool, "selected": self.selected, "coverage": self.coverage,
                "clusters": {str(k): int(v) for k, v in self.clusters.items()},
                "representatives": self.representatives,
                "ranking": [[int(r), float(s)] for r, s in self.ranking],
                "verdict": "PASS" if self.passed else "FAIL", "facets": self.facets,
                "pca_components": self.pca_components, "explained_variance": self.explained,
                "tau": self.tau, "floor": self.floor}

    def text(self):
        lines = [f"pool        {len(self.pool)} views: {self.pool}",
                 f"selected    {len(self.selected)} views: {self.selected}",
                 f"coverage    {self.coverage:.4f} (tau {self.tau})",
                 f"pca         {self.pca_components} components, {100 * self.explained:.1f}% variance",
                 f"clusters    {len(set(self.clusters.values()))}, representatives {self.representatives}",
                 "facets      " + "  ".join(f"{k}={v:.3f}" for k, v in self.facets.items()),
                 f"verdict     {'PASS' if self.passed else 'FAIL'} (floor {self.floor})",
                 "residuals   " + ", ".join(f"{r}:{s:+.3f}" for r, s in self.ranking)]
        return "\n".join(lines) + "\n"


def repair(S, I, matrices, floor, max_size=None):
    """Add views until every facet clears ``floor`` (or the size cap is hit).

    Each round adds the left-out view that maximizes the weakest facet
    score, lowest id on ties.  Adding views never lowers a facet score.
    """
    S, added = list(S), []
    while not validate_selection(S, I, matrices, floor)[0]:
        if len(S) == len(I) or (max_size and len(S) >= max_size):
            break
        best = max((v for v in I if v not in S),
                   key=lambda v: (min(validate_selection(S + [v], I, matrices, floor)[1].values()), -v))
        S.append(best)
        added.append(best)
    return S, added


def n_clusters(n_views, budget=None):
    k = max(1, int(round(np.sqrt(n_views))))
    return min(k, budget) if budget else k


def select_views(views, tau=0.95, seed=0, floor=0.5, budget=None, variance=0.95):
    """Run the full selection on a list of ViewRecords; ids are view.index."""
    if not views:
        raise ContractError("no views to select from")
    ids = [v.index for v in views]
    if len(set(ids)) != len(ids):
        raise ContractError("view indices must be unique")
    embs = [embed_view(v) for v in views]
    mats = embedding_matrices(embs)
    ranges = {i: e.depth_range for i, e in zip(ids, embs)}

    k_pca = components_for(mats["joint"], variance)
    pca = pca_reduce(mats["joint"], k_pca)
    k = n_clusters(len(views), budget)
    km = kmeans(pca.scores, k, seed=seed)
    labels = {i: int(c) for i, c in zip(ids, km.labels)}
    reps = [ids[r] for r in km.representatives]

    S = greedy_expand(reps, ids, ranges, tau, labels)
    pos = {v: p for p, v in enumerate(ids)}
    S, added = repair(S, ids, mats, floor, max_size=budget)
    residual = [i for i in ids if i not in S]
    X_pos = pca.scores
    ranking = silhouette_rank([pos[s] for s in S], [pos[r] for r in residual], X_pos,
                              {pos[i]: c for i, c in labels.items()})
    ranking = [(ids[r], s) for r, s in ranking]
    passed, facets = validate_selection(S, ids, mats, floor)
    return SelectionReport(ids, S, coverage(S, ids, ranges), labels, reps, ranking, passed, facets,
                           k_pca, pca.explained_total, tau, floor, {"repair_added": added})


def write_selection(report, directory):
    """selection.txt (human readable) and manifest.json (consumed by training)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "selection.txt").write_text(report.text())
    (d / "manifest.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return d / "manifest.json"


def read_manifest(path):
    m = json.loads(Path(path).read_text())
    if "selected" not in m:
        raise ContractError(f"{path}: not a selection manifest")
    return [int(i) for i in m["selected"]]
