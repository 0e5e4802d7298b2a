"""Affinity graphs, symmetric eigendecomposition, Laplacian eigenmaps, k-means."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

SCALE_FLOOR = 1e-8
UNIT_EIGENVALUE_TOL = 1e-9


class GraphError(ValueError):
    pass


class DegenerateGraphError(GraphError):
    pass


@dataclass
class AffinityGraph:
    """Undirected weighted graph; edges are stored once with i < j."""

    n: int
    i: np.ndarray
    j: np.ndarray
    w: np.ndarray
    ids: Optional[Sequence] = None

    def __post_init__(self):
        self.i = np.asarray(self.i, dtype=np.int64)
        self.j = np.asarray(self.j, dtype=np.int64)
        self.w = np.asarray(self.w, dtype=np.float64)
        if not (self.i.shape == self.j.shape == self.w.shape):
            raise GraphError("edge columns differ in length")
        if len(self.i):
            if (self.i >= self.j).any():
                raise GraphError("edges must satisfy i < j (no self-loops)")
            if self.i.min() < 0 or self.j.max() >= self.n:
                raise GraphError("edge endpoint out of range")
            key = self.i * self.n + self.j
            if len(np.unique(key)) != len(key):
                raise GraphError("duplicate edge")
        if not np.isfinite(self.w).all() or (self.w < 0).any():
            raise GraphError("edge weights must be finite and >= 0")

    @classmethod
    def from_edges(cls, n, edges, ids=None):
        edges = list(edges)
        if not edges:
            return cls(n, [], [], [], ids)
        i, j, w = zip(*edges)
        return cls(n, i, j, w, ids)

    @property
    def n_edges(self) -> int:
        return len(self.w)

    def dense(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        W[self.i, self.j] = self.w
        W[self.j, self.i] = self.w
        return W

    def degrees(self) -> np.ndarray:
        return np.bincount(self.i, self.w, self.n) + np.bincount(self.j, self.w, self.n)


# ---------------------------------------------------------------------------
# eigensolvers


def _check_symmetric(A):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got {A.shape}")
    if not np.isfinite(A).all():
        raise ValueError("matrix has non-finite entries")
    if np.abs(A - A.T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(A).max(initial=0.0)):
        raise ValueError("matrix is not symmetric")
    return (A + A.T) / 2.0


def jacobi_eigh(A, tol=1e-10, max_sweeps=60):
    """Cyclic Jacobi rotations.  Returns (eigenvalues, eigenvectors), unsorted.

    Sweeps continue until the off-diagonal Frobenius norm drops below
    ``tol`` times the matrix norm.
    """
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if n < 2 or scale == 0:
        return np.diag(A).copy(), V
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(A, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(A).copy(), V


def symmetric_eig(A, method="lapack"):
    """Eigenvalues in descending order with orthonormal eigenvectors as columns.

    Each eigenvector's largest-magnitude entry is made positive.  ``method``
    is ``"lapack"`` (numpy ``eigh``) or ``"jacobi"`` (:func:`jacobi_eigh`).
    """
    A = _check_symmetric(A)
    if method == "lapack":
        vals, vecs = np.linalg.eigh(A)
    elif method == "jacobi":
        vals, vecs = jacobi_eigh(A)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-vals, kind="stable")
    vals, vecs = vals[order], vecs[:, order]
    if vecs.size:
        lead = vecs[np.argmax(np.abs(vecs), axis=0), np.arange(vecs.shape[1])]
        vecs = vecs * np.where(lead < 0, -1.0, 1.0)
    return vals, vecs


# ---------------------------------------------------------------------------
# eigenmap


@dataclass
class Eigenmap:
    """Node embedding; column c was multiplied by ``scales[c]``.

    ``eigenvalues`` are those of D^-1/2 W D^-1/2 (descending rank ``first``..``last``).
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    scales: np.ndarray
    first: int
    last: int


def normalized_affinity(graph: AffinityGraph):
    d = graph.degrees()
    if (d <= 0).any():
        raise DegenerateGraphError(f"{int((d <= 0).sum())} node(s) have zero degree")
    inv = 1.0 / np.sqrt(d)
    S = graph.dense() * inv[:, None] * inv[None, :]
    return (S + S.T) / 2.0, inv


def eigenmap(graph: AffinityGraph, first=2, last=16, scaling="laplacian",
             coordinates="symmetric", method="lapack") -> Eigenmap:
    """Embedding from eigenvectors ranked ``first``..``last`` (1 = largest eigenvalue)
    of S = D^-1/2 W D^-1/2.

    ``scaling="laplacian"`` multiplies column c by max(1 - lambda_c, 1e-8)^-1/2,
    i.e. by the inverse square root of the normalised-Laplacian eigenvalue, which
    emphasises the coarse structure.  ``scaling="affinity"`` uses
    max(lambda_c, 1e-8)^-1/2 instead.  ``coordinates="random-walk"`` maps
    eigenvectors u to D^-1/2 u, which is constant on connected components;
    ``"symmetric"`` keeps u as is, except for eigenvalues equal to 1 (up to
    rounding), which only occur on disconnected graphs and are mapped the
    random-walk way.
    """
    if graph.n < 2:
        raise DegenerateGraphError("need at least two nodes")
    S, inv_sqrt_d = normalized_affinity(graph)
    vals, vecs = symmetric_eig(S, method)
    if last > graph.n:
        log.warning("eigenmap: last index %d clipped to node count %d", last, graph.n)
        last = graph.n
    if first > last:
        raise DegenerateGraphError(f"no eigenvectors in rank range {first}..{last}")
    lam = vals[first - 1:last]
    U = vecs[:, first - 1:last]
    if coordinates == "random-walk":
        U = U * inv_sqrt_d[:, None]
    elif coordinates == "symmetric":
        # Eigenvalue 1 repeats once per connected component, and its
        # eigenvectors are sqrt(d) times component indicators.  Mapping those
        # columns by D^-1/2 makes them constant on each component, so that
        # k-means sees the components as points rather than as rays.
        unit = lam >= 1.0 - UNIT_EIGENVALUE_TOL
        U = U.copy()
        U[:, unit] *= inv_sqrt_d[:, None]
    else:
        raise ValueError(f"unknown coordinates {coordinates!r}")
    if scaling == "laplacian":
        scales = np.maximum(1.0 - lam, SCALE_FLOOR) ** -0.5
    elif scaling == "affinity":
        scales = np.maximum(lam, SCALE_FLOOR) ** -0.5
    else:
        raise ValueError(f"unknown scaling {scaling!r}")
    return Eigenmap(U * scales, lam, scales, first, last)


def write_eigenmap_csv(path, emb: Eigenmap, ids=None) -> None:
    ids = range(len(emb.matrix)) if ids is None else ids
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"e{c}" for c in range(emb.first, emb.first + emb.matrix.shape[1])])
        for node, row in zip(ids, emb.matrix):
            w.writerow([node] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# k-means


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    k: int
    objective: float = 0.0
    trace: list[float] = field(default_factory=list)
    restart: int = 0


def _sqdist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X, k, rng):
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), centers)
            nxt = int(rest[int(rng.integers(len(rest)))])
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(1))
    return X[centers].copy()


def _lloyd(X, C, max_iters):
    k = len(C)
    labels = None
    trace = []
    for _ in range(max_iters):
        d = _sqdist(X, C)
        new = np.argmin(d, axis=1)
        dist = d[np.arange(len(X)), new]
        trace.append(float(dist.sum()))
        counts = np.bincount(new, minlength=k)
        for e in np.flatnonzero(counts == 0):
            # the point farthest from its centroid (in a cluster that can spare it) moves over
            movable = counts[new] > 1
            cand = np.flatnonzero(movable)
            far = cand[np.argmax(dist[cand])]
            counts[new[far]] -= 1
            new[far] = e
            counts[e] = 1
            dist[far] = 0.0
            C[e] = X[far]
            trace[-1] = float(dist.sum())
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            C[c] = X[labels == c].mean(axis=0)
    d = ((X - C[labels]) ** 2).sum(1)
    return labels, float(d.sum()), trace


def kmeans(points, k, restarts=10, max_iters=100, seed=0) -> ClusterAssignment:
    """k-means++ seeding and Lloyd iterations, best of ``restarts``.

    Restart r draws from ``default_rng(seed + r)``; the lowest objective
    wins, ties going to the earliest restart.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= n, got k={k}, n={n}")
    best = None
    for r in range(restarts):
        labels, obj, trace = kmeans_run(X, k, np.random.default_rng(seed + r), max_iters)
        if best is None or obj < best.objective:
            best = ClusterAssignment(labels, k, obj, trace, r)
    return best


def kmeans_run(X, k, rng, max_iters=100):
    """A single k-means++ / Lloyd run: (labels, objective, per-iteration objective)."""
    return _lloyd(X, _plusplus(X, k, rng), max_iters)


def spectral_cluster(graph: AffinityGraph, k, restarts=10, seed=0, emb: Eigenmap | None = None,
                     **eigenmap_kw) -> ClusterAssignment:
    if k < 2:
        raise ValueError("spectral clustering needs k >= 2")
    if emb is None:
        emb = eigenmap(graph, **eigenmap_kw)
    return kmeans(emb.matrix, k, restarts=restarts, seed=seed)


def normalized_cut(W, labels) -> float:
    """sum over clusters of cut(A, rest) / vol(A)."""
    W = np.asarray(W, dtype=np.float64)
    labels = np.asarray(labels)
    deg = W.sum(1)
    total = 0.0
    for c in np.unique(labels):
        m = labels == c
        vol = deg[m].sum()
        cut = W[np.ix_(m, ~m)].sum()
        total += cut / vol if vol > 0 else 0.0
    return total
