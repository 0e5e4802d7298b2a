"""Place discovery: spectral clustering of a fully connected photo graph."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .affinity import AffinityMeasure
from .nnet import InputShapeError
from .scenes import FrameGraphSpec, scale_weights
from .spectral import AffinityGraph, ClusterAssignment, spectral_cluster

MAX_PHOTOS = 4000
DEFAULT_KS = tuple(range(2, 17))


@dataclass
class PlaceClusteringResult:
    assignment: ClusterAssignment
    purity: float
    k: int


def subsample(n, cap=MAX_PHOTOS, seed=0) -> np.ndarray:
    """Sorted indices of at most ``cap`` photos, chosen uniformly without replacement."""
    if n <= cap:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=cap, replace=False))


def build_photo_graph(prims, measure: AffinityMeasure, alpha=0.5, scaling="exponential",
                      cap=MAX_PHOTOS, features=None) -> AffinityGraph:
    """Complete graph; weight exp(w/alpha^2), or w^alpha for the learned measure.

    Collections larger than ``cap`` are refused: pass a subsample (see
    :func:`subsample`) because the dense eigensolver scales cubically.
    """
    n = len(prims) if prims is not None else len(features)
    if n < 2:
        raise InputShapeError("need at least two photos")
    if n > cap:
        raise InputShapeError(f"{n} photos exceed the cap of {cap}; subsample first")
    i, j = np.triu_indices(n, 1)
    w = measure.pairwise(prims, i, j, features=features)
    spec = FrameGraphSpec(window=1.0, scaling=scaling, alpha=alpha)
    return AffinityGraph(n, i, j, scale_weights(w, spec, measure.kind))


def cluster_places(graph: AffinityGraph, k, seed=0, restarts=10, **eigenmap_kw) -> ClusterAssignment:
    if not 2 <= k <= graph.n:
        raise ValueError(f"need 2 <= k <= {graph.n}, got {k}")
    return spectral_cluster(graph, k, restarts=restarts, seed=seed, **eigenmap_kw)


def purity(labels, truth) -> float:
    """Fraction of items that carry their cluster's majority class."""
    labels = np.asarray(labels)
    truth = np.asarray(truth, dtype=object)
    if labels.shape != truth.shape:
        raise InputShapeError("every node needs a true label")
    if any(t is None for t in truth):
        raise InputShapeError("missing true label")
    if len(labels) == 0:
        raise InputShapeError("no items")
    _, t = np.unique(truth.astype(str), return_inverse=True)
    total = 0
    for c in np.unique(labels):
        total += np.bincount(t[labels == c]).max()
    return total / len(labels)


def purity_sweep(graph: AffinityGraph, truth, ks: Sequence[int] = DEFAULT_KS, seed=0, restarts=10,
                 **eigenmap_kw) -> list[PlaceClusteringResult]:
    """Cluster at every k, reusing one eigenmap."""
    from .spectral import eigenmap
    emb = eigenmap(graph, **eigenmap_kw)
    out = []
    for k in ks:
        a = spectral_cluster(graph, k, restarts=restarts, seed=seed, emb=emb)
        out.append(PlaceClusteringResult(a, purity(a.labels, truth), k))
    return out


def write_assignment_csv(path, paths, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["photo", "cluster"])
        for p, c in zip(paths, labels):
            w.writerow([p, int(c)])


def write_purity_csv(path, results: Sequence[PlaceClusteringResult]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "purity"])
        for r in results:
            w.writerow([r.k, f"{r.purity:.6f}"])


def montage(photos, labels, per_cluster=6, seed=0, gap=2) -> np.ndarray:
    """Contact sheet: one row per cluster, up to ``per_cluster`` random members each."""
    photos = [np.asarray(p, dtype=np.float64) for p in photos]
    labels = np.asarray(labels)
    h, w = photos[0].shape[:2]
    clusters = np.unique(labels)
    rng = np.random.default_rng(seed)
    sheet = np.ones((len(clusters) * (h + gap) + gap, per_cluster * (w + gap) + gap, 3))
    for row, c in enumerate(clusters):
        members = np.flatnonzero(labels == c)
        pick = rng.choice(members, size=min(per_cluster, len(members)), replace=False)
        for col, idx in enumerate(np.sort(pick)):
            r0, c0 = gap + row * (h + gap), gap + col * (w + gap)
            sheet[r0:r0 + h, c0:c0 + w] = photos[idx]
    return sheet
