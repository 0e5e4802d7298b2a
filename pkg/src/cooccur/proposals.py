"""Object proposals from spectral clusterings of a patch-affinity graph."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .affinity import AffinityMeasure, UndefinedMetricError
from .data.primitives import apply_mask
from .nnet import InputShapeError, SiameseNet
from .spectral import AffinityGraph, Eigenmap, eigenmap, kmeans_run

# smallest positive normal double: keeps w^alpha strictly positive after underflow
WEIGHT_FLOOR = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class PatchGraphSpec:
    side: int = 17
    stride: int = 8
    band: tuple[float, float] = (17.0, 33.0)
    alpha: float = 20.0

    def __post_init__(self):
        if self.band[0] < self.side:
            raise ValueError("edge band must start at or beyond the patch side (no overlap)")
        if self.band[1] < self.band[0] or self.stride < 1 or self.alpha <= 0:
            raise ValueError("invalid patch graph spec")


@dataclass
class Proposal:
    mask: np.ndarray
    k: int = 0
    restart: int = 0
    cluster: int = 0
    rank: int = -1
    bbox: tuple[int, int, int, int] = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("proposal mask is empty")
        self.bbox = mask_bbox(self.mask)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def mask_bbox(mask) -> tuple[int, int, int, int]:
    """Inclusive (x_min, y_min, x_max, y_max) of the set pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


# ---------------------------------------------------------------------------
# graph


def grid_centers(shape, spec: PatchGraphSpec = PatchGraphSpec()) -> np.ndarray:
    """(row, col) centres of every full window on the stride grid, row-major."""
    h, w = shape[:2]
    half = spec.side // 2
    rows = np.arange(0, h - spec.side + 1, spec.stride) + half
    cols = np.arange(0, w - spec.side + 1, spec.stride) + half
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.column_stack([rr.ravel(), cc.ravel()])


def band_edges(centers, band) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs i < j whose centre distance lies in the closed band."""
    c = np.asarray(centers, dtype=np.float64)
    d = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
    i, j = np.nonzero(np.triu((d >= band[0]) & (d <= band[1]), 1))
    return i, j


def grid_patches(image, centers, side=17) -> np.ndarray:
    half = side // 2
    out = np.stack([image[r - half:r - half + side, c - half:c - half + side] for r, c in centers])
    return apply_mask(out, side)


def build_patch_graph(image, net: Optional[SiameseNet] = None, spec: PatchGraphSpec = PatchGraphSpec(),
                      measure: Optional[AffinityMeasure] = None):
    """Patch graph over one image: returns ``(graph, centers)``.

    Weights are ``w(A_i, A_j) ** alpha``, floored at the smallest positive
    double so that no node loses all of its degree to underflow.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InputShapeError(f"expected an RGB image, got {image.shape}")
    if min(image.shape[:2]) < 33:
        raise InputShapeError(f"image {image.shape[0]}x{image.shape[1]} is smaller than 33x33")
    if measure is None:
        if net is None:
            raise ValueError("need a network or an affinity measure")
        measure = AffinityMeasure("learned", net=net)
    centers = grid_centers(image.shape, spec)
    i, j = band_edges(centers, spec.band)
    prims = grid_patches(image, centers, spec.side)
    w = measure.pairwise(prims, i, j)
    w = np.maximum(np.clip(w, 0.0, 1.0) ** spec.alpha, WEIGHT_FLOOR)
    return AffinityGraph(len(centers), i, j, w, ids=[tuple(c) for c in centers]), centers


# ---------------------------------------------------------------------------
# clusters to proposals


def footprint_mask(centers, shape, side=17) -> np.ndarray:
    """Union of ``side x side`` squares centred on ``centers``, clipped to the image."""
    h, w = shape[:2]
    half = side // 2
    # summed 2-D difference array: +1 at each square's top-left, -1 past its corners
    diff = np.zeros((h + 1, w + 1), dtype=np.int64)
    for r, c in np.asarray(centers).reshape(-1, 2):
        r0, c0 = max(r - half, 0), max(c - half, 0)
        r1, c1 = min(r - half + side, h), min(c - half + side, w)
        if r0 >= r1 or c0 >= c1:
            continue
        diff[r0, c0] += 1
        diff[r0, c1] -= 1
        diff[r1, c0] -= 1
        diff[r1, c1] += 1
    return diff.cumsum(0).cumsum(1)[:h, :w] > 0


def cluster_to_proposal(labels, centers, shape, side=17, k=None, restart=0) -> list[Proposal]:
    """One proposal per non-empty cluster, in cluster-index order."""
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    out = []
    for c in range(k):
        members = np.asarray(centers)[labels == c]
        if len(members):
            out.append(Proposal(footprint_mask(members, shape, side), k=k, restart=restart, cluster=c))
    return out


def _seed_for(seed, k, restart):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(k), int(restart)]))


def raw_proposals(emb: Eigenmap, centers, shape, k_range=(5, 16), restarts=8, seed=0,
                  side=17, max_iters=100) -> list[Proposal]:
    """All proposals of every (k, restart) k-means run on one shared eigenmap.

    ``k_range`` is inclusive.  Each run has its own generator derived from
    (seed, k, restart), so results do not depend on evaluation order.
    """
    n = len(emb.matrix)
    out = []
    for r in range(restarts):
        for k in range(k_range[0], k_range[1] + 1):
            if k > n:
                continue
            labels, _, _ = kmeans_run(emb.matrix, k, _seed_for(seed, k, r), max_iters)
            out.extend(cluster_to_proposal(labels, centers, shape, side, k=k, restart=r))
    return out


def _round_robin(proposals):
    cells: dict[tuple[int, int], list[Proposal]] = {}
    for p in proposals:
        cells.setdefault((p.restart, p.k), []).append(p)
    for cell in cells.values():
        cell.sort(key=lambda p: p.cluster)
    order = []
    for r in sorted({r for r, _ in cells}):
        row = [cells[key] for key in sorted(cells) if key[0] == r]
        for depth in range(max(len(c) for c in row)):
            order.extend(c[depth] for c in row if depth < len(c))
    return order


def pairwise_mask_iou(masks) -> np.ndarray:
    m = np.asarray([np.asarray(x, dtype=bool).ravel() for x in masks], dtype=np.float32)
    inter = (m @ m.T).astype(np.float64)  # exact: counts stay far below 2**24
    area = m.sum(1)
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def prune_and_rank(proposals: Sequence[Proposal], threshold=0.9) -> list[Proposal]:
    """Order round-robin over k within each restart, then drop near-duplicates.

    Within restart 0 the first cluster of every k comes first (k ascending),
    then every k's second cluster and so on; restart 1 follows.  A proposal
    is dropped when its mask IoU with an already kept one exceeds
    ``threshold``.  Survivors get ranks 0, 1, ...
    """
    order = _round_robin(proposals)
    if not order:
        return []
    ious = pairwise_mask_iou([p.mask for p in order])
    kept: list[int] = []
    for idx in range(len(order)):
        if not kept or ious[idx, kept].max() <= threshold:
            kept.append(idx)
    out = []
    for rank, idx in enumerate(kept):
        p = order[idx]
        out.append(Proposal(p.mask, k=p.k, restart=p.restart, cluster=p.cluster, rank=rank))
    return out


def generate_proposals(image, net: Optional[SiameseNet] = None, spec: PatchGraphSpec = PatchGraphSpec(),
                       k_range=(5, 16), restarts=8, seed=0, measure=None, **eigenmap_kw) -> list[Proposal]:
    """Full pipeline: patch graph, one eigenmap, k-means sweep, prune and rank."""
    graph, centers = build_patch_graph(image, net, spec, measure)
    emb = eigenmap(graph, **eigenmap_kw)
    raw = raw_proposals(emb, centers, np.shape(image), k_range, restarts, seed, spec.side)
    return prune_and_rank(raw)


# ---------------------------------------------------------------------------
# evaluation


def _region(x, shape=None) -> np.ndarray:
    if isinstance(x, Proposal):
        return x.mask
    a = np.asarray(x)
    if a.dtype == bool or a.ndim == 2:
        return a.astype(bool)
    if a.shape == (4,):
        if shape is None:
            x0, y0, x1, y1 = (int(v) for v in a)
            shape = (max(y1, 0) + 1, max(x1, 0) + 1)
        m = np.zeros(shape[:2], dtype=bool)
        x0, y0, x1, y1 = (int(v) for v in a)
        m[max(y0, 0):y1 + 1, max(x0, 0):x1 + 1] = True
        return m
    raise ValueError(f"cannot interpret {a.shape} as a mask or box")


def _box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    area_a = max(ax1 - ax0 + 1, 0) * max(ay1 - ay0 + 1, 0)
    area_b = max(bx1 - bx0 + 1, 0) * max(by1 - by0 + 1, 0)
    iw = max(min(ax1, bx1) - max(ax0, bx0) + 1, 0)
    ih = max(min(ay1, by1) - max(ay0, by0) + 1, 0)
    inter = iw * ih
    union = area_a + area_b - inter
    if union == 0:
        raise UndefinedMetricError("IoU of two empty regions")
    return inter / union


def _is_box(x) -> bool:
    return not isinstance(x, Proposal) and np.shape(x) == (4,)


def iou(a, b) -> float:
    """Jaccard index of two masks, two inclusive boxes (x0, y0, x1, y1) or Proposals."""
    if _is_box(a) and _is_box(b):
        return _box_iou(tuple(int(v) for v in a), tuple(int(v) for v in b))
    if _is_box(a):
        a, b = b, a
    ma = _region(a)
    mb = _region(b, ma.shape)
    if ma.shape != mb.shape:
        raise ValueError("masks come from different image frames")
    union = np.logical_or(ma, mb).sum()
    if union == 0:
        raise UndefinedMetricError("IoU of two empty regions")
    return float(np.logical_and(ma, mb).sum() / union)


def best_overlaps(proposals, ground_truth, n=None) -> np.ndarray:
    """For each GT object, the best IoU among the first ``n`` proposals."""
    gt = list(ground_truth)
    if not gt:
        raise UndefinedMetricError("no ground-truth objects")
    props = list(proposals)[:n] if n is not None else list(proposals)
    if not props:
        return np.zeros(len(gt))
    g = np.asarray([_region(x).ravel() for x in gt], dtype=np.float32)
    p = np.asarray([_region(x).ravel() for x in props], dtype=np.float32)
    inter = (g @ p.T).astype(np.float64)  # exact: counts stay far below 2**24
    union = g.sum(1, dtype=np.float64)[:, None] + p.sum(1, dtype=np.float64)[None, :] - inter
    if (union == 0).any():
        raise UndefinedMetricError("IoU of two empty regions")
    return (inter / union).max(axis=1)


def abo(proposals, ground_truth, n=None) -> float:
    """Average best overlap."""
    return float(best_overlaps(proposals, ground_truth, n).mean())


def recall_at_jaccard(proposals, ground_truth, threshold=0.5, n=None) -> float:
    return float((best_overlaps(proposals, ground_truth, n) >= threshold).mean())


def gt_objects(region_labels) -> list[np.ndarray]:
    """Instance masks from an integer label map, in label order."""
    lab = np.asarray(region_labels)
    return [lab == v for v in np.unique(lab)]


# ---------------------------------------------------------------------------
# output


def rle_encode(mask) -> list[int]:
    """Row-major run lengths, starting with a (possibly zero) run of False."""
    flat = np.asarray(mask, dtype=bool).ravel()
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.r_[0, change, flat.size]
    runs = np.diff(bounds).tolist()
    return ([0] + runs) if flat.size and flat[0] else runs


def rle_decode(runs, shape) -> np.ndarray:
    vals = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(vals, runs)
    if flat.size != shape[0] * shape[1]:
        raise ValueError("run lengths do not match the image size")
    return flat.reshape(shape)


def proposals_to_json(image_id, proposals, shape) -> dict:
    return {
        "image": str(image_id),
        "height": int(shape[0]),
        "width": int(shape[1]),
        "proposals": [
            {"rank": p.rank, "bbox": list(p.bbox), "rle": rle_encode(p.mask), "k": p.k,
             "restart": p.restart, "cluster": p.cluster}
            for p in proposals
        ],
    }


def write_proposals_json(path, records) -> None:
    with open(path, "w") as fh:
        json.dump(records, fh, separators=(",", ":"), sort_keys=True)
        fh.write("\n")


def write_metrics_csv(path, rows) -> None:
    """rows: dicts with image, n, abo, recall."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "n", "abo", "recall_at_0.5"])
        for r in rows:
            w.writerow([r["image"], r["n"], f"{r['abo']:.6f}", f"{r['recall']:.6f}"])


def outline(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def render_overlay(image, proposals, n=5) -> np.ndarray:
    """Image with the outlines of the first ``n`` proposals drawn in distinct colours."""
    out = np.array(image, dtype=np.float64)
    palette = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 0, 1], [0, 1, 1]], dtype=np.float64)
    for i, p in enumerate(list(proposals)[:n]):
        out[outline(p.mask)] = palette[i % len(palette)]
    return out
