"""Pairwise affinity measures and average-precision evaluation.

Every measure is symmetric and "larger means more similar":

* ``learned``: mean of P(C=1|a,b) and P(C=1|b,a) from a Siamese net;
* ``raw-color``: negated L2 distance between the two pixel arrays;
* ``mean-color``: negated L2 distance between per-channel means;
* ``color-histogram``: intersection of L1-normalised joint RGB histograms;
* ``hog``: cosine similarity of HOG descriptors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nnet import InputShapeError, SiameseNet, _sigmoid
from .parallel import chunked_map

KINDS = ("learned", "raw-color", "mean-color", "color-histogram", "hog")
CHUNK = 256


class UndefinedMetricError(ValueError):
    pass


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class HogConfig:
    orientations: int = 9
    cell: int = 8
    block: int = 2
    normalize: bool = True


# ---------------------------------------------------------------------------
# HOG


def hog_descriptor(img, cfg: HogConfig = HogConfig()) -> np.ndarray:
    """Dalal-Triggs style HOG with unsigned orientations.

    Gradients use [-1, 0, 1] differences (zero on the outer border) and the
    channel of largest magnitude per pixel.  Votes are split linearly between
    neighbouring orientation bins.  Pixels beyond the last full cell are
    dropped.  Blocks of ``block x block`` cells are L2-normalised.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    gy[1:-1] = img[2:] - img[:-2]
    gx[:, 1:-1] = img[:, 2:] - img[:, :-2]
    mag = np.hypot(gx, gy)
    best = np.argmax(mag, axis=2)[..., None]
    mag = np.take_along_axis(mag, best, 2)[..., 0]
    ang = np.mod(np.degrees(np.arctan2(np.take_along_axis(gy, best, 2)[..., 0],
                                       np.take_along_axis(gx, best, 2)[..., 0])), 180.0)
    nb = cfg.orientations
    width = 180.0 / nb
    pos = ang / width - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    ch, cw = h // cfg.cell, w // cfg.cell
    if ch < cfg.block or cw < cfg.block:
        raise ValueError(f"image {h}x{w} too small for {cfg.block}x{cfg.block} blocks of {cfg.cell}px cells")
    hist = np.zeros((ch, cw, nb))
    sl = (slice(0, ch * cfg.cell), slice(0, cw * cfg.cell))
    cell_r = (np.arange(ch * cfg.cell) // cfg.cell)[:, None]
    cell_c = (np.arange(cw * cfg.cell) // cfg.cell)[None, :]
    cr = np.broadcast_to(cell_r, (ch * cfg.cell, cw * cfg.cell))
    cc = np.broadcast_to(cell_c, (ch * cfg.cell, cw * cfg.cell))
    m = mag[sl]
    np.add.at(hist, (cr, cc, lo[sl] % nb), m * (1 - frac[sl]))
    np.add.at(hist, (cr, cc, (lo[sl] + 1) % nb), m * frac[sl])
    b = cfg.block
    blocks = []
    for i in range(ch - b + 1):
        for j in range(cw - b + 1):
            v = hist[i:i + b, j:j + b].ravel()
            if cfg.normalize:
                v = v / np.sqrt(v @ v + 1e-12)
            blocks.append(v)
    return np.concatenate(blocks)


# ---------------------------------------------------------------------------
# per-primitive features and pair scores


def color_histogram(img, bins=8) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    q = np.minimum((img * bins).astype(int), bins - 1)
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    h = np.bincount(idx, minlength=bins ** 3).astype(np.float64)
    return h / h.sum()


def _cosine(u, v):
    nu = np.sqrt(np.einsum("ij,ij->i", u, u))
    nv = np.sqrt(np.einsum("ij,ij->i", v, v))
    dot = np.einsum("ij,ij->i", u, v)
    denom = nu * nv
    out = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    out[(nu == 0) & (nv == 0)] = 1.0
    return out


def _neg_l2(u, v):
    d = (u - v).reshape(len(u), -1)
    return -np.sqrt(np.einsum("ij,ij->i", d, d))


@dataclass
class AffinityMeasure:
    kind: str
    net: Optional[SiameseNet] = None
    bins: int = 8
    hog: HogConfig = field(default_factory=HogConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown measure {self.kind!r}")
        if self.kind == "learned" and self.net is None:
            raise ValueError("learned measure needs a network")

    @property
    def name(self) -> str:
        return self.kind

    def features(self, prims) -> np.ndarray:
        """Per-primitive representation that ``score`` compares."""
        prims = np.asarray(prims, dtype=np.float64)
        if self.kind == "learned":
            if prims.shape[1:] != (self.net.side, self.net.side, 3):
                raise InputShapeError(f"net expects {self.net.side}px primitives, got {prims.shape[1:]}")
            parts = chunked_map(lambda lo, hi: self.net.embed(prims[lo:hi]), len(prims), CHUNK)
            return np.concatenate(parts) if parts else np.zeros((0, 0))
        if self.kind == "raw-color":
            return prims.reshape(len(prims), -1)
        if self.kind == "mean-color":
            return prims.reshape(len(prims), -1, 3).mean(axis=1)
        if self.kind == "color-histogram":
            return np.stack([color_histogram(p, self.bins) for p in prims]) if len(prims) else np.zeros((0, self.bins ** 3))
        return np.stack([hog_descriptor(p, self.hog) for p in prims])

    def score(self, fa, fb) -> np.ndarray:
        """Symmetric scores for aligned feature rows."""
        if self.kind == "learned":
            pab = _sigmoid(self.net.head_logits(fa, fb))
            pba = _sigmoid(self.net.head_logits(fb, fa))
            return (pab + pba) / 2.0
        if self.kind in ("raw-color", "mean-color"):
            return _neg_l2(fa, fb)
        if self.kind == "color-histogram":
            return np.minimum(fa, fb).sum(axis=1)
        return _cosine(fa, fb)

    def pairwise(self, prims, ii, jj, features=None) -> np.ndarray:
        """Scores for primitive index pairs (ii[k], jj[k])."""
        f = self.features(prims) if features is None else features
        ii, jj = np.asarray(ii), np.asarray(jj)
        parts = chunked_map(lambda lo, hi: self.score(f[ii[lo:hi]], f[jj[lo:hi]]), len(ii), 4 * CHUNK)
        return np.concatenate(parts) if parts else np.zeros(0)

    def __call__(self, a, b) -> float:
        a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise InputShapeError(f"shape mismatch {a.shape} vs {b.shape}")
        f = self.features(np.stack([a, b]))
        return float(self.score(f[:1], f[1:])[0])

    def score_pairset(self, pairs) -> np.ndarray:
        used = np.union1d(pairs.ia, pairs.ib)
        lookup = np.full(len(pairs.bank), -1)
        lookup[used] = np.arange(len(used))
        prims = pairs.bank[used].astype(np.float64) / pairs.scale
        return self.pairwise(prims, lookup[pairs.ia], lookup[pairs.ib])


def affinity(measure: AffinityMeasure, a, b) -> float:
    return measure(a, b)


def baseline_raw_color(a, b):
    return AffinityMeasure("raw-color")(a, b)


def baseline_mean_color(a, b):
    return AffinityMeasure("mean-color")(a, b)


def baseline_color_hist(a, b, bins=8):
    return AffinityMeasure("color-histogram", bins=bins)(a, b)


def baseline_hog(a, b, cfg: HogConfig = HogConfig()):
    return AffinityMeasure("hog", hog=cfg)(a, b)


# ---------------------------------------------------------------------------
# average precision


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: sum over score thresholds of precision x recall gain.

    Tied scores form one threshold, so the result depends only on the
    scores, never on input order (a constant scorer gets the positive rate).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int((y == 1).sum())
    if n_pos == 0:
        raise UndefinedMetricError("AP is undefined without positives")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], (y[order] == 1)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    precision = tp / (last + 1)
    gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(precision * gain))


def evaluate_C(measure: AffinityMeasure, pairs) -> float:
    return average_precision(measure.score_pairset(pairs), pairs.c)


def evaluate_Q(measure: AffinityMeasure, pairs) -> float:
    """AP for same-label prediction on a set where every pair has C=1."""
    if (pairs.c != 1).any():
        raise ProtocolError("Q evaluation requires every pair to have c_label = 1")
    if (pairs.q < 0).any():
        raise ProtocolError("Q evaluation requires a q_label on every pair")
    return average_precision(measure.score_pairset(pairs), pairs.q)


def write_report(path, rows) -> None:
    """CSV with columns measure, task, domain, n, AP."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["measure", "task", "domain", "n", "AP"])
        for r in rows:
            w.writerow([r["measure"], r["task"], r["domain"], r["n"], f"{r['AP']:.6f}"])
