"""Co-occurrence pair samplers for patches, frames and geotagged photos.

Every sampler returns a :class:`PairSet` with exactly ceil(n/2) positives and
floor(n/2) negatives, shuffled by the supplied generator.  Distance bands are
inclusive: [17, 33] px, [3, 10] s, (0, 11] m.
"""
from __future__ import annotations

import math

import numpy as np

from .pairs import PairSet, quantize_if_exact
from .primitives import circular_mask

EARTH_RADIUS_M = 6_371_000.0
PATCH_BAND = (17.0, 33.0)
FRAME_BAND = (3.0, 10.0)
GEO_RADIUS_M = 11.0


class SamplingError(ValueError):
    pass


def haversine(p1, p2):
    """Great-circle distance in metres between (lat, lon) points given in degrees."""
    lat1, lon1 = np.radians(np.asarray(p1, dtype=np.float64)).T
    lat2, lon2 = np.radians(np.asarray(p2, dtype=np.float64)).T
    h = (np.sin((lat2 - lat1) / 2) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2)
    d = 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))
    return float(d) if np.ndim(d) == 0 else d


def _counts(n):
    if n < 2:
        raise SamplingError("need n >= 2 to balance positives and negatives")
    return (n + 1) // 2, n // 2


def band_offsets(lo=PATCH_BAND[0], hi=PATCH_BAND[1]):
    """All integer (dr, dc) with lo <= hypot(dr, dc) <= hi."""
    r = int(math.floor(hi))
    dr, dc = np.mgrid[-r:r + 1, -r:r + 1]
    d = np.hypot(dr, dc)
    keep = (d >= lo) & (d <= hi)
    return np.stack([dr[keep], dc[keep]], axis=1)


# ---------------------------------------------------------------------------
# patches


class _PatchBank:
    def __init__(self, images, side):
        self.side = side
        self.half = side // 2
        packed = [quantize_if_exact(img) for img in images]
        self.exact = all(s == 255.0 for _, s in packed)
        self.images = [p if self.exact else np.asarray(img, dtype=np.float64)
                       for (p, _), img in zip(packed, images)]
        self.rows = []
        self.mask = circular_mask(side)

    def add(self, img, r, c):
        r0, c0 = r - self.half, c - self.half
        self.rows.append(self.images[img][r0:r0 + self.side, c0:c0 + self.side])
        return len(self.rows) - 1

    def build(self):
        bank = np.stack(self.rows)
        bank[:, ~self.mask] = 0
        return bank, (255.0 if self.exact else 1.0)


def _random_center(rng, shape, half, side):
    return (int(rng.integers(half, shape[0] - side + half + 1)),
            int(rng.integers(half, shape[1] - side + half + 1)))


def sample_patch_pairs(images, n, rng, gt=None, side=17, band=PATCH_BAND, balance="C"):
    """Patch pairs labelled by spatial adjacency (``balance="C"``) or, with
    ``balance="Q"``, adjacent pairs balanced on same-region membership.

    Positives are two circular patches of one image whose centres are
    ``band[0]``..``band[1]`` pixels apart; negatives pair uniformly random
    patches across all images.  ``gt`` (per-image region maps) fills ``q``:
    1 when both centre pixels lie in the same region of the same image.
    """
    n_pos, n_neg = _counts(n)
    if balance not in ("C", "Q"):
        raise ValueError("balance must be 'C' or 'Q'")
    if balance == "Q" and gt is None:
        raise SamplingError("Q-balanced sampling needs ground-truth region maps")
    half = side // 2
    offsets = band_offsets(*band)
    shapes = [np.shape(img)[:2] for img in images]
    span = int(band[1])
    usable = [i for i, s in enumerate(shapes) if min(s) >= side]
    adjacent = [i for i, s in enumerate(shapes) if min(s) >= side + int(math.ceil(band[0]))]
    if not adjacent:
        raise SamplingError(f"no image is large enough for two disjoint {side}px patches")
    bank = _PatchBank(images, side)

    def adjacent_pair():
        while True:
            img = adjacent[int(rng.integers(len(adjacent)))]
            r, c = _random_center(rng, shapes[img], half, side)
            dr, dc = offsets[int(rng.integers(len(offsets)))]
            r2, c2 = r + int(dr), c + int(dc)
            if half <= r2 <= shapes[img][0] - side + half and half <= c2 <= shapes[img][1] - side + half:
                return img, (r, c), img, (r2, c2)

    def random_pair():
        i = usable[int(rng.integers(len(usable)))]
        j = usable[int(rng.integers(len(usable)))]
        return i, _random_center(rng, shapes[i], half, side), j, _random_center(rng, shapes[j], half, side)

    def same_region(i, p, j, q):
        if gt is None:
            return -1
        return int(i == j and gt[i][p] == gt[j][q])

    records = []
    if balance == "C":
        records += [(*adjacent_pair(), 1) for _ in range(n_pos)]
        records += [(*random_pair(), 0) for _ in range(n_neg)]
    else:
        want = {1: n_pos, 0: n_neg}
        tries = 0
        while want[0] or want[1]:
            tries += 1
            if tries > 200 * n + 1000:
                raise SamplingError("could not find enough cross-region adjacent pairs")
            rec = adjacent_pair()
            q = same_region(*rec)
            if want[q]:
                want[q] -= 1
                records.append((*rec, 1))

    order = rng.permutation(len(records))
    ia, ib, c, q = [], [], [], []
    meta = {"image_a": [], "image_b": [], "center_a": [], "center_b": []}
    for k in order:
        i, p, j, p2, label = records[k]
        if rng.random() < 0.5:
            i, p, j, p2 = j, p2, i, p
        ia.append(bank.add(i, *p))
        ib.append(bank.add(j, *p2))
        c.append(label)
        q.append(same_region(i, p, j, p2))
        meta["image_a"].append(i)
        meta["image_b"].append(j)
        meta["center_a"].append(p)
        meta["center_b"].append(p2)
    data, scale = bank.build()
    return PairSet(data, ia, ib, c, q if gt is not None else None, meta, scale=scale)


def audit_patch_pairs(pairs: PairSet, band=PATCH_BAND) -> list[int]:
    """Indices of pairs violating the positive distance band."""
    bad = []
    ca, cb = pairs.meta["center_a"], pairs.meta["center_b"]
    for i in np.flatnonzero(pairs.c == 1):
        d = math.hypot(*(ca[i] - cb[i]))
        if pairs.meta["image_a"][i] != pairs.meta["image_b"][i] or not band[0] <= d <= band[1]:
            bad.append(int(i))
    return bad


# ---------------------------------------------------------------------------
# frames


def _movie_index(records):
    movies = {}
    for i, rec in enumerate(records):
        movies.setdefault(rec.movie, []).append(i)
    out = {}
    for m, idx in movies.items():
        idx = np.array(sorted(idx, key=lambda i: (records[i].t, i)))
        out[m] = (idx, np.array([records[i].t for i in idx]))
    return out


def sample_frame_pairs(records, prims, n, rng, band=FRAME_BAND, cross_movie_fraction=0.5):
    """Frame pairs labelled by temporal adjacency.

    Positives: same movie, ``band[0] <= |dt| <= band[1]``.  Negatives: half
    from the same movie with ``|dt| > band[1]``, half from different movies
    (all same-movie when there is one movie).  Pairs closer than ``band[0]``
    are never emitted.  ``prims[i]`` is the primitive for ``records[i]``.
    """
    n_pos, n_neg = _counts(n)
    if len(prims) != len(records):
        raise ValueError("records and primitives differ in length")
    movies = _movie_index(records)
    for m, (_, ts) in movies.items():
        if ts[-1] - ts[0] <= 2 * band[1]:
            raise SamplingError(f"movie {m!r} spans {ts[-1] - ts[0]:.1f}s; need > {2 * band[1]:g}s")
    names = sorted(movies)

    def partners(m, k, near):
        idx, ts = movies[m]
        t = ts[k]
        if near:
            lo = np.searchsorted(ts, t + band[0], "left")
            hi = np.searchsorted(ts, t + band[1], "right")
            lo2 = np.searchsorted(ts, t - band[1], "left")
            hi2 = np.searchsorted(ts, t - band[0], "right")
            return np.concatenate([idx[lo2:hi2], idx[lo:hi]])
        lo = np.searchsorted(ts, t - band[1], "left")
        hi = np.searchsorted(ts, t + band[1], "right")
        return np.concatenate([idx[:lo], idx[hi:]])

    def pick(near):
        for _ in range(10_000):
            m = names[int(rng.integers(len(names)))]
            k = int(rng.integers(len(movies[m][0])))
            cand = partners(m, k, near)
            if len(cand):
                return int(movies[m][0][k]), int(cand[int(rng.integers(len(cand)))])
        raise SamplingError("no frame pair satisfies the requested window")

    def cross():
        a, b = rng.choice(len(names), size=2, replace=False)
        ia, ib = movies[names[a]][0], movies[names[b]][0]
        return int(ia[int(rng.integers(len(ia)))]), int(ib[int(rng.integers(len(ib)))])

    n_cross = int(round(n_neg * cross_movie_fraction)) if len(names) > 1 else 0
    pairs = [(*pick(True), 1) for _ in range(n_pos)]
    pairs += [(*pick(False), 0) for _ in range(n_neg - n_cross)]
    pairs += [(*cross(), 0) for _ in range(n_cross)]
    return _finish(pairs, prims, rng, lambda i, j: _same(records[i].chapter, records[j].chapter),
                   any(r.chapter is not None for r in records))


def audit_frame_pairs(pairs: PairSet, records, band=FRAME_BAND) -> list[int]:
    bad = []
    for i in range(len(pairs)):
        ra, rb = records[pairs.meta["index_a"][i]], records[pairs.meta["index_b"][i]]
        dt = abs(ra.t - rb.t)
        same = ra.movie == rb.movie
        if pairs.c[i] == 1:
            ok = same and band[0] <= dt <= band[1]
        else:
            ok = (not same) or dt > band[1]
        if not ok:
            bad.append(i)
    return bad


# ---------------------------------------------------------------------------
# geotagged photos


def _coords(records):
    return np.array([[r.lat, r.lon] for r in records], dtype=np.float64)


def positive_geo_pairs(records, radius=GEO_RADIUS_M):
    """All (i, j), i < j, with 0 < distance <= radius; exact duplicates excluded."""
    xy = _coords(records)
    out = []
    for i in range(len(xy) - 1):
        d = haversine(np.repeat(xy[i:i + 1], len(xy) - i - 1, axis=0), xy[i + 1:])
        for j in np.flatnonzero((d > 0) & (d <= radius)):
            out.append((i, i + 1 + int(j)))
    return out


def sample_geo_pairs(records, prims, n, rng, radius=GEO_RADIUS_M):
    """Photo pairs: positives within ``radius`` metres (duplicate locations excluded), negatives beyond."""
    n_pos, n_neg = _counts(n)
    if len(prims) != len(records):
        raise ValueError("records and primitives differ in length")
    pos = positive_geo_pairs(records, radius)
    if not pos:
        raise SamplingError(f"no two photos lie within {radius:g} m of each other")
    xy = _coords(records)
    pairs = [(*pos[int(rng.integers(len(pos)))], 1) for _ in range(n_pos)]
    for _ in range(n_neg):
        for _ in range(10_000):
            i, j = (int(v) for v in rng.integers(len(records), size=2))
            if i != j and haversine(xy[i], xy[j]) > radius:
                pairs.append((i, j, 0))
                break
        else:
            raise SamplingError(f"no photo pair lies beyond {radius:g} m")
    return _finish(pairs, prims, rng, lambda i, j: _same(records[i].place, records[j].place),
                   any(r.place is not None for r in records))


def audit_geo_pairs(pairs: PairSet, records, radius=GEO_RADIUS_M) -> list[int]:
    xy = _coords(records)
    d = haversine(xy[pairs.meta["index_a"]], xy[pairs.meta["index_b"]])
    pos = pairs.c == 1
    bad = (pos & ~((d > 0) & (d <= radius))) | (~pos & ~(d > radius))
    return [int(i) for i in np.flatnonzero(bad)]


# ---------------------------------------------------------------------------


def _same(x, y):
    if x is None or y is None:
        return -1
    return int(x == y)


def _finish(pairs, prims, rng, q_of, has_q):
    order = rng.permutation(len(pairs))
    ia, ib, c, q = [], [], [], []
    for k in order:
        i, j, label = pairs[k]
        if rng.random() < 0.5:
            i, j = j, i
        ia.append(i)
        ib.append(j)
        c.append(label)
        q.append(q_of(i, j))
    q = np.array(q)
    meta = {"index_a": ia, "index_b": ib}
    bank = np.asarray(prims, dtype=np.float64)
    return PairSet(bank, ia, ib, c, q if has_q and (q >= 0).all() else None, meta)
