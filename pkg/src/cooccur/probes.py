"""Probing a trained affinity: perturb B, keep A fixed, average w(A, T(B))."""
from __future__ import annotations

import csv
import math

import numpy as np

from .affinity import AffinityMeasure
from .data.primitives import circular_mask
from .nnet import InputShapeError, SiameseNet

TRANSFORMS = ("none", "rotate-90", "mirror-vertical", "mirror-horizontal", "remove-color", "darken")


def apply_transform(img, kind: str, masked: bool | None = None) -> np.ndarray:
    """Apply one probe transform to a (side, side, 3) array or an (n, side, side, 3) batch.

    ``mirror-vertical`` flips rows (top/bottom), ``mirror-horizontal`` flips
    columns (left/right) and ``rotate-90`` turns counter-clockwise.  After a
    geometric transform the circular mask is re-applied when ``masked`` is
    true; by default that happens for odd-sided patches, which are the only
    masked primitives.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim not in (3, 4) or x.shape[-1] != 3 or x.shape[-2] != x.shape[-3]:
        raise InputShapeError(f"expected square RGB input, got {x.shape}")
    side = x.shape[-2]
    r, c = x.ndim - 3, x.ndim - 2
    if kind == "none":
        return x.copy()
    if kind == "remove-color":
        return np.repeat(x.mean(axis=-1, keepdims=True), 3, axis=-1)
    if kind == "darken":
        return x * 0.5
    if kind == "rotate-90":
        out = np.rot90(x, 1, axes=(r, c))
    elif kind == "mirror-vertical":
        out = np.flip(x, axis=r)
    elif kind == "mirror-horizontal":
        out = np.flip(x, axis=c)
    else:
        raise ValueError(f"unknown transform {kind!r}")
    out = np.ascontiguousarray(out)
    if masked if masked is not None else side % 2 == 1:
        out[..., ~circular_mask(side), :] = 0.0
    return out


def probe_report(net: SiameseNet, pairs, transforms=TRANSFORMS) -> dict[str, float]:
    """Mean symmetric affinity w(A, T(B)) over positive pairs, per transform.

    ``pairs`` is a PairSet (or list of PairExample) whose pairs all have
    c_label = 1.
    """
    from .data.pairs import as_pairset

    pairs = as_pairset(pairs)
    if len(pairs) == 0:
        raise ValueError("probe needs at least one pair")
    if (pairs.c != 1).any():
        raise ValueError("probe pairs must all have c_label = 1")
    measure = AffinityMeasure("learned", net=net)
    a, b = pairs.gather(np.arange(len(pairs)))
    fa = measure.features(a)
    out = {}
    for t in transforms:
        fb = measure.features(apply_transform(b, t))
        # fsum keeps the mean independent of how the scores were chunked
        out[t] = math.fsum(measure.score(fa, fb)) / len(pairs)
    return out


def write_probe_csv(path, rows: dict[str, dict[str, float]], transforms=TRANSFORMS) -> None:
    """One row per domain, one column per transform."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", *transforms])
        for domain, rep in rows.items():
            w.writerow([domain, *[f"{rep[t]:.6f}" for t in transforms]])
