"""Turning images into fixed-size primitives: masked patches and downsampled frames."""
from __future__ import annotations

from functools import lru_cache

import numpy as np


class BoundsError(ValueError):
    pass


@lru_cache(maxsize=8)
def circular_mask(side: int) -> np.ndarray:
    """Boolean (side, side) disk; pixels farther than side/2 from the centre are False."""
    c = (side - 1) / 2.0
    r, q = np.mgrid[:side, :side]
    mask = np.hypot(r - c, q - c) <= side / 2.0
    mask.setflags(write=False)
    return mask


def patch_origin(center, side):
    return center[0] - side // 2, center[1] - side // 2


def extract_patch(img, center, side=17, circular=True) -> np.ndarray:
    """``side x side x 3`` window centred on ``center`` = (row, col)."""
    img = np.asarray(img)
    r0, c0 = patch_origin(center, side)
    if r0 < 0 or c0 < 0 or r0 + side > img.shape[0] or c0 + side > img.shape[1]:
        raise BoundsError(f"{side}x{side} window at {tuple(center)} leaves the "
                          f"{img.shape[0]}x{img.shape[1]} image")
    patch = np.array(img[r0:r0 + side, c0:c0 + side], dtype=np.float64)
    if circular:
        patch[~circular_mask(side)] = 0.0
    return patch


def apply_mask(patches, side=17):
    out = np.array(patches, dtype=np.float64)
    out[..., ~circular_mask(side), :] = 0.0
    return out


def valid_center_range(shape, side):
    """Inclusive (lo, hi) range of centre coordinates along one axis of length ``shape``."""
    half = side // 2
    return half, shape - side + half


def crop_square(img) -> np.ndarray:
    h, w = img.shape[:2]
    s = min(h, w)
    r0, c0 = (h - s) // 2, (w - s) // 2
    return img[r0:r0 + s, c0:c0 + s]


def _box_matrix(n_in: int, n_out: int) -> np.ndarray:
    # row i averages input interval [i*n_in/n_out, (i+1)*n_in/n_out) with fractional end cells
    edges = np.arange(n_out + 1) * (n_in / n_out)
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges[i], edges[i + 1]
        for j in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            m[i, j] = min(hi, j + 1) - max(lo, j)
    return m / m.sum(axis=1, keepdims=True)


def downsample_box(img, out_side: int) -> np.ndarray:
    """Area-averaging resize of an (H, W, C) image to (out_side, out_side, C)."""
    img = np.asarray(img, dtype=np.float64)
    rows = _box_matrix(img.shape[0], out_side)
    cols = _box_matrix(img.shape[1], out_side)
    return np.einsum("ij,jkc,lk->ilc", rows, img, cols)


def to_primitive(img, side=33) -> np.ndarray:
    """Centre-crop to a square, then box-filter down to ``side x side``."""
    sq = crop_square(np.asarray(img, dtype=np.float64))
    if sq.shape[0] < side:
        raise BoundsError(f"image smaller than {side} pixels")
    return downsample_box(sq, side)
