from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np


@dataclass
class PairExample:
    a: np.ndarray
    b: np.ndarray
    c_label: int
    q_label: Optional[int] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if np.shape(self.a) != np.shape(self.b):
            raise ValueError("a and b must have identical shapes")


def quantize_if_exact(img):
    """(array, scale): uint8 codes when ``img`` is exactly representable in 8 bits."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img, 255.0
    return _compact(np.asarray(img, dtype=np.float64))


def _compact(bank):
    # 8-bit-exact data is kept as uint8 codes; a 50k-pair patch bank is ~90 MB that way
    q = np.rint(bank * 255.0)
    if np.array_equal(q / 255.0, bank):
        return q.astype(np.uint8), 255.0
    return np.asarray(bank, dtype=np.float64), 1.0


class PairSet:
    """Labelled pairs stored as a primitive bank plus index columns.

    Iterating or indexing yields :class:`PairExample`; ``gather`` returns
    float64 batches for training and evaluation.  ``q`` uses -1 for "absent".
    """

    def __init__(self, bank, ia, ib, c, q=None, meta=None, scale=None):
        if scale is None:
            self.bank, self.scale = _compact(np.asarray(bank, dtype=np.float64))
        else:
            self.bank, self.scale = np.asarray(bank), float(scale)
        self.ia = np.asarray(ia, dtype=np.int64)
        self.ib = np.asarray(ib, dtype=np.int64)
        self.c = np.asarray(c, dtype=np.int8)
        self.q = np.full(len(self.c), -1, np.int8) if q is None else np.asarray(q, dtype=np.int8)
        self.meta = {k: np.asarray(v) for k, v in (meta or {}).items()}
        if not (len(self.ia) == len(self.ib) == len(self.c) == len(self.q)):
            raise ValueError("index and label columns differ in length")

    @classmethod
    def from_examples(cls, examples):
        examples = list(examples)
        if not examples:
            raise ValueError("no examples")
        n = len(examples)
        bank = np.stack([e.a for e in examples] + [e.b for e in examples])
        q = [-1 if e.q_label is None else e.q_label for e in examples]
        return cls(bank, np.arange(n), np.arange(n, 2 * n), [e.c_label for e in examples], q)

    def __len__(self):
        return len(self.c)

    @property
    def side(self) -> int:
        return self.bank.shape[1]

    def primitive(self, j):
        return self.bank[j].astype(np.float64) / self.scale

    def gather(self, idx):
        idx = np.asarray(idx)
        a = self.bank[self.ia[idx]].astype(np.float64) / self.scale
        b = self.bank[self.ib[idx]].astype(np.float64) / self.scale
        return a, b

    def labels(self, source="C") -> np.ndarray:
        if source == "C":
            return self.c.astype(np.float64)
        if (self.q < 0).any():
            from ..nnet import MissingLabelError
            raise MissingLabelError("some pairs have no Q label")
        return self.q.astype(np.float64)

    @property
    def has_q(self) -> bool:
        return bool(len(self.q)) and bool((self.q >= 0).all())

    def __getitem__(self, i) -> PairExample:
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        a, b = self.gather([i])
        q = int(self.q[i])
        return PairExample(a[0], b[0], int(self.c[i]), None if q < 0 else q,
                           {k: v[i] for k, v in self.meta.items()})

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def subset(self, idx) -> "PairSet":
        idx = np.asarray(idx)
        out = object.__new__(PairSet)
        out.bank, out.scale = self.bank, self.scale
        out.ia, out.ib, out.c, out.q = self.ia[idx], self.ib[idx], self.c[idx], self.q[idx]
        out.meta = {k: v[idx] for k, v in self.meta.items()}
        return out


def as_pairset(examples) -> PairSet:
    return examples if isinstance(examples, PairSet) else PairSet.from_examples(examples)
