"""Small Siamese convolutional network with hand-written backpropagation.

Everything is float64 numpy.  Images are batched as NHWC arrays; a single
branch parameter store is run over both inputs of every pair so the
gradients of the two paths accumulate into the same arrays.
"""
from __future__ import annotations

import copy
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data.pairs import as_pairset


class InputShapeError(ValueError):
    pass


class MissingLabelError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


KINDS = ("conv", "fc", "relu", "sigmoid", "flatten")
_KIND_CODE = {k: i for i, k in enumerate(KINDS)}
_HEAD_FLAG = 0x80


@dataclass(frozen=True)
class LayerSpec:
    """One layer.  ``n_in``/``n_out`` are channels for conv and dims for fc."""

    kind: str
    n_in: int = 0
    n_out: int = 0
    kernel: int = 0
    stride: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError("kernel size must be odd and >= 1")
            if self.stride < 1:
                raise ValueError("stride must be >= 1")
        if self.kind in ("conv", "fc") and (self.n_in < 1 or self.n_out < 1):
            raise ValueError(f"{self.kind} layer needs positive n_in/n_out")

    @property
    def hyper(self) -> tuple[int, int, int, int]:
        return (self.n_in, self.n_out, self.kernel, self.stride)

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "conv":
            return [(self.kernel, self.kernel, self.n_in, self.n_out), (self.n_out,)]
        if self.kind == "fc":
            return [(self.n_in, self.n_out), (self.n_out,)]
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-example output shape, raising on inconsistent chains."""
        if self.kind == "conv":
            if len(in_shape) != 3 or in_shape[2] != self.n_in:
                raise ValueError(f"conv expects (H, W, {self.n_in}), got {in_shape}")
            h, w = in_shape[:2]
            if h < self.kernel or w < self.kernel:
                raise ValueError("input smaller than kernel")
            return ((h - self.kernel) // self.stride + 1,
                    (w - self.kernel) // self.stride + 1, self.n_out)
        if self.kind == "fc":
            if len(in_shape) != 1 or in_shape[0] != self.n_in:
                raise ValueError(f"fc expects ({self.n_in},), got {in_shape}")
            return (self.n_out,)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape


def conv(n_in, n_out, kernel, stride=1):
    return LayerSpec("conv", n_in, n_out, kernel, stride)


def fc(n_in, n_out):
    return LayerSpec("fc", n_in, n_out)


RELU = LayerSpec("relu")
SIGMOID = LayerSpec("sigmoid")
FLATTEN = LayerSpec("flatten")


# ---------------------------------------------------------------------------
# layer kernels: forward returns (out, cache); backward returns (dx, grads)


def _windows(x, k, s):
    # (N, H, W, C) -> (N, Ho, Wo, k, k, C), a strided view
    v = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
    return v.transpose(0, 1, 2, 4, 5, 3)


def _conv_forward(spec, params, x):
    w, b = params
    k, s = spec.kernel, spec.stride
    win = _windows(x, k, s)
    n, ho, wo = win.shape[:3]
    cols = win.reshape(n * ho * wo, k * k * spec.n_in)
    y = cols @ w.reshape(-1, spec.n_out) + b
    return y.reshape(n, ho, wo, spec.n_out), (x.shape, cols)


def _conv_backward(spec, params, cache, dy, need_dx=True):
    w, _ = params
    x_shape, cols = cache
    k, s = spec.kernel, spec.stride
    n, ho, wo, _ = dy.shape
    dy2 = dy.reshape(-1, spec.n_out)
    dw = (cols.T @ dy2).reshape(w.shape)
    db = dy2.sum(axis=0)
    if not need_dx:
        return None, [dw, db]
    dcols = (dy2 @ w.reshape(-1, spec.n_out).T).reshape(n, ho, wo, k, k, spec.n_in)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s, :] += dcols[:, :, :, i, j, :]
    return dx, [dw, db]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def layer_forward(spec, params, x):
    if spec.kind == "conv":
        return _conv_forward(spec, params, x)
    if spec.kind == "fc":
        return x @ params[0] + params[1], x
    if spec.kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if spec.kind == "sigmoid":
        y = _sigmoid(x)
        return y, y
    return x.reshape(x.shape[0], -1), x.shape


def layer_backward(spec, params, cache, dy, need_dx=True):
    if spec.kind == "conv":
        return _conv_backward(spec, params, cache, dy, need_dx)
    if spec.kind == "fc":
        x = cache
        return dy @ params[0].T, [x.T @ dy, dy.sum(axis=0)]
    if spec.kind == "relu":
        return dy * cache, []
    if spec.kind == "sigmoid":
        return dy * cache * (1.0 - cache), []
    return dy.reshape(cache), []


def _run(specs, params, x):
    caches = []
    for spec, p in zip(specs, params):
        x, c = layer_forward(spec, p, x)
        caches.append(c)
    return x, caches


def _unrun(specs, params, caches, dy, need_dx=True):
    grads = [None] * len(specs)
    for i in range(len(specs) - 1, -1, -1):
        dy, grads[i] = layer_backward(specs[i], params[i], caches[i], dy, need_dx or i > 0)
    return dy, grads


# ---------------------------------------------------------------------------


def patch_architecture():
    branch = [conv(3, 16, 5, 1), RELU, conv(16, 32, 3, 2), RELU, FLATTEN, fc(6 * 6 * 32, 64)]
    return 17, branch, _head(64)


def frame_architecture():
    branch = [conv(3, 16, 5, 2), RELU, conv(16, 32, 3, 2), RELU, conv(32, 32, 3, 1), RELU,
              FLATTEN, fc(5 * 5 * 32, 64)]
    return 33, branch, _head(64)


def _head(feat):
    return [fc(2 * feat, 64), RELU, fc(64, 1)]


@dataclass
class SiameseNet:
    """Shared-weight two-branch network producing one logit per pair.

    ``branch_params[i]`` / ``head_params[i]`` hold the arrays of layer ``i``
    (``[W, b]`` for conv/fc, empty otherwise).  There is exactly one branch
    store; both inputs of a pair go through it.
    """

    side: int
    branch: list[LayerSpec]
    head: list[LayerSpec]
    branch_params: list[list[np.ndarray]] = field(default_factory=list)
    head_params: list[list[np.ndarray]] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        shape = (self.side, self.side, 3)
        for spec in self.branch:
            shape = spec.out_shape(shape)
        if len(shape) != 1:
            raise ValueError("branch must end in a flat feature vector")
        shape = (2 * shape[0],)
        for spec in self.head:
            shape = spec.out_shape(shape)
        if shape != (1,):
            raise ValueError(f"head must produce a single logit, got {shape}")
        for specs, params in ((self.branch, self.branch_params), (self.head, self.head_params)):
            if params and [tuple(a.shape) for p in params for a in p] != [
                    s for spec in specs for s in spec.param_shapes()]:
                raise ValueError("parameter shapes do not match the architecture")

    @classmethod
    def create(cls, side, branch, head, seed=0):
        """Zero biases, He-normal weights (std sqrt(2 / fan_in))."""
        rng = np.random.default_rng(seed)

        def init(specs):
            out = []
            for spec in specs:
                shapes = spec.param_shapes()
                if not shapes:
                    out.append([])
                    continue
                w_shape, b_shape = shapes
                fan_in = int(np.prod(w_shape[:-1]))
                out.append([rng.normal(0.0, math.sqrt(2.0 / fan_in), w_shape), np.zeros(b_shape)])
            return out

        return cls(side, list(branch), list(head), init(branch), init(head), seed)

    @classmethod
    def for_patches(cls, seed=0):
        return cls.create(*patch_architecture(), seed=seed)

    @classmethod
    def for_frames(cls, seed=0):
        return cls.create(*frame_architecture(), seed=seed)

    # --- parameter views -------------------------------------------------

    def params(self) -> list[np.ndarray]:
        return [a for p in self.branch_params + self.head_params for a in p]

    def zeros_like_params(self) -> list[np.ndarray]:
        return [np.zeros_like(a) for a in self.params()]

    def copy(self) -> "SiameseNet":
        return copy.deepcopy(self)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        want = (self.side, self.side, 3)
        if x.shape == want:
            return x[None]
        if x.ndim != 4 or x.shape[1:] != want:
            raise InputShapeError(f"expected (..., {self.side}, {self.side}, 3), got {x.shape}")
        return x

    # --- forward / backward ----------------------------------------------

    def embed(self, x) -> np.ndarray:
        """Branch features for a batch of primitives, shape (N, F)."""
        out, _ = _run(self.branch, self.branch_params, self._check(x))
        return out

    def head_logits(self, fa, fb) -> np.ndarray:
        out, _ = _run(self.head, self.head_params, np.concatenate([fa, fb], axis=1))
        return out[:, 0]

    def logits(self, a, b) -> np.ndarray:
        a, b = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise InputShapeError("a and b batches differ in shape")
        n = a.shape[0]
        f = self.embed(np.concatenate([a, b]))
        return self.head_logits(f[:n], f[n:])

    def loss_and_grads(self, a, b, labels):
        """Mean logistic loss over the batch and its gradient for every parameter."""
        a, b = self._check(a), self._check(b)
        if a.shape != b.shape:
            raise InputShapeError("a and b batches differ in shape")
        labels = np.asarray(labels, dtype=np.float64).reshape(-1)
        n = a.shape[0]
        f, bcache = _run(self.branch, self.branch_params, np.concatenate([a, b]))
        z, hcache = _run(self.head, self.head_params, np.concatenate([f[:n], f[n:]], axis=1))
        z = z[:, 0]
        loss = float(np.mean(logistic_loss(z, labels)))
        dz = ((_sigmoid(z) - labels) / n)[:, None]
        dh, hgrads = _unrun(self.head, self.head_params, hcache, dz)
        half = dh.shape[1] // 2
        # the A-path and B-path gradients sum inside the shared branch backward
        df = np.concatenate([dh[:, :half], dh[:, half:]])
        _, bgrads = _unrun(self.branch, self.branch_params, bcache, df, need_dx=False)
        grads = [g for gs in bgrads + hgrads for g in gs]
        return loss, grads


def forward_pair(net: SiameseNet, a, b) -> float:
    return float(net.logits(a, b)[0])


def sigmoid(z):
    if np.ndim(z) == 0:
        return float(_sigmoid(np.array([z], dtype=np.float64))[0])
    return _sigmoid(np.asarray(z, dtype=np.float64))


def predict_prob(net: SiameseNet, a, b) -> float:
    return sigmoid(forward_pair(net, a, b))


def logistic_loss(logit, label):
    """-[y log s(z) + (1-y) log(1-s(z))] written as max(z,0) - z*y + log1p(exp(-|z|))."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(out) if out.ndim == 0 else out


def backward_pair(net: SiameseNet, a, b, label) -> list[np.ndarray]:
    """Gradient of the single-pair logistic loss, aligned with ``net.params()``."""
    return net.loss_and_grads(a, b, [label])[1]


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 10
    lr_decay_factor: float = 0.5
    lr_decay_every: int | None = None  # default ceil(epochs / 4)
    seed: int = 0
    label_source: str = "C"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.label_source not in ("C", "Q"):
            raise ValueError("label_source must be 'C' or 'Q'")

    @property
    def decay_every(self) -> int:
        if self.lr_decay_every:
            return self.lr_decay_every
        return max(1, math.ceil(self.epochs / 4))

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.decay_every)


def sgd_step(params, grads, velocity, lr, momentum):
    """Classical momentum, in place: v <- m*v - lr*g ; p <- p + v."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("parameter, gradient and velocity stores differ in length")
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError("parameter, gradient and velocity shapes differ")
        v *= momentum
        v -= lr * g
        p += v
    return params, velocity


def train(net: SiameseNet, examples, config: TrainConfig, log=None):
    """Mini-batch SGD on the logistic loss.

    ``examples`` is a list of PairExample or a PairSet; labels come from
    ``config.label_source``.  Returns a trained copy and per-epoch mean loss.
    """
    pairs = as_pairset(examples)
    if len(pairs) == 0:
        raise ValueError("no training examples")
    y = pairs.labels(config.label_source)
    net = net.copy()
    params = net.params()
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    n = len(y)
    history = []
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            a, b = pairs.gather(idx)
            loss, grads = net.loss_and_grads(a, b, y[idx])
            sgd_step(params, grads, velocity, lr, config.momentum)
            total += loss * len(idx)
        history.append(total / n)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} lr={lr:g} loss={history[-1]:.5f}")
    return net, history


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(g_analytic, g_numeric):
    ga, gn = np.asarray(g_analytic), np.asarray(g_numeric)
    return np.abs(ga - gn) / np.maximum(np.maximum(np.abs(ga), np.abs(gn)), 1e-8)


def numerical_gradient(f, x: np.ndarray, epsilon=1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + epsilon
        fp = f()
        flat[i] = old - epsilon
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * epsilon)
    return g


def grad_check(net: SiameseNet, example, epsilon=1e-5, grad_fn=backward_pair) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    a, b, label = example
    analytic = grad_fn(net, a, b, label)

    def loss():
        return logistic_loss(forward_pair(net, a, b), label)

    worst = 0.0
    for p, ga in zip(net.params(), analytic):
        gn = numerical_gradient(loss, p, epsilon)
        if p.size:
            worst = max(worst, float(relative_error(ga, gn).max()))
    return worst


# ---------------------------------------------------------------------------
# persistence

_MAGIC = b"CGRP"
_VERSION = 1


def save_params(net: SiameseNet, path) -> None:
    layers = [(s, p, False) for s, p in zip(net.branch, net.branch_params)]
    layers += [(s, p, True) for s, p in zip(net.head, net.head_params)]
    out = [_MAGIC, struct.pack("<III", _VERSION, net.side, len(layers))]
    for spec, params, is_head in layers:
        code = _KIND_CODE[spec.kind] | (_HEAD_FLAG if is_head else 0)
        out.append(struct.pack("<B4I", code, *spec.hyper))
        out.append(struct.pack(f"<{len(params)}Q", *[a.size for a in params]))
        for arr in params:
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_params(path) -> SiameseNet:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightsFormatError("truncated weights file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != _MAGIC:
        raise WeightsFormatError("bad magic")
    version, side, count = struct.unpack("<III", take(12))
    if version != _VERSION:
        raise WeightsFormatError(f"unsupported version {version}")
    branch, head, bparams, hparams = [], [], [], []
    for _ in range(count):
        code, *hyper = struct.unpack("<B4I", take(17))
        kind_code = code & ~_HEAD_FLAG
        if kind_code >= len(KINDS):
            raise WeightsFormatError(f"unknown layer code {code}")
        try:
            spec = LayerSpec(KINDS[kind_code], *hyper)
        except ValueError as exc:
            raise WeightsFormatError(str(exc)) from exc
        shapes = spec.param_shapes()
        lengths = struct.unpack(f"<{len(shapes)}Q", take(8 * len(shapes)))
        arrays = []
        for shape, n in zip(shapes, lengths):
            if n != int(np.prod(shape)):
                raise WeightsFormatError(f"{spec.kind} payload length {n} does not match {shape}")
            arrays.append(np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape))
        if code & _HEAD_FLAG:
            head.append(spec)
            hparams.append(arrays)
        else:
            branch.append(spec)
            bparams.append(arrays)
    if pos != len(buf):
        raise WeightsFormatError("trailing bytes after last layer")
    try:
        return SiameseNet(side, branch, head, bparams, hparams)
    except ValueError as exc:
        raise WeightsFormatError(str(exc)) from exc
