"""Small fixed layer set with hand-written backward passes.

Tensors are float64 numpy arrays laid out (batch, time, channels) for the
convolutional part and (batch, features) after flattening. Every layer's
``forward`` returns ``(out, cache)`` and ``backward(dout, cache)`` returns
``(dx, grads)``, so a forward pass never mutates the layer.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, NumericError, ParameterError, WeightError

PROB_FLOOR = 1e-12


# -- functional kernels ------------------------------------------------------

def _same_pad(kernel_size: int, dilation: int) -> tuple[int, int]:
    total = dilation * (kernel_size - 1)
    return total // 2, total - total // 2


def _tap_ranges(k: int, dilation: int, left: int, t_in: int, t_out: int):
    # output frame t reads input frame t + shift for tap j; yield the valid t range per tap
    for j in range(k):
        shift = j * dilation - left
        lo, hi = max(0, -shift), min(t_out, t_in - shift)
        if hi > lo:
            yield j, shift, lo, hi


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
           dilation: int = 1, padding: str = "valid") -> np.ndarray:
    """out[t, co] = bias[co] + sum_{j, ci} x[t + j*dilation, ci] * weight[j, ci, co].

    ``x`` is (T, C) or (B, T, C); ``weight`` is (k, C_in, C_out). ``same``
    padding zero-pads both ends to keep T, with the odd extra frame on the right.
    """
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    out, _ = _conv_forward(xb, weight, bias, dilation, padding)
    return out[0] if squeeze else out


def _conv_forward(x, W, b, dilation, padding):
    # every tap is one matmul over all frames; taps are then shifted and summed
    k, c_in, c_out = W.shape
    B, t_in, c = x.shape
    if c != c_in:
        raise DimensionError(f"conv expects {c_in} input channels, got {c}")
    if padding == "same":
        left = _same_pad(k, dilation)[0]
        t_out = t_in
    elif padding == "valid":
        left = 0
        t_out = t_in - dilation * (k - 1)
    else:
        raise ParameterError(f"padding must be 'same' or 'valid', got {padding!r}")
    if t_out < 1:
        raise DimensionError(f"input length {t_in} shorter than dilated kernel span {dilation * (k - 1) + 1}")
    x2d = x.reshape(-1, c_in)
    z = (x2d @ W.transpose(1, 0, 2).reshape(c_in, k * c_out)).reshape(B, t_in, k, c_out)
    out = np.zeros((B, t_out, c_out))
    if b is not None:
        out += b
    for j, shift, lo, hi in _tap_ranges(k, dilation, left, t_in, t_out):
        out[:, lo:hi] += z[:, lo + shift : hi + shift, j]
    return out, (x2d, t_in, left)


def _conv_backward(dout, W, dilation, cache):
    x2d, t_in, left = cache
    k, c_in, c_out = W.shape
    B, t_out, _ = dout.shape
    dz = np.zeros((B, t_in, k, c_out))
    for j, shift, lo, hi in _tap_ranges(k, dilation, left, t_in, t_out):
        dz[:, lo + shift : hi + shift, j] = dout[:, lo:hi]
    dz2d = dz.reshape(-1, k * c_out)
    w2d = W.transpose(1, 0, 2).reshape(c_in, k * c_out)
    dW = (x2d.T @ dz2d).reshape(c_in, k, c_out).transpose(1, 0, 2)
    dx = (dz2d @ w2d.T).reshape(B, t_in, c_in)
    return dx, dW, dout.sum(axis=(0, 1))


def maxpool1d(x: np.ndarray, window: int = 2, stride: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max pooling over time; returns (out, argmax index into the input).

    An odd trailing frame is dropped and ties go to the earlier frame.
    """
    if window != 2 or stride != 2:
        raise ParameterError("only window=2, stride=2 pooling is supported")
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    out, arg = _pool_forward(xb)
    src = 2 * np.arange(out.shape[1])[None, :, None] + arg
    return (out[0], src[0]) if squeeze else (out, src)


def _pool_forward(x):
    B, T, C = x.shape
    if T < 2:
        raise DimensionError(f"max-pool needs at least 2 frames, got {T}")
    half = T // 2
    pairs = x[:, : 2 * half].reshape(B, half, 2, C)
    arg = (pairs[:, :, 1] > pairs[:, :, 0]).astype(np.intp)
    out = np.where(arg == 1, pairs[:, :, 1], pairs[:, :, 0])
    return out, arg


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=-1, keepdims=True)


def dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"dense expects {weight.shape[0]} inputs, got {x.shape[-1]}")
    return x @ weight + bias


# -- loss --------------------------------------------------------------------

@dataclass(frozen=True)
class ClassWeights:
    idle: float
    burst: float

    def __post_init__(self):
        if not (self.idle > 0 and self.burst > 0):
            raise WeightError(f"class weights must be positive, got ({self.idle}, {self.burst})")

    def as_array(self) -> np.ndarray:
        return np.array([self.idle, self.burst])

    def per_frame(self, labels: np.ndarray) -> np.ndarray:
        """Weight of each frame's class divided by the sum of both class weights."""
        return self.as_array()[np.asarray(labels, dtype=np.intp)] / (self.idle + self.burst)


def class_weights(labels) -> ClassWeights:
    """Inverse relative class frequencies; accepts one label array or a list of them."""
    if isinstance(labels, (list, tuple)) and labels and np.ndim(labels[0]) > 0:
        y = np.concatenate([np.ravel(l) for l in labels])
    else:
        y = np.ravel(np.asarray(labels))
    if y.size == 0:
        raise WeightError("no labels to compute class weights from")
    f1 = float(np.count_nonzero(y)) / y.size
    f0 = 1.0 - f1
    if f0 == 0 or f1 == 0:
        raise WeightError("class weights need both classes present in the labels")
    return ClassWeights(1.0 / f0, 1.0 / f1)


def weighted_nll(probs: np.ndarray, labels, weights: ClassWeights) -> float:
    """Class-weighted negative log-likelihood summed over frames.

    Each frame contributes -log of the probability of its true class, scaled
    by that class's weight over the sum of both weights.

    Probabilities at the labeled index are floored at ``PROB_FLOOR``; see
    :func:`count_clamped`.
    """
    probs = np.atleast_2d(probs)
    y = np.asarray(labels, dtype=np.intp).ravel()
    if probs.shape != (y.size, 2):
        raise DimensionError(f"probabilities {probs.shape} do not match {y.size} labels")
    picked = np.maximum(probs[np.arange(y.size), y], PROB_FLOOR)
    return float(np.sum(weights.per_frame(y) * -np.log(picked)))


def count_clamped(probs: np.ndarray, labels) -> int:
    probs = np.atleast_2d(probs)
    y = np.asarray(labels, dtype=np.intp).ravel()
    return int(np.count_nonzero(probs[np.arange(y.size), y] < PROB_FLOOR))


def weighted_nll_grad_logits(probs: np.ndarray, labels, weights: ClassWeights) -> np.ndarray:
    """Gradient of the fused softmax + weighted NLL with respect to the logits."""
    y = np.asarray(labels, dtype=np.intp).ravel()
    g = probs.copy()
    g[np.arange(y.size), y] -= 1.0
    return g * weights.per_frame(y)[:, None]


# -- layers ------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class Layer:
    params: list[np.ndarray] = []
    kinked = False  # True for layers whose output is piecewise (ReLU, max-pool)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout, cache):
        raise NotImplementedError

    def signature(self, cache):
        """Branch choice taken by a piecewise layer, used to spot kinks."""
        return None


class Conv1D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 dilation: int = 1, padding: str = "same", rng: np.random.Generator | None = None):
        self.kernel_size, self.dilation, self.padding = kernel_size, dilation, padding
        rng = rng or np.random.default_rng(0)
        self.W = glorot_uniform(rng, (kernel_size, in_channels, out_channels),
                                kernel_size * in_channels, kernel_size * out_channels)
        self.b = np.zeros(out_channels)
        self.params = [self.W, self.b]

    def output_length(self, t_in: int) -> int:
        if self.padding == "same":
            return t_in
        return t_in - self.dilation * (self.kernel_size - 1)

    def forward(self, x):
        return _conv_forward(x, self.W, self.b, self.dilation, self.padding)

    def backward(self, dout, cache):
        dx, dW, db = _conv_backward(dout, self.W, self.dilation, cache)
        return dx, [dW, db]


class KernelFusion(Layer):
    """Parallel convolutions over the same input, concatenated along channels.

    ``crop=True`` uses valid convolutions and center-crops every branch to the
    shortest output instead of same-padding.
    """

    def __init__(self, branches: Sequence[Conv1D], crop: bool = False):
        self.branches = list(branches)
        self.crop = crop
        self.params = [p for br in self.branches for p in br.params]

    def output_length(self, t_in: int) -> int:
        return min(br.output_length(t_in) for br in self.branches)

    def forward(self, x):
        outs, caches, offsets = [], [], []
        t_min = self.output_length(x.shape[1])
        for br in self.branches:
            out, cache = br.forward(x)
            off = (out.shape[1] - t_min) // 2 if self.crop else 0
            outs.append(out[:, off : off + t_min])
            caches.append(cache)
            offsets.append((off, out.shape[1]))
        return np.concatenate(outs, axis=2), (caches, offsets)

    def backward(self, dout, cache):
        caches, offsets = cache
        dx = None
        grads = []
        start = 0
        for br, c, (off, t_full) in zip(self.branches, caches, offsets):
            width = br.W.shape[2]
            part = dout[:, :, start : start + width]
            start += width
            if part.shape[1] != t_full:
                full = np.zeros((part.shape[0], t_full, width))
                full[:, off : off + part.shape[1]] = part
                part = full
            dxi, g = br.backward(part, c)
            dx = dxi if dx is None else dx + dxi
            grads.extend(g)
        return dx, grads


class ReLU(Layer):
    kinked = True

    def forward(self, x):
        mask = x > 0
        return np.where(mask, x, 0.0), mask

    def backward(self, dout, mask):
        return dout * mask, []

    def signature(self, mask):
        return mask


class MaxPool1D(Layer):
    kinked = True

    def forward(self, x):
        out, arg = _pool_forward(x)
        return out, (arg, x.shape)

    def backward(self, dout, cache):
        arg, x_shape = cache
        B, half, C = dout.shape
        dx = np.zeros(x_shape)
        pairs = dx[:, : 2 * half].reshape(B, half, 2, C)
        pairs[:, :, 0] = np.where(arg == 0, dout, 0.0)
        pairs[:, :, 1] = np.where(arg == 1, dout, 0.0)
        dx[:, : 2 * half] = pairs.reshape(B, 2 * half, C)
        return dx, []

    def signature(self, cache):
        return cache[0]


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape):
        return dout.reshape(shape), []


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.W = glorot_uniform(rng, (in_features, out_features), in_features, out_features)
        self.b = np.zeros(out_features)
        self.params = [self.W, self.b]

    def forward(self, x):
        return dense(x, self.W, self.b), x

    def backward(self, dout, x):
        return dout @ self.W.T, [x.T @ dout, dout.sum(axis=0)]


class Network:
    """Layer stack ending in 2 logits; softmax is applied by :meth:`predict`."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers = list(layers)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def forward(self, x: np.ndarray):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def predict(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x)[0])

    def loss(self, x, labels, weights: ClassWeights) -> float:
        return weighted_nll(self.predict(x), labels, weights)

    def loss_and_grads(self, x, labels, weights: ClassWeights):
        logits, caches = self.forward(x)
        probs = softmax(logits)
        loss = weighted_nll(probs, labels, weights)
        dout = weighted_nll_grad_logits(probs, labels, weights)
        grads: list[list[np.ndarray]] = []
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dout, g = layer.backward(dout, cache)
            grads.append(g)
        flat = [g for layer_grads in reversed(grads) for g in layer_grads]
        if not all(np.all(np.isfinite(g)) for g in flat):
            raise NumericError("non-finite gradient")
        return loss, flat, probs

    def signature(self, x):
        _, caches = self.forward(x)
        return [layer.signature(c) for layer, c in zip(self.layers, caches) if layer.kinked]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params]) if self.params else np.zeros(0)

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise DimensionError(f"expected {self.n_params} parameters, got {flat.size}")
        i = 0
        for p in self.params:
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size


def backward(network: Network, x, labels, weights: ClassWeights) -> list[np.ndarray]:
    return network.loss_and_grads(x, labels, weights)[1]


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped_kinks: int
    worst_param: tuple[int, int] | None = None


def grad_check(network: Network, x, labels, weights: ClassWeights, h: float = 1e-5,
               max_params: int | None = 400, seed: int = 0) -> GradCheckResult:
    """Compare analytic gradients with central finite differences.

    Checks every parameter, or a random subsample of ``max_params`` spread
    over all tensors in proportion to size (at least one per tensor).
    Parameters whose +/-h perturbation flips a ReLU mask or a max-pool choice
    sit on a kink and are skipped.
    """
    _, grads, _ = network.loss_and_grads(x, labels, weights)
    base_sig = network.signature(x)
    params = network.params
    total = sum(p.size for p in params)
    rng = np.random.default_rng(seed)
    picks: list[tuple[int, int]] = []
    for ti, p in enumerate(params):
        if max_params is None or total <= max_params:
            idx = np.arange(p.size)
        else:
            n = max(1, int(round(max_params * p.size / total)))
            idx = rng.choice(p.size, size=min(n, p.size), replace=False)
        picks.extend((ti, int(i)) for i in np.sort(idx))
    worst, worst_at, skipped = 0.0, None, 0
    for ti, i in picks:
        flat = params[ti].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus, sig_plus = network.loss(x, labels, weights), network.signature(x)
        flat[i] = orig - h
        f_minus, sig_minus = network.loss(x, labels, weights), network.signature(x)
        flat[i] = orig
        if not (_same_sig(base_sig, sig_plus) and _same_sig(base_sig, sig_minus)):
            skipped += 1
            continue
        g_fd = (f_plus - f_minus) / (2 * h)
        g_an = grads[ti].reshape(-1)[i]
        err = abs(g_an - g_fd) / max(abs(g_an), abs(g_fd), 1e-8)
        if err > worst:
            worst, worst_at = err, (ti, i)
    return GradCheckResult(worst, len(picks) - skipped, skipped, worst_at)


def _same_sig(a, b) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


# -- optimizers --------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def _check_finite(arrays, what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite {what}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              inplace: bool = False) -> tuple[list[np.ndarray], AdamState]:
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    _check_finite(grads, "gradient")
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param {p.shape} vs grad {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        step = lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        if inplace:
            p -= step
            new_p.append(p)
        else:
            new_p.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float = 1e-2,
             inplace: bool = False) -> list[np.ndarray]:
    _check_finite(grads, "gradient")
    if inplace:
        for p, g in zip(params, grads):
            p -= lr * g
        return list(params)
    return [p - lr * g for p, g in zip(params, grads)]
