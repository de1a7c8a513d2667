"""Dense differentiable building blocks in plain float64 numpy.

Small fully-connected nets with hand-written backward passes, a sinusoidal
positional encoding, binary cross entropy, Adam, and a minimal strided conv
stack with bilinear feature sampling for image-conditioned decoders.  There
is no autodiff graph: each net records the activations of its most recent
forward passes on a tape and consumes them LIFO on backward, so gradients
from several forwards can be accumulated before an optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "sigmoid", "softplus", "none")


def _act_forward(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "softplus":
        # overflow-safe log(1 + e^z)
        return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    if name == "none":
        return z
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name, z, y, dy):
    if name == "relu":
        return dy * (z > 0.0)
    if name == "sigmoid":
        return dy * y * (1.0 - y)
    if name == "softplus":
        return dy * sigmoid(z)
    if name == "none":
        return dy
    raise ValueError(f"unknown activation {name!r}")


def sigmoid(z):
    """Numerically stable logistic function."""
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# positional encoding


@dataclass(frozen=True)
class PosEnc:
    """Sinusoidal frequency encoding with num_freqs octaves per input dim.

    The encoded vector is [x, sin(2^0 pi x), cos(2^0 pi x), ...,
    sin(2^(k-1) pi x), cos(2^(k-1) pi x)] with each sin/cos applied
    elementwise, so the output width is input_dim * (1 + 2 * num_freqs).
    """

    input_dim: int = 3
    num_freqs: int = 10

    @property
    def output_dim(self):
        return self.input_dim * (1 + 2 * self.num_freqs)

    def frequencies(self):
        return np.pi * (2.0 ** np.arange(self.num_freqs, dtype=np.float64))


def posenc_apply(enc, x):
    """Encode points x (B, input_dim) -> (B, output_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != enc.input_dim:
        raise ValueError(f"expected last dim {enc.input_dim}, got {x.shape}")
    freqs = enc.frequencies()
    ang = x[..., None, :] * freqs[:, None]  # (B, F, D)
    parts = [x]
    for f in range(enc.num_freqs):
        parts.append(np.sin(ang[..., f, :]))
        parts.append(np.cos(ang[..., f, :]))
    return np.concatenate(parts, axis=-1)


def posenc_backward(enc, x, dy):
    """Gradient of posenc_apply w.r.t. x given upstream dy (B, output_dim)."""
    x = np.asarray(x, dtype=np.float64)
    freqs = enc.frequencies()
    d = enc.input_dim
    dx = dy[..., :d].copy()
    ang = x[..., None, :] * freqs[:, None]
    for f in range(enc.num_freqs):
        lo = d * (1 + 2 * f)
        dsin = dy[..., lo:lo + d]
        dcos = dy[..., lo + d:lo + 2 * d]
        dx += freqs[f] * (np.cos(ang[..., f, :]) * dsin - np.sin(ang[..., f, :]) * dcos)
    return dx


# ---------------------------------------------------------------------------
# fully connected nets


class MlpNet:
    """Fully connected net; weights[l] has shape (n_in, n_out).

    Forward pushes a cache onto an internal tape; backward pops the most
    recent cache, accumulates parameter gradients and returns the input
    gradient.  Interleaved passes must therefore unwind in reverse order.
    """

    def __init__(self, sizes, activations, rng, zero_init_last=False):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(n_in)
            self.weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
            self.biases.append(np.zeros(n_out))
        if zero_init_last:
            self.weights[-1][:] = 0.0
            self.biases[-1][:] = 0.0
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self._tape = []

    @property
    def in_dim(self):
        return self.sizes[0]

    @property
    def out_dim(self):
        return self.sizes[-1]

    def param_arrays(self):
        return self.weights + self.biases

    def grad_arrays(self):
        return self.grad_w + self.grad_b

    def zero_grad(self):
        for g in self.grad_w:
            g[:] = 0.0
        for g in self.grad_b:
            g[:] = 0.0
        self._tape.clear()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected (B, {self.sizes[0]}) input, got {x.shape}")
        cache = []
        h = x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            y = _act_forward(act, z)
            cache.append((h, z, y))
            h = y
        self._tape.append(cache)
        return h

    def backward(self, dy):
        if not self._tape:
            raise RuntimeError("backward called without a recorded forward pass")
        cache = self._tape.pop()
        dy = np.asarray(dy, dtype=np.float64)
        for l in range(len(self.weights) - 1, -1, -1):
            h, z, y = cache[l]
            dz = _act_backward(self.activations[l], z, y, dy)
            self.grad_w[l] += h.T @ dz
            self.grad_b[l] += dz.sum(axis=0)
            dy = dz @ self.weights[l].T
        return dy


def mlp_forward(net, x):
    return net.forward(x)


def mlp_backward(net, dy):
    return net.backward(dy)


# ---------------------------------------------------------------------------
# losses


BCE_EPS = 1e-7


def bce(s, target):
    """Elementwise binary cross entropy with clamped probabilities.

    Returns (loss, dloss/ds), both shaped like s.  The derivative is zero
    where the clamp is active.
    """
    s = np.asarray(s, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sc = np.clip(s, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(target * np.log(sc) + (1.0 - target) * np.log(1.0 - sc))
    grad = (-target / sc + (1.0 - target) / (1.0 - sc)) * ((s > BCE_EPS) & (s < 1.0 - BCE_EPS))
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class TrainConfig:
    """Loss weights and schedule shared by the training loops."""

    weight_geometry: float = 0.5
    weight_texture: float = 1.0
    weight_warp_reg: float = 0.1
    lr_template: float = 1e-3
    lr_warp: float = 1e-4
    lr_decay_interval: int = 20000
    batch_scans: int = 4
    epochs: int = 30
    warp_frozen_epochs: int = 2
    # minibatch visits each scan contributes per epoch; each visit draws
    # fresh points, rays, and quadrature jitter
    draws_per_scan: int = 12
    points_per_scan: int = 512
    rays_per_scan: int = 128
    samples_per_ray: int = 32
    seed: int = 0


class AdamState:
    """Adam with stepwise lr halving every decay_interval steps."""

    def __init__(self, net_or_params, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 decay_interval=20000):
        params = net_or_params
        if hasattr(params, "param_arrays"):
            params = params.param_arrays()
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.decay_interval = int(decay_interval)
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def current_lr(self):
        return self.lr * 0.5 ** (self.step_count // self.decay_interval)

    def step(self, net):
        params = net.param_arrays() if hasattr(net, "param_arrays") else net
        grads = net.grad_arrays() if hasattr(net, "grad_arrays") else None
        if grads is None:
            raise ValueError("adam step needs an object exposing grad_arrays()")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1 ** t)
            vhat = v / (1.0 - self.beta2 ** t)
            p -= lr * mhat / (np.sqrt(vhat) + self.eps)


def adam_step(state, net):
    state.step(net)


# ---------------------------------------------------------------------------
# strided conv stack (image feature extractors)


class ConvNet:
    """Stack of 3x3 same-padded conv layers with optional stride.

    Operates on single images laid out channels-first (C, H, W).  Uses the
    same LIFO tape convention as MlpNet.
    """

    KSIZE = 3

    def __init__(self, channels, strides, activations, rng):
        if not (len(channels) - 1 == len(strides) == len(activations)):
            raise ValueError("channels must have one more entry than strides/activations")
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.activations = tuple(activations)
        k = self.KSIZE
        self.kernels = []
        self.biases = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            bound = 1.0 / np.sqrt(c_in * k * k)
            self.kernels.append(rng.uniform(-bound, bound, size=(c_out, c_in, k, k)))
            self.biases.append(np.zeros(c_out))
        self.grad_k = [np.zeros_like(w) for w in self.kernels]
        self.grad_b = [np.zeros_like(b) for b in self.biases]
        self._tape = []

    def param_arrays(self):
        return self.kernels + self.biases

    def grad_arrays(self):
        return self.grad_k + self.grad_b

    def zero_grad(self):
        for g in self.grad_k:
            g[:] = 0.0
        for g in self.grad_b:
            g[:] = 0.0
        self._tape.clear()

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.channels[0]:
            raise ValueError(f"expected ({self.channels[0]}, H, W) input, got {x.shape}")
        cache = []
        h = x
        for w, b, s, act in zip(self.kernels, self.biases, self.strides, self.activations):
            cols, out_hw = _im2col(h, self.KSIZE, s)
            z = cols @ w.reshape(w.shape[0], -1).T + b
            y = _act_forward(act, z)
            cache.append((h.shape, cols, z, y, s))
            h = y.T.reshape(w.shape[0], *out_hw)
        self._tape.append(cache)
        return h

    def backward(self, dy):
        if not self._tape:
            raise RuntimeError("backward called without a recorded forward pass")
        cache = self._tape.pop()
        dy = np.asarray(dy, dtype=np.float64)
        for l in range(len(self.kernels) - 1, -1, -1):
            in_shape, cols, z, y, s = cache[l]
            c_out = self.kernels[l].shape[0]
            dflat = dy.reshape(c_out, -1).T
            dz = _act_backward(self.activations[l], z, y, dflat)
            self.grad_k[l] += (dz.T @ cols).reshape(self.kernels[l].shape)
            self.grad_b[l] += dz.sum(axis=0)
            dcols = dz @ self.kernels[l].reshape(c_out, -1)
            dy = _col2im(dcols, in_shape, self.KSIZE, s)
        return dy


def _im2col(x, k, stride):
    c, h, w = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]  # (C, out_h, out_w, k, k)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c * k * k)
    return np.ascontiguousarray(cols), (out_h, out_w)


def _col2im(dcols, in_shape, k, stride):
    c, h, w = in_shape
    pad = k // 2
    out_h = (h + 2 * pad - k) // stride + 1
    out_w = (w + 2 * pad - k) // stride + 1
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    d = dcols.reshape(out_h, out_w, c, k, k)
    for ki in range(k):
        for kj in range(k):
            dxp[:, ki:ki + out_h * stride:stride, kj:kj + out_w * stride:stride] += \
                d[:, :, :, ki, kj].transpose(2, 0, 1)
    return dxp[:, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# bilinear feature sampling


def bilinear_sample(feat, uv):
    """Sample feat (C, H, W) at float pixel coords uv (N, 2) as (x, y).

    Integer coordinates hit pixel centers exactly; queries are clamped to
    the border pixel.  Returns (N, C).
    """
    c, h, w = feat.shape
    x = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.0, w - 1.0)
    y = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    f = feat.reshape(c, -1)
    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    out = (f[:, i00] * w00 + f[:, i01] * w01 + f[:, i10] * w10 + f[:, i11] * w11)
    return out.T


def bilinear_sample_backward(feat_shape, uv, dout):
    """Scatter upstream (N, C) gradients back to a (C, H, W) feature grid."""
    c, h, w = feat_shape
    x = np.clip(np.asarray(uv, dtype=np.float64)[:, 0], 0.0, w - 1.0)
    y = np.clip(np.asarray(uv, dtype=np.float64)[:, 1], 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    dfeat = np.zeros((c, h * w))
    dT = np.asarray(dout, dtype=np.float64).T
    np.add.at(dfeat.T, y0 * w + x0, (dT * ((1 - fx) * (1 - fy))).T)
    np.add.at(dfeat.T, y0 * w + x1, (dT * (fx * (1 - fy))).T)
    np.add.at(dfeat.T, y1 * w + x0, (dT * ((1 - fx) * fy)).T)
    np.add.at(dfeat.T, y1 * w + x1, (dT * (fx * fy)).T)
    return dfeat.reshape(c, h, w)


# ---------------------------------------------------------------------------
# finite-difference checking


def numeric_grad(loss_fn, arr, h=1e-5):
    """Central-difference gradient of loss_fn() w.r.t. arr, edited in place."""
    g = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def grad_rel_error(analytic, numeric):
    """Tensor-level infinity-norm relative error between two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)
