"""Network building blocks on top of the tensor engine.

Contains the convolutional front end that pairs price/volume columns and
collapses the book's feature axis (40 -> 20 -> 10 -> 1), residual blocks of
three 3x1 time convolutions, the factored inception module (5x5 path built
from two 3x3 convolutions), GRU and LSTM cells, a dense head, weight
initialization (Glorot uniform kernels, per-gate orthogonal recurrent
matrices, zero biases, plus a deliberately fragile He-uniform variant kept
for ablation), and Adam.
"""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .tensor import Tensor

LEAKY_SLOPE = 0.01


# -- initialization -----------------------------------------------------------

def glorot_uniform(shape, fan_in, fan_out, rng, dtype=T.DEFAULT_DTYPE):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_uniform(shape, fan_in, rng, dtype=T.DEFAULT_DTYPE):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def orthogonal(n, rng, dtype=T.DEFAULT_DTYPE):
    """Random n x n orthogonal matrix (QR with sign-fixed diagonal)."""
    a = rng.normal(size=(n, n))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q.astype(dtype)


def _param(data):
    return Tensor(data, requires_grad=True)


def namespaced(prefix, params):
    return {f"{prefix}.{k}": v for k, v in params.items()}


# -- layers ---------------------------------------------------------------------

class Conv2d:
    """2D cross-correlation layer with leaky-ReLU-friendly init."""

    def __init__(self, in_ch, out_ch, kernel, stride=(1, 1), padding="valid",
                 rng=None, scheme="glorot", dtype=T.DEFAULT_DTYPE):
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kh * kw
        fan_out = out_ch * kh * kw
        shape = (out_ch, in_ch, kh, kw)
        if scheme == "glorot":
            w = glorot_uniform(shape, fan_in, fan_out, rng, dtype)
            b = np.zeros(out_ch, dtype=dtype)
        elif scheme == "he":
            w = he_uniform(shape, fan_in, rng, dtype)
            b = he_uniform((out_ch,), fan_in, rng, dtype)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        self.w = _param(w)
        self.b = _param(b)

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def parameters(self):
        return {"weight": self.w, "bias": self.b}


class Dense:
    def __init__(self, in_features, out_features, rng=None, scheme="glorot",
                 dtype=T.DEFAULT_DTYPE):
        if scheme == "glorot":
            w = glorot_uniform((in_features, out_features), in_features, out_features, rng, dtype)
            b = np.zeros(out_features, dtype=dtype)
        elif scheme == "he":
            w = he_uniform((in_features, out_features), in_features, rng, dtype)
            b = he_uniform((out_features,), in_features, rng, dtype)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        self.w = _param(w)
        self.b = _param(b)

    def __call__(self, x):
        return T.matmul(x, self.w) + self.b

    def parameters(self):
        return {"weight": self.w, "bias": self.b}


def batch_norm_2d(x, gamma, beta, eps=1e-5):
    """Per-channel batch normalization over (N, H, W); batch statistics only.

    Kept solely for the residual-block ablation toggle; the default network
    never normalizes inside residual blocks.
    """
    axes = (0, 2, 3)
    mu = T.mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=axes, keepdims=True)
    return gamma * (centered / T.sqrt(var + eps)) + beta


class ResidualBlock:
    """Three stacked 3x1 time convolutions with an identity shortcut.

    Same padding keeps the time length, so input and output shapes match and
    the shortcut is a plain add before the final activation.
    """

    def __init__(self, channels, rng=None, scheme="glorot", batch_norm=False,
                 dtype=T.DEFAULT_DTYPE):
        self.convs = [Conv2d(channels, channels, (3, 1), padding="same",
                             rng=rng, scheme=scheme, dtype=dtype)
                      for _ in range(3)]
        self.batch_norm = batch_norm
        if batch_norm:
            self.gammas = [_param(np.ones((1, channels, 1, 1), dtype=dtype)) for _ in range(3)]
            self.betas = [_param(np.zeros((1, channels, 1, 1), dtype=dtype)) for _ in range(3)]

    def __call__(self, x):
        h = x
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if self.batch_norm:
                h = batch_norm_2d(h, self.gammas[i], self.betas[i])
            if i < len(self.convs) - 1:
                h = T.leaky_relu(h, LEAKY_SLOPE)
        return T.leaky_relu(h + x, LEAKY_SLOPE)

    def parameters(self):
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(namespaced(f"conv{i + 1}", conv.parameters()))
        if self.batch_norm:
            for i in range(3):
                out[f"bn{i + 1}.gamma"] = self.gammas[i]
                out[f"bn{i + 1}.beta"] = self.betas[i]
        return out


class InceptionV2:
    """Multi-branch convolution block, channel-concatenated.

    Branches: 1x1, 1x1 -> kxk, 1x1 -> kxk -> kxk (the factored 5x5 path),
    and max-pool -> 1x1. All convolutions use same padding so spatial dims
    are preserved and the concat is legal.
    """

    BRANCHES = ("b1", "b3", "b33", "pool")

    def __init__(self, in_ch, branch_ch, kernel=(3, 3), branches=BRANCHES,
                 rng=None, scheme="glorot", dtype=T.DEFAULT_DTYPE):
        unknown = set(branches) - set(self.BRANCHES)
        if unknown:
            raise ValueError(f"unknown inception branches {sorted(unknown)}")
        self.kernel = kernel
        self.branches = tuple(branches)
        self.out_channels = branch_ch * len(self.branches)
        mk = lambda ic, oc, k: Conv2d(ic, oc, k, padding="same", rng=rng,
                                      scheme=scheme, dtype=dtype)
        self.layers = {}
        if "b1" in self.branches:
            self.layers["b1"] = [mk(in_ch, branch_ch, (1, 1))]
        if "b3" in self.branches:
            self.layers["b3"] = [mk(in_ch, branch_ch, (1, 1)), mk(branch_ch, branch_ch, kernel)]
        if "b33" in self.branches:
            self.layers["b33"] = [mk(in_ch, branch_ch, (1, 1)),
                                  mk(branch_ch, branch_ch, kernel),
                                  mk(branch_ch, branch_ch, kernel)]
        if "pool" in self.branches:
            self.layers["pool"] = [mk(in_ch, branch_ch, (1, 1))]

    def __call__(self, x):
        outs = []
        for name in self.branches:
            h = x
            if name == "pool":
                h = T.max_pool2d(h, self.kernel, (1, 1), "same")
            for conv in self.layers[name]:
                h = T.leaky_relu(conv(h), LEAKY_SLOPE)
            outs.append(h)
        return outs[0] if len(outs) == 1 else T.concat(outs, axis=1)

    def parameters(self):
        out = {}
        for name in self.branches:
            for i, conv in enumerate(self.layers[name]):
                out.update(namespaced(f"{name}.conv{i + 1}", conv.parameters()))
        return out


class FcnnBlock:
    """Convolutional front end over (N, 1, T, 40) book windows.

    Sub-block 1 pairs price/volume columns with a 1x2 stride-(1,2)
    convolution and applies two 4x1 time convolutions; sub-block 2 repeats
    the pattern over the 20 remaining columns; sub-block 3 collapses the
    last 10 columns with a 1x10 kernel. Feature width runs 40 -> 20 -> 10
    -> 1; each valid 4x1 convolution shortens time by 3.
    """

    IN_WIDTH = 40

    def __init__(self, filters=16, rng=None, scheme="glorot", dtype=T.DEFAULT_DTYPE):
        mk = lambda ic, oc, k, s: Conv2d(ic, oc, k, stride=s, rng=rng,
                                         scheme=scheme, dtype=dtype)
        f = filters
        self.convs = [
            mk(1, f, (1, 2), (1, 2)),
            mk(f, f, (4, 1), (1, 1)),
            mk(f, f, (4, 1), (1, 1)),
            mk(f, f, (1, 2), (1, 2)),
            mk(f, f, (4, 1), (1, 1)),
            mk(f, f, (4, 1), (1, 1)),
            mk(f, f, (1, 10), (1, 1)),
        ]
        self.filters = f

    @staticmethod
    def out_time(t):
        """Time length after the four valid 4x1 convolutions."""
        return t - 12

    def __call__(self, x):
        if x.ndim != 4 or x.shape[3] != self.IN_WIDTH:
            raise ValueError(f"expected (N, 1, T, {self.IN_WIDTH}) input, got {x.shape}")
        h = x
        for conv in self.convs:
            h = T.leaky_relu(conv(h), LEAKY_SLOPE)
        return h

    def parameters(self):
        return {k: v for i, conv in enumerate(self.convs)
                for k, v in namespaced(f"conv{i + 1}", conv.parameters()).items()}


class GRU:
    """Gated recurrent unit over (N, T, D); returns the last hidden state.

    z = sigmoid(W_z x + U_z h + b_z)
    r = sigmoid(W_r x + U_r h + b_r)
    n = tanh(W_n x + U_n (r * h) + b_n)
    h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size, hidden_size, rng=None, scheme="glorot",
                 dtype=T.DEFAULT_DTYPE):
        d, h = input_size, hidden_size
        self.hidden_size = h
        if scheme == "glorot":
            w = np.concatenate([glorot_uniform((d, h), d, h, rng, dtype) for _ in range(3)], axis=1)
            u = np.concatenate([orthogonal(h, rng, dtype) for _ in range(3)], axis=1)
            b = np.zeros(3 * h, dtype=dtype)
        elif scheme == "he":
            w = he_uniform((d, 3 * h), d, rng, dtype)
            u = he_uniform((h, 3 * h), h, rng, dtype)
            b = he_uniform((3 * h,), d, rng, dtype)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        self.w = _param(w)
        self.u = _param(u)
        self.b = _param(b)

    def step(self, x_t, h):
        hs = self.hidden_size
        xw = T.matmul(x_t, self.w) + self.b
        hu = T.matmul(h, self.u[:, :2 * hs])
        z = T.sigmoid(xw[:, :hs] + hu[:, :hs])
        r = T.sigmoid(xw[:, hs:2 * hs] + hu[:, hs:2 * hs])
        n = T.tanh(xw[:, 2 * hs:] + T.matmul(r * h, self.u[:, 2 * hs:]))
        return (1.0 - z) * n + z * h

    def __call__(self, x):
        n, steps, _ = x.shape
        h = T.zeros((n, self.hidden_size), dtype=x.dtype)
        for t in range(steps):
            h = self.step(x[:, t, :], h)
        return h

    def parameters(self):
        return {"w": self.w, "u": self.u, "b": self.b}


class LSTM:
    """LSTM over (N, T, D); returns the last hidden state.

    Gate order in the fused matrices is input, forget, cell, output.
    """

    def __init__(self, input_size, hidden_size, rng=None, scheme="glorot",
                 dtype=T.DEFAULT_DTYPE):
        d, h = input_size, hidden_size
        self.hidden_size = h
        if scheme == "glorot":
            w = np.concatenate([glorot_uniform((d, h), d, h, rng, dtype) for _ in range(4)], axis=1)
            u = np.concatenate([orthogonal(h, rng, dtype) for _ in range(4)], axis=1)
            b = np.zeros(4 * h, dtype=dtype)
        elif scheme == "he":
            w = he_uniform((d, 4 * h), d, rng, dtype)
            u = he_uniform((h, 4 * h), h, rng, dtype)
            b = he_uniform((4 * h,), d, rng, dtype)
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
        self.w = _param(w)
        self.u = _param(u)
        self.b = _param(b)

    def step(self, x_t, state):
        h, c = state
        hs = self.hidden_size
        a = T.matmul(x_t, self.w) + T.matmul(h, self.u) + self.b
        i = T.sigmoid(a[:, :hs])
        f = T.sigmoid(a[:, hs:2 * hs])
        g = T.tanh(a[:, 2 * hs:3 * hs])
        o = T.sigmoid(a[:, 3 * hs:])
        c_next = f * c + i * g
        h_next = o * T.tanh(c_next)
        return h_next, c_next

    def __call__(self, x):
        n, steps, _ = x.shape
        h = T.zeros((n, self.hidden_size), dtype=x.dtype)
        c = T.zeros((n, self.hidden_size), dtype=x.dtype)
        for t in range(steps):
            h, c = self.step(x[:, t, :], (h, c))
        return h

    def parameters(self):
        return {"w": self.w, "u": self.u, "b": self.b}


# -- optimization ------------------------------------------------------------------

class Adam:
    """Adam with bias correction; epsilon is added outside the square root."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """Apply one update from the accumulated grads; skips non-finite ones."""
        grads = {}
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                warnings.warn(f"non-finite gradient for {k!r}; update skipped")
                return False
            grads[k] = g
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for k, p in self.params.items():
            g = grads[k]
            self._m[k] = self.beta1 * self._m[k] + (1.0 - self.beta1) * g
            self._v[k] = self.beta2 * self._v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[k] / bc1
            v_hat = self._v[k] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True
