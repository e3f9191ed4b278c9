"""Invertible layers.

Every layer maps in the normalizing direction (data -> latent) with
``forward(x, cond) -> (y, logdet)`` and back with ``inverse(y, cond)``.
``logdet`` is per-sample, shape ``(N,)`` or broadcastable to it.
"""

import numpy as np

from flownull.core import tensor as T
from flownull.core.linalg import rand_orthogonal
from flownull.core.tensor import Tensor


class Module:
    """Holds named parameter tensors; children are walked for ``parameters``."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]


class Conv(Module):
    def __init__(self, cin, cout, k, rng, zero=False, gain=np.sqrt(2.0)):
        if zero:
            w = np.zeros((cout, cin, k, k), np.float32)
        else:
            w = rng.standard_normal((cout, cin, k, k)) * gain / np.sqrt(cin * k * k)
        self.w = Tensor(w.astype(np.float32), requires_grad=True)
        self.b = Tensor(np.zeros(cout, np.float32), requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b)


class ActNorm(Module):
    """Per-channel ``y = s * (x + b)`` with data-dependent initialisation."""

    kind = "actnorm"

    def __init__(self, channels):
        self.scale = Tensor(np.ones((1, channels, 1, 1), np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros((1, channels, 1, 1), np.float32), requires_grad=True)
        self.initialized = False

    def initialize(self, x):
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = x.std(axis=(0, 2, 3))
        self.bias.data[...] = -mean.reshape(self.bias.shape)
        self.scale.data[...] = (1.0 / (std + 1e-6)).reshape(self.scale.shape)
        self.initialized = True

    def _check(self):
        if np.any(self.scale.data == 0):
            raise ValueError("actnorm scale has a zero entry; the layer is not invertible")

    def forward(self, x, cond=None):
        if not self.initialized:
            self.initialize(x.data)
        self._check()
        y = (x + self.bias) * self.scale
        hw = x.shape[2] * x.shape[3]
        logdet = T.log_abs(self.scale).sum() * float(hw)
        return y, logdet

    def inverse(self, y, cond=None):
        if not self.initialized:
            raise RuntimeError("actnorm used in the generative direction before initialisation")
        self._check()
        return y / self.scale - self.bias


class Orth1x1(Module):
    """Fixed orthogonal channel mixing; never trained, log-det exactly 0."""

    kind = "orth1x1"

    def __init__(self, channels, seed):
        self.seed = int(seed)
        self.q = rand_orthogonal(channels, self.seed, dtype=np.float64)

    def forward(self, x, cond=None):
        return T.channel_mix(x, self.q.astype(x.dtype)), 0.0

    def inverse(self, y, cond=None):
        return T.channel_mix(y, self.q.T.astype(y.dtype))


class AffineCoupling(Module):
    """One-sided conditional affine coupling.

    The first half of the channels passes through; the second half is scaled
    and shifted by a subnet of (first half, conditioning features). Scales
    are soft-clamped to ``[-s_max, s_max]`` through ``tanh``.
    """

    kind = "coupling"

    def __init__(self, channels, cond_channels, rng, hidden=64, s_max=2.0):
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels")
        self.ca = channels // 2
        self.cb = channels - self.ca
        self.cond_channels = cond_channels
        self.s_max = float(s_max)
        self.c1 = Conv(self.ca + cond_channels, hidden, 3, rng)
        self.c2 = Conv(hidden, hidden, 1, rng)
        self.c3 = Conv(hidden, 2 * self.cb, 3, rng, zero=True)

    def _scale_shift(self, xa, cond):
        if self.cond_channels:
            if cond is None:
                raise ValueError("conditional coupling called without features")
            if cond.shape[2:] != xa.shape[2:] or cond.shape[0] != xa.shape[0]:
                raise ValueError(f"conditioning shape {cond.shape} does not match input {xa.shape}")
            h = T.concat([xa, cond], axis=1)
        else:
            h = xa
        h = T.leaky_relu(self.c1(h))
        h = T.leaky_relu(self.c2(h))
        raw = self.c3(h)
        s_raw = T.narrow(raw, 1, 0, self.cb)
        t = T.narrow(raw, 1, self.cb, self.cb)
        s = T.tanh(s_raw * (1.0 / self.s_max)) * self.s_max
        return s, t

    def forward(self, x, cond=None):
        xa = T.narrow(x, 1, 0, self.ca)
        xb = T.narrow(x, 1, self.ca, self.cb)
        s, t = self._scale_shift(xa, cond)
        yb = xb * T.exp(s) + t
        return T.concat([xa, yb], axis=1), T.tsum(s, axis=(1, 2, 3))

    def inverse(self, y, cond=None):
        ya = T.narrow(y, 1, 0, self.ca)
        yb = T.narrow(y, 1, self.ca, self.cb)
        s, t = self._scale_shift(ya, cond)
        xb = (yb - t) * T.exp(-s)
        return T.concat([ya, xb], axis=1)


def squeeze(x):
    """2x2 space-to-depth; volume preserving (log-det 0)."""
    return T.space_to_depth(x)


def unsqueeze(x):
    return T.depth_to_space(x)


def split(x):
    """Return ``(kept, emitted)`` channel halves."""
    c = x.shape[1]
    if c % 2:
        raise ValueError(f"split needs an even channel count, got {c}")
    return T.narrow(x, 1, 0, c // 2), T.narrow(x, 1, c // 2, c // 2)


def merge(kept, emitted):
    return T.concat([kept, emitted], axis=1)
