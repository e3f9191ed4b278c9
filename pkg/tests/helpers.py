"""Shared builders for flow tests."""

import numpy as np

from flownull.flow import ActNorm, AffineCoupling, ConditionalFlow, ModelConfig


def mini_config(**kw):
    """Q = 2*4*4 = 32 model with two levels; small enough for dense Jacobians."""
    base = dict(channels=2, height=4, width=4, levels=2, steps=2, hidden=8,
                cond_widths=[4, 4], unet_base=4, unet_depth=1, seed=3)
    base.update(kw)
    return ModelConfig(**base)


def perturb(model, seed=0, scale=0.3, log_scale=0.5):
    """Give every coupling a non-trivial output layer and every actnorm a random affine map."""
    rng = np.random.default_rng(seed)
    for level in model.flow.levels:
        for layer in level.layers:
            if isinstance(layer, AffineCoupling):
                w = layer.c3.w
                w.data = (rng.standard_normal(w.shape) * scale / np.sqrt(w.shape[1] * 9)).astype(w.dtype)
                layer.c3.b.data = (rng.standard_normal(layer.c3.b.shape) * scale).astype(w.dtype)
            elif isinstance(layer, ActNorm):
                layer.scale.data = np.exp(rng.uniform(-log_scale, log_scale, layer.scale.shape)).astype(layer.scale.dtype)
                layer.bias.data = rng.normal(0, 0.3, layer.bias.shape).astype(layer.bias.dtype)
                layer.initialized = True
    return model


def identity(model):
    for level in model.flow.levels:
        for layer in level.layers:
            if isinstance(layer, ActNorm):
                layer.scale.data[...] = 1
                layer.bias.data[...] = 0
                layer.initialized = True
    return model


def mini_model(dtype=np.float64, seed=0, **kw):
    model = ConditionalFlow(mini_config(**kw)).astype(dtype)
    return perturb(model, seed=seed)


def numeric_jacobian(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        cols.append((f(x + e) - f(x - e)).ravel() / (2 * h))
    return np.stack(cols, axis=1)
