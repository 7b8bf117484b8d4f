"""Minimal neural-net layers with explicit forward/backward passes.

Layers are functional: ``forward`` returns ``(output, cache)`` and
``backward(cache, grad_out)`` returns the input gradient while
accumulating parameter gradients in place.  The explicit cache makes
weight sharing trivial (call the same layer twice, backprop each cache)
and keeps every pass a pure function of arrays, which the
finite-difference gradient checks rely on.

Everything runs in the dtype the layer was built with (float64 by
default).  Activations are SiLU throughout: smooth, so central
finite differences converge cleanly.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError


class Param:
    """A named trainable array with an accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


class Layer:
    def parameters(self) -> list[Param]:
        raise NotImplementedError


def fan_in_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


class Linear(Layer):
    def __init__(self, name, d_in, d_out, rng, dtype=np.float64, zero_init=False):
        if zero_init:
            w = np.zeros((d_out, d_in), dtype=dtype)
        else:
            w = fan_in_normal(rng, (d_out, d_in), d_in, dtype)
        self.w = Param(f"{name}.w", w)
        self.b = Param(f"{name}.b", np.zeros(d_out, dtype=dtype))

    def parameters(self):
        return [self.w, self.b]

    def forward(self, x):
        # x: [B, d_in]
        y = x @ self.w.value.T + self.b.value
        return y, x

    def backward(self, cache, dy):
        x = cache
        self.w.grad += dy.T @ x
        self.b.grad += dy.sum(axis=0)
        return dy @ self.w.value


class Conv2d(Layer):
    """Same-padded stride-1 convolution via im2col."""

    def __init__(self, name, c_in, c_out, k, rng, dtype=np.float64):
        fan_in = c_in * k * k
        self.k = k
        self.c_in = c_in
        self.c_out = c_out
        self.w = Param(f"{name}.w", fan_in_normal(rng, (c_out, c_in, k, k), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(c_out, dtype=dtype))

    def parameters(self):
        return [self.w, self.b]

    def _im2col(self, x):
        # [B, C, H, W] -> contiguous [B, C*k*k, H*W] without big transposes
        b, c, h, w = x.shape
        k = self.k
        p = k // 2
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((b, c, k, k, h, w), dtype=x.dtype)
        for ki in range(k):
            for kj in range(k):
                cols[:, :, ki, kj] = x[:, :, ki : ki + h, kj : kj + w]
        return cols.reshape(b, c * k * k, h * w)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"expected [B, {self.c_in}, H, W], got {x.shape}")
        b, _, h, w = x.shape
        cols = self._im2col(x)
        wf = self.w.value.reshape(self.c_out, -1)
        y = np.matmul(wf, cols) + self.b.value[:, None]
        return y.reshape(b, self.c_out, h, w), (cols, x.shape)

    def backward(self, cache, dy):
        cols, x_shape = cache
        b, c, h, w = x_shape
        k = self.k
        p = k // 2
        dyf = dy.reshape(b, self.c_out, h * w)
        self.w.grad += np.matmul(dyf, cols.transpose(0, 2, 1)).sum(axis=0).reshape(
            self.w.value.shape
        )
        self.b.grad += dyf.sum(axis=(0, 2))
        wf = self.w.value.reshape(self.c_out, -1)
        dcols = np.matmul(wf.T, dyf).reshape(b, c, k, k, h, w)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, :, ki : ki + h, kj : kj + w] += dcols[:, :, ki, kj]
        if p:
            return np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w])
        return dxp


class GroupNorm(Layer):
    def __init__(self, name, channels, groups, dtype=np.float64, eps=1e-5):
        if channels % groups:
            raise ShapeError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.channels = channels
        self.eps = eps
        self.gamma = Param(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Param(f"{name}.beta", np.zeros(channels, dtype=dtype))

    def parameters(self):
        return [self.gamma, self.beta]

    def forward(self, x):
        b, c, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, c // g, h, w)
        mu = xg.mean(axis=(2, 3, 4), keepdims=True)
        var = xg.var(axis=(2, 3, 4), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = ((xg - mu) * inv).reshape(b, c, h, w)
        y = xhat * self.gamma.value[None, :, None, None] + self.beta.value[None, :, None, None]
        return y, (xhat, inv)

    def backward(self, cache, dy):
        xhat, inv = cache
        b, c, h, w = dy.shape
        g = self.groups
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = (dy * self.gamma.value[None, :, None, None]).reshape(b, g, c // g, h, w)
        xhat_g = xhat.reshape(b, g, c // g, h, w)
        m1 = dxhat.mean(axis=(2, 3, 4), keepdims=True)
        m2 = (dxhat * xhat_g).mean(axis=(2, 3, 4), keepdims=True)
        dx = (dxhat - m1 - xhat_g * m2) * inv
        return dx.reshape(b, c, h, w)


def silu(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return x * s, (x, s)


def silu_backward(cache, dy):
    x, s = cache
    return dy * s * (1.0 + x * (1.0 - s))


def avg_pool2(x):
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial dims, got {x.shape}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(dy):
    return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) * 0.25


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dy):
    b, c, h, w = dy.shape
    return dy.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
