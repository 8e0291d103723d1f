"""From-scratch 3D CNN layers with exact analytic gradients.

Internally activations are kept channel-major, shape (C, N, D, H, W): each
channel is a contiguous block, which makes the im2col slab copies and the
(C_out x K) @ (K x M) GEMM run at memory speed on a single core. The
public functional ops at the bottom of this file accept the conventional
(N, C, D, H, W) layout and adapt.

Convolutions are valid (no implicit padding) cross-correlations; a layer
may request explicit zero padding via ``pad``. All reductions accumulate
in float64 regardless of the parameter dtype.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Conv3d",
    "ReLU",
    "BatchNorm",
    "MaxPool3d",
    "ConcatSkip",
    "Flatten",
    "Linear",
    "conv3d_forward",
    "conv3d_backward",
    "relu",
    "concat_skip",
]


def _im2col(xp: np.ndarray, kernel: int, cols: np.ndarray, out_spatial) -> None:
    """Fill cols (C*k^3, N*D*H*W) from padded activations xp (C, N, Dp, Hp, Wp).

    Row order is (c, dz, dy, dx), matching a row-major reshape of weights
    stored as (C_out, C_in, kz, ky, kx).
    """
    d, h, w = out_spatial
    n = xp.shape[1]
    i = 0
    for c in range(xp.shape[0]):
        for dz in range(kernel):
            for dy in range(kernel):
                for dx in range(kernel):
                    cols[i].reshape(n, d, h, w)[...] = xp[c, :, dz : dz + d, dy : dy + h, dx : dx + w]
                    i += 1


def _col2im(gcols: np.ndarray, kernel: int, gxp: np.ndarray, out_spatial) -> None:
    """Scatter-add cols-layout gradients back onto the padded input grad."""
    d, h, w = out_spatial
    n = gxp.shape[1]
    i = 0
    for c in range(gxp.shape[0]):
        for dz in range(kernel):
            for dy in range(kernel):
                for dx in range(kernel):
                    gxp[c, :, dz : dz + d, dy : dy + h, dx : dx + w] += gcols[i].reshape(n, d, h, w)
                    i += 1


class Layer:
    """Minimal layer protocol: forward caches what backward needs."""

    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def out_shape(self, in_shape):
        raise NotImplementedError

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv3d(Layer):
    """3D cross-correlation, stride 1, optional explicit zero padding."""

    def __init__(self, in_ch, out_ch, kernel=3, pad=0, dtype=np.float32, rng=None):
        super().__init__()
        self.in_ch, self.out_ch, self.kernel, self.pad = in_ch, out_ch, kernel, pad
        self.dtype = np.dtype(dtype)
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel**3
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, kernel, kernel, kernel))
        self.params = {"w": w.astype(self.dtype), "b": np.zeros(out_ch, self.dtype)}
        self.zero_grads()
        self._cols = None
        self._cache = None

    def out_shape(self, in_shape):
        c, n, d, h, w = in_shape
        if c != self.in_ch:
            raise ValueError(f"conv expects {self.in_ch} channels, got {c}")
        k, p = self.kernel, self.pad
        od, oh, ow = d + 2 * p - k + 1, h + 2 * p - k + 1, w + 2 * p - k + 1
        if min(od, oh, ow) < 1:
            raise ValueError(f"kernel {k} larger than padded input {(d, h, w)} with pad {p}")
        return (self.out_ch, n, od, oh, ow)

    def _padded(self, x):
        if self.pad == 0:
            return x
        p = self.pad
        return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))

    def forward(self, x, training=False):
        out_c, n, od, oh, ow = self.out_shape(x.shape)
        xp = self._padded(np.ascontiguousarray(x, dtype=self.dtype))
        k = self.kernel
        m = n * od * oh * ow
        kk = self.in_ch * k**3
        if self._cols is None or self._cols.shape != (kk, m) or self._cols.dtype != self.dtype:
            self._cols = np.empty((kk, m), self.dtype)
        _im2col(xp, k, self._cols, (od, oh, ow))
        wmat = self.params["w"].reshape(out_c, kk)
        out = wmat @ self._cols
        out += self.params["b"][:, None]
        if training:
            self._cache = (xp.shape, (od, oh, ow))
        return out.reshape(out_c, n, od, oh, ow)

    def backward(self, g):
        xp_shape, out_spatial = self._cache
        out_c = self.out_ch
        gm = np.ascontiguousarray(g, dtype=self.dtype).reshape(out_c, -1)
        kk = self._cols.shape[0]
        self.grads["w"] += (gm @ self._cols.T).reshape(self.params["w"].shape)
        self.grads["b"] += gm.sum(axis=1, dtype=np.float64).astype(self.dtype)
        gcols = self.params["w"].reshape(out_c, kk).T @ gm
        gxp = np.zeros(xp_shape, self.dtype)
        _col2im(gcols, self.kernel, gxp, out_spatial)
        p = self.pad
        if p:
            return gxp[:, :, p:-p, p:-p, p:-p]
        return gxp


class ReLU(Layer):
    """max(x, 0); gradient passes where x >= 0 (subgradient at 0 taken as 1)."""

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, training=False):
        y = np.maximum(x, 0)
        if training:
            self._mask = x >= 0
        return y

    def backward(self, g):
        return g * self._mask


class BatchNorm(Layer):
    """Per-channel batch normalization with learnable scale/shift.

    Train mode normalizes with biased batch statistics and blends the
    running stats with momentum 0.9; eval mode normalizes with the stored
    running stats. The stored running variance is clamped at >= eps.
    """

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.dtype = np.dtype(dtype)
        self.params = {
            "gamma": np.ones(channels, self.dtype),
            "beta": np.zeros(channels, self.dtype),
        }
        self.running_mean = np.zeros(channels, self.dtype)
        self.running_var = np.ones(channels, self.dtype)
        self.zero_grads()

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise ValueError(f"batchnorm expects {self.channels} channels, got {in_shape[0]}")
        return in_shape

    def _reshape_stats(self, s, ndim):
        return s.reshape((self.channels,) + (1,) * (ndim - 1))

    def forward(self, x, training=False):
        axes = tuple(range(1, x.ndim))
        if training:
            mean = x.mean(axis=axes, dtype=np.float64)
            var = x.var(axis=axes, dtype=np.float64)
            self.running_mean[...] = self.momentum * self.running_mean + (1 - self.momentum) * mean.astype(self.dtype)
            self.running_var[...] = self.momentum * self.running_var + (1 - self.momentum) * var.astype(self.dtype)
            np.maximum(self.running_var, self.eps, out=self.running_var)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        rstd = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._reshape_stats(mean.astype(x.dtype), x.ndim)) * self._reshape_stats(
            rstd.astype(x.dtype), x.ndim
        )
        if training:
            self._cache = (xhat, rstd.astype(x.dtype))
        return self._reshape_stats(self.params["gamma"], x.ndim) * xhat + self._reshape_stats(
            self.params["beta"], x.ndim
        )

    def backward(self, g):
        xhat, rstd = self._cache
        axes = tuple(range(1, g.ndim))
        m = g[0].size
        sum_g = g.sum(axis=axes, dtype=np.float64)
        sum_gx = (g * xhat).sum(axis=axes, dtype=np.float64)
        self.grads["gamma"] += sum_gx.astype(self.dtype)
        self.grads["beta"] += sum_g.astype(self.dtype)
        coef = self._reshape_stats((self.params["gamma"] * rstd).astype(g.dtype), g.ndim) / m
        gx = coef * (
            m * g
            - self._reshape_stats(sum_g.astype(g.dtype), g.ndim)
            - xhat * self._reshape_stats(sum_gx.astype(g.dtype), g.ndim)
        )
        return gx


class MaxPool3d(Layer):
    """Non-overlapping max pooling with a cubic window (first-max tie rule)."""

    def __init__(self, window=2):
        super().__init__()
        self.window = window

    def out_shape(self, in_shape):
        c, n, d, h, w = in_shape
        k = self.window
        if d % k or h % k or w % k:
            raise ValueError(f"spatial dims {(d, h, w)} not divisible by pool window {k}")
        return (c, n, d // k, h // k, w // k)

    def forward(self, x, training=False):
        c, n, d, h, w = x.shape
        k = self.window
        xr = x.reshape(c, n, d // k, k, h // k, k, w // k, k)
        xt = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 6, 3, 5, 7))
        flat = xt.reshape(c, n, d // k, h // k, w // k, k**3)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if training:
            self._cache = (idx.astype(np.int8), x.shape)
        return y

    def backward(self, g):
        idx, (c, n, d, h, w) = self._cache
        k = self.window
        z = np.zeros((c, n, d // k, h // k, w // k, k**3), g.dtype)
        np.put_along_axis(z, idx[..., None].astype(np.int64), g[..., None], axis=-1)
        zr = z.reshape(c, n, d // k, h // k, w // k, k, k, k)
        return np.ascontiguousarray(zr.transpose(0, 1, 2, 5, 3, 6, 4, 7)).reshape(c, n, d, h, w)


class ConcatSkip(Layer):
    """Channel concatenation of an earlier (lower) feature map with the trunk.

    The skip source is max-pooled by factors of two until its spatial dims
    match the trunk, then center-cropped if a residual mismatch remains.
    Output channels are ordered [skip, trunk].
    """

    def __init__(self, source_index: int):
        super().__init__()
        self.source_index = source_index
        self._pools: list[MaxPool3d] = []

    def out_shape_pair(self, low_shape, high_shape):
        c_l, n_l = low_shape[0], low_shape[1]
        c_h, n_h, d, h, w = high_shape
        if n_l != n_h:
            raise ValueError("skip and trunk batch sizes differ")
        sd, sh, sw = low_shape[2:]
        while sd >= 2 * d and sh >= 2 * h and sw >= 2 * w and sd % 2 == 0:
            sd, sh, sw = sd // 2, sh // 2, sw // 2
        if sd < d or sh < h or sw < w:
            raise ValueError(f"skip spatial {low_shape[2:]} cannot reach trunk {(d, h, w)}")
        return (c_l + c_h, n_h, d, h, w)

    def forward_pair(self, low, high, training=False):
        d, h, w = high.shape[2:]
        self._pools = []
        self._pool_trace = []
        while low.shape[2] >= 2 * d and low.shape[3] >= 2 * h and low.shape[4] >= 2 * w:
            pool = MaxPool3d(2)
            low = pool.forward(low, training=training)
            self._pools.append(pool)
        sd, sh, sw = low.shape[2:]
        if (sd, sh, sw) != (d, h, w):
            if sd < d or sh < h or sw < w:
                raise ValueError(f"skip spatial {low.shape[2:]} smaller than trunk {(d, h, w)}")
            z0, y0, x0 = (sd - d) // 2, (sh - h) // 2, (sw - w) // 2
            self._crop = (low.shape, (z0, y0, x0))
            low = low[:, :, z0 : z0 + d, y0 : y0 + h, x0 : x0 + w]
        else:
            self._crop = None
        self._split = low.shape[0]
        return np.concatenate([low, high], axis=0)

    def backward_pair(self, g):
        g_low, g_high = g[: self._split], g[self._split :]
        if self._crop is not None:
            shape, (z0, y0, x0) = self._crop
            full = np.zeros(shape, g.dtype)
            d, h, w = g_low.shape[2:]
            full[:, :, z0 : z0 + d, y0 : y0 + h, x0 : x0 + w] = g_low
            g_low = full
        for pool in reversed(self._pools):
            g_low = pool.backward(g_low)
        return g_low, g_high


class Flatten(Layer):
    """(C, N, D, H, W) -> (C*D*H*W, N); feature order is (c, z, y, x)."""

    def out_shape(self, in_shape):
        c, n = in_shape[0], in_shape[1]
        feat = c * int(np.prod(in_shape[2:]))
        return (feat, n)

    def forward(self, x, training=False):
        c, n = x.shape[0], x.shape[1]
        if training:
            self._shape = x.shape
        return np.ascontiguousarray(x.reshape(c, n, -1).transpose(0, 2, 1)).reshape(-1, n)

    def backward(self, g):
        c, n = self._shape[0], self._shape[1]
        return np.ascontiguousarray(g.reshape(c, -1, n).transpose(0, 2, 1)).reshape(self._shape)


class Linear(Layer):
    """Fully connected layer on (features, N) activations."""

    def __init__(self, in_features, out_features, dtype=np.float32, rng=None, zero_init=False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.dtype = np.dtype(dtype)
        if zero_init:
            w = np.zeros((out_features, in_features))
        else:
            rng = rng or np.random.default_rng(0)
            w = rng.normal(0.0, np.sqrt(2.0 / in_features), size=(out_features, in_features))
        self.params = {"w": w.astype(self.dtype), "b": np.zeros(out_features, self.dtype)}
        self.zero_grads()

    def out_shape(self, in_shape):
        if in_shape[0] != self.in_features:
            raise ValueError(f"fc expects {self.in_features} features, got {in_shape[0]}")
        return (self.out_features, in_shape[1])

    def forward(self, x, training=False):
        if training:
            self._x = x
        return self.params["w"] @ x + self.params["b"][:, None]

    def backward(self, g):
        self.grads["w"] += g @ self._x.T
        self.grads["b"] += g.sum(axis=1, dtype=np.float64).astype(self.dtype)
        return self.params["w"].T @ g


# ---------------------------------------------------------------------------
# public functional ops on the conventional (N, C, D, H, W) layout


def relu(x):
    """Elementwise max(x, 0)."""
    return np.maximum(np.asarray(x), 0)


def conv3d_forward(x, w, b, stride=1):
    """Valid (no padding) cross-correlation plus bias.

    x: (N, C_in, D, H, W); w: (C_out, C_in, k, k, k); b: (C_out,).
    stride > 1 subsamples the stride-1 output grid.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    b = np.asarray(b)
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape}, w {w.shape}")
    layer = Conv3d(w.shape[1], w.shape[0], kernel=w.shape[2], pad=0, dtype=x.dtype)
    layer.params["w"] = w.astype(layer.dtype, copy=False)
    layer.params["b"] = b.astype(layer.dtype, copy=False)
    xm = np.ascontiguousarray(np.moveaxis(x, 1, 0))
    out = layer.forward(xm, training=False)
    out = np.moveaxis(out, 0, 1)
    if stride > 1:
        out = out[:, :, ::stride, ::stride, ::stride]
    return np.ascontiguousarray(out)


def conv3d_backward(grad_out, x, w):
    """Gradients of conv3d_forward (stride 1) w.r.t. input, weights, bias."""
    x = np.asarray(x)
    w = np.asarray(w)
    layer = Conv3d(w.shape[1], w.shape[0], kernel=w.shape[2], pad=0, dtype=x.dtype)
    layer.params["w"] = w.astype(layer.dtype, copy=False)
    layer.params["b"] = np.zeros(w.shape[0], layer.dtype)
    layer.zero_grads()
    xm = np.ascontiguousarray(np.moveaxis(x, 1, 0))
    out = layer.forward(xm, training=True)
    g = np.ascontiguousarray(np.moveaxis(np.asarray(grad_out), 1, 0))
    if g.shape != out.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match output")
    gx = layer.backward(g)
    return np.ascontiguousarray(np.moveaxis(gx, 0, 1)), layer.grads["w"], layer.grads["b"]


def concat_skip(low, high):
    """Concatenate along channels after pooling/cropping low to match high.

    Both arguments use (N, C, D, H, W); returns (N, C_low' + C_high, D, H, W).
    """
    lo = np.ascontiguousarray(np.moveaxis(np.asarray(low), 1, 0))
    hi = np.ascontiguousarray(np.moveaxis(np.asarray(high), 1, 0))
    layer = ConcatSkip(source_index=0)
    out = layer.forward_pair(lo, hi, training=False)
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))
