"""Differentiable building blocks with explicit analytic backward passes.

All layers operate on channel-last activations [B, T, N, F] (batch, frames,
joints, features); this keeps channel mixing a plain matmul.  Forward caches
whatever backward needs on the instance, so a layer instance must not be
shared between concurrent forward/backward chains.

Public helpers at the bottom expose the channel-first [B, F, T, N] contract
used by callers and tests.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .errors import ConfigError, ShapeError


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    if rng is None:
        return np.zeros(shape, dtype=dtype)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def out_frames(t: int, stride: int) -> int:
    """Frames after a same-padded temporal op with the given stride."""
    return (t - 1) // stride + 1


class Layer:
    """Minimal parameter container; subclasses add arrays via add_param."""

    def __init__(self):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}

    def add_param(self, name: str, arr: np.ndarray) -> np.ndarray:
        self.params[name] = arr
        return arr

    def add_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        self.buffers[name] = arr
        return arr


def _rows(x):
    """Collapse leading axes to rows; copies only when non-contiguous."""
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def channel_sum(x):
    """Per-channel sum over all leading axes, as a BLAS matvec.

    Much faster than ndarray.sum(axis=(0,1,2)) for channel-last layouts.
    """
    rows = _rows(x)
    return np.ones(rows.shape[0], dtype=rows.dtype) @ rows


def channel_dot(a, b):
    """Per-channel sum of a*b over all leading axes without a temporary."""
    return np.einsum("rf,rf->f", _rows(a), _rows(b))


class Linear(Layer):
    """y = x W + b on [B, F] feature rows."""

    def __init__(self, in_dim, out_dim, rng, dtype):
        super().__init__()
        self.w = self.add_param("W", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x):
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy):
        self.grads = {"W": self._x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.w.T


class GraphConv(Layer):
    """Joint mixing by a fixed normalized adjacency, then channel mixing.

    Per (batch, frame): out = A · H · W with H the [N, F] joint-feature
    slice.  Linear; activation lives at the block level.
    """

    def __init__(self, adjacency, in_dim, out_dim, rng, dtype):
        super().__init__()
        self.adj = adjacency.astype(dtype)
        self.w = self.add_param("W", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype))

    @staticmethod
    def _joint_mix(adj, x):
        # One large matmul over [N, B*T*F] beats B*T tiny batched products.
        b, t, n, f = x.shape
        z = np.ascontiguousarray(x.transpose(2, 0, 1, 3)).reshape(n, -1)
        return np.ascontiguousarray((adj @ z).reshape(n, b, t, f).transpose(1, 2, 0, 3))

    def forward(self, x):
        b, t, n, f = x.shape
        if n != self.adj.shape[0]:
            raise ShapeError(f"input has {n} joints, adjacency is {self.adj.shape[0]}x{self.adj.shape[0]}")
        if f != self.w.shape[0]:
            raise ShapeError(f"input has {f} channels, weight expects {self.w.shape[0]}")
        mixed = self._joint_mix(self.adj, x)
        self._mixed = mixed
        return mixed @ self.w

    def backward(self, dy):
        m = self._mixed
        self.grads = {"W": _rows(m).T @ _rows(dy)}
        dmixed = dy @ self.w.T
        return self._joint_mix(self.adj.T, dmixed)


class PointwiseConv(Layer):
    """1x1 conv over channels, optional temporal stride (frame subsampling)."""

    def __init__(self, in_dim, out_dim, rng, dtype, stride=1):
        super().__init__()
        self.stride = stride
        self.w = self.add_param("W", glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x):
        xs = x[:, ::self.stride] if self.stride > 1 else x
        self._xs, self._in_shape = xs, x.shape
        return xs @ self.w + self.b

    def backward(self, dy):
        self.grads = {
            "W": _rows(self._xs).T @ _rows(dy),
            "b": channel_sum(dy),
        }
        dxs = dy @ self.w.T
        if self.stride == 1:
            return dxs
        dx = np.zeros(self._in_shape, dtype=dy.dtype)
        dx[:, ::self.stride] = dxs
        return dx


class TemporalConv(Layer):
    """Depth k temporal convolution, same padding, dilation and stride.

    Implemented as one matmul over tap-concatenated inputs: the k dilated
    time shifts are gathered side by side on the channel axis and hit a
    [k*F_in, F_out] reshaped weight.
    """

    def __init__(self, in_dim, out_dim, kernel, dilation, stride, rng, dtype):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError("temporal kernel must be odd for same padding")
        self.in_dim = in_dim
        self.kernel, self.dilation, self.stride = kernel, dilation, stride
        self.pad = dilation * (kernel - 1) // 2
        self.w = self.add_param(
            "W", glorot_uniform(rng, (kernel, in_dim, out_dim), in_dim * kernel, out_dim * kernel, dtype))
        self.b = self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def _tap_slice(self, i, t_out):
        start = i * self.dilation
        return slice(start, start + self.stride * (t_out - 1) + 1, self.stride)

    def forward(self, x):
        b, t, n, f = x.shape
        t_out = out_frames(t, self.stride)
        xp = np.zeros((b, t + 2 * self.pad, n, f), dtype=x.dtype)
        xp[:, self.pad:self.pad + t] = x
        taps = np.concatenate(
            [xp[:, self._tap_slice(i, t_out)] for i in range(self.kernel)], axis=-1)
        self._taps, self._t, self._t_out, self._pad_t = taps, t, t_out, t + 2 * self.pad
        return taps @ self.w.reshape(self.kernel * f, -1) + self.b

    def backward(self, dy):
        k, f, t_out = self.kernel, self.in_dim, self._t_out
        w_flat = self.w.reshape(k * f, -1)
        self.grads = {
            "W": (_rows(self._taps).T @ _rows(dy)).reshape(self.w.shape),
            "b": channel_sum(dy),
        }
        dtaps = dy @ w_flat.T
        dxp = np.zeros((dy.shape[0], self._pad_t, dy.shape[2], f), dtype=dy.dtype)
        for i in range(k):
            dxp[:, self._tap_slice(i, t_out)] += dtaps[..., i * f:(i + 1) * f]
        return dxp[:, self.pad:self.pad + self._t]


class TemporalMaxPool(Layer):
    """Window-3 temporal max pooling, same padding, stride; no parameters.

    Gradient routes to the first maximum of each window (matching argmax
    tie-breaking), so backward stays deterministic.
    """

    window = 3

    def __init__(self, stride):
        super().__init__()
        self.stride = stride
        self.pad = 1

    def _taps(self, x):
        b, t, n, f = x.shape
        t_out = out_frames(t, self.stride)
        xp = np.full((b, t + 2 * self.pad, n, f), -np.inf, dtype=x.dtype)
        xp[:, self.pad:self.pad + t] = x
        return [xp[:, i:i + self.stride * (t_out - 1) + 1:self.stride]
                for i in range(self.window)], t, t_out

    def forward(self, x):
        taps, t, t_out = self._taps(x)
        y = np.maximum(np.maximum(taps[0], taps[1]), taps[2])
        self._taps_cache, self._y, self._t, self._t_out = taps, y, t, t_out
        return y

    def backward(self, dy):
        taps, y = self._taps_cache, self._y
        dxp = np.zeros((dy.shape[0], self._t + 2 * self.pad) + dy.shape[2:], dtype=dy.dtype)
        taken = np.zeros(y.shape, dtype=bool)
        for i in range(self.window):
            hit = (taps[i] == y) & ~taken
            taken |= hit
            dxp[:, i:i + self.stride * (self._t_out - 1) + 1:self.stride] += np.where(hit, dy, 0.0)
        return dxp[:, self.pad:self.pad + self._t]

    def tie_margin(self, x) -> float:
        """Gap between the window max and runner-up; small gaps break FD checks."""
        taps, _, _ = self._taps(x)
        stacked = np.stack(taps)
        top2 = np.sort(stacked, axis=0)[-2:]
        gaps = top2[1] - top2[0]
        return float(gaps[np.isfinite(gaps)].min())


class BatchNorm(Layer):
    """Per-channel normalization over (batch, frames, joints).

    Training mode uses batch statistics and updates running estimates in
    place; eval mode applies the frozen running statistics.
    """

    def __init__(self, dim, dtype, momentum=0.1, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(dim, dtype=dtype))
        self.running_mean = self.add_buffer("running_mean", np.zeros(dim, dtype=dtype))
        self.running_var = self.add_buffer("running_var", np.ones(dim, dtype=dtype))

    def forward(self, x, train):
        self._train = train
        m = x.shape[0] * x.shape[1] * x.shape[2]
        if train:
            mean = channel_sum(x) / m
            centered = x - mean
            var = channel_dot(centered, centered) / m
            self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean, var = self.running_mean, self.running_var
            centered = x - mean
        ivar = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = centered
        xhat *= ivar
        self._xhat, self._ivar, self._m = xhat, ivar, m
        return self.gamma * xhat + self.beta

    def backward(self, dy):
        xhat, ivar = self._xhat, self._ivar
        sum_dy = channel_sum(dy)
        sum_dy_xhat = channel_dot(dy, xhat)
        self.grads = {"gamma": sum_dy_xhat, "beta": sum_dy}
        gi = self.gamma * ivar
        if not self._train:
            return dy * gi
        m = self._m
        dx = dy * gi
        dx -= xhat * (gi * sum_dy_xhat / m)
        dx -= gi * sum_dy / m
        return dx


class MultiScaleTemporal(Layer):
    """Four same-width temporal branches concatenated on the channel axis.

    Each branch first reduces channels to F/4 with a 1x1 conv, then applies
    kernel-5 convolutions at dilations 1 and 2, a window-3 max pool, or a
    plain pass-through; the configured stride is applied inside every branch.
    """

    def __init__(self, dim, stride, rng, dtype):
        super().__init__()
        if dim % 4 != 0:
            raise ConfigError(f"multiscale temporal module needs channels divisible by 4, got {dim}")
        quarter = dim // 4
        self.dim, self.stride = dim, stride
        self.reduce = [
            PointwiseConv(dim, quarter, rng, dtype),
            PointwiseConv(dim, quarter, rng, dtype),
            PointwiseConv(dim, quarter, rng, dtype),
            PointwiseConv(dim, quarter, rng, dtype, stride=stride),
        ]
        self.ops = [
            TemporalConv(quarter, quarter, 5, 1, stride, rng, dtype),
            TemporalConv(quarter, quarter, 5, 2, stride, rng, dtype),
            TemporalMaxPool(stride),
            None,
        ]

    def sublayers(self):
        out = []
        for k, (red, op) in enumerate(zip(self.reduce, self.ops)):
            out.append((f"branch{k}.reduce", red))
            if isinstance(op, TemporalConv):
                out.append((f"branch{k}.tconv", op))
        return out

    def forward(self, x):
        # All four 1x1 reductions run as one matmul; branch 3's stride is
        # equivalent to subsampling after its pointwise map.
        q = self.dim // 4
        w_cat = np.concatenate([r.w for r in self.reduce], axis=1)
        b_cat = np.concatenate([r.b for r in self.reduce])
        u = x @ w_cat + b_cat
        self._x, self._u_shape, self._w_cat = x, u.shape, w_cat
        y3 = u[:, ::self.stride, :, 3 * q:] if self.stride > 1 else u[..., 3 * q:]
        return np.concatenate([
            self.ops[0].forward(u[..., 0:q]),
            self.ops[1].forward(u[..., q:2 * q]),
            self.ops[2].forward(u[..., 2 * q:3 * q]),
            y3,
        ], axis=-1)

    def backward(self, dy):
        q = self.dim // 4
        du = np.zeros(self._u_shape, dtype=dy.dtype)
        du[..., 0:q] = self.ops[0].backward(dy[..., 0:q])
        du[..., q:2 * q] = self.ops[1].backward(dy[..., q:2 * q])
        du[..., 2 * q:3 * q] = self.ops[2].backward(dy[..., 2 * q:3 * q])
        if self.stride > 1:
            du[:, ::self.stride, :, 3 * q:] = dy[..., 3 * q:]
        else:
            du[..., 3 * q:] = dy[..., 3 * q:]
        dw_cat = _rows(self._x).T @ _rows(du)
        db_cat = channel_sum(du)
        for k, red in enumerate(self.reduce):
            red.grads = {"W": dw_cat[:, k * q:(k + 1) * q], "b": db_cat[k * q:(k + 1) * q]}
        return du @ self._w_cat.T


class EncoderBlock(Layer):
    """Graph conv -> multiscale temporal conv -> norm, plus residual, ReLU."""

    def __init__(self, adjacency, in_dim, out_dim, stride, rng, dtype,
                 bn_momentum=0.1, bn_eps=1e-5):
        super().__init__()
        self.gc = GraphConv(adjacency, in_dim, out_dim, rng, dtype)
        self.mtc = MultiScaleTemporal(out_dim, stride, rng, dtype)
        self.bn = BatchNorm(out_dim, dtype, momentum=bn_momentum, eps=bn_eps)
        if in_dim == out_dim and stride == 1:
            self.residual = None
        else:
            self.residual = PointwiseConv(in_dim, out_dim, rng, dtype, stride=stride)

    def sublayers(self):
        out = [("gc", self.gc)]
        out += [(f"mtc.{n}", l) for n, l in self.mtc.sublayers()]
        out.append(("bn", self.bn))
        if self.residual is not None:
            out.append(("residual", self.residual))
        return out

    def forward(self, x, train):
        h = self.bn.forward(self.mtc.forward(self.gc.forward(x)), train)
        r = x if self.residual is None else self.residual.forward(x)
        pre = h + r
        self._mask = pre > 0
        return np.where(self._mask, pre, 0.0)

    def backward(self, dy):
        dpre = np.where(self._mask, dy, 0.0)
        dx = self.gc.backward(self.mtc.backward(self.bn.backward(dpre)))
        if self.residual is None:
            dx = dx + dpre
        else:
            dx = dx + self.residual.backward(dpre)
        return dx


# --- channel-first [B, F, T, N] wrappers: the external array contract ---

def _to_internal(h):
    return np.ascontiguousarray(h.transpose(0, 2, 3, 1))


def _to_external(h):
    return np.ascontiguousarray(h.transpose(0, 3, 1, 2))


def graph_conv_forward(h, adjacency_norm, w):
    """Adjacency-then-channel mixing of [B, F_in, T, N] -> [B, F_out, T, N]."""
    if h.ndim != 4:
        raise ShapeError(f"expected rank-4 input, got shape {h.shape}")
    layer = GraphConv(np.asarray(adjacency_norm), w.shape[0], w.shape[1], None, h.dtype)
    layer.w[...] = w
    return _to_external(layer.forward(_to_internal(h)))


def mtc_forward(h, mtc: MultiScaleTemporal):
    """Multiscale temporal module on [B, F, T, N] (same channel count out)."""
    return _to_external(mtc.forward(_to_internal(h)))


def block_forward(h, block: EncoderBlock, train=False):
    """One encoder block on [B, F_in, T, N] -> [B, F_out, T/stride, N]."""
    return _to_external(block.forward(_to_internal(h), train))
