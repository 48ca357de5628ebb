"""Convolutional building blocks with trainable parameters."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, SchemaError
from .tensor import Tensor, get_default_dtype


class Module:
    """Minimal parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; buffers
    (e.g. batch-norm running stats) are plain numpy arrays registered by name.
    Child modules are discovered from attributes, lists and dicts.
    """

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Module):
                        yield f"{name}.{k}", v

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self):
        state = OrderedDict((k, v.data) for k, v in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        unknown = set(state) - set(params) - set(buffers)
        if unknown:
            raise SchemaError(f"unknown parameter names: {sorted(unknown)[:5]}")
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise SchemaError(f"missing parameter names: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def train(self, mode=True):
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(data):
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def conv_output_size(size, kernel, stride, padding, dilation):
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation of ``x`` [N,C,H,W] with ``weight`` [O,C,kh,kw]."""
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels but weight expects {cw} (input {x.shape}, weight {weight.shape})")
    if h + 2 * padding < dilation * (kh - 1) + 1 or w + 2 * padding < dilation * (kw - 1) + 1:
        raise DimensionError(f"dilated kernel {kh}x{kw} (dilation {dilation}) exceeds padded input {x.shape}")
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data

    def window(i, j):
        r, s = i * dilation, j * dilation
        return (slice(None), slice(None),
                slice(r, r + stride * (ho - 1) + 1, stride),
                slice(s, s + stride * (wo - 1) + 1, stride))

    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[window(i, j)]
    cols = cols.reshape(n, c * kh * kw, ho * wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[window(i, j)] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(out, parents, backward, "conv2d")


def conv_transpose_2x2(x, weight, bias=None):
    """Stride-2 up-convolution; ``weight`` is [O,C,2,2] and output doubles H and W."""
    n, c, h, w = x.shape
    o, cw, kh, kw = weight.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels but weight expects {cw}")
    if (kh, kw) != (2, 2):
        raise DimensionError(f"up-convolution needs a 2x2 kernel, got {kh}x{kw}")
    xf = x.data.reshape(n, c, h * w)
    wf = weight.data.reshape(o, c, 4).transpose(0, 2, 1).reshape(o * 4, c)
    y = np.matmul(wf, xf).reshape(n, o, 2, 2, h, w)
    out = y.transpose(0, 1, 4, 2, 5, 3).reshape(n, o, 2 * h, 2 * w)
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)

    def backward(g):
        gy = g.reshape(n, o, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4).reshape(n, o * 4, h * w)
        gx = np.matmul(wf.T, gy).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gwf = np.matmul(gy, xf.transpose(0, 2, 1)).sum(axis=0)
            gw = gwf.reshape(o, 4, c).transpose(0, 2, 1).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(np.ascontiguousarray(out), parents, backward, "upconv")


def batch_norm(x, gamma, beta, running_mean, running_var, training, eps=1e-5, momentum=0.1):
    n, c, h, w = x.shape
    count = n * h * w
    shape = (1, c, 1, 1)
    if training:
        if count < 2:
            raise ContractError(f"batch norm in train mode needs N*H*W >= 2, got input {x.shape}")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(shape).astype(x.dtype)) * inv.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3))
        gb = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv.reshape(shape) / count) * (
                count * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = gxhat * inv.reshape(shape)
        return gx, gg, gb

    return x._make(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


def max_pool_2x2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool_2x2 needs even spatial dims, got {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return x._make(out, (x,), backward, "max_pool")


def dropout(x, p, seed=None, training=True, rng=None):
    """Inverted dropout; the mask is a deterministic function of ``seed`` (or ``rng``)."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    rng = rng if rng is not None else np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return x._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# -- layers -------------------------------------------------------------------

def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None,
                 dilation=1, bias=True, rng=None):
        if min(in_channels, out_channels, kernel_size, stride, dilation) < 1:
            raise ConfigError("conv channels, kernel, stride and dilation must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        if padding is None:
            padding = dilation * (kernel_size - 1) // 2
        self.stride, self.padding, self.dilation = stride, padding, dilation
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = parameter(_he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def output_size(self, size):
        return conv_output_size(size, self.weight.shape[-1], self.stride, self.padding, self.dilation)

    def forward(self, x):
        out = conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        assert out.shape[2] == self.output_size(x.shape[2]) and out.shape[3] == self.output_size(x.shape[3])
        return out


class UpConv2x2(Module):
    def __init__(self, in_channels, out_channels, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = parameter(_he_normal(rng, (out_channels, in_channels, 2, 2), in_channels))
        self.bias = parameter(np.zeros(out_channels))

    def forward(self, x):
        return conv_transpose_2x2(x, self.weight, self.bias)


def upsample_2x(layer, x):
    return layer(x)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1):
        if not 0 < momentum < 1:
            raise ConfigError(f"momentum must lie in (0, 1), got {momentum}")
        dt = get_default_dtype()
        self.eps, self.momentum = eps, momentum
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=dt)
        self.running_var = np.ones(channels, dtype=dt)

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.eps, self.momentum)


class ConvBNReLU(Module):
    def __init__(self, in_channels, out_channels, dilation=1, rng=None):
        self.conv = Conv2d(in_channels, out_channels, 3, dilation=dilation, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, x):
        return self.bn(self.conv(x)).relu()
