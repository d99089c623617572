"""A fixed set of layers with hand-derived forward and backward passes.

Activations are channels-last (N, H, W, C) arrays in float64 or float32
(``linear`` and the time embedding take (N, features)). Convolution weights
are (k, k, C_in, C_out); linear weights are (in, out). Every ``*_forward`` returns ``(out, cache)``; the matching
``*_backward`` takes that cache plus the output gradient and returns the
input gradient and a dict of parameter gradients keyed like the params.
"""
from dataclasses import dataclass
from typing import Any

import numpy as np

from . import kernels

LAYER_KINDS = (
    "conv3x3",
    "upsample2x_then_conv3x3",
    "group_norm",
    "silu",
    "relu",
    "tanh",
    "linear",
    "sinusoidal_time_embed",
    "residual_block",
)


@dataclass
class Cache:
    kind: str
    data: Any


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


# -- convolution ---------------------------------------------------------------

def conv_forward(x, w, b, stride=1):
    """Zero-padded 'same' convolution (k = 1 or 3) with stride 1 or 2.

    ``w`` has layout (k, k, C_in, C_out).
    """
    _check(x.ndim == 4, f"conv expects NHWC input, got shape {x.shape}")
    k, k2, cin, cout = w.shape
    _check(k == k2 and k in (1, 3), f"unsupported kernel shape {w.shape}")
    _check(x.shape[3] == cin, f"conv expects {cin} input channels, got {x.shape[3]}")
    _check(stride in (1, 2), "stride must be 1 or 2")
    _check(b.shape == (cout,), f"bias shape {b.shape} != ({cout},)")
    cols = kernels.im2col(x, k, stride, k // 2)
    out = cols @ w.reshape(-1, cout) + b
    return out, (x.shape, cols, w, stride)


def conv_backward(cache, dout):
    x_shape, cols, w, stride = cache
    k, _, _, cout = w.shape
    n, oh, ow, width = cols.shape
    _check(dout.shape == (n, oh, ow, cout), f"conv output grad shape {dout.shape} mismatches cache")
    dflat = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, width).T @ dflat).reshape(w.shape)
    db = np.ones(dflat.shape[0], dtype=dflat.dtype) @ dflat
    dcols = dout @ w.reshape(-1, cout).T
    dx = kernels.col2im(dcols, x_shape, k, stride, k // 2)
    return dx, {"w": dw, "b": db}


def upconv_forward(x, w, b):
    """Nearest-neighbour 2x upsampling followed by a stride-1 convolution."""
    _check(x.ndim == 4, f"upsample expects NHWC input, got shape {x.shape}")
    up = x.repeat(2, axis=1).repeat(2, axis=2)
    return conv_forward(up, w, b, 1)


def upconv_backward(cache, dout):
    dup, grads = conv_backward(cache, dout)
    n, h2, w2, c = dup.shape
    dx = dup.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
    return dx, grads


# -- normalization and activations ---------------------------------------------

def _channel_sum(x):
    """(N, H, W, C) -> (N, C); a ones-vector matvec is far faster than strided reductions."""
    n, h, w, c = x.shape
    return np.ones(h * w, dtype=x.dtype) @ x.reshape(n, h * w, c)


def _group_mean(x, groups):
    """Per-(sample, group) mean broadcast back to (N, 1, 1, C)."""
    n, h, w, c = x.shape
    cg = c // groups
    g = _channel_sum(x).reshape(n, groups, cg).sum(axis=2) / (h * w * cg)
    return np.repeat(g, cg, axis=1)[:, None, None, :]


def group_norm_forward(x, gamma, beta, groups, eps=1e-5):
    _check(x.ndim == 4, f"group_norm expects NHWC input, got shape {x.shape}")
    c = x.shape[3]
    _check(c % groups == 0, f"{c} channels not divisible into {groups} groups")
    _check(gamma.shape == (c,) and beta.shape == (c,), "group_norm affine shape mismatch")
    centred = x - _group_mean(x, groups)
    inv_std = 1.0 / np.sqrt(_group_mean(centred * centred, groups) + eps)
    xhat = centred * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma, groups)


def group_norm_backward(cache, dout):
    xhat, inv_std, gamma, groups = cache
    _check(dout.shape == xhat.shape, "group_norm output grad shape mismatches cache")
    dgamma = _channel_sum(dout * xhat).sum(axis=0)
    dbeta = _channel_sum(dout).sum(axis=0)
    dxhat = dout * gamma
    dx = inv_std * (dxhat - _group_mean(dxhat, groups) - xhat * _group_mean(dxhat * xhat, groups))
    return dx, {"gamma": dgamma, "beta": dbeta}


def silu_forward(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_backward(cache, dout):
    x, sig = cache
    return dout * sig * (1.0 + x * (1.0 - sig)), {}


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(cache, dout):
    return dout * (cache > 0), {}


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(cache, dout):
    return dout * (1.0 - cache * cache), {}


def linear_forward(x, w, b):
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    _check(x.ndim == 2 and x.shape[1] == w.shape[0],
           f"linear expects (N, {w.shape[0]}) input, got {x.shape}")
    return x @ w + b, (x, w)


def linear_backward(cache, dout):
    x, w = cache
    return dout @ w.T, {"w": x.T @ dout, "b": dout.sum(axis=0)}


def time_embed_forward(t, dim):
    """Interleaved (sin, cos) features at geometric frequencies 10000**(-i/(dim/2))."""
    _check(dim % 2 == 0 and dim > 0, "time embedding width must be positive and even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    freqs = np.exp(-np.log(10000.0) * np.arange(dim // 2) / (dim // 2))
    arg = t[:, None] * freqs[None, :]
    out = np.empty((t.size, dim))
    out[:, 0::2] = np.sin(arg)
    out[:, 1::2] = np.cos(arg)
    return out, (arg, freqs)


def time_embed_backward(cache, dout):
    arg, freqs = cache
    dt = (dout[:, 0::2] * np.cos(arg) * freqs - dout[:, 1::2] * np.sin(arg) * freqs).sum(axis=1)
    return dt, {}


# -- residual block ------------------------------------------------------------

def _sub(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def resblock_forward(params, x, temb=None, groups=8):
    """GN -> SiLU -> conv -> (+ projected time embedding) -> GN -> SiLU -> conv, plus skip.

    The skip is a 1x1 convolution when ``skip.w`` is present, identity otherwise.
    """
    h, c_gn1 = group_norm_forward(x, params["gn1.gamma"], params["gn1.beta"], groups)
    h, c_act1 = silu_forward(h)
    h, c_conv1 = conv_forward(h, params["conv1.w"], params["conv1.b"])
    c_temb = None
    if temb is not None:
        _check("temb.w" in params, "residual block has no time projection for aux input")
        e, c_tact = silu_forward(temb)
        proj, c_tlin = linear_forward(e, params["temb.w"], params["temb.b"])
        h = h + proj[:, None, None, :]
        c_temb = (c_tact, c_tlin)
    h, c_gn2 = group_norm_forward(h, params["gn2.gamma"], params["gn2.beta"], groups)
    h, c_act2 = silu_forward(h)
    h, c_conv2 = conv_forward(h, params["conv2.w"], params["conv2.b"])
    if "skip.w" in params:
        skip, c_skip = conv_forward(x, params["skip.w"], params["skip.b"])
    else:
        _check(x.shape[3] == h.shape[3], "identity skip needs equal channel counts")
        skip, c_skip = x, None
    return skip + h, (c_gn1, c_act1, c_conv1, c_temb, c_gn2, c_act2, c_conv2, c_skip)


def resblock_backward(cache, dout):
    """Returns ``(dx, grads, dtemb)``; ``dtemb`` is None without a time input."""
    c_gn1, c_act1, c_conv1, c_temb, c_gn2, c_act2, c_conv2, c_skip = cache
    grads = {}
    if c_skip is not None:
        dx, g = conv_backward(c_skip, dout)
        grads.update({"skip." + k: v for k, v in g.items()})
    else:
        dx = dout.copy()
    dh, g = conv_backward(c_conv2, dout)
    grads.update({"conv2." + k: v for k, v in g.items()})
    dh, _ = silu_backward(c_act2, dh)
    dh, g = group_norm_backward(c_gn2, dh)
    grads.update({"gn2." + k: v for k, v in g.items()})
    dtemb = None
    if c_temb is not None:
        c_tact, c_tlin = c_temb
        de, g = linear_backward(c_tlin, dh.sum(axis=(1, 2)))
        grads.update({"temb." + k: v for k, v in g.items()})
        dtemb, _ = silu_backward(c_tact, de)
    dh, g = conv_backward(c_conv1, dh)
    grads.update({"conv1." + k: v for k, v in g.items()})
    dh, _ = silu_backward(c_act1, dh)
    dh, g = group_norm_backward(c_gn1, dh)
    grads.update({"gn1." + k: v for k, v in g.items()})
    return dx + dh, grads, dtemb


def init_conv(stream, cin, cout, k=3, scale=1.0):
    from .rng import gaussian
    std = scale * np.sqrt(2.0 / (cin * k * k))
    return {"w": std * gaussian(stream, (k, k, cin, cout)), "b": np.zeros(cout)}


def init_linear(stream, fin, fout, scale=1.0):
    from .rng import gaussian
    return {"w": scale * np.sqrt(1.0 / fin) * gaussian(stream, (fin, fout)), "b": np.zeros(fout)}


def init_resblock(stream, cin, cout, temb_dim=None):
    p = {"gn1.gamma": np.ones(cin), "gn1.beta": np.zeros(cin),
         "gn2.gamma": np.ones(cout), "gn2.beta": np.zeros(cout)}
    p.update({"conv1." + k: v for k, v in init_conv(stream, cin, cout).items()})
    # small second conv keeps each block close to its skip path at init
    p.update({"conv2." + k: v for k, v in init_conv(stream, cout, cout, scale=0.1).items()})
    if temb_dim is not None:
        p.update({"temb." + k: v for k, v in init_linear(stream, temb_dim, cout).items()})
    if cin != cout:
        p.update({"skip." + k: v for k, v in init_conv(stream, cin, cout, k=1).items()})
    return p


# -- generic dispatch ------------------------------------------------------------

def layer_forward(kind, params, x, aux=None, stride=1, groups=8, dim=None):
    """Run one layer of ``kind``.

    ``params`` maps the layer's parameter names to arrays (``w``/``b`` for
    convolutions and linear maps, ``gamma``/``beta`` for group norm, dotted
    sub-layer names for residual blocks). ``aux`` is the time embedding fed
    to a residual block; ``dim`` is the time-embedding width.
    """
    if kind == "conv3x3":
        _check(params["w"].shape[:2] == (3, 3), "conv3x3 needs a 3x3 kernel")
        out, data = conv_forward(x, params["w"], params["b"], stride)
    elif kind == "upsample2x_then_conv3x3":
        out, data = upconv_forward(x, params["w"], params["b"])
    elif kind == "group_norm":
        out, data = group_norm_forward(x, params["gamma"], params["beta"], groups)
    elif kind == "silu":
        out, data = silu_forward(x)
    elif kind == "relu":
        out, data = relu_forward(x)
    elif kind == "tanh":
        out, data = tanh_forward(x)
    elif kind == "linear":
        out, data = linear_forward(x, params["w"], params["b"])
    elif kind == "sinusoidal_time_embed":
        _check(dim is not None, "sinusoidal_time_embed needs dim")
        out, data = time_embed_forward(x, dim)
    elif kind == "residual_block":
        out, data = resblock_forward(params, x, aux, groups)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    return out, Cache(kind, data)


_BACKWARD = {
    "conv3x3": conv_backward,
    "upsample2x_then_conv3x3": upconv_backward,
    "group_norm": group_norm_backward,
    "silu": silu_backward,
    "relu": relu_backward,
    "tanh": tanh_backward,
    "linear": linear_backward,
    "sinusoidal_time_embed": time_embed_backward,
}


def layer_backward(kind, params, cache, output_grad):
    """Backward pass for a cache made by :func:`layer_forward` with the same kind.

    For a residual block run with ``aux``, the aux gradient is returned in the
    grads dict under ``"aux"``.
    """
    if not isinstance(cache, Cache) or cache.kind != kind:
        got = cache.kind if isinstance(cache, Cache) else type(cache).__name__
        raise ValueError(f"cache from {got!r} cannot drive a {kind!r} backward pass")
    if kind == "residual_block":
        dx, grads, daux = resblock_backward(cache.data, output_grad)
        if daux is not None:
            grads["aux"] = daux
        return dx, grads
    return _BACKWARD[kind](cache.data, output_grad)
