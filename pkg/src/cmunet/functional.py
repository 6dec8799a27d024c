"""Neural-network operations over Tensors.

Layout convention is NCHW; convolution is cross-correlation. The fast conv
path gathers patches im2col-style and multiplies; ``conv2d_naive`` keeps an
independent loop implementation around as a test oracle.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError
from . import tensor as T
from .tensor import Tensor, _as_tensor, _make


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


# -- linear ------------------------------------------------------------------

def linear(x, w, b=None):
    """y[..., j] = sum_i x[..., i] * w[j, i] + b[j]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.shape[-1] != w.data.shape[1]:
        raise DimensionError(
            f"linear: input features {x.data.shape[-1]} != weight columns {w.data.shape[1]}")
    out = x.data @ w.data.T
    if b is not None:
        b = _as_tensor(b)
        if b.data.shape != (w.data.shape[0],):
            raise DimensionError("linear: bias shape mismatch")
        out = out + b.data

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gx = (g @ w.data).reshape(x.data.shape)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, backward)


# -- convolution -------------------------------------------------------------

def _conv_out_size(h, w, kh, kw, sh, sw, ph, pw):
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(
            f"conv/pool window {kh}x{kw} exceeds padded extent {h + 2 * ph}x{w + 2 * pw}")
    return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1


def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Grouped 2D cross-correlation. groups == Cin gives depthwise behavior."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects x[B,C,H,W] and w[Cout,Cin/groups,kh,kw]")
    B, Cin, H, W = x.data.shape
    Cout, Cg, kh, kw = w.data.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if Cin % groups or Cout % groups:
        raise DimensionError(f"conv2d: channels ({Cin}->{Cout}) not divisible by groups={groups}")
    if Cg != Cin // groups:
        raise DimensionError(f"conv2d: weight expects {Cg * groups} input channels, got {Cin}")
    OH, OW = _conv_out_size(H, W, kh, kw, sh, sw, ph, pw)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]  # [B,Cin,OH,OW,kh,kw]

    depthwise = groups > 1 and groups == Cin == Cout and Cg == 1
    if depthwise:
        out = np.einsum("bchwij,cij->bchw", win, w.data[:, 0], optimize=True)
        cols = None
    elif groups == 1:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * OH * OW, -1)
        out = (cols @ w.data.reshape(Cout, -1).T).reshape(B, OH, OW, Cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    else:
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * OH * OW, groups, -1)
        wg = w.data.reshape(groups, Cout // groups, -1)
        out = np.einsum("ngk,gok->ngo", cols, wg, optimize=True)
        out = out.reshape(B, OH, OW, Cout).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
    if b is not None:
        b = _as_tensor(b)
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gx_pad = np.zeros_like(xp)
        if depthwise:
            gw = np.einsum("bchw,bchwij->cij", g, win, optimize=True)[:, None]
            for ki in range(kh):
                for kj in range(kw):
                    gx_pad[:, :, ki:ki + OH * sh:sh, kj:kj + OW * sw:sw] += \
                        g * w.data[None, :, 0, ki, kj, None, None]
        elif groups == 1:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Cout)
            gw = (g2.T @ cols).reshape(w.data.shape)
            gcols = (g2 @ w.data.reshape(Cout, -1)).reshape(B, OH, OW, Cin, kh, kw)
            for ki in range(kh):
                for kj in range(kw):
                    gx_pad[:, :, ki:ki + OH * sh:sh, kj:kj + OW * sw:sw] += \
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        else:
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, groups, Cout // groups)
            wg = w.data.reshape(groups, Cout // groups, -1)
            gw = np.einsum("ngo,ngk->gok", g2, cols, optimize=True).reshape(w.data.shape)
            gcols = np.einsum("ngo,gok->ngk", g2, wg, optimize=True)
            gcols = gcols.reshape(B, OH, OW, Cin, kh, kw)
            for ki in range(kh):
                for kj in range(kw):
                    gx_pad[:, :, ki:ki + OH * sh:sh, kj:kj + OW * sw:sw] += \
                        gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
        gx = gx_pad[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gx_pad
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward)


def conv2d_naive(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct nested-loop convolution on raw arrays. Test oracle only."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    w = w.data if isinstance(w, Tensor) else np.asarray(w)
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    OH, OW = _conv_out_size(H, W, kh, kw, sh, sw, ph, pw)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, Cout, OH, OW), dtype=x.dtype)
    cpg = Cout // groups
    for bi in range(B):
        for co in range(Cout):
            gidx = co // cpg
            for oh in range(OH):
                for ow in range(OW):
                    acc = 0.0
                    for cg in range(Cg):
                        ci = gidx * Cg + cg
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[bi, ci, oh * sh + ki, ow * sw + kj] * w[co, cg, ki, kj]
                    out[bi, co, oh, ow] = acc
    if b is not None:
        b = b.data if isinstance(b, Tensor) else np.asarray(b)
        out += b[None, :, None, None]
    return out


# -- pooling -----------------------------------------------------------------

def pool(x, kind, k=None, stride=None, padding=0):
    """Spatial pooling. Global kinds ignore k/stride and return [B,C,1,1].

    Max pooling routes the gradient to the first maximal element in scan
    order within each window.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError("pool expects [B,C,H,W]")
    B, C, H, W = x.data.shape

    if kind == "global_mean":
        out = x.data.mean(axis=(2, 3), keepdims=True)
        scale = 1.0 / (H * W)
        return _make(out, (x,), lambda g: (np.broadcast_to(g * scale, x.data.shape).copy(),))
    if kind == "global_max":
        flat = x.data.reshape(B, C, -1)
        arg = flat.argmax(axis=2)
        out = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(B, C, 1, 1)

        def backward_gmax(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, arg[:, :, None], g.reshape(B, C, 1), axis=2)
            return (gx.reshape(x.data.shape),)

        return _make(out, (x,), backward_gmax)

    if kind not in ("max", "mean"):
        raise DimensionError(f"unknown pool kind {kind!r}")
    if k is None:
        raise DimensionError("pool: kernel size required for windowed kinds")
    kh, kw = _pair(k)
    sh, sw = _pair(stride if stride is not None else k)
    ph, pw = _pair(padding)
    OH, OW = _conv_out_size(H, W, kh, kw, sh, sw, ph, pw)

    if ph or pw:
        fill = -np.inf if kind == "max" else 0.0
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=fill)
    else:
        xp = x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]

    if kind == "mean":
        out = win.mean(axis=(4, 5))
        scale = 1.0 / (kh * kw)

        def backward_mean(g):
            gx_pad = np.zeros_like(xp)
            gs = g * scale
            for ki in range(kh):
                for kj in range(kw):
                    gx_pad[:, :, ki:ki + OH * sh:sh, kj:kj + OW * sw:sw] += gs
            return (gx_pad[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gx_pad,)

        return _make(out, (x,), backward_mean)

    wflat = win.reshape(B, C, OH, OW, kh * kw)
    arg = wflat.argmax(axis=4)  # first occurrence on ties
    out = np.take_along_axis(wflat, arg[..., None], axis=4)[..., 0]

    def backward_max(g):
        gx_pad = np.zeros_like(xp)
        bi, ci, ohi, owi = np.indices(arg.shape)
        rows = ohi * sh + arg // kw
        cols_ = owi * sw + arg % kw
        np.add.at(gx_pad, (bi, ci, rows, cols_), g)
        return (gx_pad[:, :, ph:ph + H, pw:pw + W] if (ph or pw) else gx_pad,)

    return _make(out, (x,), backward_max)


# -- normalization -----------------------------------------------------------

def layer_norm(x, gamma, beta, eps=1e-5, axis=-1):
    """Per-position normalization over one axis, then affine."""
    if eps <= 0:
        raise DimensionError("layer_norm: eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    ax = axis % x.data.ndim
    C = x.data.shape[ax]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise DimensionError("layer_norm: gamma/beta must match the normalized axis")
    bshape = [1] * x.data.ndim
    bshape[ax] = C
    gam = gamma.data.reshape(bshape)
    bet = beta.data.reshape(bshape)

    mu = x.data.mean(axis=ax, keepdims=True)
    var = x.data.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gam + bet

    def backward(g):
        other = tuple(i for i in range(x.data.ndim) if i != ax)
        gbeta = g.sum(axis=other)
        ggamma = (g * xhat).sum(axis=other)
        gxhat = g * gam
        gx = inv * (gxhat - gxhat.mean(axis=ax, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=ax, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


# -- activations -------------------------------------------------------------

def relu(x):
    x = _as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def _sigmoid_raw(v):
    # branch on sign so the exponent argument is never positive
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    out = _sigmoid_raw(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x):
    x = _as_tensor(x)
    s = _sigmoid_raw(x.data)
    out = x.data * s
    return _make(out, (x,), lambda g: (g * (s + out * (1.0 - s)),))


def softplus(x):
    x = _as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    return _make(out, (x,), lambda g: (g * _sigmoid_raw(x.data),))


def softmax_channel(x, axis=None):
    """Softmax over the channel axis (axis 1 for >=2D, axis 0 for vectors)."""
    x = _as_tensor(x)
    ax = axis if axis is not None else (1 if x.data.ndim >= 2 else 0)
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        dot = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - dot),)

    return _make(s, (x,), backward)


_ACTIVATIONS = {"silu": silu, "relu": relu, "sigmoid": sigmoid,
                "softmax_channel": softmax_channel, "softplus": softplus}


def activation(kind, x):
    if kind not in _ACTIVATIONS:
        raise DimensionError(f"unknown activation {kind!r}")
    return _ACTIVATIONS[kind](x)


def elementwise(kind, a, b):
    """Pointwise add/mul; b may broadcast via trailing singleton dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        ok = len(sa) == len(sb) and all(y == x or y == 1 for x, y in zip(sa, sb))
        if not ok:
            raise DimensionError(f"elementwise: {sb} does not broadcast onto {sa}")
    if kind == "add":
        return T.add(a, b)
    if kind == "mul":
        return T.mul(a, b)
    raise DimensionError(f"unknown elementwise kind {kind!r}")


# -- resampling --------------------------------------------------------------

def _resize_matrix(n_out, n_in, mode, dtype):
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        src = np.minimum((np.arange(n_out) * n_in) // n_out, n_in - 1)
        m[np.arange(n_out), src] = 1.0
    else:  # bilinear, align_corners=False
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        frac = src - i0
        i1 = np.minimum(i0 + 1, n_in - 1)
        rows = np.arange(n_out)
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
    return m


def resize(x, target, mode="bilinear"):
    """Resample [B,C,H,W] to target (H2,W2). Separable matrix formulation."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise DimensionError("resize expects [B,C,H,W]")
    H2, W2 = target
    if H2 < 1 or W2 < 1:
        raise DimensionError("resize: target must be at least 1x1")
    if mode not in ("nearest", "bilinear"):
        raise DimensionError(f"unknown resize mode {mode!r}")
    _, _, H, W = x.data.shape
    mh = _resize_matrix(H2, H, mode, x.data.dtype)
    mw = _resize_matrix(W2, W, mode, x.data.dtype)
    out = mh @ x.data @ mw.T

    def backward(g):
        return (np.ascontiguousarray(mh.T @ g @ mw),)

    return _make(np.ascontiguousarray(out), (x,), backward)
