"""Differentiable operations for the two-stream attention network.

Feature maps use the [N, C, T, H, W] layout.  Convolution ships two routes:
a direct loop nest (``conv3d_reference``, the correctness baseline) and a
patch-gather + matrix-multiply fast path used on the tape; the fast path is
verified against the loop nest by ``verify_conv_fast_path`` and by the test
suite's independent oracles.
"""

from __future__ import annotations

from itertools import product

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autograd import Tensor, make_op

__all__ = [
    "conv3d",
    "conv3d_reference",
    "verify_conv_fast_path",
    "maxpool3d",
    "relu",
    "sigmoid",
    "mean_var_normalize",
    "replicate_channels",
    "fully_connected",
    "flatten",
    "dropout",
    "softmax_cross_entropy",
]


def _triple(v):
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(e) for e in v)
    if len(t) != 3:
        raise ValueError(f"expected a triple, got {v!r}")
    return t


def _conv_out_extent(d, k, s, p):
    return (d + 2 * p - k) // s + 1


def _pad_volume(data, pads, mode):
    pt, ph, pw = pads
    if pt == ph == pw == 0:
        return data
    widths = ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))
    return np.pad(data, widths, mode="constant" if mode == "zeros" else "edge")


def _unfold(padded, kernel, stride):
    """Strided windows of a padded volume: (N, C, To, Ho, Wo, kt, kh, kw)."""
    st, sh, sw = stride
    win = sliding_window_view(padded, kernel, axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def _fold_edge_margins(dxp, pads):
    """Adjoint of edge padding: sum margin gradients into the boundary slabs."""
    for ax, p in zip((2, 3, 4), pads):
        if p == 0:
            continue
        n = dxp.shape[ax]
        idx = [slice(None)] * dxp.ndim

        def sl(a, b):
            idx_ = list(idx)
            idx_[ax] = slice(a, b)
            return tuple(idx_)

        dxp[sl(p, p + 1)] += dxp[sl(0, p)].sum(axis=ax, keepdims=True)
        dxp[sl(n - p - 1, n - p)] += dxp[sl(n - p, None)].sum(axis=ax, keepdims=True)
    return dxp


def _validate_conv(x, w, stride, pad):
    if x.ndim != 5 or w.ndim != 5:
        raise ValueError(
            f"conv3d expects 5-d input and kernel, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv3d channel mismatch: input has shape {x.shape} "
            f"(Cin={x.shape[1]}) but kernel has shape {w.shape} (Cin={w.shape[1]})"
        )
    if any(s < 1 for s in stride):
        raise ValueError(f"conv3d stride components must be >= 1, got {stride}")
    if any(p < 0 for p in pad):
        raise ValueError(f"conv3d padding must be >= 0, got {pad}")
    out = [
        _conv_out_extent(d, k, s, p)
        for d, k, s, p in zip(x.shape[2:], w.shape[2:], stride, pad)
    ]
    if any(o < 1 for o in out):
        raise ValueError(
            f"conv3d kernel {w.shape[2:]} does not fit input {x.shape[2:]} "
            f"with stride {stride}, pad {pad}"
        )
    return tuple(out)


def conv3d(x: Tensor, w: Tensor, b=None, stride=(1, 1, 1), pad=(0, 0, 0),
           pad_mode: str = "zeros") -> Tensor:
    """3d convolution (cross-correlation) of [N,Cin,T,H,W] with [Cout,Cin,kt,kh,kw].

    ``pad_mode`` is "zeros" or "edge"; edge padding keeps spatially uniform
    inputs uniform through the layer, which the attention gate relies on.
    Differentiable w.r.t. x, w and b.
    """
    stride, pad = _triple(stride), _triple(pad)
    if pad_mode not in ("zeros", "edge"):
        raise ValueError(f"unknown pad_mode {pad_mode!r}")
    to, ho, wo = _validate_conv(x.data, w.data, stride, pad)
    n, cin = x.data.shape[:2]
    cout = w.data.shape[0]
    kernel = w.data.shape[2:]
    kt, kh, kw = kernel

    xp = _pad_volume(x.data, pad, pad_mode)
    xp_shape = xp.shape
    win = _unfold(xp, kernel, stride)
    m = n * to * ho * wo
    k = cin * kt * kh * kw
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(m, k)
    wmat = w.data.reshape(cout, k)
    out = cols @ wmat.T
    out = np.ascontiguousarray(
        out.reshape(n, to, ho, wo, cout).transpose(0, 4, 1, 2, 3)
    )
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(
                f"conv3d bias shape {b.data.shape} does not match Cout={cout}"
            )
        out += b.data.reshape(1, cout, 1, 1, 1)

    parents = (x, w) if b is None else (x, w, b)
    w_shape = w.data.shape

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(m, cout)
        dw = (g2.T @ cols).reshape(w_shape)
        db = g2.sum(axis=0) if b is not None else None
        dcols = g2 @ wmat
        dc = dcols.reshape(n, to, ho, wo, cin, kt, kh, kw)
        dxp = np.zeros(xp_shape, dtype=g.dtype)
        st, sh, sw = stride
        for it, ih, iw in product(range(kt), range(kh), range(kw)):
            dxp[:, :,
                it:it + st * to:st,
                ih:ih + sh * ho:sh,
                iw:iw + sw * wo:sw] += dc[:, :, :, :, :, it, ih, iw].transpose(
                    0, 4, 1, 2, 3)
        if pad_mode == "edge":
            _fold_edge_margins(dxp, pad)
        pt, ph, pw = pad
        t, h, wd = x.data.shape[2:]
        dx = dxp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd]
        if b is None:
            return dx, dw
        return dx, dw, db

    return make_op("conv3d", out, parents, grad_fn)


def conv3d_reference(x: np.ndarray, w: np.ndarray, b=None, stride=(1, 1, 1),
                     pad=(0, 0, 0), pad_mode: str = "zeros") -> np.ndarray:
    """Direct loop-nest 3d convolution; the slow baseline the fast path must match."""
    stride, pad = _triple(stride), _triple(pad)
    to, ho, wo = _validate_conv(x, w, stride, pad)
    n = x.shape[0]
    cout = w.shape[0]
    kt, kh, kw = w.shape[2:]
    st, sh, sw = stride
    xp = _pad_volume(x, pad, pad_mode)
    out = np.zeros((n, cout, to, ho, wo), dtype=x.dtype)
    for i in range(n):
        for co in range(cout):
            for t, h, wd in product(range(to), range(ho), range(wo)):
                patch = xp[i, :, t * st:t * st + kt, h * sh:h * sh + kh,
                           wd * sw:wd * sw + kw]
                out[i, co, t, h, wd] = np.sum(patch * w[co])
    if b is not None:
        out += np.asarray(b).reshape(1, cout, 1, 1, 1)
    return out


def verify_conv_fast_path(trials: int = 10, seed: int = 0, dtype=np.float64,
                          tol: float = 1e-10) -> float:
    """Compare the gather fast path against the loop nest on random cases.

    Returns the worst absolute deviation; raises if it exceeds ``tol``.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        n, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        t, h, w_ = (int(rng.integers(3, 6)) for _ in range(3))
        kt, kh, kw = (int(rng.integers(1, 4)) for _ in range(3))
        kt, kh, kw = min(kt, t), min(kh, h), min(kw, w_)
        stride = tuple(int(rng.integers(1, 3)) for _ in range(3))
        pad = tuple(int(rng.integers(0, 2)) for _ in range(3))
        mode = rng.choice(["zeros", "edge"])
        x = Tensor(rng.standard_normal((n, cin, t, h, w_)), dtype=dtype)
        w = Tensor(rng.standard_normal((cout, cin, kt, kh, kw)), dtype=dtype)
        b = Tensor(rng.standard_normal(cout), dtype=dtype)
        fast = conv3d(x, w, b, stride=stride, pad=pad, pad_mode=mode).data
        slow = conv3d_reference(x.data, w.data, b.data, stride=stride, pad=pad,
                                pad_mode=mode)
        worst = max(worst, float(np.max(np.abs(fast - slow))))
    if worst > tol:
        raise AssertionError(
            f"conv3d fast path deviates from loop nest by {worst:g} (> {tol:g})"
        )
    return worst


def maxpool3d(x: Tensor, k, s=None) -> Tensor:
    """Max pooling with window ``k`` and stride ``s`` (defaults to ``k``).

    Backward routes each window's gradient to its stored argmax only
    (first-index rule on ties).
    """
    k = _triple(k)
    s = _triple(s) if s is not None else k
    if x.data.ndim != 5:
        raise ValueError(f"maxpool3d expects 5-d input, got shape {x.data.shape}")
    if any(kk < 1 or ss < 1 for kk, ss in zip(k, s)):
        raise ValueError(f"maxpool3d window/stride must be >= 1, got k={k}, s={s}")
    if any(kk > d for kk, d in zip(k, x.data.shape[2:])):
        raise ValueError(
            f"maxpool3d window {k} larger than input extent {x.data.shape[2:]}"
        )
    win = _unfold(x.data, k, s)
    n, c, to, ho, wo = win.shape[:5]
    flat = np.ascontiguousarray(win).reshape(n, c, to, ho, wo, -1)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]

    in_shape = x.data.shape
    kt, kh, kw = k
    st, sh, sw = s

    def grad_fn(g):
        dt, rem = np.divmod(am, kh * kw)
        dh, dw = np.divmod(rem, kw)
        ni, ci, ti, hi, wi = np.indices((n, c, to, ho, wo), sparse=True)
        tt = ti * st + dt
        hh = hi * sh + dh
        ww = wi * sw + dw
        t_, h_, w_ = in_shape[2:]
        flat_idx = (((ni * c + ci) * t_ + tt) * h_ + hh) * w_ + ww
        dx = np.zeros(in_shape, dtype=g.dtype)
        np.add.at(dx.reshape(-1), flat_idx.reshape(-1), g.reshape(-1))
        return (dx,)

    return make_op("maxpool3d", out, (x,), grad_fn)


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_op("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, numerically stable and strictly inside (0, 1)."""
    xd = x.data
    z = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    info = np.finfo(xd.dtype)
    # exp underflow would otherwise return exactly 0.0 / 1.0
    s = np.clip(s, info.tiny, 1.0 - info.epsneg).astype(xd.dtype)
    return make_op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def mean_var_normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize a single-channel map over all T*H*W positions per batch item.

    Uses the population variance of the spatio-temporal activations; output is
    (x - mean) / sqrt(var + eps).  Standardization does not bound values to
    [-1, 1]; it only gives zero mean and unit variance.  Differentiable
    through both statistics.
    """
    xd = x.data
    if xd.ndim != 5 or xd.shape[1] != 1:
        raise ValueError(
            f"mean_var_normalize expects [N,1,T,H,W], got shape {xd.shape}"
        )
    axes = (2, 3, 4)
    mu = xd.mean(axis=axes, keepdims=True)
    var = np.square(xd - mu).mean(axis=axes, keepdims=True)
    istd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xd.dtype))
    y = (xd - mu) * istd

    def grad_fn(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return (istd * (g - gm - y * gym),)

    return make_op("mean_var_normalize", y, (x,), grad_fn)


def replicate_channels(a: Tensor, c: int) -> Tensor:
    """Repeat a single-channel map C times along the channel axis."""
    if c < 1:
        raise ValueError(f"replication count must be >= 1, got {c}")
    ad = a.data
    if ad.ndim != 5 or ad.shape[1] != 1:
        raise ValueError(
            f"replicate_channels expects [N,1,T,H,W], got shape {ad.shape}"
        )
    out = np.repeat(ad, c, axis=1)
    return make_op(
        "replicate_channels", out, (a,),
        lambda g: (g.sum(axis=1, keepdims=True),),
    )


def fully_connected(x: Tensor, w: Tensor, b=None) -> Tensor:
    """Affine map [N,D] @ [D,K] + [K]."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(
            f"fully_connected expects 2-d operands, got {xd.shape} and {wd.shape}"
        )
    if xd.shape[1] != wd.shape[0]:
        raise ValueError(
            f"fully_connected inner dimension mismatch: x {xd.shape} vs W {wd.shape}"
        )
    out = xd @ wd
    if b is not None:
        if b.data.shape != (wd.shape[1],):
            raise ValueError(
                f"fully_connected bias shape {b.data.shape} does not match "
                f"K={wd.shape[1]}"
            )
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        dx = g @ wd.T
        dw = xd.T @ g
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=0)

    return make_op("fully_connected", out, parents, grad_fn)


def flatten(x: Tensor) -> Tensor:
    from .autograd import reshape
    return reshape(x, (x.data.shape[0], -1))


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity in inference mode, so the test-time path is free of dropout code.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = rng.random(x.data.shape) >= p
    factor = keep.astype(x.data.dtype) / np.asarray(1.0 - p, dtype=x.data.dtype)
    return make_op("dropout", x.data * factor, (x,), lambda g: (g * factor,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized.

    Gradient is (softmax - onehot) / N.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ValueError(f"logits must be [N,K], got shape {ld.shape}")
    lab = np.asarray(labels)
    n, k = ld.shape
    if lab.shape != (n,):
        raise ValueError(f"labels shape {lab.shape} does not match batch {n}")
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(
            f"labels must lie in [0, {k}); got range "
            f"[{lab.min()}, {lab.max()}]"
        )
    lab = lab.astype(np.int64)
    z = ld - ld.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = np.asarray(-logp[np.arange(n), lab].mean(), dtype=ld.dtype)
    p = np.exp(logp)

    def grad_fn(g):
        d = p.copy()
        d[np.arange(n), lab] -= 1.0
        return (d * (g / n),)

    return make_op("softmax_cross_entropy", loss, (logits,), grad_fn)
