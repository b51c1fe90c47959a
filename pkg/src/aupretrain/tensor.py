"""A small dense tensor with reverse-mode gradients.

Only the operations needed by the VGG13 classifier are provided: 2-D
convolution, max pooling, ReLU, sigmoid, inverted dropout, affine layers,
flattening, summation and a clamped binary cross-entropy loss.

Every op records a closure that maps the upstream gradient to one gradient
per parent. :meth:`Tensor.backward` walks the graph in reverse topological
order and accumulates into the ``grad`` slot of leaf tensors that have
``requires_grad`` set. Intermediate gradients are not retained.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, ShapeError

BCE_EPS = 1e-7

_state = threading.local()


def _grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (used for evaluation)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense n-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype}{flag})"

    def sum(self):
        return tensor_sum(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar, got dims {self.dims}")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = g.astype(node.data.dtype, copy=True)
                    else:
                        node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward):
    """Wrap ``data`` as an op output, recording the graph only when needed."""
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)
    return Tensor(data)


def _im2col_nhwc(xh, kh, kw, stride, padding, Ho, Wo):
    """Rows of flattened (kh, kw, C) windows from a channels-last batch."""
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    if ph or pw:
        xh = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = sliding_window_view(xh, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    B, C = xh.shape[0], xh.shape[3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x, weight, bias=None, stride=1, padding=1):
    """Cross-correlate ``x`` (C,H,W) or (B,C,H,W) with ``weight`` (C_out,C_in,kh,kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    squeeze = xd.ndim == 3
    if squeeze:
        xd = xd[None]
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects 3-D/4-D input and 4-D weights, got {x.dims} and {weight.dims}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"invalid stride={stride} or padding={padding}")
    B, C, H, W = xd.shape
    c_out, c_in, kh, kw = wd.shape
    if C != c_in:
        raise ShapeError(f"input has {C} channels but weights expect {c_in}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias dims {bias.dims} do not match {c_out} filters")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input {Hp}x{Wp}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    xh = xd.transpose(0, 2, 3, 1)
    cols = _im2col_nhwc(xh, kh, kw, stride, padding, Ho, Wo)
    wmat = wd.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, c_out).transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]

    def backward(g):
        if squeeze:
            g = g[None]
        gh = g.transpose(0, 2, 3, 1)
        gm = gh.reshape(-1, c_out)
        dw = None
        if weight.requires_grad:
            dw = np.ascontiguousarray((gm.T @ cols).reshape(c_out, kh, kw, C).transpose(0, 3, 1, 2))
        db = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            if stride == 1 and padding <= min(kh, kw) - 1:
                # input gradient = full correlation of g with the flipped kernel
                gcols = _im2col_nhwc(gh, kh, kw, 1, (kh - 1 - padding, kw - 1 - padding), H, W)
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, -1)
                dx = (gcols @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
            else:
                dcols = (gm @ wmat).reshape(B, Ho, Wo, kh, kw, C)
                dxp = np.zeros((B, Hp, Wp, C), dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, :, i, j]
                dx = dxp[:, padding:padding + H, padding:padding + W].transpose(0, 3, 1, 2)
            if squeeze:
                dx = dx[0]
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def maxpool2d(x, window=2, stride=2):
    """Max pooling over (H, W). Gradient flows to the first maximum of each window."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim < 2:
        raise ShapeError(f"maxpool2d needs spatial dims, got {x.dims}")
    H, W = xd.shape[-2:]
    if window > H or window > W:
        raise ShapeError(f"pool window {window} larger than input {H}x{W}")
    if window < 1 or stride < 1:
        raise ConfigError(f"invalid window={window} or stride={stride}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    offsets = [(i, j) for i in range(window) for j in range(window)]

    def view(a, i, j):
        return a[..., i:i + stride * Ho:stride, j:j + stride * Wo:stride]

    out = view(xd, 0, 0).copy()
    for i, j in offsets[1:]:
        np.maximum(out, view(xd, i, j), out=out)

    def backward(g):
        dx = np.zeros_like(xd)
        pending = np.ones(out.shape, dtype=bool)
        for i, j in offsets:
            hit = pending & (view(xd, i, j) == out)
            pending &= ~hit
            view(dx, i, j)[...] += g * hit
        return (dx,)

    return _result(out, (x,), backward)


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (out > 0),)

    return _result(out, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out.astype(x.data.dtype), (x,), backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("training-mode dropout needs a seeded generator")
    keep = rng.random(x.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
    mask = keep * scale
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ W.T + b`` for ``x`` of dims (N_in,) or (B, N_in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"cannot apply weights {weight.dims} to input {x.dims}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias dims {bias.dims} do not match weights {weight.dims}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g if g.ndim == 2 else g[None]
        x2 = x.data if x.ndim == 2 else x.data[None]
        dx = (g @ weight.data) if x.requires_grad else None
        dw = g2.T @ x2 if weight.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (dx, dw) if bias is None else (dx, dw, db)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def flatten(x):
    """Collapse every axis after the batch axis."""
    x = as_tensor(x)
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def backward(g):
        return (g.reshape(shape),)

    return _result(out, (x,), backward)


def tensor_sum(x):
    x = as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _result(out, (x,), backward)


def bce_loss(pred, target, eps=BCE_EPS):
    """Mean binary cross-entropy with predictions clamped to [eps, 1 - eps]."""
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction dims {pred.dims} differ from target dims {list(t.shape)}")
    t = t.astype(pred.data.dtype)
    p = np.clip(pred.data, eps, 1.0 - eps)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inside = (pred.data >= eps) & (pred.data <= 1.0 - eps)

    def backward(g):
        dp = (p - t) / (p * (1.0 - p)) / n
        return (g * dp * inside,)

    return _result(np.asarray(loss, dtype=pred.data.dtype), (pred,), backward)
