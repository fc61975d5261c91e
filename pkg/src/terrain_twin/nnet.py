"""Numpy layer kernels and a small U-Net with hand-written backward passes.

Activations are ``N x C x H x W``.  Convolution kernels are stored as
``Kh x Kw x Cin x Cout``.  Every function works in whatever float dtype it
is given: float32 for training, float64 for gradient checks.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

N_CLASSES = 7
DEBUG = bool(os.environ.get("TERRAIN_TWIN_DEBUG"))


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values after {where}")


def _debug(x, where):
    if DEBUG:
        check_finite(x, where)
    return x


# ---------------------------------------------------------------------------
# convolution (stride 1, zero "same" padding, cross-correlation)

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))       # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 4, 5, 1).reshape(n * h * w, k * k * c)


def _check_conv(x, w, b=None):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv expects 4-D input and kernel, got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square and odd, got {kh}x{kw}")
    if x.shape[1] != cin:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")


def conv2d_forward(x, w, b, cols=None):
    """Same-size convolution; returns ``(out, cols)`` where ``cols`` can be
    handed back to :func:`conv2d_backward` to skip recomputation."""
    _check_conv(x, w, b)
    n, _, h, wd = x.shape
    k, cout = w.shape[0], w.shape[3]
    if cols is None:
        cols = _im2col(x, k)
    out = cols @ w.reshape(-1, cout) + b
    return out.reshape(n, h, wd, cout).transpose(0, 3, 1, 2), cols


def conv2d_backward(x, w, grad_out, cols=None):
    _check_conv(x, w)
    n, cin, h, wd = x.shape
    k, cout = w.shape[0], w.shape[3]
    if grad_out.shape != (n, cout, h, wd):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, cout, h, wd)}")
    if cols is None:
        cols = _im2col(x, k)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_w = (cols.T @ g).reshape(w.shape)
    grad_b = g.sum(axis=0)
    gcols = (g @ w.reshape(-1, cout).T).reshape(n, h, wd, k, k, cin)
    p = k // 2
    gxp = np.zeros((n, cin, h + 2 * p, wd + 2 * p), dtype=grad_out.dtype)
    for di in range(k):
        for dj in range(k):
            gxp[:, :, di:di + h, dj:dj + wd] += gcols[:, :, :, di, dj, :].transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# pointwise and pooling

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def maxpool2(x):
    """2x2/stride-2 max pool.  Returns ``(out, argmax)``; ties keep the first
    element in row-major order within the block."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(idx, grad_out):
    n, c, h2, w2 = grad_out.shape
    g = np.zeros((n, c, h2, w2, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return g.reshape(n, c, 2 * h2, 2 * w2)


# ---------------------------------------------------------------------------
# 2x2 stride-2 transposed convolution (non-overlapping scatter)

def tconv2(x, w, b):
    if x.ndim != 4 or w.shape[:2] != (2, 2) or w.shape[2] != x.shape[1]:
        raise ShapeError(f"tconv2 shape mismatch: input {x.shape}, kernel {w.shape}")
    n, c, h, wd = x.shape
    cout = w.shape[3]
    if b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
    y = (xm @ w.transpose(2, 0, 1, 3).reshape(c, 4 * cout)).reshape(n, h, wd, 2, 2, cout)
    y = y.transpose(0, 5, 1, 3, 2, 4).reshape(n, cout, 2 * h, 2 * wd)
    return y + b[None, :, None, None]


def tconv2_backward(x, w, grad_out):
    n, c, h, wd = x.shape
    cout = w.shape[3]
    if grad_out.shape != (n, cout, 2 * h, 2 * wd):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, cout, 2 * h, 2 * wd)}")
    g = grad_out.reshape(n, cout, h, 2, wd, 2).transpose(0, 2, 4, 3, 5, 1).reshape(-1, 4 * cout)
    xm = x.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = w.transpose(2, 0, 1, 3).reshape(c, 4 * cout)
    grad_w = (xm.T @ g).reshape(c, 2, 2, cout).transpose(1, 2, 0, 3)
    grad_x = (g @ wm.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


# ---------------------------------------------------------------------------
# skip connections, dropout, loss

def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad, ca: int):
    return grad[:, :ca], grad[:, ca:]


def dropout(x, p: float, rng: np.random.Generator | None, training: bool):
    """Inverted dropout; returns ``(out, keep_mask)`` (mask is None when inactive)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return x * keep, keep


def dropout_backward(keep, grad_out):
    return grad_out if keep is None else grad_out * keep


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_ce(logits, labels):
    """Mean per-pixel cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in 0..{c - 1}")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    lab = labels.astype(np.intp)[:, None]
    count = n * h * w
    loss = -np.take_along_axis(logp, lab, axis=1).sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=1) - 1, axis=1)
    return float(loss), grad / grad.dtype.type(count)


# ---------------------------------------------------------------------------
# U-Net

@dataclass
class UNetConfig:
    in_channels: int = 3
    n_classes: int = N_CLASSES
    depth: int = 2
    base_filters: int = 16
    dropout_p: float = 0.0

    def validate(self):
        if self.in_channels not in (3, 4):
            raise ValueError("in_channels must be 3 (RGB) or 4 (RGB + height)")
        if self.n_classes != N_CLASSES:
            raise ValueError(f"n_classes must be {N_CLASSES}")
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")


def param_layout(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...], int]]:
    """Ordered ``(name, shape, fan_in)`` for every parameter tensor."""
    out = []

    def conv(name, k, cin, cout):
        out.append((f"{name}.w", (k, k, cin, cout), k * k * cin))
        out.append((f"{name}.b", (cout,), k * k * cin))

    f = cfg.base_filters
    cin = cfg.in_channels
    for k in range(cfg.depth):
        conv(f"enc{k}.conv1", 3, cin, f << k)
        conv(f"enc{k}.conv2", 3, f << k, f << k)
        cin = f << k
    conv("mid.conv1", 3, cin, f << cfg.depth)
    conv("mid.conv2", 3, f << cfg.depth, f << cfg.depth)
    for k in reversed(range(cfg.depth)):
        # each output pixel of the stride-2 transposed conv sees one tap per input channel
        out.append((f"dec{k}.up.w", (2, 2, f << (k + 1), f << k), f << (k + 1)))
        out.append((f"dec{k}.up.b", (f << k,), f << (k + 1)))
        conv(f"dec{k}.conv1", 3, 2 * (f << k), f << k)
        conv(f"dec{k}.conv2", 3, f << k, f << k)
    conv("head", 1, f, cfg.n_classes)
    return out


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [name for name, _, _ in param_layout(self.config)]

    def copy(self) -> "UNetModel":
        return UNetModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "UNetModel":
        return UNetModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})


def init_params(cfg: UNetConfig, seed: int, dtype=np.float32) -> UNetModel:
    """He-uniform weights, zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in in param_layout(cfg):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return UNetModel(cfg, params)


def _conv_relu(x, w, b, cache, key):
    pre, cols = conv2d_forward(x, w, b)
    cache[key] = (x, cols, pre)
    return _debug(relu(pre), key)


def _conv_relu_back(g, w, cache, key, grads):
    x, cols, pre = cache[key]
    gx, gw, gb = conv2d_backward(x, w, relu_backward(pre, g), cols)
    grads[f"{key}.w"] = gw
    grads[f"{key}.b"] = gb
    return gx


def _forward(model: UNetModel, x, training: bool, rng):
    cfg = model.config
    p = model.params
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"input has {c} channels, model expects {cfg.in_channels}")
    if h % (1 << cfg.depth) or w % (1 << cfg.depth):
        raise ShapeError(f"H and W must be divisible by {1 << cfg.depth}, got {h}x{w}")
    cache = {}
    skips = []
    for k in range(cfg.depth):
        x = _conv_relu(x, p[f"enc{k}.conv1.w"], p[f"enc{k}.conv1.b"], cache, f"enc{k}.conv1")
        x = _conv_relu(x, p[f"enc{k}.conv2.w"], p[f"enc{k}.conv2.b"], cache, f"enc{k}.conv2")
        skips.append(x)
        x, cache[f"enc{k}.pool"] = maxpool2(x)
    for j in (1, 2):
        key = f"mid.conv{j}"
        x = _conv_relu(x, p[f"{key}.w"], p[f"{key}.b"], cache, key)
        x, cache[f"{key}.drop"] = dropout(x, cfg.dropout_p, rng, training)
    for k in reversed(range(cfg.depth)):
        cache[f"dec{k}.up"] = x
        up = tconv2(x, p[f"dec{k}.up.w"], p[f"dec{k}.up.b"])
        x = concat_channels(skips[k], up)
        x = _conv_relu(x, p[f"dec{k}.conv1.w"], p[f"dec{k}.conv1.b"], cache, f"dec{k}.conv1")
        x = _conv_relu(x, p[f"dec{k}.conv2.w"], p[f"dec{k}.conv2.b"], cache, f"dec{k}.conv2")
    logits, cols = conv2d_forward(x, p["head.w"], p["head.b"])
    cache["head"] = (x, cols)
    return _debug(logits, "head"), cache


def _backward(model: UNetModel, cache, grad_logits):
    cfg = model.config
    p = model.params
    grads = {}
    x, cols = cache["head"]
    g, grads["head.w"], grads["head.b"] = conv2d_backward(x, p["head.w"], grad_logits, cols)
    skip_grads = {}
    for k in range(cfg.depth):
        g = _conv_relu_back(g, p[f"dec{k}.conv2.w"], cache, f"dec{k}.conv2", grads)
        g = _conv_relu_back(g, p[f"dec{k}.conv1.w"], cache, f"dec{k}.conv1", grads)
        skip_grads[k], g_up = split_channels(g, cfg.base_filters << k)
        g, grads[f"dec{k}.up.w"], grads[f"dec{k}.up.b"] = tconv2_backward(
            cache[f"dec{k}.up"], p[f"dec{k}.up.w"], g_up)
    for j in (2, 1):
        key = f"mid.conv{j}"
        g = dropout_backward(cache[f"{key}.drop"], g)
        g = _conv_relu_back(g, p[f"{key}.w"], cache, key, grads)
    for k in reversed(range(cfg.depth)):
        g = maxpool2_backward(cache[f"enc{k}.pool"], g) + skip_grads[k]
        g = _conv_relu_back(g, p[f"enc{k}.conv2.w"], cache, f"enc{k}.conv2", grads)
        g = _conv_relu_back(g, p[f"enc{k}.conv1.w"], cache, f"enc{k}.conv1", grads)
    return grads, g


def unet_forward(model: UNetModel, x, training: bool = False, rng=None):
    """Logits ``N x 7 x H x W``."""
    logits, _ = _forward(model, x, training, rng)
    return logits


def unet_loss_and_grads(model: UNetModel, x, labels, training: bool = True, rng=None):
    """One forward/backward pass.  Returns ``(loss, grads, logits)``."""
    logits, cache = _forward(model, x, training, rng)
    loss, grad_logits = softmax_ce(logits, labels)
    grads, _ = _backward(model, cache, grad_logits)
    return loss, grads, logits


def unet_input_grad(model: UNetModel, x, labels):
    """Gradient of the loss w.r.t. the network input (inference mode)."""
    logits, cache = _forward(model, x, False, None)
    _, grad_logits = softmax_ce(logits, labels)
    return _backward(model, cache, grad_logits)[1]
