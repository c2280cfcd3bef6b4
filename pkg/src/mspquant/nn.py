"""Forward/backward passes for the NetworkIR layers (float64, numpy)."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import NetworkIR
from .errors import IncompatibleShapeError


def im2col(x, k, stride=1, pad=0):
    """(N, C, H, W) -> (N, oh, ow, C*k*k) patches ordered (channel, k_row, k_col)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    N, C, oh, ow = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(N, oh, ow, C * k * k)


def col2im(cols, x_shape, k, stride=1, pad=0):
    """Adjoint of :func:`im2col` (scatter-add of patch gradients)."""
    N, C, H, W = x_shape
    oh, ow = cols.shape[1], cols.shape[2]
    c = cols.reshape(N, oh, ow, C, k, k)
    out = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += c[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def dense_forward(x, W, b):
    out = x @ W.T
    return out + b if b is not None else out


def conv_forward(x, W, b, stride, pad):
    O, _, k, _ = W.shape
    cols = im2col(x, k, stride, pad)
    out = cols @ W.reshape(O, -1).T
    if b is not None:
        out = out + b
    return out.transpose(0, 3, 1, 2), cols


def maxpool_forward(x):
    N, C, H, W = x.shape
    xc = x[:, :, : H // 2 * 2, : W // 2 * 2].reshape(N, C, H // 2, 2, W // 2, 2)
    out = xc.max(axis=(3, 5))
    return out, (x.shape, xc, out)


def maxpool_backward(dout, cache):
    shape, xc, out = cache
    mask = xc == out[:, :, :, None, :, None]
    # route each gradient to the first maximum only
    flat = mask.transpose(0, 1, 2, 4, 3, 5).reshape(*out.shape, 4)
    first = np.cumsum(flat, axis=-1) == 1
    flat = flat & first
    mask = flat.reshape(*out.shape, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(shape)
    N, C, H, W = shape
    dx[:, :, : H // 2 * 2, : W // 2 * 2] = (mask * dout[:, :, :, None, :, None]).reshape(N, C, H // 2 * 2, W // 2 * 2)
    return dx


def softmax_xent(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    g = np.exp(logp)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


def forward(net: NetworkIR, x, act_fn=None, keep=True):
    """Run ``net`` on a batch. ``act_fn(layer_index, h) -> (h_q, grad_mask)`` is applied
    to the input of every quantizable layer. Returns logits and the backward caches."""
    h = np.asarray(x, dtype=np.float64)
    caches = []
    for i, layer in enumerate(net.layers):
        mask = None
        if layer.quantizable and act_fn is not None:
            h, mask = act_fn(i, h)
        kind = layer.kind
        if kind == "dense":
            if h.ndim != 2 or h.shape[1] != layer.in_features:
                raise IncompatibleShapeError(f"layer {i}: dense expects (N, {layer.in_features}), got {h.shape}")
            cache = (h, mask)
            h = dense_forward(h, layer.weight, layer.bias)
        elif kind == "conv2d":
            x_shape = h.shape
            h, cols = conv_forward(h, layer.weight, layer.bias, layer.stride, layer.pad)
            cache = (cols, x_shape, mask)
        elif kind == "relu":
            cache = h > 0
            h = np.where(cache, h, 0.0)
        elif kind == "maxpool2x2":
            h, cache = maxpool_forward(h)
        else:  # flatten
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        if keep:
            caches.append(cache)
    return h, caches


def backward(net: NetworkIR, caches, dout):
    """Gradients ``{layer_index: (dW, db)}`` for every quantizable layer."""
    grads = {}
    g = dout
    for i in range(len(net.layers) - 1, -1, -1):
        layer, cache = net.layers[i], caches[i]
        kind = layer.kind
        if kind == "dense":
            x, mask = cache
            grads[i] = (g.T @ x, g.sum(axis=0) if layer.bias is not None else None)
            if i:
                g = g @ layer.weight
                if mask is not None:
                    g = g * mask
        elif kind == "conv2d":
            cols, x_shape, mask = cache
            O = layer.out_ch
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
            c2 = cols.reshape(-1, cols.shape[-1])
            dW = (g2.T @ c2).reshape(layer.weight.shape)
            grads[i] = (dW, g2.sum(axis=0) if layer.bias is not None else None)
            if i:
                dcols = (g2 @ layer.weight.reshape(O, -1)).reshape(cols.shape)
                g = col2im(dcols, x_shape, layer.k, layer.stride, layer.pad)
                if mask is not None:
                    g = g * mask
        elif kind == "relu":
            g = g * cache
        elif kind == "maxpool2x2":
            g = maxpool_backward(g, cache)
        else:
            g = g.reshape(cache)
    return grads


def predict(net, x, act_fn=None, batch=1024):
    out = []
    for s in range(0, len(x), batch):
        logits, _ = forward(net, x[s:s + batch], act_fn, keep=False)
        out.append(logits)
    return np.concatenate(out) if out else np.empty((0,))
