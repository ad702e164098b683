"""Dense NCHW tensor math with forward and reverse-mode differentiation.

Tensors are plain numpy arrays. The numeric core runs in float32; passing
float64 inputs and weights switches every op to float64, which is what the
gradient checks use. Graph execution works over any object exposing
``nodes`` (each with ``id``, ``op``, ``inputs`` and ``attrs``), so this module
does not depend on the graph module.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
TRAINABLE = ("weight", "bias", "gamma", "beta")


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared in the forward pass or the loss."""

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


@dataclass(frozen=True)
class ConvParams:
    kernel_h: int
    kernel_w: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride, self.in_channels, self.out_channels) < 1:
            raise ShapeError(f"invalid conv params {self}")
        if self.padding < 0:
            raise ShapeError(f"negative padding {self.padding}")

    def output_hw(self, h, w):
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv window {self.kernel_h}x{self.kernel_w} does not fit a padded {h}x{w} input"
            )
        return ho, wo


class MemoryTracker:
    """Counts live tensor bytes and remembers the high-water mark."""

    def __init__(self):
        self.live = 0
        self.peak = 0

    def alloc(self, nbytes):
        self.live += int(nbytes)
        self.peak = max(self.peak, self.live)

    def free(self, nbytes):
        self.live -= int(nbytes)


# ---------------------------------------------------------------- convolution


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return x, win  # win: N, C, Ho, Wo, kh, kw


def _im2col(x, params):
    _, win = _windows(x, params.kernel_h, params.kernel_w, params.stride, params.padding)
    n, c, ho, wo, kh, kw = win.shape
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def conv2d_forward(x, weight, bias, params, tracker=None, return_cols=False):
    """Cross-correlate an NCHW batch with KCHW filters; raw pre-activation output."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NCHW, got {x.ndim} dims")
    if weight.shape != (params.out_channels, params.in_channels, params.kernel_h, params.kernel_w):
        raise ShapeError(
            f"weight shape {weight.shape} does not match params "
            f"({params.out_channels}, {params.in_channels}, {params.kernel_h}, {params.kernel_w})"
        )
    if x.shape[1] != params.in_channels:
        raise ShapeError(
            f"input channel dimension C={x.shape[1]} != weight C={params.in_channels}"
        )
    n = x.shape[0]
    params.output_hw(x.shape[2], x.shape[3])
    cols, ho, wo = _im2col(x, params)
    if tracker is not None:
        tracker.alloc(cols.nbytes)
    y = cols @ weight.reshape(params.out_channels, -1).T
    if bias is not None:
        y += bias
    out = np.ascontiguousarray(y.reshape(n, ho, wo, params.out_channels).transpose(0, 3, 1, 2))
    if tracker is not None:
        tracker.free(cols.nbytes)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dy, x_shape, cols, weight, params, with_bias):
    n, k, ho, wo = dy.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (dy2.T @ cols).reshape(weight.shape)
    db = dy2.sum(axis=0) if with_bias else None
    dcols = (dy2 @ weight.reshape(k, -1)).reshape(n, ho, wo, params.in_channels, params.kernel_h, params.kernel_w)
    p, s = params.padding, params.stride
    _, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
    for i in range(params.kernel_h):
        for j in range(params.kernel_w):
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------- pooling


def _pool_windows(x, k, s):
    _, win = _windows(x, k, k, s, 0)
    n, c, ho, wo = win.shape[:4]
    if ho < 1 or wo < 1:
        raise ShapeError(f"pool window {k} larger than input {x.shape[2:]}")
    return win.reshape(n, c, ho, wo, k * k)


def maxpool_forward(x, k, s):
    flat = _pool_windows(x, k, s)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool_backward(dy, idx, x_shape, k, s):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[2:]
    for i in range(k):
        for j in range(k):
            hit = idx == i * k + j
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(hit, dy, 0)
    return dx


def avgpool_forward(x, k, s):
    return np.ascontiguousarray(_pool_windows(x, k, s).mean(axis=-1))


def avgpool_backward(dy, x_shape, k, s):
    dx = np.zeros(x_shape, dtype=dy.dtype)
    ho, wo = dy.shape[2:]
    share = dy / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
    return dx


# ---------------------------------------------------------------- batch norm


def batchnorm_forward(x, gamma, beta, mean, var, eps, training):
    if x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batch norm over {gamma.shape[0]} channels got C={x.shape[1]}")
    shape = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    if training:
        mu = x.mean(axis=axes)
        var_b = x.var(axis=axes)
        inv = 1.0 / np.sqrt(var_b + eps)
        xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
        count = x.size // x.shape[1]
        unbiased = var_b * count / max(count - 1, 1)
        new_mean = BN_MOMENTUM * mean + (1 - BN_MOMENTUM) * mu
        new_var = BN_MOMENTUM * var + (1 - BN_MOMENTUM) * unbiased
        out = xhat * gamma.reshape(shape) + beta.reshape(shape)
        return out, (xhat, inv, True), (new_mean.astype(mean.dtype), new_var.astype(var.dtype))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = xhat * gamma.reshape(shape) + beta.reshape(shape)
    return out.astype(x.dtype, copy=False), (xhat, inv.astype(x.dtype), False), None


def batchnorm_backward(dy, cache, gamma):
    xhat, inv, training = cache
    shape = (1, -1) + (1,) * (dy.ndim - 2)
    axes = (0,) + tuple(range(2, dy.ndim))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma.reshape(shape)
    if not training:
        return dxhat * inv.reshape(shape), dgamma, dbeta
    m = dy.size // dy.shape[1]
    dx = (inv.reshape(shape) / m) * (
        m * dxhat - dxhat.sum(axis=axes).reshape(shape) - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- misc ops


def shortcut_forward(x, stride, out_channels):
    """Zero-padded identity shortcut: spatial subsample plus channel padding."""
    c = x.shape[1]
    if out_channels < c:
        raise ShapeError(f"shortcut cannot shrink {c} channels to {out_channels}")
    before = (out_channels - c) // 2
    sub = x[:, :, ::stride, ::stride]
    out = np.zeros((x.shape[0], out_channels) + sub.shape[2:], dtype=x.dtype)
    out[:, before:before + c] = sub
    return out


def shortcut_backward(dy, x_shape, stride):
    c = x_shape[1]
    before = (dy.shape[1] - c) // 2
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :, ::stride, ::stride] = dy[:, before:before + c]
    return dx


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logsum - z[np.arange(n), labels]))
    grad = softmax(logits)
    grad[np.arange(n), labels] -= 1
    return loss, grad / n


# ---------------------------------------------------------------- dispatch


def _conv_params(node):
    a = node.attrs
    k = a["kernel"]
    return ConvParams(k, k, a["stride"], a["padding"], a["in_channels"], a["out_channels"])


def _forward_op(node, inputs, params, training=False, tracker=None, need_cache=True):
    """Returns (output, cache, updated_buffers)."""
    op, a = node.op, node.attrs
    x = inputs[0]
    if op == "conv":
        cp = _conv_params(node)
        out, cols = conv2d_forward(x, params["weight"], params.get("bias"), cp, tracker, return_cols=True)
        return out, (x.shape, cols if need_cache else None), None
    if op == "bn":
        out, cache, upd = batchnorm_forward(
            x, params["gamma"], params["beta"], params["running_mean"], params["running_var"],
            a.get("eps", 1e-5), bool(training),
        )
        return out, cache, upd
    if op == "relu":
        return np.maximum(x, 0), x > 0, None
    if op == "maxpool":
        out, idx = maxpool_forward(x, a["kernel"], a["stride"])
        return out, (x.shape, idx), None
    if op == "avgpool":
        return avgpool_forward(x, a["kernel"], a["stride"]), x.shape, None
    if op == "gap":
        if x.ndim != 4:
            raise ShapeError("global pooling needs an NCHW input")
        return x.mean(axis=(2, 3)), x.shape, None
    if op == "flatten":
        return x.reshape(x.shape[0], -1), x.shape, None
    if op == "dense":
        w = params["weight"]
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"dense expects {w.shape[1]} input features, got shape {x.shape}")
        out = x @ w.T
        if "bias" in params:
            out = out + params["bias"]
        return out, x, None
    if op == "add":
        if len(inputs) < 2:
            raise ShapeError("residual add needs two inputs")
        out = inputs[0]
        for other in inputs[1:]:
            if other.shape != out.shape:
                raise ShapeError(f"residual add shapes differ: {out.shape} vs {other.shape}")
            out = out + other
        return out, None, None
    if op == "shortcut":
        return shortcut_forward(x, a["stride"], a["out_channels"]), x.shape, None
    if op == "softmax":
        out = softmax(x)
        return out, out, None
    raise ShapeError(f"unsupported node type {op!r}")


def _backward_op(node, dy, cache, params):
    """Returns (input grads list, param grads dict)."""
    op, a = node.op, node.attrs
    if op == "conv":
        x_shape, cols = cache
        dx, dw, db = conv2d_backward(dy, x_shape, cols, params["weight"], _conv_params(node), "bias" in params)
        g = {"weight": dw}
        if db is not None:
            g["bias"] = db
        return [dx], g
    if op == "bn":
        dx, dg, dbeta = batchnorm_backward(dy, cache, params["gamma"])
        return [dx], {"gamma": dg, "beta": dbeta}
    if op == "relu":
        return [dy * cache], {}
    if op == "maxpool":
        x_shape, idx = cache
        return [maxpool_backward(dy, idx, x_shape, a["kernel"], a["stride"])], {}
    if op == "avgpool":
        return [avgpool_backward(dy, cache, a["kernel"], a["stride"])], {}
    if op == "gap":
        n, c, h, w = cache
        return [np.broadcast_to(dy[:, :, None, None] / (h * w), cache).copy()], {}
    if op == "flatten":
        return [dy.reshape(cache)], {}
    if op == "dense":
        x = cache
        g = {"weight": dy.T @ x}
        if "bias" in params:
            g["bias"] = dy.sum(axis=0)
        return [dy @ params["weight"]], g
    if op == "add":
        return [dy] * len(node.inputs), {}
    if op == "shortcut":
        return [shortcut_backward(dy, cache, a["stride"])], {}
    if op == "softmax":
        s = cache
        return [s * (dy - (dy * s).sum(axis=1, keepdims=True))], {}
    raise ShapeError(f"unsupported node type {op!r}")


def layer_forward(node, inputs, params=None, training=False):
    """Apply one layer spec to its input tensor(s)."""
    if isinstance(inputs, np.ndarray):
        inputs = [inputs]
    out, _, _ = _forward_op(node, list(inputs), params or {}, training)
    return out


# ---------------------------------------------------------------- graph runs


@dataclass
class ForwardPass:
    logits: np.ndarray
    outputs: dict
    caches: dict
    bn_updates: dict
    overridden: frozenset = frozenset()


def _last_use(nodes):
    last = {}
    for i, node in enumerate(nodes):
        for src in node.inputs:
            last[src] = i
    return last


def run_forward(graph, weights, x, training=False, keep=True, tracker=None, overrides=None,
                check_finite=False, hook=None):
    """Execute the graph on a batch.

    With ``keep=False`` intermediate outputs are released after their last
    consumer, which is what the memory tracker measures. ``overrides`` maps a
    node id to a tensor that replaces that node's computed output. ``hook`` is
    called as ``hook(node, inputs, output)`` after every node.
    """
    nodes = graph.nodes
    outputs = {"input": x}
    caches = {}
    bn_updates = {}
    if training and not keep:
        raise ValueError("training passes must keep intermediate outputs")
    last = _last_use(nodes) if not keep else None
    if tracker is not None:
        tracker.alloc(x.nbytes)
    for i, node in enumerate(nodes):
        ins = [outputs[s] for s in node.inputs]
        params = weights.get(node.id, {})
        if overrides and node.id in overrides:
            out = overrides[node.id]
            cache = None
        else:
            out, cache, upd = _forward_op(node, ins, params, training, tracker, need_cache=keep)
            if upd is not None:
                bn_updates[node.id] = upd
        if check_finite and not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite values at layer {i} ({node.id})", layer_index=i)
        if hook is not None:
            hook(node, ins, out)
        outputs[node.id] = out
        if keep:
            caches[node.id] = cache
        if tracker is not None:
            tracker.alloc(out.nbytes)
        if last is not None:
            for src in set(node.inputs):
                if last.get(src) == i:
                    if tracker is not None:
                        tracker.free(outputs[src].nbytes)
                    del outputs[src]
    logits = outputs[nodes[-1].id]
    return ForwardPass(logits, outputs, caches, bn_updates, frozenset(overrides or ()))


def predict(graph, weights, x, batch_size=256):
    """Inference-mode logits, evaluated in chunks."""
    chunks = []
    for start in range(0, x.shape[0], batch_size):
        chunks.append(run_forward(graph, weights, x[start:start + batch_size], keep=False).logits)
    return np.concatenate(chunks, axis=0)


def backward_from(graph, weights, fwd, grad_logits, want_nodes=()):
    """Reverse pass from an upstream gradient on the logits.

    Returns ``(param_grads, node_grads)`` where ``node_grads`` holds the
    gradient with respect to the outputs of ``want_nodes``.
    """
    nodes = graph.nodes
    grads = {nodes[-1].id: grad_logits}
    param_grads = {}
    node_grads = {}
    want = set(want_nodes)
    for node in reversed(nodes):
        dy = grads.pop(node.id, None)
        if node.id in want:
            node_grads[node.id] = dy if dy is not None else np.zeros_like(fwd.outputs[node.id])
        if dy is None:
            continue
        if node.id in fwd.overridden:
            continue
        cache = fwd.caches[node.id]
        params = weights.get(node.id, {})
        dins, pg = _backward_op(node, dy, cache, params)
        if pg:
            param_grads[node.id] = pg
        for src, dx in zip(node.inputs, dins):
            if src in grads:
                grads[src] = grads[src] + dx
            else:
                grads[src] = dx
    for node in nodes:
        for name in TRAINABLE:
            if name in weights.get(node.id, {}):
                param_grads.setdefault(node.id, {}).setdefault(
                    name, np.zeros_like(weights[node.id][name])
                )
    if "input" in want:
        node_grads["input"] = grads.get("input")
    return param_grads, node_grads


def loss_and_grads(graph, weights, x, labels, training=False):
    """Softmax cross-entropy loss, parameter gradients and the forward pass."""
    fwd = run_forward(graph, weights, x, training=training, check_finite=True)
    loss, dlogits = softmax_cross_entropy(fwd.logits, labels)
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite loss", layer_index=len(graph.nodes) - 1)
    grads, _ = backward_from(graph, weights, fwd, dlogits)
    return loss, grads, fwd


def backward(graph, weights, x, labels, training=False):
    """Gradient of the mean softmax cross-entropy for every trainable tensor."""
    _, grads, _ = loss_and_grads(graph, weights, x, labels, training)
    return grads


def sgd_step(weights, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """Momentum SGD; returns ``(new_weights, new_velocity)`` without mutating inputs.

    v <- momentum * v + (g + weight_decay * w);  w <- w - lr * v
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    velocity = velocity or {}
    new_w, new_v = {}, {}
    for nid, tensors in weights.items():
        new_w[nid] = dict(tensors)
        g_node = grads.get(nid, {})
        for name, w in tensors.items():
            if name not in TRAINABLE or name not in g_node:
                continue
            g = g_node[name]
            if g.shape != w.shape:
                raise ShapeError(f"gradient shape {g.shape} != weight shape {w.shape} for {nid}.{name}")
            d = g + weight_decay * w if weight_decay else g
            v_prev = velocity.get(nid, {}).get(name)
            v = d if v_prev is None or momentum == 0 else momentum * v_prev + d
            new_v.setdefault(nid, {})[name] = v
            if lr == 0:
                continue
            new_w[nid][name] = (w - lr * v).astype(w.dtype, copy=False)
    return new_w, new_v


def cast_weights(weights, dtype):
    return {nid: {k: v.astype(dtype) for k, v in t.items()} for nid, t in weights.items()}
