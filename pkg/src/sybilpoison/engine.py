"""Dense numpy autodiff for the supported layer set.

Reverse mode gives parameter and input gradients of the summed
cross-entropy. For the poison objective we also need

    d/dDelta < u, sum_i grad_w l(f_w(x_i + Delta_i), y_i) >

which is obtained by forward-over-reverse: the forward and backward passes
are run on dual numbers whose tangent is a perturbation of the parameters
along ``u``. The tangent of the input gradient is the quantity above
(mixed partials commute).

Conventions: ReLU'(0) = 0; max-pool ties go to the lowest flat index in the
window; all arithmetic is float64.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layers import Conv2d, Dense, Flatten, MaxPool2d, ReLU, ShapeError


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


# --- per-layer rules --------------------------------------------------------
# fwd(layer, p, a, a_dot, u) -> (z, z_dot, cache)
# bwd(layer, p, cache, g, g_dot, u, want_grads) -> (g_in, g_in_dot, grads)
# ``u`` is the per-layer parameter tangent dict or None; ``*_dot`` None means 0.

def _dense_fwd(layer, p, a, a_dot, u):
    W, b = p["weight"], p["bias"]
    z = a @ W.T + b
    z_dot = None
    if a_dot is not None:
        z_dot = a_dot @ W.T
    if u is not None:
        z_dot = _add(z_dot, a @ u["weight"].T + u["bias"])
    return z, z_dot, a


def _dense_bwd(layer, p, a, g, g_dot, u, want_grads):
    W = p["weight"]
    g_in = g @ W
    g_in_dot = None
    if g_dot is not None:
        g_in_dot = g_dot @ W
    if u is not None:
        g_in_dot = _add(g_in_dot, g @ u["weight"])
    grads = {"weight": g.T @ a, "bias": g.sum(axis=0)} if want_grads else None
    return g_in, g_in_dot, grads


def _conv(x, k):
    # x (N,C,H,W), k (O,C,kh,kw) -> (N,O,H-kh+1,W-kw+1); cross-correlation
    win = sliding_window_view(x, k.shape[2:], axis=(2, 3))
    return np.einsum("nchwij,ocij->nohw", win, k, optimize=True)


def _conv_input_grad(g, k, in_hw):
    n = g.shape[0]
    out = np.zeros((n, k.shape[1]) + tuple(in_hw))
    ho, wo = g.shape[2:]
    for i in range(k.shape[2]):
        for j in range(k.shape[3]):
            out[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, k[:, :, i, j], optimize=True)
    return out


def _conv_fwd(layer, p, a, a_dot, u):
    K, b = p["weight"], p["bias"]
    z = _conv(a, K) + b[None, :, None, None]
    z_dot = None
    if a_dot is not None:
        z_dot = _conv(a_dot, K)
    if u is not None:
        z_dot = _add(z_dot, _conv(a, u["weight"]) + u["bias"][None, :, None, None])
    return z, z_dot, a


def _conv_bwd(layer, p, a, g, g_dot, u, want_grads):
    K = p["weight"]
    hw = a.shape[2:]
    g_in = _conv_input_grad(g, K, hw)
    g_in_dot = None
    if g_dot is not None:
        g_in_dot = _conv_input_grad(g_dot, K, hw)
    if u is not None:
        g_in_dot = _add(g_in_dot, _conv_input_grad(g, u["weight"], hw))
    grads = None
    if want_grads:
        win = sliding_window_view(a, K.shape[2:], axis=(2, 3))
        grads = {"weight": np.einsum("nchwij,nohw->ocij", win, g, optimize=True),
                 "bias": g.sum(axis=(0, 2, 3))}
    return g_in, g_in_dot, grads


def _pool_windows(x, s):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // s, s, w // s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // s, w // s, s * s)


def _pool_unwindows(x, s):
    n, c, ho, wo, _ = x.shape
    return x.reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * s, wo * s)


def _pool_fwd(layer, p, a, a_dot, u):
    s = layer.size
    win = _pool_windows(a, s)
    idx = np.argmax(win, axis=-1)[..., None]  # first max wins
    z = np.take_along_axis(win, idx, axis=-1)[..., 0]
    z_dot = None
    if a_dot is not None:
        z_dot = np.take_along_axis(_pool_windows(a_dot, s), idx, axis=-1)[..., 0]
    return z, z_dot, idx


def _pool_scatter(g, idx, s):
    out = np.zeros(g.shape + (s * s,))
    np.put_along_axis(out, idx, g[..., None], axis=-1)
    return _pool_unwindows(out, s)


def _pool_bwd(layer, p, idx, g, g_dot, u, want_grads):
    s = layer.size
    g_in_dot = None if g_dot is None else _pool_scatter(g_dot, idx, s)
    return _pool_scatter(g, idx, s), g_in_dot, None


def _relu_fwd(layer, p, a, a_dot, u):
    mask = a > 0
    return a * mask, None if a_dot is None else a_dot * mask, mask


def _relu_bwd(layer, p, mask, g, g_dot, u, want_grads):
    return g * mask, None if g_dot is None else g_dot * mask, None


def _flatten_fwd(layer, p, a, a_dot, u):
    return a.reshape(a.shape[0], -1), None if a_dot is None else a_dot.reshape(a.shape[0], -1), a.shape


def _flatten_bwd(layer, p, shape, g, g_dot, u, want_grads):
    return g.reshape(shape), None if g_dot is None else g_dot.reshape(shape), None


_RULES = {
    Dense: (_dense_fwd, _dense_bwd),
    Conv2d: (_conv_fwd, _conv_bwd),
    MaxPool2d: (_pool_fwd, _pool_bwd),
    ReLU: (_relu_fwd, _relu_bwd),
    Flatten: (_flatten_fwd, _flatten_bwd),
}


# --- passes -----------------------------------------------------------------

def _check_batch(model, images, labels=None, loss="cross_entropy"):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 0 or images.shape[0] == 0:
        raise ValueError("empty batch")
    if images.shape[1:] != tuple(model.input_shape):
        raise ShapeError(0, f"input shape {images.shape[1:]} does not match model input {tuple(model.input_shape)}")
    if labels is not None and loss == "squared":
        labels = np.asarray(labels, dtype=np.float64).reshape(images.shape[0], -1)
    elif labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (images.shape[0],):
            raise ValueError(f"{labels.shape[0] if labels.ndim else 0} labels for {images.shape[0]} images")
        if labels.size and (labels.min() < 0 or labels.max() >= model.num_classes):
            raise ValueError(f"labels must lie in [0, {model.num_classes})")
        labels = labels.astype(np.int64)
    return images, labels


def _forward(model, layer_params, x, u=None, stop=None):
    """Run layers[:stop]; returns (out, out_dot, caches)."""
    stop = len(model.layers) if stop is None else stop
    a, a_dot, caches = x, None, []
    for i in range(stop):
        layer = model.layers[i]
        fwd = _RULES[type(layer)][0]
        a, a_dot, cache = fwd(layer, layer_params[i], a, a_dot, None if u is None else u[i])
        caches.append(cache)
    return a, a_dot, caches


def _backward(model, layer_params, caches, g, g_dot=None, u=None, want_grads=False):
    """Backprop from the output of layers[:len(caches)]. Returns (g_in, g_in_dot, grads)."""
    grads = [dict() for _ in model.layers]
    for i in range(len(caches) - 1, -1, -1):
        layer = model.layers[i]
        bwd = _RULES[type(layer)][1]
        g, g_dot, gp = bwd(layer, layer_params[i], caches[i], g, g_dot, None if u is None else u[i], want_grads)
        if gp is not None:
            grads[i] = gp
    return g, g_dot, grads


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _ce_sum(z, labels):
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.sum(lse - z[np.arange(len(labels)), labels]))


def _ce_cotangent(z, labels, z_dot=None):
    s = _softmax(z)
    g = s.copy()
    g[np.arange(len(labels)), labels] -= 1.0
    g_dot = None
    if z_dot is not None:
        g_dot = s * z_dot - s * np.sum(s * z_dot, axis=1, keepdims=True)
    return g, g_dot


def _sq_sum(z, targets):
    return float(np.sum((z - targets) ** 2))


def _sq_cotangent(z, targets, z_dot=None):
    return 2.0 * (z - targets), None if z_dot is None else 2.0 * z_dot


# "squared" takes real-valued targets of the output's shape; it exists for
# closed-form checks of the second-order machinery.
_LOSSES = {"cross_entropy": (_ce_sum, _ce_cotangent), "squared": (_sq_sum, _sq_cotangent)}


# --- public operations ------------------------------------------------------

def forward(model, params, images):
    """Logits for a batch."""
    images, _ = _check_batch(model, images)
    out, _, _ = _forward(model, model.unflatten(params), images)
    return out


def predict(model, params, images, chunk=4096):
    """Argmax class per sample (ties go to the lowest index)."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([np.argmax(forward(model, params, images[i:i + chunk]), axis=1)
                           for i in range(0, len(images), chunk)])


def forward_loss(model, params, images, labels, loss="cross_entropy"):
    """Mean cross-entropy over the batch and the logits."""
    images, labels = _check_batch(model, images, labels, loss)
    z, _, _ = _forward(model, model.unflatten(params), images)
    return _LOSSES[loss][0](z, labels) / len(labels), z


def loss_and_grad(model, params, images, labels, loss="cross_entropy"):
    """Summed batch loss and its parameter gradient as a flat vector."""
    images, labels = _check_batch(model, images, labels, loss)
    value, cotangent = _LOSSES[loss]
    lp = model.unflatten(params)
    z, _, caches = _forward(model, lp, images)
    g, _ = cotangent(z, labels)
    _, _, grads = _backward(model, lp, caches, g, want_grads=True)
    return value(z, labels), model.flatten(grads)


def grad_params(model, params, images, labels, loss="cross_entropy"):
    """Gradient of the summed (not averaged) batch loss w.r.t. the parameters."""
    return loss_and_grad(model, params, images, labels, loss)[1]


def grad_input(model, params, images, labels, loss="cross_entropy"):
    """Gradient of the summed batch loss w.r.t. the input images."""
    images, labels = _check_batch(model, images, labels, loss)
    lp = model.unflatten(params)
    z, _, caches = _forward(model, lp, images)
    g, _ = _LOSSES[loss][1](z, labels)
    g_in, _, _ = _backward(model, lp, caches, g)
    return g_in


def mixed_grad_delta(model, params, images, labels, delta, u, loss="cross_entropy"):
    """Gradient w.r.t. ``delta`` of <u, grad_w sum_i l(f_w(x_i + delta_i), y_i)>."""
    images, labels = _check_batch(model, images, labels, loss)
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != images.shape:
        raise ValueError(f"delta shape {delta.shape} does not match images {images.shape}")
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (model.num_params,):
        raise ValueError(f"cotangent has shape {u.shape}, expected ({model.num_params},)")
    lp, up = model.unflatten(params), model.unflatten(u)
    z, z_dot, caches = _forward(model, lp, images + delta, u=up)
    g, g_dot = _LOSSES[loss][1](z, labels, z_dot)
    _, g_in_dot, _ = _backward(model, lp, caches, g, g_dot, u=up)
    if g_in_dot is None:
        return np.zeros_like(images)
    return g_in_dot


def features(model, params, images):
    """Activations feeding the final Dense layer."""
    images, _ = _check_batch(model, images)
    out, _, _ = _forward(model, model.unflatten(params), images, stop=model.penultimate_index())
    return out


def feature_vjp(model, params, images, cotangent):
    """Features and the input gradient of <cotangent, features(images)>."""
    images, _ = _check_batch(model, images)
    lp = model.unflatten(params)
    out, _, caches = _forward(model, lp, images, stop=model.penultimate_index())
    g_in, _, _ = _backward(model, lp, caches, np.asarray(cotangent, dtype=np.float64))
    return out, g_in
