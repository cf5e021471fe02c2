"""Numpy layers with explicit reverse-mode passes.

Activations are time-major ``(T, B, F)``.  ``mask`` is a ``(T, B)`` 0/1
array marking valid frames of right-padded batches; recurrent layers hold
their state through padded steps, so a padded batch computes exactly what
each utterance would compute alone.
"""
from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --- dense / conv ---------------------------------------------------------

def dense_forward(x, w, b):
    return x @ w.T + b


def dense_backward(dy, x, w):
    dw = np.tensordot(dy, x, axes=(tuple(range(dy.ndim - 1)), tuple(range(x.ndim - 1))))
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ w, dw, db


def context_stack(x, radius):
    """Concatenate frames ``t - radius .. t + radius`` (zero outside) along features."""
    if radius == 0:
        return x
    T = x.shape[0]
    padded = np.zeros((T + 2 * radius,) + x.shape[1:])
    padded[radius:radius + T] = x
    return np.concatenate([padded[k:k + T] for k in range(2 * radius + 1)], axis=-1)


def context_unstack(dctx, radius, din):
    if radius == 0:
        return dctx
    T = dctx.shape[0]
    dpad = np.zeros((T + 2 * radius,) + dctx.shape[1:-1] + (din,))
    for k in range(2 * radius + 1):
        dpad[k:k + T] += dctx[..., k * din:(k + 1) * din]
    return dpad[radius:radius + T]


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(dy, x):
    return dy * (x > 0)


# --- softmax --------------------------------------------------------------

def log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def log_softmax_backward(dy, y):
    return dy - np.exp(y) * np.sum(dy, axis=-1, keepdims=True)


# --- GRU ------------------------------------------------------------------
# gate layout follows the usual (reset, update, new) stacking:
#   r = sig(Wir x + bir + Whr h + bhr)
#   z = sig(Wiz x + biz + Whz h + bhz)
#   n = tanh(Win x + bin + r * (Whn h + bhn))
#   h' = (1 - z) * n + z * h

def gru_forward(x, mask, w_ih, w_hh, b_ih, b_hh):
    T, B, _ = x.shape
    H = w_hh.shape[1]
    xp = x @ w_ih.T + b_ih
    hs = np.zeros((T + 1, B, H))
    r_ = np.empty((T, B, H))
    z_ = np.empty((T, B, H))
    n_ = np.empty((T, B, H))
    hn_ = np.empty((T, B, H))
    h = hs[0]
    for t in range(T):
        hp = h @ w_hh.T + b_hh
        r = sigmoid(xp[t, :, :H] + hp[:, :H])
        z = sigmoid(xp[t, :, H:2 * H] + hp[:, H:2 * H])
        n = np.tanh(xp[t, :, 2 * H:] + r * hp[:, 2 * H:])
        m = mask[t][:, None]
        h = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
        hs[t + 1] = h
        r_[t], z_[t], n_[t], hn_[t] = r, z, n, hp[:, 2 * H:]
    return hs[1:], (x, mask, hs, r_, z_, n_, hn_)


def gru_backward(dy, cache, w_ih, w_hh):
    x, mask, hs, r_, z_, n_, hn_ = cache
    T, B, H = dy.shape
    dxp = np.empty((T, B, 3 * H))
    dhp = np.empty((T, B, 3 * H))
    dh = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        dh = dh + dy[t]
        m = mask[t][:, None]
        z, n, r, hprev = z_[t], n_[t], r_[t], hs[t]
        dcell = m * dh
        dn = dcell * (1.0 - z)
        da_n = dn * (1.0 - n * n)
        da_r = da_n * hn_[t] * r * (1.0 - r)
        da_z = dcell * (hprev - n) * z * (1.0 - z)
        dxp[t, :, :H] = da_r
        dxp[t, :, H:2 * H] = da_z
        dxp[t, :, 2 * H:] = da_n
        dhp[t, :, :H] = da_r
        dhp[t, :, H:2 * H] = da_z
        dhp[t, :, 2 * H:] = da_n * r
        dh = (1.0 - m) * dh + dcell * z + dhp[t] @ w_hh
    dw_ih = np.tensordot(dxp, x, axes=([0, 1], [0, 1]))
    dw_hh = np.tensordot(dhp, hs[:-1], axes=([0, 1], [0, 1]))
    db_ih = dxp.sum(axis=(0, 1))
    db_hh = dhp.sum(axis=(0, 1))
    return dxp @ w_ih, dw_ih, dw_hh, db_ih, db_hh


def reverse_padded(x, lengths):
    """Reverse each sequence within its valid length; padding stays at the end."""
    out = np.zeros_like(x)
    for b, L in enumerate(lengths):
        out[:L, b] = x[L - 1::-1, b] if L else x[:0, b]
    return out


def bigru_forward(x, mask, lengths, fwd, bwd):
    """Bidirectional GRU; ``fwd``/``bwd`` are ``(w_ih, w_hh, b_ih, b_hh)`` tuples."""
    yf, cf = gru_forward(x, mask, *fwd)
    xr = reverse_padded(x, lengths)
    yb_r, cb = gru_forward(xr, mask, *bwd)
    yb = reverse_padded(yb_r, lengths)
    return np.concatenate([yf, yb], axis=-1), (cf, cb)


def bigru_backward(dy, cache, lengths, fwd, bwd):
    cf, cb = cache
    H = fwd[1].shape[1]
    dxf, *gf = gru_backward(dy[..., :H], cf, fwd[0], fwd[1])
    dyb_r = reverse_padded(dy[..., H:], lengths)
    dxb_r, *gb = gru_backward(dyb_r, cb, bwd[0], bwd[1])
    return dxf + reverse_padded(dxb_r, lengths), gf, gb
