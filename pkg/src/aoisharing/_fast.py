"""Fused numba kernels for the per-slot training hot path.

These replicate :class:`aoisharing.nn.DenseNet` forward/backward and
:class:`aoisharing.nn.Adam` over the same flat parameter layout so that one
TD update costs a single call. The numpy classes remain the reference; the
test suite checks both agree to round-off.

``layout`` rows are ``(w_offset, b_offset, fan_in, fan_out)``: the trunk
layers first, then the output layer (plain) or value and advantage heads
(dueling).
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _dense(flat, row, a):
    wo, bo, fi, fo = row[0], row[1], row[2], row[3]
    w = flat[wo:wo + fi * fo].reshape((fi, fo))
    z = np.dot(a, w)
    for i in range(z.shape[0]):
        for j in range(fo):
            z[i, j] += flat[bo + j]
    return z


@njit(cache=True)
def _forward(flat, layout, n_trunk, dueling, x):
    acts = [x]
    pres = [x]  # placeholder keeps list types uniform; pres[l + 1] pairs with acts[l + 1]
    a = x
    for l in range(n_trunk):
        z = _dense(flat, layout[l], a)
        a = np.maximum(z, 0.0)
        pres.append(z)
        acts.append(a)
    if dueling:
        v = _dense(flat, layout[n_trunk], a)
        adv = _dense(flat, layout[n_trunk + 1], a)
        n_out = adv.shape[1]
        out = np.empty_like(adv)
        for i in range(adv.shape[0]):
            mean = adv[i].sum() / n_out
            for j in range(n_out):
                out[i, j] = v[i, 0] + adv[i, j] - mean
    else:
        out = _dense(flat, layout[n_trunk], a)
    return out, acts, pres


@njit(cache=True)
def predict(flat, layout, n_trunk, dueling, x):
    out, _, _ = _forward(flat, layout, n_trunk, dueling, x)
    return out


@njit(cache=True)
def _grad_dense(grad, row, a, dz):
    wo, bo, fi, fo = row[0], row[1], row[2], row[3]
    gw = np.dot(a.T, dz)
    grad[wo:wo + fi * fo] = gw.ravel()
    for j in range(fo):
        grad[bo + j] = dz[:, j].sum()


@njit(cache=True)
def _backward(flat, layout, n_trunk, dueling, acts, pres, g, grad):
    a = acts[n_trunk]
    if dueling:
        n_out = g.shape[1]
        g_v = np.empty((g.shape[0], 1))
        g_adv = np.empty_like(g)
        for i in range(g.shape[0]):
            s = g[i].sum()
            g_v[i, 0] = s
            for j in range(n_out):
                g_adv[i, j] = g[i, j] - s / n_out
        rv, ra = layout[n_trunk], layout[n_trunk + 1]
        _grad_dense(grad, rv, a, g_v)
        _grad_dense(grad, ra, a, g_adv)
        wv = flat[rv[0]:rv[0] + rv[2] * rv[3]].reshape((rv[2], rv[3]))
        wa = flat[ra[0]:ra[0] + ra[2] * ra[3]].reshape((ra[2], ra[3]))
        da = np.dot(g_v, wv.T) + np.dot(g_adv, wa.T)
    else:
        ro = layout[n_trunk]
        _grad_dense(grad, ro, a, g)
        wo_ = flat[ro[0]:ro[0] + ro[2] * ro[3]].reshape((ro[2], ro[3]))
        da = np.dot(g, wo_.T)
    for l in range(n_trunk - 1, -1, -1):
        z = pres[l + 1]
        dz = np.where(z > 0.0, da, 0.0)
        _grad_dense(grad, layout[l], acts[l], dz)
        if l > 0:
            row = layout[l]
            w = flat[row[0]:row[0] + row[2] * row[3]].reshape((row[2], row[3]))
            da = np.dot(dz, w.T)


@njit(cache=True)
def _adam(theta, grad, m, v, t, lr, b1, b2, eps):
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    step = lr * np.sqrt(c2) / c1
    eps_hat = eps * np.sqrt(c2)
    for i in range(theta.size):
        gi = grad[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        theta[i] -= step * m[i] / (np.sqrt(v[i]) + eps_hat)


@njit(cache=True)
def td_update(online, target, layout, n_trunk, dueling, double, gamma,
              s, x, r, s_next, done, next_mask,
              m, v, t, lr, b1, b2, eps):
    """One mean-squared TD step on ``online`` in place; returns the pre-step loss."""
    n = s.shape[0]
    q_next_t = predict(target, layout, n_trunk, dueling, s_next)
    n_out = q_next_t.shape[1]
    y = np.empty(n)
    q_next_o = predict(online, layout, n_trunk, dueling, s_next) if double else q_next_t
    for i in range(n):
        best = -np.inf
        pick = 0
        for j in range(n_out):
            if not next_mask[i, j]:
                continue
            val = q_next_o[i, j] if double else q_next_t[i, j]
            if val > best:
                best = val
                pick = j
        boot = q_next_t[i, pick]
        y[i] = r[i] + (0.0 if done[i] else gamma * boot)
    q, acts, pres = _forward(online, layout, n_trunk, dueling, s)
    g = np.zeros_like(q)
    loss = 0.0
    for i in range(n):
        err = y[i] - q[i, x[i]]
        loss += err * err
        g[i, x[i]] = -2.0 * err / n
    grad = np.empty_like(online)
    _backward(online, layout, n_trunk, dueling, acts, pres, g, grad)
    _adam(online, grad, m, v, t, lr, b1, b2, eps)
    return loss / n
