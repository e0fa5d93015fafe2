"""Pure numpy implementation of the full-batch tabular FairDICE kernels.

The compiled module ``fairdice._tabular_ext`` exposes the same functions;
``fairdice.kernels`` picks one at import.
"""

from __future__ import annotations

import math

import numpy as np

# utility codes shared with the compiled kernel
ALPHA_FAIR = 0
PIECEWISE_LOG = 1


def _regularizer(mu, alpha, kind, sign):
    if kind == PIECEWISE_LOG:
        k = np.where(mu <= 1.0, 1.0 / mu, 2.0 - mu)
        u = np.where(k >= 1.0, np.log(np.maximum(k, 1.0)), -0.5 * (k - 2.0) ** 2 + 0.5)
    elif alpha == 1.0:
        k = 1.0 / mu
        u = np.log(k)
    else:
        k = mu ** (-1.0 / alpha)
        u = k ** (1.0 - alpha) / (1.0 - alpha)
    return sign * float(np.sum(u - mu * k)), -sign * k


def loss_and_grad(nu, xi, s_idx, s2_idx, live, rewards, weight, init_dist,
                  gamma, beta, alpha, kind, sign, learn_mu):
    """Weighted full-batch loss and gradient in (nu, xi)."""
    S = len(nu)
    mu = np.exp(xi) if learn_mu else np.ones(len(xi))
    e = rewards @ mu + gamma * live * nu[s2_idx] - nu[s_idx]
    y = e / beta
    neg = y < 0.0
    ey = np.exp(np.minimum(y, 0.0))
    w = np.where(neg, ey, y + 1.0)
    conj = np.where(neg, ey - 1.0, 0.5 * y * y + y)
    loss = (1.0 - gamma) * float(init_dist @ nu) + beta * float(weight @ conj)
    ww = weight * w
    g_nu = (1.0 - gamma) * init_dist
    g_nu = g_nu + gamma * np.bincount(s2_idx, weights=ww * live, minlength=S)
    g_nu = g_nu - np.bincount(s_idx, weights=ww, minlength=S)
    if learn_mu:
        reg, d_mu = _regularizer(mu, alpha, kind, sign)
        loss += reg
        g_xi = (d_mu + ww @ rewards) * mu
    else:
        g_xi = np.zeros(len(xi))
    return loss, g_nu, g_xi


def adam_solve(nu, xi, s_idx, s2_idx, live, rewards, weight, init_dist,
               gamma, beta, alpha, kind, sign, learn_mu,
               lr, iters, tol, cosine=0, b1=0.9, b2=0.999, eps=1e-8):
    """Full-batch Adam on (nu, xi).  Stops once the gradient max-norm drops
    below ``tol``.  Returns (nu, xi, loss_trace, iterations_run, status) with
    status 0 = converged, 1 = iteration budget spent, 2 = non-finite loss."""
    nu = np.array(nu, dtype=float)
    xi = np.array(xi, dtype=float)
    S = len(nu)
    theta = np.concatenate([nu, xi])
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    trace = np.empty(iters)
    status = 1
    t = 0
    for t in range(iters):
        loss, g_nu, g_xi = loss_and_grad(theta[:S], theta[S:], s_idx, s2_idx, live, rewards, weight,
                                         init_dist, gamma, beta, alpha, kind, sign, learn_mu)
        trace[t] = loss
        if not math.isfinite(loss):
            status = 2
            break
        g = np.concatenate([g_nu, g_xi])
        if np.max(np.abs(g)) < tol:
            status = 0
            break
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        mhat = m / (1.0 - b1 ** (t + 1))
        vhat = v / (1.0 - b2 ** (t + 1))
        lr_t = 0.5 * lr * (1.0 + math.cos(math.pi * t / iters)) if cosine else lr
        theta = theta - lr_t * mhat / (np.sqrt(vhat) + eps)
    else:
        t = iters
    n_run = t + 1 if status != 1 else iters
    return theta[:S].copy(), theta[S:].copy(), trace[:n_run].copy(), n_run, status
