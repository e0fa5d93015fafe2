# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled full-batch tabular FairDICE kernels.

Mirrors ``fairdice._tabular_py`` function for function; results agree with
it to rounding (summation order differs).
"""

import numpy as np
from libc.math cimport exp, log, sqrt, pow, fabs, isfinite, cos

DEF ALPHA_FAIR_CODE = 0
DEF PIECEWISE_LOG_CODE = 1

ALPHA_FAIR = ALPHA_FAIR_CODE
PIECEWISE_LOG = PIECEWISE_LOG_CODE


cdef double _eval(
    const double[::1] nu, const double[::1] xi,
    const long long[::1] s_idx, const long long[::1] s2_idx,
    const double[::1] live, const double[:, ::1] rewards,
    const double[::1] weight, const double[::1] init_dist,
    double gamma, double beta, double alpha, int kind, double sign, bint learn_mu,
    double[::1] g_nu, double[::1] g_xi, double[::1] mu, double[::1] acc,
) noexcept nogil:
    cdef Py_ssize_t S = nu.shape[0], K = xi.shape[0], M = s_idx.shape[0]
    cdef Py_ssize_t n, i, s
    cdef double loss = 0.0, e, y, w, conj, ww, k, u, inv_beta = 1.0 / beta

    for i in range(K):
        mu[i] = exp(xi[i]) if learn_mu else 1.0
        acc[i] = 0.0
    for s in range(S):
        g_nu[s] = (1.0 - gamma) * init_dist[s]
        loss += g_nu[s] * nu[s]

    for n in range(M):
        e = gamma * live[n] * nu[s2_idx[n]] - nu[s_idx[n]]
        for i in range(K):
            e += rewards[n, i] * mu[i]
        y = e * inv_beta
        if y < 0.0:
            w = exp(y)
            conj = w - 1.0
        else:
            w = y + 1.0
            conj = 0.5 * y * y + y
        loss += beta * weight[n] * conj
        ww = weight[n] * w
        g_nu[s2_idx[n]] += gamma * live[n] * ww
        g_nu[s_idx[n]] -= ww
        if learn_mu:
            for i in range(K):
                acc[i] += ww * rewards[n, i]

    for i in range(K):
        if not learn_mu:
            g_xi[i] = 0.0
            continue
        if kind == PIECEWISE_LOG_CODE:
            if mu[i] <= 1.0:
                k = 1.0 / mu[i]
            else:
                k = 2.0 - mu[i]
            if k >= 1.0:
                u = log(k)
            else:
                u = -0.5 * (k - 2.0) * (k - 2.0) + 0.5
        elif alpha == 1.0:
            k = 1.0 / mu[i]
            u = log(k)
        else:
            k = pow(mu[i], -1.0 / alpha)
            u = pow(k, 1.0 - alpha) / (1.0 - alpha)
        loss += sign * (u - mu[i] * k)
        g_xi[i] = (acc[i] - sign * k) * mu[i]
    return loss


def loss_and_grad(nu, xi, s_idx, s2_idx, live, rewards, weight, init_dist,
                  double gamma, double beta, double alpha, int kind, double sign, bint learn_mu):
    """Weighted full-batch loss and gradient in (nu, xi)."""
    cdef double[::1] nu_v = np.ascontiguousarray(nu, dtype=np.float64)
    cdef double[::1] xi_v = np.ascontiguousarray(xi, dtype=np.float64)
    g_nu = np.empty(nu_v.shape[0])
    g_xi = np.empty(xi_v.shape[0])
    mu = np.empty(xi_v.shape[0])
    acc = np.empty(xi_v.shape[0])
    loss = _eval(
        nu_v, xi_v,
        np.ascontiguousarray(s_idx, dtype=np.int64), np.ascontiguousarray(s2_idx, dtype=np.int64),
        np.ascontiguousarray(live, dtype=np.float64), np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(weight, dtype=np.float64), np.ascontiguousarray(init_dist, dtype=np.float64),
        gamma, beta, alpha, kind, sign, learn_mu, g_nu, g_xi, mu, acc,
    )
    return loss, g_nu, g_xi


def adam_solve(nu, xi, s_idx, s2_idx, live, rewards, weight, init_dist,
               double gamma, double beta, double alpha, int kind, double sign, bint learn_mu,
               double lr, long iters, double tol, int cosine=0, double b1=0.9, double b2=0.999, double eps=1e-8):
    """Full-batch Adam on (nu, xi); same contract as the numpy fallback."""
    theta_nu = np.array(nu, dtype=np.float64)
    theta_xi = np.array(xi, dtype=np.float64)
    cdef double[::1] tn = theta_nu
    cdef double[::1] tx = theta_xi
    cdef const long long[::1] sv = np.ascontiguousarray(s_idx, dtype=np.int64)
    cdef const long long[::1] s2v = np.ascontiguousarray(s2_idx, dtype=np.int64)
    cdef const double[::1] lv = np.ascontiguousarray(live, dtype=np.float64)
    cdef const double[:, ::1] rv = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef const double[::1] wv = np.ascontiguousarray(weight, dtype=np.float64)
    cdef const double[::1] iv = np.ascontiguousarray(init_dist, dtype=np.float64)
    cdef Py_ssize_t S = tn.shape[0], K = tx.shape[0], j
    cdef double[::1] g_nu = np.empty(S)
    cdef double[::1] g_xi = np.empty(K)
    cdef double[::1] mu = np.empty(K)
    cdef double[::1] acc = np.empty(K)
    cdef double[::1] m = np.zeros(S + K)
    cdef double[::1] v = np.zeros(S + K)
    trace_arr = np.empty(max(iters, 0))
    cdef double[::1] trace = trace_arr
    cdef long t, n_run = iters
    cdef int status = 1
    cdef double loss, g, gmax, c1, c2, mhat, vhat, lr_t = lr
    cdef double pi = 3.141592653589793

    with nogil:
        for t in range(iters):
            loss = _eval(tn, tx, sv, s2v, lv, rv, wv, iv, gamma, beta, alpha, kind, sign, learn_mu,
                         g_nu, g_xi, mu, acc)
            trace[t] = loss
            if not isfinite(loss):
                status = 2
                n_run = t + 1
                break
            gmax = 0.0
            for j in range(S):
                if fabs(g_nu[j]) > gmax:
                    gmax = fabs(g_nu[j])
            for j in range(K):
                if fabs(g_xi[j]) > gmax:
                    gmax = fabs(g_xi[j])
            if gmax < tol:
                status = 0
                n_run = t + 1
                break
            if cosine:
                lr_t = 0.5 * lr * (1.0 + cos(pi * t / iters))
            c1 = 1.0 - pow(b1, t + 1)
            c2 = 1.0 - pow(b2, t + 1)
            for j in range(S + K):
                g = g_nu[j] if j < S else g_xi[j - S]
                m[j] = b1 * m[j] + (1.0 - b1) * g
                v[j] = b2 * v[j] + (1.0 - b2) * g * g
                mhat = m[j] / c1
                vhat = v[j] / c2
                if j < S:
                    tn[j] -= lr_t * mhat / (sqrt(vhat) + eps)
                else:
                    tx[j - S] -= lr_t * mhat / (sqrt(vhat) + eps)
    return theta_nu, theta_xi, trace_arr[:n_run].copy(), n_run, status
