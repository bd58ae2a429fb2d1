"""Compiled inner loops for long learner runs.

These mirror the pure step functions in :mod:`markov_sa.learners` operation for
operation; the test-suite checks the two paths against each other.
"""
import numpy as np
from numba import njit

TD = 0
GTD = 1
ETD = 2


@njit(cache=True)
def _draw(cum, u):
    n = cum.shape[0]
    for i in range(n):
        if u < cum[i]:
            return i
    # u beyond the last cumulative value by rounding: take the last
    # index that carries mass
    for i in range(n - 1, -1, -1):
        if i == 0 or cum[i] > cum[i - 1]:
            return i
    return n - 1


@njit(cache=True)
def _dot(x, y):
    acc = 0.0
    for k in range(x.shape[0]):
        acc += x[k] * y[k]
    return acc


@njit(cache=True)
def _norm(x):
    return np.sqrt(_dot(x, x))


@njit(cache=True)
def run_chunk(
    alg, mu_cum, p_cum, rho_tab, reward, phi, interest, gamma, lam,
    b1, b2, beta, n0, u,
    s, theta, nu, e, f, rho_prev,
    stride, rec_step, rec_alpha, rec_theta, rec_nu, rec_norm_x, rec_norm_e, rec_f, n_rec,
    guard,
):
    """Advance one run by ``u.shape[0]`` steps starting from global step ``n0``.

    ``theta``, ``nu``, ``e`` are updated in place.  Returns
    ``(s, f, rho_prev, n_rec, diverged_at)`` with ``diverged_at = -1`` when the
    guard was never hit.
    """
    K = theta.shape[0]
    tmp = np.empty(K)
    for j in range(u.shape[0]):
        n = n0 + j
        alpha = b1 / (n + b2) ** beta
        a = _draw(mu_cum[s], u[j, 0])
        s_next = _draw(p_cum[s, a], u[j, 1])
        rho = rho_tab[s, a]
        r = reward[s, a]
        ph = phi[s]
        ph_next = phi[s_next]
        decay = lam * gamma * rho_prev
        if alg == ETD:
            f = gamma * rho_prev * f + interest[s]
            emphasis = lam * interest[s] + (1.0 - lam) * f
            for k in range(K):
                e[k] = decay * e[k] + emphasis * ph[k]
        else:
            for k in range(K):
                e[k] = decay * e[k] + ph[k]
        delta = r + gamma * _dot(ph_next, theta) - _dot(ph, theta)
        if alg == GTD:
            e_nu = _dot(e, nu)
            ph_nu = _dot(ph, nu)
            for k in range(K):
                tmp[k] = theta[k] + alpha * rho * (ph[k] - gamma * ph_next[k]) * e_nu
            for k in range(K):
                nu[k] = nu[k] + alpha * (rho * delta * e[k] - ph[k] * ph_nu)
                theta[k] = tmp[k]
        else:
            for k in range(K):
                theta[k] = theta[k] + alpha * rho * delta * e[k]
        s = s_next
        rho_prev = rho

        bad = False
        for k in range(K):
            if not (abs(theta[k]) <= guard) or not (abs(nu[k]) <= guard):
                bad = True
        step = n + 1
        if bad or step % stride == 0:
            if n_rec < rec_step.shape[0]:
                rec_step[n_rec] = step
                rec_alpha[n_rec] = b1 / (step + b2) ** beta
                for k in range(K):
                    rec_theta[n_rec, k] = theta[k]
                    rec_nu[n_rec, k] = nu[k]
                if alg == GTD:
                    rec_norm_x[n_rec] = np.sqrt(_dot(theta, theta) + _dot(nu, nu))
                else:
                    rec_norm_x[n_rec] = _norm(theta)
                rec_norm_e[n_rec] = _norm(e)
                rec_f[n_rec] = f
                n_rec += 1
        if bad:
            return s, f, rho_prev, n_rec, step
    return s, f, rho_prev, n_rec, -1


@njit(cache=True)
def trace_terms_chunk(
    alg, mu_cum, p_cum, rho_tab, reward, phi, interest, gamma, lam, u,
    s, e, f, rho_prev, out_a, out_b, out_c,
):
    """Sample ``A(Y)``, ``b(Y)``, ``C(Y)`` along the trace-augmented chain.

    Row ``j`` of each output holds the term for ``Y = (S, A, S', e)`` of
    step ``j``; the traces do not depend on the learner weights.
    """
    K = phi.shape[1]
    for j in range(u.shape[0]):
        a = _draw(mu_cum[s], u[j, 0])
        s_next = _draw(p_cum[s, a], u[j, 1])
        rho = rho_tab[s, a]
        ph = phi[s]
        ph_next = phi[s_next]
        decay = lam * gamma * rho_prev
        if alg == ETD:
            f = gamma * rho_prev * f + interest[s]
            emphasis = lam * interest[s] + (1.0 - lam) * f
            for k in range(K):
                e[k] = decay * e[k] + emphasis * ph[k]
        else:
            for k in range(K):
                e[k] = decay * e[k] + ph[k]
        for k in range(K):
            for l in range(K):
                out_a[j, k, l] = rho * e[k] * (gamma * ph_next[l] - ph[l])
                out_c[j, k, l] = ph[k] * ph[l]
            out_b[j, k] = rho * reward[s, a] * e[k]
        s = s_next
        rho_prev = rho
    return s, f, rho_prev
