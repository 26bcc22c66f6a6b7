"""Shared oracles for the test suite.

Independent reference implementations: exhaustive path enumeration for
the switching prior, and central finite differences for every gradient.
They stay deliberately naive so they cannot share bugs with the library
code they check.
"""

import itertools

import numpy as np
from scipy.special import logsumexp

from rsds.rmsm import switch_matrix, transition_logpdf


def enumerate_paths(params, z):
    """Brute-force loglik/gamma/xi by summing over all K^T regime paths."""
    T, _ = z.shape
    K = params.n_regimes
    logpi = params.initial_logits - logsumexp(params.initial_logits)
    lp0 = np.array([
        float(np.sum(-0.5 * np.log(2 * np.pi) - params.initial_log_sigmas[k]
                     - 0.5 * (z[0] - params.initial_means[k]) ** 2
                     * np.exp(-2 * params.initial_log_sigmas[k])))
        for k in range(K)])
    lq = np.log(np.stack([switch_matrix(params, z[t]) for t in range(T - 1)])) \
        if T > 1 else np.empty((0, K, K))
    lp = np.array([[transition_logpdf(params, z[t], z[t + 1], k)
                    for k in range(K)] for t in range(T - 1)]) \
        if T > 1 else np.empty((0, K))
    lls = {}
    for path in itertools.product(range(K), repeat=T):
        ll = logpi[path[0]] + lp0[path[0]]
        for t in range(1, T):
            ll += lq[t - 1, path[t - 1], path[t]] + lp[t - 1, path[t]]
        lls[path] = ll
    total = logsumexp(np.array(list(lls.values())))
    gamma = np.zeros((T, K))
    xi = np.zeros((T - 1, K, K))
    for path, ll in lls.items():
        w = np.exp(ll - total)
        for t in range(T):
            gamma[t, path[t]] += w
        for t in range(1, T):
            xi[t - 1, path[t], path[t - 1]] += w
    return total, gamma, xi


def finite_diff_params(objective, params_dict, masks=None, eps=1e-5):
    """Central finite differences of a scalar objective over named arrays.

    Entries with a zero mask are structural zeros and are skipped.
    Returns a dict of arrays shaped like the parameters.
    """
    out = {}
    for name, arr in params_dict.items():
        mask = None if masks is None else masks.get(name)
        grad = np.zeros_like(arr)
        flat, gflat = arr.ravel(), grad.ravel()
        mflat = None if mask is None else np.asarray(mask).ravel()
        for i in range(flat.size):
            if mflat is not None and mflat[i] == 0.0:
                continue
            old = flat[i]
            flat[i] = old + eps
            hi = objective()
            flat[i] = old - eps
            lo = objective()
            flat[i] = old
            gflat[i] = (hi - lo) / (2 * eps)
        out[name] = grad
    return out


def finite_diff_array(objective, arr, eps=1e-5):
    """Central finite differences of a scalar objective over one array."""
    grad = np.zeros_like(arr)
    flat, gflat = arr.ravel(), grad.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = objective()
        flat[i] = old - eps
        lo = objective()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def max_rel_err(analytic, numeric, floor=1e-7):
    """Elementwise relative error, with differences under the absolute
    floor treated as exact."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    diff = np.abs(analytic - numeric)
    rel = np.where(diff <= floor, 0.0,
                   diff / np.maximum(np.abs(numeric), 1e-300))
    return float(np.max(rel)) if rel.size else 0.0


def grads_max_rel_err(grads, fd, floor=1e-7):
    worst = 0.0
    for name, g in fd.items():
        worst = max(worst, max_rel_err(grads[name], g, floor))
    return worst
