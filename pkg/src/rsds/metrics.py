"""Metrics aligning learned latents and regimes with ground truth.

Latent recovery is scored by the mean of optimally matched absolute
Pearson correlations (invariant to per-dimension permutation, sign and
scale, matching the model's equivalence class). Regime recovery is the
macro F1 after the best label permutation; both use exact assignment
(exhaustive for small K, Hungarian otherwise).
"""

import warnings
from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from rsds.errors import ContractViolation


@dataclass
class Alignment:
    """Per-dimension matching from estimated to true latents."""

    permutation: np.ndarray  # true dim i is matched by est dim permutation[i]
    signs: np.ndarray        # sign of the matched correlation
    scales: np.ndarray       # least-squares scale est -> true per matched pair
    regime_permutation: np.ndarray | None = None


def mcc(z_est, z_true):
    """Mean absolute correlation over the best dimension assignment.

    Inputs are (N, T, m) or (samples, m). Returns (score, Alignment).
    Estimated dimensions with zero variance correlate as 0 (with a
    warning); true dimensions must vary.
    """
    z_est = np.asarray(z_est, dtype=float)
    z_true = np.asarray(z_true, dtype=float)
    if z_est.shape != z_true.shape:
        raise ContractViolation("shape mismatch")
    m = z_est.shape[-1]
    est = z_est.reshape(-1, m)
    true = z_true.reshape(-1, m)
    est_c = est - est.mean(axis=0)
    true_c = true - true.mean(axis=0)
    est_sd = est_c.std(axis=0)
    true_sd = true_c.std(axis=0)
    if np.any(true_sd == 0.0):
        raise ContractViolation("a true latent dimension has zero variance")
    dead = est_sd == 0.0
    if np.any(dead):
        warnings.warn("estimated dimension(s) with zero variance scored as 0",
                      stacklevel=2)
    safe_sd = np.where(dead, 1.0, est_sd)
    cov = est_c.T @ true_c / est.shape[0]          # (m_est, m_true)
    corr = cov / (safe_sd[:, None] * true_sd[None, :])
    corr[dead, :] = 0.0
    rows, cols = linear_sum_assignment(-np.abs(corr))
    order = np.argsort(cols)
    rows, cols = rows[order], cols[order]          # cols == 0..m-1
    matched = corr[rows, cols]
    signs = np.where(matched >= 0, 1.0, -1.0)
    var_est = np.where(dead, 1.0, est_sd ** 2)
    scales = cov[rows, cols] / var_est[rows]
    score = float(np.abs(matched).mean())
    return score, Alignment(permutation=rows, signs=signs, scales=scales)


def _f1_weights(confusion):
    """W[k, j]: macro-F1 contribution of assigning est label j to true k."""
    row = confusion.sum(axis=1, keepdims=True)
    col = confusion.sum(axis=0, keepdims=True)
    denom = row + col
    with np.errstate(invalid="ignore", divide="ignore"):
        w = 2.0 * confusion / denom
    return np.where(denom > 0, w, 0.0)


def regime_f1(s_est, s_true, n_regimes):
    """Macro F1 over the best label permutation.

    Exhaustive search for K <= 8, Hungarian assignment above. Label sets
    of different sizes are handled by zero-padding the confusion matrix.
    Returns (score, permutation) with permutation[j] the true label
    matched to estimated label j.
    """
    s_est = np.asarray(s_est).ravel().astype(int)
    s_true = np.asarray(s_true).ravel().astype(int)
    if s_est.shape != s_true.shape:
        raise ContractViolation("shape mismatch")
    if s_est.min(initial=0) < 0 or s_true.min(initial=0) < 0:
        raise ContractViolation("labels must be non-negative")
    K = int(max(n_regimes, s_est.max(initial=-1) + 1,
                s_true.max(initial=-1) + 1))
    confusion = np.zeros((K, K))
    np.add.at(confusion, (s_true, s_est), 1.0)
    weights = _f1_weights(confusion)
    if K <= 8:
        best, best_perm = -1.0, None
        for perm in permutations(range(K)):
            score = sum(weights[perm[j], j] for j in range(K))
            if score > best:
                best, best_perm = score, perm
        assign = np.asarray(best_perm)
        total = best
    else:
        true_idx, est_idx = linear_sum_assignment(-weights)
        assign = np.empty(K, dtype=int)
        assign[est_idx] = true_idx
        total = float(weights[true_idx, est_idx].sum())
    return float(total / K), assign


def forecast_error(pred, truth):
    """Per-step and mean squared error between trajectories."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ContractViolation("shape mismatch")
    if pred.size == 0:
        return np.empty(0), float("nan")
    per_step = ((pred - truth) ** 2).mean(axis=-1)
    return per_step, float(per_step.mean())
