"""Executable checks for the identifiability conditions and recovery.

Three groups of tools:

- Likelihood margins and posterior-dominance bounds. The filtered odds
  of the aligned regime contract as R_t <= a R_{t-1} + b with
  a = exp(-margin) / (1 - stickiness) and b = a * stickiness, giving a
  floor R_inf = b / (1 - a) and a closed-form horizon after which the
  aligned regime's posterior exceeds one half.
- Structured reports on the model conditions: stickiness of the switch
  matrix over probe points, per-regime covariance dominance, transition
  Jacobian nondegeneracy, and distinctness of the variance-ratio
  matrix columns.
- Recovery of the residual mixing: regime covariances of an affinely
  transformed diagonal system are simultaneously diagonalizable; after
  whitening by one regime the basis is orthogonal, found by an
  eigendecomposition of the best-conditioned pair and refined with
  Jacobi joint-diagonalization sweeps over all regimes.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg

from rsds import rmsm as rmsm_mod
from rsds.errors import ContractViolation


class JointDiagonalizationError(RuntimeError):
    def __init__(self, residual, tolerance):
        super().__init__(
            f"joint diagonalization residual {residual:.3e} exceeds "
            f"tolerance {tolerance:.3e}")
        self.residual = residual


@dataclass
class DominanceReport:
    margin: float            # minimum log-likelihood margin along the history
    stickiness: float        # switch leakage bound, in [0, 1/2)
    initial_odds: float      # (1 - p_1) / p_1 for the aligned regime
    contraction: float       # a = exp(-margin) / (1 - stickiness)
    odds_floor: float        # R_inf; inf when the margin condition fails
    horizon: int | None      # first guaranteed t with posterior > 1/2
    unreachable: bool        # margin too small for the odds to contract below 1
    one_step: bool           # dominance already guaranteed at t = 2
    premise_violated: bool   # initial odds already at or below the floor


@dataclass
class RatioMatrix:
    """Rows are regime pairs (k1 < k2); entries sigma_{k1,i}/sigma_{k2,i}."""

    pairs: list
    values: np.ndarray  # (n_pairs, m)

    def column_distance(self):
        """Smallest L-inf distance between any two columns (inf if < 2)."""
        m = self.values.shape[1]
        if m < 2 or self.values.shape[0] == 0:
            return np.inf
        best = np.inf
        for i, j in combinations(range(m), 2):
            best = min(best, np.max(np.abs(self.values[:, i] - self.values[:, j])))
        return best

    def distinct_columns(self, tol=1e-9):
        return self.column_distance() > tol


@dataclass
class RegimeDominance:
    satisfied: bool
    dimension: int | None   # witnessing dimension, when one exists
    tied: bool              # witness holds only with equality somewhere


@dataclass
class AssumptionReport:
    min_stay_probability: float
    implied_stickiness: float
    sticky_ok: bool
    covariance_separation: list          # RegimeDominance per regime
    max_abs_jacobian_det: float
    jacobian_witness: tuple              # (regime, probe point)
    nondegenerate_ok: bool
    ratio_matrix: RatioMatrix
    min_column_distance: float
    distinct_columns_ok: bool


@dataclass
class DisentangleResult:
    mixing: np.ndarray            # recovered A' (m, m)
    variances: np.ndarray         # (K, m) diagonal variances, common scale
    ratio_matrix: RatioMatrix     # implied by the recovered variances
    blocks: list                  # partition of coordinates by equal ratios
    full: bool                    # every block is a singleton
    residual: float               # joint-diagonalization off-diagonal residual
    unmix: np.ndarray | None      # S = (A')^{-1} A when the true A is known
    permutation: np.ndarray | None
    scales: np.ndarray | None


def gaussian_margin(params, z_prev, regime):
    """Log-likelihood margin of a regime at its aligned next state.

    Evaluates min over competitors k of
    log N(mu_i; mu_i, S_i) - log N(mu_i; mu_k, S_k) with mu_j = m_j(z_prev);
    with equal variances this is the scaled mean distance
    ||mu_i - mu_k||^2 / (2 sigma^2).
    """
    if not 0 <= regime < params.n_regimes:
        raise ContractViolation(f"regime {regime} out of range")
    z_prev = np.asarray(z_prev, dtype=float)
    if params.n_regimes == 1:
        return np.inf
    means = np.stack([net.forward(z_prev)[0] for net in params.transition_nets])
    log_sig = params.transition_log_sigmas
    mu_i = means[regime]
    best = np.inf
    for k in range(params.n_regimes):
        if k == regime:
            continue
        inv_var_k = np.exp(-2.0 * log_sig[k])
        val = float(np.sum(log_sig[k] - log_sig[regime]
                           + 0.5 * (mu_i - means[k]) ** 2 * inv_var_k))
        best = min(best, val)
    return best


def dominance_horizon(initial_odds, margin, stickiness):
    """Closed-form bound on the time to posterior dominance.

    Matches iterating the odds recursion R_t = a R_{t-1} + b from t=2
    and returning the first t with R_t < 1. The reported horizon is
    never below 2. When initial_odds <= odds floor, the recursion is
    below 1 immediately at t=2 but the corollary's formula does not
    apply; that case is flagged.
    """
    if initial_odds <= 0:
        raise ContractViolation("initial odds must be positive")
    if not 0 <= stickiness < 0.5:
        raise ContractViolation("stickiness must be in [0, 1/2)")
    if margin <= 0:
        raise ContractViolation("margin must be positive")
    a = np.exp(-margin) / (1.0 - stickiness)
    one_step = margin > np.log((initial_odds + stickiness) / (1.0 - stickiness))
    reachable = margin > np.log((1.0 + stickiness) / (1.0 - stickiness))
    if not reachable:
        return DominanceReport(
            margin=margin, stickiness=stickiness, initial_odds=initial_odds,
            contraction=a, odds_floor=np.inf, horizon=None, unreachable=True,
            one_step=one_step, premise_violated=False)
    floor = (np.exp(-margin) * stickiness
             / (1.0 - stickiness - np.exp(-margin)))
    if initial_odds <= floor:
        return DominanceReport(
            margin=margin, stickiness=stickiness, initial_odds=initial_odds,
            contraction=a, odds_floor=floor, horizon=2, unreachable=False,
            one_step=one_step, premise_violated=True)
    steps = np.log((1.0 - floor) / (initial_odds - floor)) / np.log(a)
    horizon = max(2, 2 + int(np.floor(steps)))
    return DominanceReport(
        margin=margin, stickiness=stickiness, initial_odds=initial_odds,
        contraction=a, odds_floor=floor, horizon=horizon, unreachable=False,
        one_step=one_step, premise_violated=False)


def simulate_dominance(params, history):
    """Filtered posterior of the aligned regime at every step.

    history carries the latent path and the regime alignment; entry t is
    p(s_t = history.s[t] | z_{1:t}) from the exact Bayes filter.
    """
    if history.z.shape[1] != params.dim:
        raise ContractViolation("history dimension mismatch")
    alpha = rmsm_mod.filter_posteriors(params, history.z)
    return alpha[np.arange(len(history.s)), history.s]


def ratio_matrix_from_sigmas(sigmas):
    """Stack sigma_{k1}/sigma_{k2} over regime pairs k1 < k2."""
    sigmas = np.asarray(sigmas, dtype=float)
    if np.any(sigmas <= 0):
        raise ContractViolation("sigmas must be strictly positive")
    K = sigmas.shape[0]
    pairs = list(combinations(range(K), 2))
    values = np.stack([sigmas[a] / sigmas[b] for a, b in pairs]) \
        if pairs else np.empty((0, sigmas.shape[1]))
    return RatioMatrix(pairs=pairs, values=values)


def check_assumptions(params, probe_points, column_tol=1e-9):
    """Evaluate the executable model conditions over probe points.

    A failing condition is a report entry, not an error.
    """
    probes = np.atleast_2d(np.asarray(probe_points, dtype=float))
    if probes.shape[0] == 0:
        raise ContractViolation("need at least one probe point")
    K = params.n_regimes

    q = np.exp(rmsm_mod.log_switch_batch(params, probes))
    stay = np.min(np.diagonal(q, axis1=1, axis2=2))
    implied = 1.0 - stay

    sigmas = np.exp(params.transition_log_sigmas)
    separation = []
    for k in range(K):
        if K == 1:
            separation.append(RegimeDominance(True, 0, False))
            continue
        others = np.max(np.delete(sigmas, k, axis=0), axis=0)
        ge = sigmas[k] >= others
        if not np.any(ge):
            separation.append(RegimeDominance(False, None, False))
        else:
            dims = np.flatnonzero(ge)
            strict = np.flatnonzero(sigmas[k] > others)
            if strict.size:
                separation.append(RegimeDominance(True, int(strict[0]), False))
            else:
                separation.append(RegimeDominance(True, int(dims[0]), True))

    best_det = -np.inf
    witness = (None, None)
    for k, net in enumerate(params.transition_nets):
        for z in probes:
            det = abs(np.linalg.det(net.jacobian(z)))
            if det > best_det:
                best_det = det
                witness = (k, z.copy())

    ratios = ratio_matrix_from_sigmas(sigmas)
    dist = ratios.column_distance()
    return AssumptionReport(
        min_stay_probability=float(stay),
        implied_stickiness=float(implied),
        sticky_ok=bool(stay > 0.5),
        covariance_separation=separation,
        max_abs_jacobian_det=float(best_det),
        jacobian_witness=witness,
        nondegenerate_ok=bool(best_det > 0.0),
        ratio_matrix=ratios,
        min_column_distance=float(dist),
        distinct_columns_ok=bool(dist > column_tol),
    )


def _check_spd(mat, what):
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ContractViolation(f"{what} must be square")
    if not np.allclose(mat, mat.T, atol=1e-10 * max(1.0, np.abs(mat).max())):
        raise ContractViolation(f"{what} must be symmetric")
    if np.any(scipy.linalg.eigvalsh(mat) <= 0):
        raise ContractViolation(f"{what} must be positive definite")
    return 0.5 * (mat + mat.T)


def _jacobi_sweeps(mats, threshold=1e-14, max_sweeps=100):
    """Orthogonal joint diagonalization by Jacobi rotations (in place).

    mats: (K, m, m) symmetric, assumed commuting up to numerical noise.
    Returns the accumulated rotation; mats end up (nearly) diagonal.
    """
    K, m, _ = mats.shape
    rot = np.eye(m)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(m):
            for q in range(p + 1, m):
                am = mats[:, p, p] - mats[:, q, q]
                ap = mats[:, p, q] + mats[:, q, p]
                ton = am @ am - ap @ ap
                toff = 2.0 * (am @ ap)
                theta = 0.5 * np.arctan2(
                    toff, ton + np.sqrt(ton * ton + toff * toff))
                c, s = np.cos(theta), np.sin(theta)
                if abs(s) <= threshold:
                    continue
                rotated = True
                cp = mats[:, :, p].copy()
                cq = mats[:, :, q].copy()
                mats[:, :, p] = c * cp + s * cq
                mats[:, :, q] = -s * cp + c * cq
                rp = mats[:, p, :].copy()
                rq = mats[:, q, :].copy()
                mats[:, p, :] = c * rp + s * rq
                mats[:, q, :] = -s * rp + c * rq
                vp = rot[:, p].copy()
                rot[:, p] = c * vp + s * rot[:, q]
                rot[:, q] = -s * vp + c * rot[:, q]
        if not rotated:
            break
    return rot


def _offdiag_residual(mats):
    total = 0.0
    scale = 0.0
    for mat in mats:
        off = mat - np.diag(np.diag(mat))
        total += float((off ** 2).sum())
        scale += float((mat ** 2).sum())
    return np.sqrt(total / max(scale, 1e-300))


def _group_columns(values, rel_tol):
    """Connected components of columns under relative closeness."""
    m = values.shape[1]
    parent = list(range(m))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(m):
        for j in range(i + 1, m):
            denom = np.maximum(np.maximum(np.abs(values[:, i]),
                                          np.abs(values[:, j])), 1e-300)
            if np.all(np.abs(values[:, i] - values[:, j]) / denom <= rel_tol):
                parent[find(i)] = find(j)
    groups = {}
    for i in range(m):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def recover_disentanglement(covariances, tolerance=1e-8, mixing=None,
                            group_tol=1e-6):
    """Resolve the affine ambiguity from regime covariances.

    covariances are the per-regime covariances of the transformed
    system, Cov_k = A diag(sigma_k^2) A^T. Whitening by one regime makes
    the family simultaneously diagonalizable by an orthogonal basis; the
    pivot pair is chosen to maximize the minimal gap between the
    squared-ratio eigenvalues, then the basis is refined with Jacobi
    sweeps over all regimes. Returns the recovered mixing A', the
    recovered per-regime diagonal variances (relative to the whitening
    regime), the implied ratio matrix, and the equal-ratio coordinate
    partition. When the true ``mixing`` A is supplied, the residual map
    S = (A')^{-1} A and, for distinct ratio columns, its
    permutation/scale factorization are included.
    """
    mats = [_check_spd(c, f"covariance {k}") for k, c in enumerate(covariances)]
    K = len(mats)
    if K < 2:
        raise ContractViolation("need at least two regimes")
    m = mats[0].shape[0]
    if any(c.shape != (m, m) for c in mats):
        raise ContractViolation("covariance sizes disagree")

    # pivot pair with the best-separated generalized eigenvalues
    best_gap, pivot = -np.inf, (0, 1)
    for a, b in combinations(range(K), 2):
        vals = np.sort(scipy.linalg.eigh(mats[a], mats[b], eigvals_only=True))
        gap = np.min(np.diff(vals)) if m > 1 else np.inf
        if gap > best_gap:
            best_gap, pivot = gap, (a, b)
    a_star, b_star = pivot

    w_vals, w_vecs = scipy.linalg.eigh(mats[b_star])
    white = w_vecs @ np.diag(w_vals ** -0.5) @ w_vecs.T
    unwhite = w_vecs @ np.diag(w_vals ** 0.5) @ w_vecs.T
    whitened = np.stack([white @ c @ white for c in mats])
    whitened = 0.5 * (whitened + np.swapaxes(whitened, 1, 2))

    _, basis = scipy.linalg.eigh(whitened[a_star])
    rotated = np.einsum("ji,kjl,ln->kin", basis, whitened, basis)
    refine = _jacobi_sweeps(rotated)
    basis = basis @ refine
    residual = _offdiag_residual(rotated)
    if residual > tolerance:
        raise JointDiagonalizationError(residual, tolerance)

    recovered = unwhite @ basis
    variances = np.stack([np.diag(r) for r in rotated])
    variances = np.maximum(variances, 1e-300)
    ratios = RatioMatrix(
        pairs=list(combinations(range(K), 2)),
        values=np.stack([np.sqrt(variances[a] / variances[b])
                         for a, b in combinations(range(K), 2)])
        if K > 1 else np.empty((0, m)))
    blocks = _group_columns(ratios.values, group_tol)
    full = all(len(g) == 1 for g in blocks)

    unmix = permutation = scales = None
    if mixing is not None:
        mixing = np.asarray(mixing, dtype=float)
        unmix = np.linalg.solve(recovered, mixing)
        if full:
            permutation = np.argmax(np.abs(unmix), axis=1)
            scales = unmix[np.arange(m), permutation]
    return DisentangleResult(
        mixing=recovered, variances=variances, ratio_matrix=ratios,
        blocks=blocks, full=full, residual=residual, unmix=unmix,
        permutation=permutation, scales=scales)
