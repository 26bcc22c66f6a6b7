"""Recurrent Markov switching model prior.

The latent process is a regime-indexed Gaussian autoregression: a
discrete switch s_t in {0..K-1} picks the mean network m_k and diagonal
covariance diag(sigma_k^2) for z_t given z_{t-1}, while the switch
itself evolves by a row-stochastic matrix Q(z_{t-1}) (recurrent) or a
fixed logits matrix (autonomous).

Exact inference runs normalized forward/backward recursions in log
space. With per-step normalizers c_t, the scaled messages satisfy
gamma_t = exp(log_alpha_t + log_beta_t) directly, the sequence
log-likelihood is sum_t c_t, and the pairwise posteriors xi follow from
one extra vectorized pass. Log-likelihood gradients are assembled as
posterior-weighted sums (the exact expectation of the joint score under
the switch posterior); the same weights give the exact gradient with
respect to the inputs z, which is what end-to-end flow training needs.

All public operations are pure with respect to the parameter set and
may run concurrently against shared read-only params. Internals carry a
leading batch axis so the trainer can push many sequences through the
recursions at once; the public single-sequence API wraps batch size 1.

Regime labels are 0-based throughout.
"""

from dataclasses import dataclass

import numpy as np

from rsds import prng
from rsds.errors import ContractViolation
from rsds.nnet import Mlp


def logsumexp(x, axis=-1, keepdims=False):
    """Stable log-sum-exp for finite inputs (hot path: no scipy overhead)."""
    mx = np.max(x, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx
    return out if keepdims else np.squeeze(out, axis=axis)

# Additive log-domain floor: keeps -inf out of the recursions when a
# switch probability underflows (double precision underflow boundary).
LOG_FLOOR = -745.0

# Regime standard deviations are clamped here after every training update.
SIGMA_FLOOR = 1e-4


@dataclass
class AutonomousSwitching:
    """Fixed switch logits; row-softmax gives the transition matrix."""

    logits: np.ndarray  # (K, K)

    def parameters(self, prefix=""):
        return {f"{prefix}logits": self.logits}

    def grad_masks(self, prefix=""):
        return {f"{prefix}logits": None}

    def copy(self):
        return AutonomousSwitching(self.logits.copy())


@dataclass
class RecurrentSwitching:
    """A network z -> K*K logits, reshaped row-major and row-softmaxed."""

    net: Mlp

    def parameters(self, prefix=""):
        return self.net.parameters(prefix)

    def grad_masks(self, prefix=""):
        return self.net.grad_masks(prefix)

    def copy(self):
        return RecurrentSwitching(self.net.copy())


@dataclass
class RmsmParams:
    """All regime-transition and switching parameters.

    transition_nets[k] maps R^m -> R^m; transition_log_sigmas[k] holds
    log sigma_k for the diagonal covariance diag(sigma_k^2).
    """

    n_regimes: int
    dim: int
    initial_logits: np.ndarray       # (K,)
    initial_means: np.ndarray        # (K, m)
    initial_log_sigmas: np.ndarray   # (K, m)
    transition_nets: list            # K * Mlp, each m -> m
    transition_log_sigmas: np.ndarray  # (K, m)
    switching: object                # AutonomousSwitching | RecurrentSwitching

    def __post_init__(self):
        K, m = self.n_regimes, self.dim
        self.initial_logits = np.asarray(self.initial_logits, dtype=float)
        self.initial_means = np.asarray(self.initial_means, dtype=float)
        self.initial_log_sigmas = np.asarray(self.initial_log_sigmas, dtype=float)
        self.transition_log_sigmas = np.asarray(self.transition_log_sigmas, dtype=float)
        if self.initial_logits.shape != (K,):
            raise ContractViolation("initial_logits must have shape (K,)")
        if self.initial_means.shape != (K, m) or self.initial_log_sigmas.shape != (K, m):
            raise ContractViolation("initial moments must have shape (K, m)")
        if self.transition_log_sigmas.shape != (K, m):
            raise ContractViolation("transition_log_sigmas must have shape (K, m)")
        if len(self.transition_nets) != K:
            raise ContractViolation("need one transition net per regime")
        for net in self.transition_nets:
            if net.in_dim != m or net.out_dim != m:
                raise ContractViolation("transition nets must map R^m -> R^m")
        if isinstance(self.switching, RecurrentSwitching):
            net = self.switching.net
            if net.in_dim != m or net.out_dim != K * K:
                raise ContractViolation("switching net must map R^m -> R^{K*K}")
        elif isinstance(self.switching, AutonomousSwitching):
            if self.switching.logits.shape != (K, K):
                raise ContractViolation("autonomous logits must be (K, K)")
        else:
            raise ContractViolation("unknown switching variant")

    @classmethod
    def init_random(cls, n_regimes, dim, hidden=32, activation="cosine",
                    switching="recurrent", q_hidden=32, seed=0):
        """Fresh parameters with seeded nets and unit covariances."""
        K, m = n_regimes, dim
        nets = [Mlp([m, hidden, m], activation=activation, seed=seed * 1000 + k)
                for k in range(K)]
        if switching == "recurrent":
            sw = RecurrentSwitching(
                Mlp([m, q_hidden, K * K], activation="lrelu", seed=seed * 1000 + K))
        elif switching == "autonomous":
            sw = AutonomousSwitching(np.zeros((K, K)))
        else:
            raise ContractViolation(f"unknown switching kind {switching!r}")
        return cls(
            n_regimes=K,
            dim=m,
            initial_logits=np.zeros(K),
            initial_means=np.zeros((K, m)),
            initial_log_sigmas=np.zeros((K, m)),
            transition_nets=nets,
            transition_log_sigmas=np.zeros((K, m)),
            switching=sw,
        )

    def parameters(self, prefix="rmsm."):
        out = {
            f"{prefix}initial_logits": self.initial_logits,
            f"{prefix}initial_means": self.initial_means,
            f"{prefix}initial_log_sigmas": self.initial_log_sigmas,
            f"{prefix}transition_log_sigmas": self.transition_log_sigmas,
        }
        for k, net in enumerate(self.transition_nets):
            out.update(net.parameters(f"{prefix}trans{k}."))
        out.update(self.switching.parameters(f"{prefix}switching."))
        return out

    def grad_masks(self, prefix="rmsm."):
        out = {
            f"{prefix}initial_logits": None,
            f"{prefix}initial_means": None,
            f"{prefix}initial_log_sigmas": None,
            f"{prefix}transition_log_sigmas": None,
        }
        for k, net in enumerate(self.transition_nets):
            out.update(net.grad_masks(f"{prefix}trans{k}."))
        out.update(self.switching.grad_masks(f"{prefix}switching."))
        return out

    def copy(self):
        return RmsmParams(
            n_regimes=self.n_regimes,
            dim=self.dim,
            initial_logits=self.initial_logits.copy(),
            initial_means=self.initial_means.copy(),
            initial_log_sigmas=self.initial_log_sigmas.copy(),
            transition_nets=[n.copy() for n in self.transition_nets],
            transition_log_sigmas=self.transition_log_sigmas.copy(),
            switching=self.switching.copy(),
        )

    def apply_sigma_floor(self, floor=SIGMA_FLOOR):
        np.maximum(self.transition_log_sigmas, np.log(floor),
                   out=self.transition_log_sigmas)
        np.maximum(self.initial_log_sigmas, np.log(floor),
                   out=self.initial_log_sigmas)


@dataclass
class PosteriorTables:
    """Smoothing posteriors and log-likelihood from one exact sweep.

    gamma[t, k] = p(s_t = k | z_{1:T}); xi[t, k, l] = p(s_{t+1} = k,
    s_t = l | z_{1:T}) for t = 0..T-2 (label indices 0-based, xi row t
    pairs steps t and t+1).
    """

    log_alpha: np.ndarray  # (T, K) normalized forward messages
    log_beta: np.ndarray   # (T, K) scaled backward messages, last row 0
    gamma: np.ndarray      # (T, K)
    xi: np.ndarray         # (T-1, K, K)
    loglik: float


@dataclass
class LatentPath:
    z: np.ndarray  # (T, m)
    s: np.ndarray  # (T,) int regime labels

    def __post_init__(self):
        if len(self.z) != len(self.s):
            raise ContractViolation("z and s lengths disagree")


@dataclass
class ForecastResult:
    z: np.ndarray             # (H, m) predicted latents
    regime_probs: np.ndarray  # (H, K) per-step regime distribution
    regimes: np.ndarray       # (H,) regime labels used


def _log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    return x - logsumexp(x, axis=axis, keepdims=True)


def _gaussian_logpdf_diag(x, mean, log_sigma):
    """Sum over the last axis of independent Gaussian log-densities."""
    inv_var = np.exp(-2.0 * log_sigma)
    quad = (x - mean) ** 2 * inv_var
    return np.sum(-0.5 * np.log(2.0 * np.pi) - log_sigma - 0.5 * quad, axis=-1)


def log_switch_batch(params, z_rows, want_tape=False):
    """Row-stochastic log switch matrices at each z row.

    z_rows: (R, m); returns (R, K, K) log matrices (and the net tape for
    the recurrent variant when requested).
    """
    K = params.n_regimes
    R = z_rows.shape[0]
    if isinstance(params.switching, AutonomousSwitching):
        lq = _log_softmax(params.switching.logits, axis=-1)
        out = np.broadcast_to(lq, (R, K, K)).copy()
        tape = None
    else:
        raw, tape = params.switching.net.forward(z_rows)
        out = _log_softmax(raw.reshape(R, K, K), axis=-1)
    np.maximum(out, LOG_FLOOR, out=out)
    return (out, tape) if want_tape else out


def switch_matrix(params, z_prev):
    """K x K row-stochastic switch matrix at a single latent point."""
    z_prev = np.asarray(z_prev, dtype=float)
    if not np.all(np.isfinite(z_prev)):
        raise ContractViolation("non-finite z_prev")
    lq = log_switch_batch(params, z_prev.reshape(1, -1))
    return np.exp(lq[0])


def transition_logpdf(params, z_prev, z_next, k):
    """log N(z_next; m_k(z_prev), diag(sigma_k^2))."""
    z_prev = np.asarray(z_prev, dtype=float)
    z_next = np.asarray(z_next, dtype=float)
    if not (np.all(np.isfinite(z_prev)) and np.all(np.isfinite(z_next))):
        raise ContractViolation("non-finite latent input")
    if not 0 <= k < params.n_regimes:
        raise ContractViolation(f"regime {k} out of range")
    mean, _ = params.transition_nets[k].forward(z_prev)
    return float(_gaussian_logpdf_diag(z_next, mean,
                                       params.transition_log_sigmas[k]))


class _SequenceStats:
    """Per-batch log densities and tapes shared by inference and grads."""

    __slots__ = ("z", "lp0", "lp", "lq", "mus", "trans_tapes", "switch_tape")

    def __init__(self, params, z):
        B, T, m = z.shape
        K = params.n_regimes
        self.z = z
        self.lp0 = (_gaussian_logpdf_diag(
            z[:, 0, None, :], params.initial_means, params.initial_log_sigmas))
        if T > 1:
            zprev = z[:, :-1].reshape(B * (T - 1), m)
            znext = z[:, 1:].reshape(B * (T - 1), m)
            self.mus, self.trans_tapes = [], []
            lp = np.empty((B * (T - 1), K))
            for k, net in enumerate(params.transition_nets):
                mu, tape = net.forward(zprev)
                self.mus.append(mu)
                self.trans_tapes.append(tape)
                lp[:, k] = _gaussian_logpdf_diag(
                    znext, mu, params.transition_log_sigmas[k])
            self.lp = lp.reshape(B, T - 1, K)
            lq, self.switch_tape = log_switch_batch(params, zprev, want_tape=True)
            self.lq = lq.reshape(B, T - 1, K, K)
        else:
            self.mus, self.trans_tapes, self.switch_tape = [], [], None
            self.lp = np.empty((B, 0, K))
            self.lq = np.empty((B, 0, K, K))


def _forward_pass(params, stats):
    """Normalized log forward messages u and per-step normalizers c."""
    B, T, _ = stats.z.shape
    K = params.n_regimes
    u = np.empty((B, T, K))
    c = np.empty((B, T))
    a = _log_softmax(params.initial_logits) + stats.lp0
    c[:, 0] = logsumexp(a, axis=1)
    u[:, 0] = a - c[:, 0, None]
    for t in range(1, T):
        s = logsumexp(u[:, t - 1, :, None] + stats.lq[:, t - 1], axis=1)
        a = stats.lp[:, t - 1] + s
        c[:, t] = logsumexp(a, axis=1)
        u[:, t] = a - c[:, t, None]
    return u, c


def _backward_pass(params, stats, c):
    """Backward messages scaled by the forward normalizers.

    With this scaling gamma = exp(u + logb) without renormalization and
    the final row is exactly zero (beta_T = 1).
    """
    B, T, _ = stats.z.shape
    K = params.n_regimes
    logb = np.zeros((B, T, K))
    for t in range(T - 2, -1, -1):
        inner = (stats.lp[:, t, None, :] + stats.lq[:, t]
                 + logb[:, t + 1, None, :])
        logb[:, t] = logsumexp(inner, axis=2) - c[:, t + 1, None]
    return logb


def _posterior_tables(stats, u, c, logb):
    gamma = np.exp(u + logb)
    T = u.shape[1]
    if T > 1:
        log_xi = (u[:, :-1, None, :]
                  + np.swapaxes(stats.lq, 2, 3)
                  + stats.lp[:, :, :, None]
                  + logb[:, 1:, :, None]
                  - c[:, 1:, None, None])
        xi = np.exp(log_xi)
    else:
        xi = np.empty((u.shape[0], 0, u.shape[2], u.shape[2]))
    return gamma, xi


def batch_forward_backward(params, z):
    """Batched exact inference. z: (B, T, m).

    Returns (stats, u, c, logb, gamma, xi, loglik) where loglik is (B,).
    """
    z = np.asarray(z, dtype=float)
    if z.ndim != 3 or z.shape[2] != params.dim:
        raise ContractViolation(f"latent batch must be (B, T, {params.dim})")
    if z.shape[1] < 1:
        raise ContractViolation("need at least one time step")
    if not np.all(np.isfinite(z)):
        raise ContractViolation("non-finite latents")
    stats = _SequenceStats(params, z)
    u, c = _forward_pass(params, stats)
    logb = _backward_pass(params, stats, c)
    gamma, xi = _posterior_tables(stats, u, c, logb)
    return stats, u, c, logb, gamma, xi, c.sum(axis=1)


def forward_backward(params, z):
    """Exact smoothing posteriors and log-likelihood for one sequence."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2:
        raise ContractViolation("z must be (T, m)")
    _, u, c, logb, gamma, xi, ll = batch_forward_backward(params, z[None])
    return PosteriorTables(
        log_alpha=u[0], log_beta=logb[0], gamma=gamma[0], xi=xi[0],
        loglik=float(ll[0]))


def batch_loglik_gradient(params, stats, gamma, xi):
    """Gradient of sum_b log p(z_b) over parameters and inputs.

    Assembles the posterior-weighted score: gamma weights the initial
    and transition Gaussian terms, xi weights the switch terms. Returns
    (grads keyed like params.parameters(), z_grad of shape (B, T, m)).
    """
    z = stats.z
    B, T, m = z.shape
    K = params.n_regimes
    grads = {}
    z_grad = np.zeros_like(z)
    p = "rmsm."

    # initial regime distribution
    pi = np.exp(_log_softmax(params.initial_logits))
    grads[p + "initial_logits"] = gamma[:, 0, :].sum(axis=0) - B * pi

    # initial Gaussian
    inv_var0 = np.exp(-2.0 * params.initial_log_sigmas)          # (K, m)
    diff0 = z[:, 0, None, :] - params.initial_means              # (B, K, m)
    w0 = gamma[:, 0, :, None]                                    # (B, K, 1)
    grads[p + "initial_means"] = (w0 * diff0 * inv_var0).sum(axis=0)
    grads[p + "initial_log_sigmas"] = (
        w0 * (diff0 ** 2 * inv_var0 - 1.0)).sum(axis=0)
    z_grad[:, 0] -= (w0 * diff0 * inv_var0).sum(axis=1)

    if T > 1:
        znext = z[:, 1:].reshape(B * (T - 1), m)
        d_log_sig = np.zeros((K, m))
        for k, net in enumerate(params.transition_nets):
            inv_var = np.exp(-2.0 * params.transition_log_sigmas[k])
            diff = znext - stats.mus[k]
            w = gamma[:, 1:, k].reshape(-1, 1)
            dmu = w * diff * inv_var
            d_log_sig[k] = (w * (diff ** 2 * inv_var - 1.0)).sum(axis=0)
            in_grad, net_grads = net.backward(stats.trans_tapes[k], dmu)
            for name, g in net_grads.items():
                grads[f"{p}trans{k}.{name}"] = g
            z_grad[:, :-1] += in_grad.reshape(B, T - 1, m)
            z_grad[:, 1:] -= dmu.reshape(B, T - 1, m)
        grads[p + "transition_log_sigmas"] = d_log_sig

        # switch terms: d/d logits_{l,k} = xi_{t,k,l} - gamma_{t,l} Q_{l,k}
        q = np.exp(stats.lq)                                     # (B,T-1,K,K)
        dlogits = np.swapaxes(xi, 2, 3) - gamma[:, :-1, :, None] * q
        if isinstance(params.switching, AutonomousSwitching):
            grads[p + "switching.logits"] = dlogits.sum(axis=(0, 1))
        else:
            rows = dlogits.reshape(B * (T - 1), K * K)
            in_grad, net_grads = params.switching.net.backward(
                stats.switch_tape, rows)
            for name, g in net_grads.items():
                grads[f"{p}switching.{name}"] = g
            z_grad[:, :-1] += in_grad.reshape(B, T - 1, m)
    else:
        grads[p + "transition_log_sigmas"] = np.zeros((K, m))
        for k, net in enumerate(params.transition_nets):
            for name, arr in net.parameters().items():
                grads[f"{p}trans{k}.{name}"] = np.zeros_like(arr)
        for name, arr in params.switching.parameters(p + "switching.").items():
            grads[name] = np.zeros_like(arr)

    return grads, z_grad


def loglik_gradient(params, z, tables):
    """Exact gradient of log p(z_{1:T}) for one sequence.

    tables must come from forward_backward on the same (params, z).
    Returns (param_grads, z_grad).
    """
    z = np.asarray(z, dtype=float)
    T = z.shape[0]
    K = params.n_regimes
    if tables.gamma.shape != (T, K) or tables.xi.shape != (max(T - 1, 0), K, K):
        raise ContractViolation("posterior tables do not match the sequence")
    stats = _SequenceStats(params, z[None])
    grads, z_grad = batch_loglik_gradient(
        params, stats, tables.gamma[None], tables.xi[None])
    return grads, z_grad[0]


def _categorical(rng, probs):
    u = rng.uniform()
    return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))


def _path_step(rng, params, s_prev, z_prev):
    """One ancestral step: draw s_t | s_{t-1}, z_{t-1} then z_t."""
    q = switch_matrix(params, z_prev)
    s = _categorical(rng, q[s_prev])
    mean, _ = params.transition_nets[s].forward(z_prev)
    sigma = np.exp(params.transition_log_sigmas[s])
    z = mean + sigma * prng.polar_normal(rng, (params.dim,))
    return s, z


def sample_path_with(params, T, rng):
    """Ancestral sample driven by a caller-owned generator."""
    if T < 1:
        raise ContractViolation("T must be >= 1")
    m = params.dim
    z = np.empty((T, m))
    s = np.empty(T, dtype=int)
    pi = np.exp(_log_softmax(params.initial_logits))
    s[0] = _categorical(rng, pi)
    sigma0 = np.exp(params.initial_log_sigmas[s[0]])
    z[0] = params.initial_means[s[0]] + sigma0 * prng.polar_normal(rng, (m,))
    for t in range(1, T):
        s[t], z[t] = _path_step(rng, params, s[t - 1], z[t - 1])
    return LatentPath(z=z, s=s)


def sample_path(params, T, rng_seed=0):
    """Ancestral sample of (z_{1:T}, s_{1:T}); bit-reproducible per seed."""
    return sample_path_with(params, T, prng.generator(rng_seed))


def filter_posteriors(params, z):
    """Filtering posteriors p(s_t | z_{1:t}) for every step, shape (T, K)."""
    z = np.asarray(z, dtype=float)
    stats = _SequenceStats(params, z[None])
    u, _ = _forward_pass(params, stats)
    return np.exp(u[0])


def forecast(params, z_context, horizon, mode="map", n_samples=100, seed=0):
    """Roll the prior forward after filtering on an observed context.

    map mode propagates the predictive regime distribution through the
    switch kernel, taking the argmax regime's mean each step. mc mode
    averages n_samples ancestral rollouts (regime labels are the
    per-step modal samples).
    """
    z_context = np.asarray(z_context, dtype=float)
    if z_context.ndim != 2 or z_context.shape[0] < 1:
        raise ContractViolation("context must be (T0, m) with T0 >= 1")
    if horizon < 0:
        raise ContractViolation("horizon must be >= 0")
    K, m = params.n_regimes, params.dim
    if horizon == 0:
        return ForecastResult(np.empty((0, m)), np.empty((0, K)),
                              np.empty(0, dtype=int))
    alpha_last = filter_posteriors(params, z_context)[-1]
    z_last = z_context[-1]

    if mode == "map":
        z_pred = np.empty((horizon, m))
        probs = np.empty((horizon, K))
        labels = np.empty(horizon, dtype=int)
        dist = alpha_last
        z_prev = z_last
        for h in range(horizon):
            q = switch_matrix(params, z_prev)
            dist = dist @ q
            k = int(np.argmax(dist))
            mean, _ = params.transition_nets[k].forward(z_prev)
            probs[h] = dist
            labels[h] = k
            z_pred[h] = mean
            z_prev = z_pred[h]
        return ForecastResult(z_pred, probs, labels)

    if mode == "mc":
        if n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        rng = prng.generator(seed)
        zs = np.empty((n_samples, horizon, m))
        ss = np.empty((n_samples, horizon), dtype=int)
        for i in range(n_samples):
            s_prev = _categorical(rng, alpha_last)
            z_prev = z_last
            for h in range(horizon):
                s_prev, z_prev = _path_step(rng, params, s_prev, z_prev)
                zs[i, h] = z_prev
                ss[i, h] = s_prev
        counts = np.stack([(ss == k).sum(axis=0) for k in range(K)], axis=1)
        probs = counts / n_samples
        return ForecastResult(zs.mean(axis=0), probs,
                              np.argmax(counts, axis=1))

    raise ContractViolation(f"unknown forecast mode {mode!r}")


def argmax_regimes(tables):
    """Per-step MAP regime labels; ties break toward the smallest index."""
    return np.argmax(tables.gamma, axis=1)
