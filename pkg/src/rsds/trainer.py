"""Exact-likelihood training of the flow + switching-prior model.

The per-sequence objective is the exact marginal log-density of an
observed trajectory: the flow's inverse log-determinants, plus the
switching-prior log-likelihood of the extracted latents, plus an
isotropic Gaussian term on the extracted noise coordinates. Gradients
flow through all three terms, including the prior's gradient with
respect to the latents back into the flow parameters.

Training is plain Adam ascent on the batch mean. Two stabilizers from
the estimation recipe are built in: switching-network gradients can be
zeroed for a warm-up period, and an auxiliary mean-squared alignment to
PCA projections can be annealed in early on. Batch gradients are always
reduced in sequence order, so results are bit-identical across thread
counts.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from rsds import prng, rmsm as rmsm_mod
from rsds.errors import ContractViolation, DivergenceError
from rsds.flow import FlowStack
from rsds.rmsm import RmsmParams


@dataclass
class TrainConfig:
    sigma_eps: float = 0.1
    flow_lr: float = 5e-3
    rmsm_lr: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    q_freeze_steps: float = 0.0          # optimizer steps; may be math.inf
    pca_align_weight: float = 0.0
    pca_align_steps: int = 500
    lr_drop_epoch: int = 100
    lr_drop_factor: float = 0.1
    seed: int = 0
    sigma_floor: float = 1e-4
    checkpoint_every: int = 0            # epochs; 0 = no periodic checkpoints

    def __post_init__(self):
        if self.sigma_eps <= 0 or self.flow_lr <= 0 or self.rmsm_lr <= 0:
            raise ContractViolation("rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractViolation("bad epoch/batch settings")
        if self.pca_align_weight < 0:
            raise ContractViolation("pca_align_weight must be >= 0")


@dataclass
class TrainReport:
    epoch_loglik: list = field(default_factory=list)   # nats per time step
    grad_norms: list = field(default_factory=list)
    occupancy: np.ndarray = None                       # (K,) regime usage
    wall_clock: float = 0.0
    diverged: bool = False
    final_state: object = None                         # TrainState for resume


@dataclass
class SdsModel:
    """The trainable pair: emission flow and latent switching prior."""

    flow: FlowStack
    rmsm: RmsmParams

    def parameters(self):
        out = self.flow.parameters("flow.")
        out.update(self.rmsm.parameters("rmsm."))
        return out

    def grad_masks(self):
        out = self.flow.grad_masks("flow.")
        out.update(self.rmsm.grad_masks("rmsm."))
        return out

    def copy(self):
        return SdsModel(self.flow.copy(), self.rmsm.copy())


def _gaussian_noise_term(eps_rows, sigma_eps):
    d = eps_rows.shape[1]
    if d == 0:
        return 0.0
    n_rows = eps_rows.shape[0]
    return (-0.5 * n_rows * d * np.log(2.0 * np.pi * sigma_eps ** 2)
            - float((eps_rows ** 2).sum()) / (2.0 * sigma_eps ** 2))


def batch_objective(flow, rmsm, x, sigma_eps, align_targets=None,
                    align_weight=0.0, want_gamma=False):
    """Summed exact log-density of a batch plus all parameter gradients.

    x: (B, T, n). Returns (loglik_sum, grads, gamma or None); the caller
    normalizes by B. align_targets (B, T, m), when given with a positive
    weight, subtracts weight * per-sequence MSE between extracted
    latents and the targets (gradient applied to the flow path only).
    """
    B, T, n = x.shape
    m, d = flow.latent_dim, flow.noise_dim
    if m + d != n:
        raise ContractViolation("flow dimension does not match data")
    if rmsm.dim != m:
        raise ContractViolation("rmsm dimension does not match flow split")
    rows = x.reshape(B * T, n)
    if not np.all(np.isfinite(rows)):
        raise ContractViolation("non-finite observations")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            v_rows, logdet_rows, tapes = flow._inverse_with_tapes(rows)
    except np.linalg.LinAlgError as exc:
        raise DivergenceError(f"flow inverse failed: {exc}") from exc
    if not np.all(np.isfinite(v_rows)):
        raise DivergenceError("flow inverse produced non-finite latents")
    z_rows, eps_rows = v_rows[:, :m], v_rows[:, m:]
    z = z_rows.reshape(B, T, m)

    logdet_term = float(logdet_rows.sum())
    if not np.isfinite(logdet_term):
        raise DivergenceError("flow log-determinant term is non-finite")
    with np.errstate(over="ignore", invalid="ignore"):
        stats, u, c, logb, gamma, xi, ll = rmsm_mod.batch_forward_backward(
            rmsm, z)
        prior_term = float(ll.sum())
        if not np.isfinite(prior_term):
            raise DivergenceError("latent prior term is non-finite")
        noise_term = _gaussian_noise_term(eps_rows, sigma_eps)
        if not np.isfinite(noise_term):
            raise DivergenceError("noise term is non-finite")
        total = logdet_term + prior_term + noise_term

        grads, z_grad = rmsm_mod.batch_loglik_gradient(rmsm, stats, gamma, xi)
        if align_targets is not None and align_weight > 0.0:
            diff = z - align_targets
            total -= align_weight * float((diff ** 2).mean(axis=(1, 2)).sum())
            z_grad = z_grad - align_weight * 2.0 * diff / (T * m)
        eps_grad = -eps_rows / sigma_eps ** 2 if d else np.zeros((B * T, 0))
        flow_grads, _ = flow.backward_from_tapes(
            tapes, z_grad.reshape(B * T, m), eps_grad, 1.0)
    for name, val in flow_grads.items():
        grads[f"flow.{name}"] = val
    return total, grads, (gamma if want_gamma else None)


def sequence_objective(flow, rmsm, x, sigma_eps):
    """Exact log-density of one sequence (T, n) and its gradients."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ContractViolation("x must be (T, n)")
    total, grads, _ = batch_objective(flow, rmsm, x[None], sigma_eps)
    return total, grads


def pca_align_loss(z, targets):
    """MSE between extracted latents and PCA targets, with its z gradient."""
    z = np.asarray(z, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if z.shape != targets.shape:
        raise ContractViolation("shape mismatch")
    diff = z - targets
    loss = float((diff ** 2).mean())
    return loss, 2.0 * diff / diff.size


def pca_init(dataset, m):
    """Top-m principal directions of the pooled observations.

    Returns (basis (n, m), center (n,), targets (N, T, m)). The basis is
    padded with zero directions when the data has rank below m (with a
    warning), so downstream shapes stay fixed.
    """
    x = np.asarray(dataset.x, dtype=float)
    N, T, n = x.shape
    pooled = x.reshape(N * T, n)
    center = pooled.mean(axis=0)
    centered = pooled - center
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scale = svals[0] if svals.size else 0.0
    rank = int(np.sum(svals > max(scale, 1.0) * 1e-10))
    basis = np.zeros((n, m))
    take = min(m, rank)
    if take < m:
        import warnings
        warnings.warn(f"data rank {rank} below requested {m}; zero-padding",
                      stacklevel=2)
    basis[:, :take] = vt[:take].T
    targets = (centered @ basis).reshape(N, T, m)
    return basis, center, targets


def init_rmsm_from_pca(params, targets):
    """Moment-match the initial state distribution to PCA features."""
    first = targets[:, 0, :]
    mean = first.mean(axis=0)
    std = np.maximum(first.std(axis=0), rmsm_mod.SIGMA_FLOOR)
    params.initial_means[:] = mean
    params.initial_log_sigmas[:] = np.log(std)


class Adam:
    """Adam ascent over a dict of named parameter arrays."""

    def __init__(self, params, config):
        self.params = params
        self.beta1 = config.adam_beta1
        self.beta2 = config.adam_beta2
        self.eps = config.adam_eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads, lr_for):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            # ascent on the log-likelihood
            p += lr_for(name) * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def _global_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    return np.sqrt(total)


@dataclass
class TrainState:
    """Everything beyond the parameters needed for bit-exact resume."""

    epoch: int
    step: int
    rng_state: dict
    adam_t: int
    adam_m: dict
    adam_v: dict


def fit(dataset, config, init, n_threads=1, checkpoint_callback=None,
        log_callback=None, resume=None):
    """Adam ascent of the mean per-sequence objective.

    Returns (trained SdsModel, TrainReport). The model is trained in
    place starting from a copy of ``init``. Non-finite objectives skip
    the update; three in a row abort with the last finite state attached
    to the raised DivergenceError. ``resume``, when given, restores the
    shuffle generator and optimizer moments so that training continues
    bit-exactly where a checkpoint left off.
    """
    model = init.copy()
    x = np.asarray(dataset.x, dtype=float)
    N, T, n = x.shape
    m = model.flow.latent_dim
    report = TrainReport()
    K = model.rmsm.n_regimes

    use_align = config.pca_align_weight > 0.0 and config.pca_align_steps > 0
    targets = None
    if use_align:
        _, _, targets = pca_init(dataset, m)
        if resume is None:
            init_rmsm_from_pca(model.rmsm, targets)

    params = model.parameters()
    opt = Adam(params, config)
    rng = prng.generator(config.seed)
    step = 0
    start_epoch = 0
    if resume is not None:
        start_epoch = resume.epoch
        step = resume.step
        rng.bit_generator.state = resume.rng_state
        opt.t = resume.adam_t
        for name in opt.m:
            opt.m[name][:] = resume.adam_m[name]
            opt.v[name][:] = resume.adam_v[name]
    bad_streak = 0
    last_good = model.copy()
    occupancy = np.zeros(K)
    start = time.monotonic()

    def current_state(epoch):
        return TrainState(
            epoch=epoch, step=step, rng_state=rng.bit_generator.state,
            adam_t=opt.t,
            adam_m={k: v.copy() for k, v in opt.m.items()},
            adam_v={k: v.copy() for k, v in opt.v.items()})

    executor = ThreadPoolExecutor(n_threads) if n_threads > 1 else None
    try:
        for epoch in range(start_epoch, config.epochs):
            lr_scale = (config.lr_drop_factor
                        if epoch >= config.lr_drop_epoch else 1.0)
            order = rng.permutation(N)
            epoch_ll = 0.0
            epoch_norms = []
            occupancy = np.zeros(K)
            for lo in range(0, N, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                weight = 0.0
                if use_align and step < config.pca_align_steps:
                    weight = config.pca_align_weight * (
                        1.0 - step / config.pca_align_steps)
                try:
                    total, grads, gamma = _chunked_objective(
                        executor, n_threads, model, x[idx], config.sigma_eps,
                        None if targets is None else targets[idx], weight)
                except DivergenceError:
                    bad_streak += 1
                    if bad_streak >= 3:
                        report.diverged = True
                        report.wall_clock = time.monotonic() - start
                        raise DivergenceError(
                            "objective non-finite for 3 consecutive steps",
                            last_good=last_good, report=report)
                    step += 1
                    continue
                bad_streak = 0
                B = len(idx)
                for g in grads.values():
                    g /= B
                if step < config.q_freeze_steps:
                    for name in grads:
                        if name.startswith("rmsm.switching."):
                            grads[name][:] = 0.0
                opt.step(grads, lambda name: lr_scale * (
                    config.flow_lr if name.startswith("flow.")
                    else config.rmsm_lr))
                model.rmsm.apply_sigma_floor(config.sigma_floor)
                epoch_ll += total
                epoch_norms.append(_global_norm(grads))
                counts = np.bincount(np.argmax(gamma, axis=2).ravel(),
                                     minlength=K)
                occupancy += counts
                last_good = model.copy()
                step += 1
            per_step = epoch_ll / (N * T)
            report.epoch_loglik.append(per_step)
            report.grad_norms.append(float(np.mean(epoch_norms))
                                     if epoch_norms else float("nan"))
            if occupancy.sum() > 0:
                occupancy = occupancy / occupancy.sum()
            if log_callback is not None:
                log_callback(epoch, per_step, report.grad_norms[-1], occupancy)
            if (checkpoint_callback is not None and config.checkpoint_every
                    and (epoch + 1) % config.checkpoint_every == 0):
                checkpoint_callback(model, current_state(epoch + 1))
    finally:
        if executor is not None:
            executor.shutdown()
    report.occupancy = occupancy
    report.wall_clock = time.monotonic() - start
    report.final_state = current_state(config.epochs)
    return model, report


def _chunked_objective(executor, n_threads, model, xb, sigma_eps, targets,
                       weight):
    """Batch objective, optionally over parallel chunks.

    Chunk results are reduced in chunk order, so the outcome does not
    depend on the thread count.
    """
    B = xb.shape[0]
    if executor is None or n_threads <= 1 or B < 2 * n_threads:
        return batch_objective(model.flow, model.rmsm, xb, sigma_eps,
                               targets, weight, want_gamma=True)
    bounds = np.array_split(np.arange(B), n_threads)
    bounds = [b for b in bounds if b.size]

    def work(sel):
        return batch_objective(
            model.flow, model.rmsm, xb[sel], sigma_eps,
            None if targets is None else targets[sel], weight,
            want_gamma=True)

    results = list(executor.map(work, bounds))
    total = 0.0
    grads = None
    gammas = []
    for part_total, part_grads, part_gamma in results:
        total += part_total
        gammas.append(part_gamma)
        if grads is None:
            grads = part_grads
        else:
            for name, g in part_grads.items():
                grads[name] += g
    return total, grads, np.concatenate(gammas, axis=0)
