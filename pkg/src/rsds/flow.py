"""Invertible emission maps built from LU mixing and affine couplings.

The emission x = f(z, eps) concatenates the latent state z (first m
coordinates) with exogenous noise eps (remaining d = n - m coordinates)
and pushes the result through a stack of invertible layers. Training
only ever differentiates the inverse direction: (z, eps) = f^{-1}(x)
plus log|det J_{f^{-1}}(x)|, so each layer implements an inverse pass
with a tape and an exact VJP through that pass.

Layers use column-vector conventions internally; the public API is
row-batched. Math per layer:

- LuMixing: x = P L U v with P a fixed permutation, L unit lower
  triangular, U upper triangular with diagonal sign_i * exp(log_diag_i).
  log|det| of the forward map is sum(log_diag), exactly.
- CouplingLayer: the first c coordinates pass through and condition a
  scale/shift of the rest; scales are squashed by bound * tanh(raw) so
  early training cannot explode the log-determinant.
"""

import numpy as np
import scipy.linalg

from rsds.errors import ContractViolation
from rsds.nnet import Mlp


def _as_rows(x, n, what):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    rows = np.atleast_2d(x)
    if rows.shape[1] != n:
        raise ContractViolation(f"{what} has width {rows.shape[1]}, expected {n}")
    if not np.all(np.isfinite(rows)):
        raise ContractViolation(f"non-finite {what}")
    return rows, single


class LuMixing:
    """Invertible linear layer W = P L U with a fixed pivot permutation.

    frozen=True turns the layer into a constant map (gradients zeroed),
    which realizes plain permutation mixing as a special case.
    """

    def __init__(self, perm, lower, upper, log_diag, sign_diag, frozen=False):
        self.n = len(perm)
        self.perm = np.asarray(perm, dtype=int)
        self.inv_perm = np.argsort(self.perm)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.log_diag = np.asarray(log_diag, dtype=float)
        self.sign_diag = np.asarray(sign_diag, dtype=float)
        self.frozen = frozen
        n = self.n
        if (self.lower.shape != (n, n) or self.upper.shape != (n, n)
                or self.log_diag.shape != (n,) or self.sign_diag.shape != (n,)):
            raise ContractViolation("LU factor shapes inconsistent")
        # only the strict triangles of the stored arrays are ever used
        self.lower = np.tril(self.lower, -1)
        self.upper = np.triu(self.upper, 1)

    @classmethod
    def from_matrix(cls, w, frozen=False):
        """Pivoted LU factorization of an explicit invertible matrix."""
        w = np.asarray(w, dtype=float)
        p, l, u = scipy.linalg.lu(w)
        d = np.diag(u)
        if np.any(d == 0.0):
            raise ContractViolation("matrix is singular")
        perm = np.argmax(p, axis=1)
        return cls(perm, np.tril(l, -1), np.triu(u, 1),
                   np.log(np.abs(d)), np.sign(d), frozen=frozen)

    @classmethod
    def random_rotation(cls, n, seed, frozen=False):
        """LU factors of a random orthogonal matrix (logdet 0 at init)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        q = q * np.sign(np.diag(r))
        return cls.from_matrix(q, frozen=frozen)

    def _l_mat(self):
        return np.eye(self.n) + self.lower

    def _u_mat(self):
        return self.upper + np.diag(self.sign_diag * np.exp(self.log_diag))

    def matrix(self):
        """The explicit mixing matrix P L U (for tests and reports)."""
        return (self._l_mat() @ self._u_mat())[self.perm]

    def _apply_p_rows(self, rows):
        # y = P w per row: y_i = w_{perm_i}
        return rows[:, self.perm]

    def forward(self, rows):
        h = rows @ self._u_mat().T
        h = h @ self._l_mat().T
        out = self._apply_p_rows(h)
        logdet = np.full(rows.shape[0], self.log_diag.sum())
        return out, logdet

    def inverse(self, rows):
        y1 = rows[:, self.inv_perm]
        y2 = scipy.linalg.solve_triangular(
            self._l_mat(), y1.T, lower=True, unit_diagonal=True,
            check_finite=False).T
        v = scipy.linalg.solve_triangular(self._u_mat(), y2.T, lower=False,
                                          check_finite=False).T
        logdet_inv = np.full(rows.shape[0], -self.log_diag.sum())
        tape = (y2, v)
        return v, logdet_inv, tape

    def backward_inverse(self, tape, g_out, g_logdet):
        """VJP of [g_out . v(x) + g_logdet * logdet_inv(x)] for this layer."""
        y2, v = tape
        u_mat = self._u_mat()
        l_mat = self._l_mat()
        w = scipy.linalg.solve_triangular(u_mat.T, g_out.T, lower=True,
                                          check_finite=False).T
        uvec = scipy.linalg.solve_triangular(l_mat.T, w.T, lower=False,
                                             unit_diagonal=True,
                                             check_finite=False).T
        g_x = uvec[:, self.perm]
        if self.frozen:
            grads = {"lower": np.zeros_like(self.lower),
                     "upper": np.zeros_like(self.upper),
                     "log_diag": np.zeros_like(self.log_diag)}
            return g_x, grads
        d_u = -(w.T @ v)
        d_l = -(uvec.T @ y2)
        g_log_diag = np.diag(d_u) * np.diag(u_mat) - g_logdet.sum()
        grads = {
            "lower": np.tril(d_l, -1),
            "upper": np.triu(d_u, 1),
            "log_diag": g_log_diag,
        }
        return g_x, grads

    def parameters(self, prefix=""):
        return {f"{prefix}lower": self.lower,
                f"{prefix}upper": self.upper,
                f"{prefix}log_diag": self.log_diag}

    def grad_masks(self, prefix=""):
        """Structural masks: only the strict triangles are live parameters."""
        n = self.n
        live = 0.0 if self.frozen else 1.0
        return {f"{prefix}lower": live * np.tril(np.ones((n, n)), -1),
                f"{prefix}upper": live * np.triu(np.ones((n, n)), 1),
                f"{prefix}log_diag": live * np.ones(n)}

    def copy(self):
        return LuMixing(self.perm.copy(), self.lower.copy(), self.upper.copy(),
                        self.log_diag.copy(), self.sign_diag.copy(),
                        frozen=self.frozen)


class CouplingLayer:
    """Affine coupling: coordinates [c:] scaled/shifted conditioned on [:c]."""

    def __init__(self, n, split, net, scale_bound=None):
        self.n = n
        self.split = split
        self.net = net
        if not 1 <= split < n:
            raise ContractViolation("split must leave both parts non-empty")
        if net.in_dim != split or net.out_dim != 2 * (n - split):
            raise ContractViolation("coupling net shape inconsistent")
        if scale_bound is None:
            scale_bound = np.ones(1)
        self.scale_bound = np.asarray(scale_bound, dtype=float).reshape(1)

    @classmethod
    def create(cls, n, hidden, seed, split=None, activation="lrelu",
               conditioner_depth=1):
        """Seeded coupling initialized to the identity map (zero last layer)."""
        if split is None:
            split = (n + 1) // 2
        widths = [split] + [hidden] * conditioner_depth + [2 * (n - split)]
        net = Mlp(widths, activation=activation, seed=seed)
        net.weights[-1][:] = 0.0
        net.biases[-1][:] = 0.0
        return cls(n, split, net)

    def _scale_shift(self, a):
        raw, tape = self.net.forward(a)
        half = self.n - self.split
        raw_s, shift = raw[:, :half], raw[:, half:]
        th = np.tanh(raw_s)
        s = self.scale_bound[0] * th
        return s, shift, th, tape

    def forward(self, rows):
        a = rows[:, :self.split]
        s, shift, _, _ = self._scale_shift(a)
        out = np.concatenate([a, rows[:, self.split:] * np.exp(s) + shift], axis=1)
        return out, s.sum(axis=1)

    def inverse(self, rows):
        a = rows[:, :self.split]
        s, shift, th, net_tape = self._scale_shift(a)
        b = (rows[:, self.split:] - shift) * np.exp(-s)
        tape = (a, s, th, b, net_tape)
        return np.concatenate([a, b], axis=1), -s.sum(axis=1), tape

    def backward_inverse(self, tape, g_out, g_logdet):
        a, s, th, b, net_tape = tape
        c = self.split
        g_a, g_b = g_out[:, :c], g_out[:, c:]
        exp_neg = np.exp(-s)
        g_xb = g_b * exp_neg
        g_shift = -g_xb
        g_s = -g_b * b - g_logdet[:, None]
        g_raw_s = g_s * self.scale_bound[0] * (1.0 - th * th)
        g_bound = np.array([(g_s * th).sum()])
        in_grad, net_grads = self.net.backward(
            net_tape, np.concatenate([g_raw_s, g_shift], axis=1))
        g_x = np.concatenate([g_a + in_grad, g_xb], axis=1)
        grads = {f"net.{k}": v for k, v in net_grads.items()}
        grads["scale_bound"] = g_bound
        return g_x, grads

    def parameters(self, prefix=""):
        out = self.net.parameters(f"{prefix}net.")
        out[f"{prefix}scale_bound"] = self.scale_bound
        return out

    def grad_masks(self, prefix=""):
        out = self.net.grad_masks(f"{prefix}net.")
        out[f"{prefix}scale_bound"] = None
        return out

    def copy(self):
        return CouplingLayer(self.n, self.split, self.net.copy(),
                             self.scale_bound.copy())


class FlowStack:
    """Ordered invertible layers with a (latent m, noise d) output split."""

    def __init__(self, layers, latent_dim, noise_dim):
        if not layers and latent_dim + noise_dim <= 0:
            raise ContractViolation("empty flow needs a positive dimension")
        self.layers = list(layers)
        self.latent_dim = latent_dim
        self.noise_dim = noise_dim
        n = latent_dim + noise_dim
        for layer in self.layers:
            if layer.n != n:
                raise ContractViolation("all layers must share the stack dimension")
        self.n = n

    def forward(self, z, eps):
        """x = f(concat(z, eps)) and log|det| of the forward map."""
        z_rows, single = _as_rows(z, self.latent_dim, "z")
        if self.noise_dim == 0:
            eps_rows = np.zeros((z_rows.shape[0], 0))
        else:
            eps_rows, single_e = _as_rows(eps, self.noise_dim, "eps")
            if single_e != single or eps_rows.shape[0] != z_rows.shape[0]:
                raise ContractViolation("z and eps batches disagree")
        rows = np.concatenate([z_rows, eps_rows], axis=1)
        logdet = np.zeros(rows.shape[0])
        for layer in self.layers:
            rows, ld = layer.forward(rows)
            logdet = logdet + ld
        if single:
            return rows[0], float(logdet[0])
        return rows, logdet

    def _inverse_with_tapes(self, rows):
        tapes = []
        logdet_inv = np.zeros(rows.shape[0])
        for layer in reversed(self.layers):
            rows, ld, tape = layer.inverse(rows)
            tapes.append(tape)
            logdet_inv = logdet_inv + ld
        return rows, logdet_inv, tapes

    def inverse(self, x):
        """(z, eps) = f^{-1}(x) and log|det J_{f^{-1}}(x)|."""
        rows, single = _as_rows(x, self.n, "x")
        v, logdet_inv, _ = self._inverse_with_tapes(rows)
        z = v[:, :self.latent_dim]
        eps = v[:, self.latent_dim:]
        if single:
            return z[0], eps[0], float(logdet_inv[0])
        return z, eps, logdet_inv

    def backward_from_tapes(self, tapes, grad_z, grad_eps, grad_logdet):
        """VJP through a recorded inverse pass (tapes from
        _inverse_with_tapes); shares the forward work with the caller."""
        gz = np.atleast_2d(np.asarray(grad_z, dtype=float))
        B = gz.shape[0]
        ge = np.atleast_2d(np.asarray(grad_eps, dtype=float)) \
            if self.noise_dim else np.zeros((B, 0))
        gl = np.broadcast_to(np.asarray(grad_logdet, dtype=float), (B,))
        if gz.shape[1] != self.latent_dim or ge.shape != (B, self.noise_dim):
            raise ContractViolation("upstream gradient shapes disagree")
        g = np.concatenate([gz, ge], axis=1)
        grads = {}
        # inverse applied layers in reverse; backprop revisits them forward
        for i, layer in enumerate(self.layers):
            tape = tapes[len(self.layers) - 1 - i]
            g, layer_grads = layer.backward_inverse(tape, g, gl)
            for name, val in layer_grads.items():
                grads[f"layer{i}.{name}"] = val
        return grads, g

    def backward(self, x, grad_z, grad_eps, grad_logdet):
        """Parameter and input gradients through the inverse pass.

        Computes the exact gradient of
            grad_z . z(x) + grad_eps . eps(x) + grad_logdet * logdet_inv(x)
        summed over batch rows. grad_logdet may be a scalar or (B,).
        """
        rows, single = _as_rows(x, self.n, "x")
        _, _, tapes = self._inverse_with_tapes(rows)
        grads, g = self.backward_from_tapes(tapes, grad_z, grad_eps,
                                            grad_logdet)
        return grads, (g[0] if single else g)

    def parameters(self, prefix="flow."):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}layer{i}."))
        return out

    def grad_masks(self, prefix="flow."):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.grad_masks(f"{prefix}layer{i}."))
        return out

    def copy(self):
        return FlowStack([layer.copy() for layer in self.layers],
                         self.latent_dim, self.noise_dim)


def build_flow(latent_dim, noise_dim, depth=6, hidden=16, mixing="lu", seed=0,
               conditioner_depth=1):
    """Alternating LU / coupling stack (LU first), depth layers total.

    Consecutive couplings alternate their split point between ceil(n/2)
    and floor(n/2), so that both halves of the coordinates get
    transformed directly (with LU mixing in between); this granularity
    matters for unmixing elementwise nonlinear emissions. mixing=
    "permutation" freezes the linear layers at their initial rotation,
    leaving only couplings trainable. For n == 1 the stack degenerates
    to LU layers only (couplings need two coordinates).
    """
    n = latent_dim + noise_dim
    if mixing not in ("lu", "permutation"):
        raise ContractViolation(f"unknown mixing variant {mixing!r}")
    frozen = mixing == "permutation"
    layers = []
    n_couplings = 0
    for i in range(depth):
        if i % 2 == 0 or n < 2:
            layers.append(LuMixing.random_rotation(n, seed=seed * 997 + i,
                                                   frozen=frozen))
        else:
            split = (n + 1) // 2 if n_couplings % 2 == 0 else max(1, n // 2)
            layers.append(CouplingLayer.create(
                n, hidden, seed=seed * 997 + i, split=split,
                conditioner_depth=conditioner_depth))
            n_couplings += 1
    return FlowStack(layers, latent_dim, noise_dim)
