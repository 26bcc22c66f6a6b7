"""Minimal dense networks with hand-written reverse-mode gradients.

The models in this package have a fixed, known computation structure, so
instead of a general autodiff graph each forward pass records a small
tape (layer inputs and pre-activations) that the matching backward pass
consumes. Parameters are plain numpy arrays; a parameter set is treated
as immutable while tapes against it are alive (single-writer contract).

Weight layout: ``w[l]`` has shape (in_dim, out_dim) and rows act on row
vectors, ``y = x @ w + b``. Hidden layers share one activation kind; the
output layer is affine.
"""

import numpy as np
from scipy.special import ndtr

from rsds.errors import ContractViolation

ACTIVATIONS = ("cosine", "lrelu", "gelu", "identity")

_LRELU_SLOPE = 0.2
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _act(kind, u):
    """Activation value plus a cache reused by the derivative."""
    if kind == "cosine":
        return np.cos(u), None
    if kind == "lrelu":
        return np.where(u > 0.0, u, _LRELU_SLOPE * u), None
    if kind == "gelu":
        cdf = ndtr(u)
        return u * cdf, cdf
    if kind == "identity":
        return u, None
    raise ContractViolation(f"unknown activation {kind!r}")


def _act_deriv(kind, u, cache):
    if kind == "cosine":
        return -np.sin(u)
    if kind == "lrelu":
        return np.where(u > 0.0, 1.0, _LRELU_SLOPE)
    if kind == "gelu":
        cdf = ndtr(u) if cache is None else cache
        return cdf + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI
    if kind == "identity":
        return np.ones_like(u)
    raise ContractViolation(f"unknown activation {kind!r}")


class GradTape:
    """Activations recorded by one forward pass, consumed by backward."""

    __slots__ = ("net", "inputs", "pre", "caches", "single")

    def __init__(self, net, inputs, pre, caches, single):
        self.net = net
        self.inputs = inputs
        self.pre = pre
        self.caches = caches
        self.single = single


class Mlp:
    """Dense network ``widths[0] -> ... -> widths[-1]``.

    Parameters
    ----------
    widths : sequence of positive ints, at least (in, out).
    activation : hidden-layer activation kind, one of ACTIVATIONS.
    seed : seed for uniform [-1/sqrt(fan_in), +1/sqrt(fan_in)] init of
        weights and biases; required unless explicit arrays are given.
    masks : optional per-layer binary arrays shaped like the weights;
        masked weights are exactly zero before and after every update.
    """

    def __init__(self, widths, activation="identity", seed=None, masks=None,
                 weights=None, biases=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ContractViolation(f"bad layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        n_layers = len(widths) - 1
        if masks is None:
            masks = [None] * n_layers
        if len(masks) != n_layers:
            raise ContractViolation("one mask slot per layer required")
        self.masks = [None if m is None else np.asarray(m, dtype=float) for m in masks]

        if weights is None:
            if seed is None:
                raise ContractViolation("need a seed or explicit weights")
            rng = np.random.Generator(np.random.PCG64(seed))
            weights, biases = [], []
            for lo, hi in zip(widths[:-1], widths[1:]):
                bound = 1.0 / np.sqrt(lo)
                weights.append(rng.uniform(-bound, bound, size=(lo, hi)))
                biases.append(rng.uniform(-bound, bound, size=hi))
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l], widths[l + 1]) or b.shape != (widths[l + 1],):
                raise ContractViolation(f"layer {l} parameter shapes inconsistent")
            if self.masks[l] is not None:
                if self.masks[l].shape != w.shape:
                    raise ContractViolation(f"layer {l} mask shape mismatch")
                w *= self.masks[l]

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def forward(self, x):
        """Evaluate the net; returns (output, tape).

        Accepts a single input vector or a (batch, in_dim) array; the
        output keeps the input's rank.
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.widths[0]:
            raise ContractViolation(
                f"input width {h.shape[1]} != {self.widths[0]}")
        inputs, pre, caches = [], [], []
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            p = h @ w + b
            pre.append(p)
            if l < last:
                h, cache = _act(self.activation, p)
                caches.append(cache)
            else:
                h = p
        tape = GradTape(self, inputs, pre, caches, single)
        return (h[0] if single else h), tape

    def backward(self, tape, output_grad):
        """Exact VJP through a recorded forward pass.

        Returns (input_grad, grads) where grads maps "w{l}"/"b{l}" to
        arrays shaped like the parameters. Masked weight entries have
        zero gradient.
        """
        if tape.net is not self:
            raise ContractViolation("tape was produced by a different net")
        g = np.atleast_2d(np.asarray(output_grad, dtype=float))
        if g.shape != tape.pre[-1].shape:
            raise ContractViolation(
                f"output_grad shape {g.shape} does not match tape "
                f"{tape.pre[-1].shape}")
        grads = {}
        for l in range(len(self.weights) - 1, -1, -1):
            gw = tape.inputs[l].T @ g
            if self.masks[l] is not None:
                gw *= self.masks[l]
            grads[f"w{l}"] = gw
            grads[f"b{l}"] = g.sum(axis=0)
            g = g @ self.weights[l].T
            if l > 0:
                g = g * _act_deriv(self.activation, tape.pre[l - 1],
                                   tape.caches[l - 1])
        return (g[0] if tape.single else g), grads

    def jacobian(self, x):
        """d output_i / d input_j as an (out_dim, in_dim) matrix."""
        x = np.asarray(x, dtype=float)
        if x.ndim != 1:
            raise ContractViolation("jacobian expects a single input vector")
        tiled = np.tile(x, (self.out_dim, 1))
        _, tape = self.forward(tiled)
        input_grad, _ = self.backward(tape, np.eye(self.out_dim))
        return input_grad

    def parameters(self, prefix=""):
        """Live references to the parameter arrays, keyed by name."""
        out = {}
        for l in range(len(self.weights)):
            out[f"{prefix}w{l}"] = self.weights[l]
            out[f"{prefix}b{l}"] = self.biases[l]
        return out

    def grad_masks(self, prefix=""):
        """Sparsity masks keyed like parameters(); None where dense."""
        out = {}
        for l in range(len(self.weights)):
            out[f"{prefix}w{l}"] = self.masks[l]
            out[f"{prefix}b{l}"] = None
        return out

    def copy(self):
        return Mlp(
            self.widths,
            activation=self.activation,
            masks=[None if m is None else m.copy() for m in self.masks],
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )
