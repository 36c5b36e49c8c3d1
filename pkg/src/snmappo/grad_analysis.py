"""Executable checks of how spectral normalization rescales a ReLU network.

For a bias-free ReLU MLP where the layers in a subset ``S`` are divided by their
largest singular value ``k_l``:

* every pre-activation keeps its sign, so the ReLU patterns of the plain and the
  normalized network agree;
* the normalized output is the plain output times ``prod_{l in S} 1/k_l``;
* for a loss linear in the output, the gradient w.r.t. *every* weight matrix is
  the plain gradient times the same factor (divisors held constant).

With biases the first property fails, which :func:`bias_counterexample_search`
demonstrates. The checks run through the regular :class:`~snmappo.nn_core.Dense`
backward pass, so they also exercise the training code path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn_core import MLP, Dense
from .spectral_norm import SpectralNorm


class KinkError(ValueError):
    """The input sits too close to a ReLU kink for an exact comparison."""


class BiasFreeMlp:
    """ReLU MLP (linear output layer) with spectral norm hooks on layers in ``sn_set``.

    Layer indices in ``sn_set`` are 1-based. Divisors are converged singular values.
    """

    def __init__(self, weights: Sequence[np.ndarray], sn_set: Sequence[int] = (),
                 biases: Sequence[np.ndarray] | None = None, tol: float = 1e-12) -> None:
        self.sn_set = frozenset(int(i) for i in sn_set)
        if not self.sn_set <= set(range(1, len(weights) + 1)):
            raise ConfigError("sn_set must be a subset of 1..L")
        layers = []
        for i, w in enumerate(weights):
            act = "identity" if i == len(weights) - 1 else "relu"
            b = None if biases is None else biases[i]
            layers.append(Dense.from_arrays(w, b, act))
        self.mlp = MLP(layers)
        self.hooks: list[SpectralNorm] = []
        for i, layer in enumerate(layers, start=1):
            hook = SpectralNorm(layer, active=False, seed=i)
            hook.converge(tol=tol, max_iters=20000)
            self.hooks.append(hook)
        self.normalized = False

    @classmethod
    def random(cls, widths: Sequence[int], rng: np.random.Generator, sn_set: Sequence[int] = (),
               bias: bool = False) -> "BiasFreeMlp":
        weights = []
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            # random scale so divisors differ from 1
            weights.append(rng.standard_normal((n_out, n_in)) * rng.uniform(0.3, 2.0) / np.sqrt(n_in))
        biases = [rng.standard_normal(w.shape[0]) for w in weights] if bias else None
        return cls(weights, sn_set, biases)

    @property
    def n_layers(self) -> int:
        return len(self.mlp.layers)

    @property
    def divisors(self) -> list[float]:
        return [h.sigma_hat for h in self.hooks]

    @property
    def predicted_scale(self) -> float:
        """``prod_{l in S} 1/k_l``."""
        scale = 1.0
        for l in self.sn_set:
            scale /= self.hooks[l - 1].sigma_hat
        return scale

    def set_normalized(self, normalized: bool) -> None:
        self.normalized = normalized
        for i, hook in enumerate(self.hooks, start=1):
            hook.active = normalized and i in self.sn_set

    def pre_activations(self, x: np.ndarray, normalized: bool) -> list[np.ndarray]:
        self.set_normalized(normalized)
        self.mlp.forward(np.atleast_2d(x))
        return [layer.pre_activation.copy() for layer in self.mlp.layers]

    def gradients(self, x: np.ndarray, direction: np.ndarray, normalized: bool,
                  stop_gradient: bool = True) -> list[np.ndarray]:
        """Gradients of ``direction . z_L`` w.r.t. each weight matrix.

        ``stop_gradient=False`` adds the term flowing through the singular value
        (``d sigma / dW = u v^T``); used as a negative control.
        """
        self.set_normalized(normalized)
        self.mlp.zero_grad()
        out = self.mlp.forward(np.atleast_2d(x))
        self.mlp.backward(np.broadcast_to(np.asarray(direction, dtype=np.float64), out.shape).copy())
        grads = [layer.weight.grad.copy() for layer in self.mlp.layers]
        if normalized and not stop_gradient:
            for l in self.sn_set:
                layer, hook = self.mlp.layers[l - 1], self.hooks[l - 1]
                w, sigma = layer.weight.data, hook.sigma_hat
                v = hook.state.vector
                u = w @ v / sigma
                g_eff = grads[l - 1] * sigma  # gradient w.r.t. the effective weight
                grads[l - 1] = g_eff / sigma - (np.sum(g_eff * w) / sigma**2) * np.outer(u, v)
        return grads


@dataclass
class AnalysisReport:
    observed_ratio: list[float]
    predicted_ratio: float
    max_rel_deviation: float
    output_rel_deviation: float
    sign_match: bool
    layer_deviation: list[float] = field(default_factory=list)

    def passed(self, tol: float = 1e-6) -> bool:
        return self.sign_match and self.max_rel_deviation < tol and self.output_rel_deviation < tol


def _patterns_equal(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    """Per-row equality of strict-positivity patterns across all layers."""
    eq = np.ones(a[0].shape[0], dtype=bool)
    for za, zb in zip(a, b):
        eq &= np.all((za > 0) == (zb > 0), axis=1)
    return eq


def sign_preservation_check(net: BiasFreeMlp, inputs: np.ndarray) -> np.ndarray:
    """Boolean per input: do plain and normalized pre-activations share their positivity pattern?"""
    inputs = np.atleast_2d(inputs)
    plain = net.pre_activations(inputs, normalized=False)
    normed = net.pre_activations(inputs, normalized=True)
    return _patterns_equal(plain, normed)


def gradient_scaling_check(net: BiasFreeMlp, x: np.ndarray, loss_direction: np.ndarray,
                           stop_gradient: bool = True, kink_tol: float = 1e-8) -> AnalysisReport:
    """Compare normalized and plain weight gradients for the loss ``c . z_L``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    plain_z = net.pre_activations(x, normalized=False)
    norm_z = net.pre_activations(x, normalized=True)
    if any(np.any(np.abs(z) < kink_tol) for z in plain_z[:-1] + norm_z[:-1]):
        raise KinkError("input within kink tolerance of a ReLU boundary")
    predicted = net.predicted_scale

    out_plain, out_norm = plain_z[-1], norm_z[-1]
    denom = np.linalg.norm(predicted * out_plain)
    out_dev = float(np.linalg.norm(out_norm - predicted * out_plain) / denom) if denom > 0 else float(
        np.linalg.norm(out_norm))

    g_plain = net.gradients(x, loss_direction, normalized=False)
    g_norm = net.gradients(x, loss_direction, normalized=True, stop_gradient=stop_gradient)
    observed, deviation = [], []
    for gp, gn in zip(g_plain, g_norm):
        gg = float(np.sum(gp * gp))
        observed.append(float(np.sum(gn * gp) / gg) if gg > 0 else float("nan"))
        ref = np.linalg.norm(predicted * gp)
        diff = np.linalg.norm(gn - predicted * gp)
        deviation.append(float(diff / ref) if ref > 0 else float(diff))
    sign_match = bool(_patterns_equal(plain_z, norm_z).all())
    return AnalysisReport(observed, predicted, max(deviation), out_dev, sign_match, deviation)


def sample_regular_input(net: BiasFreeMlp, rng: np.random.Generator, max_tries: int = 1000,
                         kink_tol: float = 1e-8) -> np.ndarray:
    """Draw a Gaussian input whose plain pre-activations all clear the kink tolerance."""
    n_in = net.mlp.layers[0].in_features
    for _ in range(max_tries):
        x = rng.standard_normal(n_in)
        zs = net.pre_activations(x, normalized=False)[:-1]
        if all(np.all(np.abs(z) >= kink_tol) for z in zs):
            return x
    raise KinkError("could not sample an input away from ReLU kinks")


@dataclass
class CounterexampleResult:
    found: bool
    samples_used: int
    net: BiasFreeMlp | None = None
    x: np.ndarray | None = None
    layer: int | None = None


def bias_counterexample_search(widths: Sequence[int], rng: np.random.Generator, budget: int = 10_000,
                               bias: bool = True, sn_set: Sequence[int] | None = None,
                               inputs_per_net: int = 100) -> CounterexampleResult:
    """Search for a net and input where normalization flips a pre-activation sign.

    ``budget`` counts sampled inputs; a fresh random net is drawn every
    ``inputs_per_net`` inputs. With ``bias=False`` no flip exists, so the search
    reports not-found after the budget.
    """
    if budget < 1 or inputs_per_net < 1:
        raise ConfigError("budget and inputs_per_net must be positive")
    n_layers = len(widths) - 1
    s = tuple(range(1, n_layers + 1)) if sn_set is None else tuple(sn_set)
    used = 0
    while used < budget:
        net = BiasFreeMlp.random(widths, rng, s, bias=bias)
        xs = rng.standard_normal((min(inputs_per_net, budget - used), widths[0]))
        plain = net.pre_activations(xs, normalized=False)
        normed = net.pre_activations(xs, normalized=True)
        for row in range(xs.shape[0]):
            for layer, (zp, zn) in enumerate(zip(plain, normed), start=1):
                if np.any((zp[row] > 0) != (zn[row] > 0)):
                    return CounterexampleResult(True, used + row + 1, net, xs[row], layer)
        used += xs.shape[0]
    return CounterexampleResult(False, budget)
