"""Spectral normalization of dense weights via persistent power iteration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .nn_core import Dense

MODES = ("plain", "k_floor")


@dataclass
class SpectralState:
    """Running estimate of the top singular pair of one weight matrix.

    ``vector`` is the unit right singular vector estimate (length ``in_features``),
    ``sigma_hat`` the matching singular value estimate ``||W vector||``.
    """

    vector: np.ndarray
    sigma_hat: float = 0.0
    iters_per_update: int = 1
    mode: str = "plain"
    k_floor: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown spectral norm mode {self.mode!r}")
        if self.iters_per_update < 1:
            raise ConfigError("iters_per_update must be >= 1")
        if self.k_floor <= 0:
            raise ConfigError("k_floor must be positive")

    @classmethod
    def create(cls, in_features: int, seed: int = 0, **kwargs) -> "SpectralState":
        v = np.random.default_rng(seed).standard_normal(in_features)
        return cls(vector=v / np.linalg.norm(v), **kwargs)

    @property
    def divisor(self) -> float:
        if self.mode == "k_floor":
            return max(self.sigma_hat, self.k_floor)
        return self.sigma_hat


def power_iteration_step(weight: np.ndarray, state: SpectralState, n_iters: int | None = None) -> SpectralState:
    """Advance the estimate by ``n_iters`` (default ``state.iters_per_update``) iterations.

    Each iteration applies ``W`` then ``W.T`` to the stored vector and renormalizes.
    A zero matrix leaves the vector untouched and sets ``sigma_hat`` to 0.
    """
    weight = np.asarray(weight, dtype=np.float64)
    v = state.vector
    for _ in range(n_iters or state.iters_per_update):
        u = weight @ v
        w = weight.T @ u
        norm = np.linalg.norm(w)
        if norm == 0.0:
            state.sigma_hat = 0.0
            return state
        v = w / norm
    state.vector = v
    state.sigma_hat = float(np.linalg.norm(weight @ v))
    return state


def power_iteration_converged(weight: np.ndarray, state: SpectralState, tol: float = 1e-8,
                              max_iters: int = 1000) -> SpectralState:
    """Iterate until the relative change of ``sigma_hat`` drops below ``tol``."""
    prev = state.sigma_hat
    for _ in range(max_iters):
        power_iteration_step(weight, state, 1)
        s = state.sigma_hat
        if s == 0.0 or abs(s - prev) <= tol * s:
            break
        prev = s
    return state


def sigma_max(weight: np.ndarray, tol: float = 1e-12, max_iters: int = 1000, seed: int = 0) -> float:
    """Largest singular value by converged power iteration from a seeded start."""
    weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    state = SpectralState.create(weight.shape[1], seed=seed)
    return power_iteration_converged(weight, state, tol, max_iters).sigma_hat


def normalize_weight(weight: np.ndarray, state: SpectralState) -> np.ndarray:
    """``W / sigma_hat`` (plain) or ``W / max(sigma_hat, k)`` (k_floor); identity if sigma is 0."""
    d = state.divisor
    if state.sigma_hat == 0.0 or d == 0.0:
        return np.array(weight, dtype=np.float64)
    return np.asarray(weight, dtype=np.float64) / d


class SpectralNorm:
    """Spectral-norm hook attached to a :class:`Dense` layer.

    ``active`` controls whether the layer divides by the estimate; the estimate is
    tracked either way so every layer's sigma can be logged.
    """

    def __init__(self, layer: Dense, active: bool = True, seed: int = 0, mode: str = "plain",
                 k_floor: float = 1.0, iters_per_update: int = 1) -> None:
        self.layer = layer
        self.active = active
        self.state = SpectralState.create(layer.in_features, seed=seed, mode=mode, k_floor=k_floor,
                                          iters_per_update=iters_per_update)
        layer.spectral = self

    @property
    def divisor(self) -> float:
        return self.state.divisor

    @property
    def sigma_hat(self) -> float:
        return self.state.sigma_hat

    def update(self) -> float:
        power_iteration_step(self.layer.weight.data, self.state)
        return self.state.sigma_hat

    def converge(self, tol: float = 1e-8, max_iters: int = 1000) -> float:
        power_iteration_converged(self.layer.weight.data, self.state, tol, max_iters)
        return self.state.sigma_hat


def attach_spectral_norm(layer: Dense, active: bool = True, seed: int = 0, converge: bool = True,
                         **kwargs) -> SpectralNorm:
    sn = SpectralNorm(layer, active=active, seed=seed, **kwargs)
    if converge:
        sn.converge()
    else:
        sn.update()
    return sn


def sn_dense_forward(layer: Dense, x: np.ndarray, state: SpectralState) -> np.ndarray:
    """Forward ``layer`` with its weight divided by the (frozen) spectral estimate.

    The bias is not rescaled. The layer's backward pass then produces gradients
    with the divisor treated as a constant.
    """
    hook = layer.spectral
    if hook is None or hook.state is not state:
        hook = SpectralNorm.__new__(SpectralNorm)
        hook.layer, hook.active, hook.state = layer, True, state
        layer.spectral = hook
    return layer.forward(x)


def composite_lipschitz_bound(sigmas: Sequence[float], normalized: Sequence[bool] | None = None) -> float:
    """Product of per-layer Lipschitz constants (ReLU contributes 1).

    A normalized layer contributes 1, an unnormalized one its largest singular value.
    """
    if normalized is None:
        normalized = [False] * len(sigmas)
    if len(normalized) != len(sigmas):
        raise ConfigError("one normalized flag per layer is required")
    bound = 1.0
    for s, n in zip(sigmas, normalized):
        bound *= 1.0 if n else float(s)
    return bound
