"""Small fixed-topology neural network substrate with a hand-written backward pass.

Everything here works on batched 2-D arrays: inputs are ``(batch, features)`` and
weights are stored ``(out_features, in_features)`` so a dense layer computes
``x @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, EnvInvariantError, UsageError

ACTIVATIONS = ("relu", "tanh", "identity")


class Parameter:
    """A trainable array paired with a gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data: np.ndarray, name: str = "") -> None:
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad = np.zeros_like(self.data)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative of the activation evaluated at pre-activation ``z`` (output ``a``)."""
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def orthogonal_init(rows: int, cols: int, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix scaled by ``gain``; its largest singular value equals ``gain``."""
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Dense:
    """Fully connected layer ``activation(x @ W.T + b)``.

    When ``spectral`` is set (see :mod:`snmappo.spectral_norm`) and active, the
    forward pass uses ``W / spectral.divisor``. The divisor is a constant for
    differentiation, so ``dL/dW = dL/dW_eff / divisor``.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        activation: str = "relu",
        rng: np.random.Generator | None = None,
        gain: float | None = None,
        bias: bool = True,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if in_features < 1 or out_features < 1:
            raise ConfigError("layer dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        if gain is None:
            gain = np.sqrt(2.0) if activation == "relu" else 1.0
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.weight = Parameter(orthogonal_init(out_features, in_features, gain, rng), "weight")
        self.bias = Parameter(np.zeros(out_features), "bias") if bias else None
        self.spectral = None
        self._cache: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float] | None = None

    @classmethod
    def from_arrays(cls, weight, bias=None, activation: str = "identity") -> "Dense":
        weight = np.atleast_2d(np.asarray(weight, dtype=np.float64))
        layer = cls(weight.shape[1], weight.shape[0], activation, bias=bias is not None)
        layer.weight.data[...] = weight
        if bias is not None:
            layer.bias.data[...] = np.asarray(bias, dtype=np.float64).reshape(-1)
        return layer

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def divisor(self) -> float:
        sn = self.spectral
        if sn is None or not sn.active:
            return 1.0
        d = sn.divisor
        return d if d > 0.0 else 1.0

    def effective_weight(self) -> np.ndarray:
        d = self.divisor()
        return self.weight.data if d == 1.0 else self.weight.data / d

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.in_features:
            raise ConfigError(f"input has {x.shape[-1]} features, layer expects {self.in_features}")
        w_eff = self.effective_weight()
        z = x @ w_eff.T
        if self.bias is not None:
            z += self.bias.data
        a = activate(self.activation, z)
        self._cache = (x, z, a, w_eff, self.divisor())
        return a

    __call__ = forward

    @property
    def pre_activation(self) -> np.ndarray:
        if self._cache is None:
            raise UsageError("no forward pass cached")
        return self._cache[1]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient w.r.t. the input."""
        if self._cache is None:
            raise UsageError("backward called without a cached forward pass")
        x, z, a, w_eff, d = self._cache
        self._cache = None
        dz = grad_out * activation_grad(self.activation, z, a)
        dw = dz.T @ x
        self.weight.grad += dw if d == 1.0 else dw / d
        if self.bias is not None:
            self.bias.grad += dz.sum(axis=0)
        return dz @ w_eff


class MLP:
    """Stack of dense layers evaluated in order."""

    def __init__(self, layers: Sequence[Dense]) -> None:
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ConfigError(
                    f"layer widths do not compose: {prev.out_features} -> {nxt.in_features}"
                )
        self.layers = list(layers)

    @classmethod
    def build(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        output_gain: float = 1.0,
        bias: bool = True,
    ) -> "MLP":
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            act = output_activation if last else hidden_activation
            gain = output_gain if last else None
            layers.append(Dense(n_in, n_out, act, rng=rng, gain=gain, bias=bias))
        return cls(layers)

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def relu_pre_activations(self) -> list[np.ndarray]:
        return [l.pre_activation for l in self.layers if l.activation == "relu"]


class GRUCell:
    """Gated recurrent unit with reset/update/candidate gates stacked as ``[r, z, n]``.

    ``h' = (1 - z) * n + z * h`` with ``n = tanh(Wx_n x + bx_n + r * (Wh_n h + bh_n))``.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator | None = None) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        wx = np.concatenate([orthogonal_init(h, input_size, 1.0, rng) for _ in range(3)])
        wh = np.concatenate([orthogonal_init(h, h, 1.0, rng) for _ in range(3)])
        self.w_x = Parameter(wx, "w_x")
        self.w_h = Parameter(wh, "w_h")
        self.b_x = Parameter(np.zeros(3 * h), "b_x")
        self.b_h = Parameter(np.zeros(3 * h), "b_h")
        self._tape: list[tuple] = []

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.b_x, self.b_h]

    def step(self, x: np.ndarray, h: np.ndarray, record: bool = True) -> np.ndarray:
        if x.shape[-1] != self.input_size or h.shape[-1] != self.hidden_size:
            raise ConfigError("GRU input or hidden dimension mismatch")
        H = self.hidden_size
        gx = x @ self.w_x.data.T + self.b_x.data
        gh = h @ self.w_h.data.T + self.b_h.data
        rz = sigmoid(gx[:, : 2 * H] + gh[:, : 2 * H])
        r = rz[:, :H]
        z = rz[:, H:]
        n = np.tanh(gx[:, 2 * H :] + r * gh[:, 2 * H :])
        h_new = (1.0 - z) * n + z * h
        if record:
            self._tape.append((x, h, r, z, n, gh[:, 2 * H :]))
        return h_new

    def clear(self) -> None:
        self._tape.clear()

    def forward_sequence(self, xs: np.ndarray, h0: np.ndarray, resets: np.ndarray | None = None) -> np.ndarray:
        """Run ``T`` steps over ``xs`` of shape ``(T, B, input)``.

        ``resets[t, b]`` zeroes the hidden state of sequence ``b`` before step ``t``.
        Returns hidden states ``(T, B, H)``.
        """
        self._tape.clear()
        T = xs.shape[0]
        out = np.empty((T, xs.shape[1], self.hidden_size))
        self._resets = resets
        h = h0
        for t in range(T):
            if resets is not None and resets[t].any():
                h = np.where(resets[t][:, None], 0.0, h)
            h = self.step(xs[t], h)
            out[t] = h
        return out

    def backward_sequence(self, d_hs: np.ndarray) -> np.ndarray:
        """Backpropagate through the recorded sequence; returns gradient w.r.t. inputs."""
        if len(self._tape) != d_hs.shape[0]:
            raise UsageError("backward_sequence needs a matching forward_sequence")
        H = self.hidden_size
        resets = self._resets
        dxs = np.empty((d_hs.shape[0], d_hs.shape[1], self.input_size))
        dh_next = np.zeros((d_hs.shape[1], H))
        for t in range(d_hs.shape[0] - 1, -1, -1):
            x, h, r, z, n, ghn = self._tape[t]
            dh = d_hs[t] + dh_next
            dn = dh * (1.0 - z)
            dz = dh * (h - n)
            dh_prev = dh * z
            dpre_n = dn * (1.0 - n * n)
            dr = dpre_n * ghn
            dpre_r = dr * r * (1.0 - r)
            dpre_z = dz * z * (1.0 - z)
            dgx = np.concatenate([dpre_r, dpre_z, dpre_n], axis=1)
            dgh = np.concatenate([dpre_r, dpre_z, dpre_n * r], axis=1)
            self.w_x.grad += dgx.T @ x
            self.b_x.grad += dgx.sum(axis=0)
            self.w_h.grad += dgh.T @ h
            self.b_h.grad += dgh.sum(axis=0)
            dxs[t] = dgx @ self.w_x.data
            dh_prev = dh_prev + dgh @ self.w_h.data
            if resets is not None and resets[t].any():
                dh_prev = np.where(resets[t][:, None], 0.0, dh_prev)
            dh_next = dh_prev
        self._tape.clear()
        return dxs


class RecurrentPolicy:
    """Actor: dense(relu) -> GRU -> linear logits head. State is the GRU hidden vector."""

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 64, rng=None,
                 activation: str = "relu", head_gain: float = 0.01) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.fc = Dense(obs_dim, hidden, activation, rng=rng)
        self.gru = GRUCell(hidden, hidden, rng=rng)
        self.head = Dense(hidden, n_actions, "identity", rng=rng, gain=head_gain)

    def parameters(self) -> list[Parameter]:
        return self.fc.parameters() + self.gru.parameters() + self.head.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden))

    def step(self, obs: np.ndarray, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = activate(self.fc.activation, obs @ self.fc.effective_weight().T + self.fc.bias.data)
        h = self.gru.step(x, state, record=False)
        return h @ self.head.effective_weight().T + self.head.bias.data, h

    def forward_sequence(self, obs: np.ndarray, state0: np.ndarray, resets: np.ndarray) -> np.ndarray:
        T, B, _ = obs.shape
        x = self.fc.forward(obs.reshape(T * B, -1)).reshape(T, B, -1)
        hs = self.gru.forward_sequence(x, state0, resets)
        return self.head.forward(hs.reshape(T * B, -1)).reshape(T, B, -1)

    def backward_sequence(self, d_logits: np.ndarray) -> None:
        T, B, _ = d_logits.shape
        d_hs = self.head.backward(d_logits.reshape(T * B, -1)).reshape(T, B, -1)
        d_x = self.gru.backward_sequence(d_hs)
        self.fc.backward(d_x.reshape(T * B, -1))


class FrameStackPolicy:
    """Feed-forward actor over the current and previous observation.

    The previous observation plays the role of the recurrent state so both actor
    kinds share one interface; a reset zeroes the previous frame.
    """

    def __init__(self, obs_dim: int, n_actions: int, hidden: int = 64, rng=None,
                 activation: str = "relu", head_gain: float = 0.01) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = hidden
        self.net = MLP([
            Dense(2 * obs_dim, hidden, activation, rng=rng),
            Dense(hidden, hidden, activation, rng=rng),
            Dense(hidden, n_actions, "identity", rng=rng, gain=head_gain),
        ])

    def parameters(self) -> list[Parameter]:
        return self.net.parameters()

    def zero_grad(self) -> None:
        self.net.zero_grad()

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.obs_dim))

    def step(self, obs: np.ndarray, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.concatenate([obs, state], axis=1)
        for layer in self.net.layers:
            x = activate(layer.activation, x @ layer.effective_weight().T + layer.bias.data)
        return x, obs

    def forward_sequence(self, obs: np.ndarray, state0: np.ndarray, resets: np.ndarray) -> np.ndarray:
        T, B, D = obs.shape
        prev = np.empty_like(obs)
        prev[0] = state0
        prev[1:] = obs[:-1]
        prev[resets] = 0.0
        x = np.concatenate([obs, prev], axis=2).reshape(T * B, 2 * D)
        return self.net.forward(x).reshape(T, B, -1)

    def backward_sequence(self, d_logits: np.ndarray) -> None:
        T, B, _ = d_logits.shape
        self.net.backward(d_logits.reshape(T * B, -1))


def masked_categorical(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax restricted to entries where ``mask`` is true; masked entries get exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise EnvInvariantError("action mask has no legal action")
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def masked_log_probs(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Log of :func:`masked_categorical`; masked entries are ``-inf``."""
    shifted = np.where(mask, logits, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        lse = np.log(np.where(mask, np.exp(shifted), 0.0).sum(axis=-1, keepdims=True))
    return shifted - lse


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one draw per row; zero-probability entries are never chosen."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    idx = (u >= cdf).sum(axis=-1)
    # guard against rounding past the last legal entry
    last_legal = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last_legal)


@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0


class Adam:
    """Bias-corrected Adam updating :class:`Parameter` objects in place."""

    def __init__(self, params: Iterable[Parameter], lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState([np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        s = self.state
        s.step_count += 1
        c1 = 1.0 - self.beta1 ** s.step_count
        c2 = 1.0 - self.beta2 ** s.step_count
        for p, m, v in zip(self.params, s.first_moment, s.second_moment):
            if p.grad.shape != p.data.shape:
                raise ConfigError(f"gradient shape mismatch for {p.name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 10.0) -> tuple[Sequence[np.ndarray], float]:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the grads and the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    norm = global_norm(grads)
    # the tolerance keeps a second application a no-op
    if norm > max_norm * (1.0 + 1e-12):
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-abs difference scaled by the larger max-abs magnitude of the two arrays."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale < 1e-12:
        return diff
    return diff / scale


@dataclass
class GradCheckResult:
    max_rel_error: float
    reliable: bool
    skipped_entries: int = 0


def finite_diff_check(
    network: MLP,
    x: np.ndarray,
    loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
    epsilon: float = 1e-6,
    kink_tol: float = 1e-6,
) -> GradCheckResult:
    """Compare the backward pass of ``network`` with central differences.

    ``loss(output)`` returns ``(value, dvalue/doutput)``. Inputs with a ReLU
    pre-activation within ``kink_tol`` of zero are reported unreliable. Entries
    whose perturbation flips any ReLU pattern are skipped.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ConfigError("epsilon must lie in [1e-7, 1e-3]")
    out = network.forward(x)
    base_pattern = [z > 0 for z in network.relu_pre_activations()]
    if any(np.any(np.abs(z) < kink_tol) for z in network.relu_pre_activations()):
        network.forward(x)  # leave a fresh cache
        return GradCheckResult(float("nan"), False)
    network.zero_grad()
    _, dout = loss(out)
    network.backward(dout)

    skipped = 0
    worst = 0.0
    for p in network.parameters():
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        keep = np.ones(p.data.shape, dtype=bool)
        flat, nflat, kflat = p.data.reshape(-1), numeric.reshape(-1), keep.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for delta in (epsilon, -epsilon):
                flat[i] = old + delta
                value, _ = loss(network.forward(x))
                vals.append(value)
                pattern = [z > 0 for z in network.relu_pre_activations()]
                if any(not np.array_equal(a, b) for a, b in zip(base_pattern, pattern)):
                    kflat[i] = False
            flat[i] = old
            nflat[i] = (vals[0] - vals[1]) / (2.0 * epsilon)
        skipped += int((~keep).sum())
        if keep.any():
            worst = max(worst, relative_error(analytic[keep], numeric[keep]))
    network.forward(x)
    return GradCheckResult(worst, True, skipped)
