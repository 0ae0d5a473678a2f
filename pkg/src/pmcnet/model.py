"""Fully-connected network, likelihoods, Gaussian prior and the log-target.

Parameters are carried as flat float64 vectors (``theta``) whose layout is
owned by :class:`NetworkSpec`: for every layer the weight matrix
``W_l`` (row-major, shape ``(S_l, S_{l-1})``) is followed by the bias ``b_l``.
All data matrices are column-major in the sample index, i.e. ``X`` has shape
``(d_x, N)`` and ``Y`` has shape ``(d_y, N)``.

Additive constants are dropped from the log-densities:

* gaussian likelihood: ``-N d_y log(2 pi sigma^2) / 2`` is omitted,
* prior: ``-d_theta log(2 pi v) / 2`` is omitted.

Importance weights only use differences of log-targets evaluated on the same
data, so the constants cancel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("tanh", "relu", "identity")
LIKELIHOODS = ("gaussian", "bernoulli", "multinomial")
OUTPUT_ACTIVATION = {"gaussian": "identity", "bernoulli": "sigmoid", "multinomial": "softmax"}

# upper bound on elements of one (P, S, N) activation block
_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class LayerBlock:
    layer: int
    weight_offset: int
    weight_shape: tuple[int, int]
    bias_offset: int
    bias_shape: tuple[int]

    @property
    def weight_slice(self) -> slice:
        return slice(self.weight_offset, self.weight_offset + self.weight_shape[0] * self.weight_shape[1])

    @property
    def bias_slice(self) -> slice:
        return slice(self.bias_offset, self.bias_offset + self.bias_shape[0])


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture, likelihood kind and prior of a Bayesian FCNN.

    Parameters
    ----------
    layer_sizes : sequence of int
        ``(S_0, S_1, ..., S_L)``; ``S_0`` is the input dimension.
    hidden_activation : {"tanh", "relu", "identity"}
    likelihood : {"gaussian", "bernoulli", "multinomial"}
        Also fixes the output activation (identity, sigmoid, softmax).
    sigma : float
        Noise standard deviation of the gaussian likelihood.
    prior_variance : float
        Variance of the i.i.d. zero-mean Gaussian prior on every entry of theta.
    """

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "tanh"
    likelihood: str = "bernoulli"
    sigma: float = 1.0
    prior_variance: float = 1.0
    layout: tuple[LayerBlock, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ConfigError(f"layer_sizes must hold at least two positive sizes, got {sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ConfigError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"unknown likelihood {self.likelihood!r}")
        if self.likelihood == "bernoulli" and sizes[-1] != 1:
            raise ConfigError("bernoulli likelihood needs a single output unit")
        if self.likelihood == "multinomial" and sizes[-1] < 2:
            raise ConfigError("multinomial likelihood needs at least two output units")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if not self.prior_variance > 0:
            raise ConfigError("prior_variance must be positive")

        blocks = []
        offset = 0
        for layer in range(1, len(sizes)):
            rows, cols = sizes[layer], sizes[layer - 1]
            w_off = offset
            offset += rows * cols
            blocks.append(LayerBlock(layer, w_off, (rows, cols), offset, (rows,)))
            offset += rows
        object.__setattr__(self, "layout", tuple(blocks))

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(s * (p + 1) for p, s in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def output_activation(self) -> str:
        return OUTPUT_ACTIVATION[self.likelihood]

    def with_prior_variance(self, prior_variance: float) -> "NetworkSpec":
        return NetworkSpec(self.layer_sizes, self.hidden_activation, self.likelihood,
                           self.sigma, prior_variance)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "hidden_activation": self.hidden_activation,
            "likelihood": self.likelihood,
            "sigma": self.sigma,
            "prior_variance": self.prior_variance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layer_sizes"]), d["hidden_activation"], d["likelihood"],
                   float(d["sigma"]), float(d["prior_variance"]))


@dataclass
class TargetEvaluation:
    log_target: float
    gradient: np.ndarray | None = None


def unflatten(spec: NetworkSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split ``theta`` of shape ``(..., d_theta)`` into per-layer ``(W, b)`` views."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1] != spec.n_params:
        raise DataError(f"parameter vector has length {theta.shape[-1]}, spec needs {spec.n_params}")
    lead = theta.shape[:-1]
    return [
        (theta[..., blk.weight_slice].reshape(lead + blk.weight_shape),
         theta[..., blk.bias_slice])
        for blk in spec.layout
    ]


def flatten(spec: NetworkSpec, params: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    if len(params) != spec.n_layers:
        raise DataError(f"expected {spec.n_layers} layers, got {len(params)}")
    theta = np.empty(spec.n_params)
    for blk, (W, b) in zip(spec.layout, params):
        W = np.asarray(W, dtype=float)
        b = np.asarray(b, dtype=float)
        if W.shape != blk.weight_shape or b.shape != blk.bias_shape:
            raise DataError(f"layer {blk.layer}: got shapes {W.shape}, {b.shape}")
        theta[blk.weight_slice] = W.ravel()
        theta[blk.bias_slice] = b
    return theta


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for every entry."""
    theta = np.empty(spec.n_params)
    for blk in spec.layout:
        bound = 1.0 / np.sqrt(blk.weight_shape[1])
        theta[blk.weight_slice] = rng.uniform(-bound, bound, size=blk.weight_shape[0] * blk.weight_shape[1])
        theta[blk.bias_slice] = rng.uniform(-bound, bound, size=blk.bias_shape[0])
    return theta


def _activate(name: str, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(h)
    if name == "relu":
        return np.maximum(h, 0.0)
    return h


def _activation_derivative(name: str, h: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        # subgradient 0 at exactly 0
        return (h > 0).astype(h.dtype)
    return np.ones_like(h)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def output_transform(spec: NetworkSpec, logits: np.ndarray, axis: int = -2) -> np.ndarray:
    """Apply the output activation to pre-activations (unit axis ``axis``)."""
    act = spec.output_activation
    if act == "sigmoid":
        return _sigmoid(logits)
    if act == "softmax":
        return _softmax(logits, axis)
    return logits


def _check_inputs(spec: NetworkSpec, X: np.ndarray, Y: np.ndarray | None = None):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != spec.input_dim:
        raise DataError(f"inputs must have shape ({spec.input_dim}, N), got {X.shape}")
    if Y is None:
        return X, None
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != spec.output_dim or Y.shape[1] != X.shape[1]:
        raise DataError(f"outputs must have shape ({spec.output_dim}, {X.shape[1]}), got {Y.shape}")
    return X, Y


def _layer_forward(spec, params, X, keep=False):
    """Pre-activation of the last layer for a population.

    ``params`` holds batched ``(W, b)`` with a leading population axis P.
    Returns logits of shape ``(P, S_L, N)`` and, when ``keep``, the lists of
    pre-activations and activations needed for back-propagation.
    """
    hs, acts = [], [X]
    a = X
    for idx, (W, b) in enumerate(params):
        if a.ndim == 2:
            P, rows, cols = W.shape
            h = (W.reshape(P * rows, cols) @ a).reshape(P, rows, -1)
        else:
            h = np.matmul(W, a)
        h = h + b[..., None]
        if idx == len(params) - 1:
            if keep:
                hs.append(h)
            return h, hs, acts
        a = _activate(spec.hidden_activation, h)
        if keep:
            hs.append(h)
            acts.append(a)
    raise AssertionError("unreachable")


def _loglik_from_logits(spec: NetworkSpec, z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Per-population log-likelihood, computed in stabilised form from logits."""
    if spec.likelihood == "gaussian":
        r = z - Y
        return -0.5 / spec.sigma ** 2 * np.einsum("psn,psn->p", r, r)
    if spec.likelihood == "bernoulli":
        return np.sum(Y * z - np.logaddexp(0.0, z), axis=(1, 2))
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0, :] + np.log(np.exp(z - zmax).sum(axis=1))
    return np.einsum("psn,sn->p", z, Y) - np.sum(lse * Y.sum(axis=0), axis=1)


def _logit_gradient(spec: NetworkSpec, z: np.ndarray, Y: np.ndarray) -> np.ndarray:
    if spec.likelihood == "gaussian":
        return -(z - Y) / spec.sigma ** 2
    if spec.likelihood == "bernoulli":
        return Y - _sigmoid(z)
    return Y - _softmax(z, axis=1) * Y.sum(axis=0)


def _raise_nonfinite(z: np.ndarray, pop_offset: int, n_offset: int):
    bad = ~np.isfinite(z)
    if bad.any():
        p, _, n = np.argwhere(bad)[0]
        raise NumericalError(
            f"non-finite network output for population member {pop_offset + p}, sample {n_offset + n}")


def _chunks(total: int, size: int):
    size = max(1, size)
    for start in range(0, total, size):
        yield start, min(total, start + size)


def batched_loglik(spec: NetworkSpec, thetas: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Log-likelihood of every row of ``thetas`` (shape ``(P, d_theta)``)."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    P, N = thetas.shape[0], X.shape[1]
    out = np.zeros(P)
    if N == 0:
        return out
    width = max(spec.layer_sizes[1:])
    n_step = max(1, min(N, _CHUNK_ELEMENTS // width))
    p_step = max(1, _CHUNK_ELEMENTS // (width * n_step))
    for p0, p1 in _chunks(P, p_step):
        params = unflatten(spec, thetas[p0:p1])
        for n0, n1 in _chunks(N, n_step):
            z, _, _ = _layer_forward(spec, params, X[:, n0:n1])
            _raise_nonfinite(z, p0, n0)
            out[p0:p1] += _loglik_from_logits(spec, z, Y[:, n0:n1])
    return out


def batched_loglik_grad(spec: NetworkSpec, thetas: np.ndarray, X: np.ndarray, Y: np.ndarray):
    """Log-likelihood and its gradient for a population, by reverse-mode accumulation."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    P, N = thetas.shape[0], X.shape[1]
    values = np.zeros(P)
    grads = np.zeros_like(thetas)
    if N == 0:
        return values, grads
    width = max(spec.layer_sizes[1:])
    n_step = max(1, min(N, _CHUNK_ELEMENTS // (width * P * 2)))
    params = unflatten(spec, thetas)
    for n0, n1 in _chunks(N, n_step):
        Xc, Yc = X[:, n0:n1], Y[:, n0:n1]
        z, hs, acts = _layer_forward(spec, params, Xc, keep=True)
        _raise_nonfinite(z, 0, n0)
        values += _loglik_from_logits(spec, z, Yc)
        G = _logit_gradient(spec, z, Yc)
        for idx in range(spec.n_layers - 1, -1, -1):
            blk = spec.layout[idx]
            a_prev = acts[idx]
            if a_prev.ndim == 2:
                dW = G @ a_prev.T
            else:
                dW = np.matmul(G, np.swapaxes(a_prev, 1, 2))
            grads[:, blk.weight_slice] += dW.reshape(P, -1)
            grads[:, blk.bias_slice] += G.sum(axis=2)
            if idx > 0:
                W = params[idx][0]
                G = np.matmul(np.swapaxes(W, 1, 2), G)
                G *= _activation_derivative(spec.hidden_activation, hs[idx - 1], acts[idx])
    if not np.all(np.isfinite(grads)):
        p = int(np.argwhere(~np.isfinite(grads))[0, 0])
        raise NumericalError(f"non-finite gradient for population member {p}")
    return values, grads


# ---------------------------------------------------------------------------
# single-parameter public operations

def forward(spec: NetworkSpec, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Network output ``Phi(theta, x)`` for one input vector ``x`` of length ``S_0``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != spec.input_dim:
        raise DataError(f"input must be a vector of length {spec.input_dim}, got shape {x.shape}")
    return predict(spec, theta, x[:, None])[0, :, 0]


def predict(spec: NetworkSpec, thetas: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Outputs for a population ``(P, d_theta)`` on inputs ``(d_x, N)`` -> ``(P, S_L, N)``."""
    X, _ = _check_inputs(spec, X)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    width = max(spec.layer_sizes[1:])
    N = X.shape[1]
    p_step = max(1, _CHUNK_ELEMENTS // (width * max(N, 1)))
    out = np.empty((thetas.shape[0], spec.output_dim, N))
    for p0, p1 in _chunks(thetas.shape[0], p_step):
        z, _, _ = _layer_forward(spec, unflatten(spec, thetas[p0:p1]), X)
        out[p0:p1] = output_transform(spec, z, axis=1)
    return out


def log_likelihood(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray) -> float:
    X, Y = _check_inputs(spec, X, Y)
    return float(batched_loglik(spec, theta, X, Y)[0])


def log_prior(spec: NetworkSpec, theta: np.ndarray) -> float:
    theta = np.asarray(theta, dtype=float)
    return float(-theta @ theta / (2.0 * spec.prior_variance))


def log_target(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray,
               prior_weight: float = 1.0) -> TargetEvaluation:
    """``log p(theta) * prior_weight + log l(Y | theta, X)`` (value only).

    ``prior_weight`` scales the log-prior; a mini-batch holding a fraction
    ``n_b / N`` of the data uses ``prior_weight = n_b / N`` so that the
    per-batch targets multiply back to the full posterior.
    """
    return TargetEvaluation(log_prior(spec, theta) * prior_weight + log_likelihood(spec, theta, X, Y))


def log_target_gradient(spec: NetworkSpec, theta: np.ndarray, X: np.ndarray, Y: np.ndarray,
                        prior_weight: float = 1.0) -> TargetEvaluation:
    X, Y = _check_inputs(spec, X, Y)
    theta = np.asarray(theta, dtype=float)
    value, grad = batched_loglik_grad(spec, theta[None, :], X, Y)
    value = float(value[0]) + prior_weight * log_prior(spec, theta)
    grad = grad[0] - prior_weight * theta / spec.prior_variance
    return TargetEvaluation(value, grad)


def batched_log_target(spec: NetworkSpec, thetas, X: np.ndarray, Y: np.ndarray,
                       prior_weight: float = 1.0) -> np.ndarray:
    """``log_target`` of every parameter vector in ``thetas``, in input order."""
    X, Y = _check_inputs(spec, X, Y)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    prior = -np.einsum("pd,pd->p", thetas, thetas) / (2.0 * spec.prior_variance)
    return prior_weight * prior + batched_loglik(spec, thetas, X, Y)


class BNNTarget:
    """Unnormalised log-posterior of a network on a fixed data set.

    This is the object the sampler consumes; it evaluates whole populations
    at once and can be split into mini-batch targets whose product is the
    full target.
    """

    def __init__(self, spec: NetworkSpec, X: np.ndarray, Y: np.ndarray, prior_weight: float = 1.0):
        self.spec = spec
        self.X, self.Y = _check_inputs(spec, X, Y)
        self.prior_weight = float(prior_weight)

    @property
    def dim(self) -> int:
        return self.spec.n_params

    @property
    def n_data(self) -> int:
        return self.X.shape[1]

    def log_density(self, thetas: np.ndarray) -> np.ndarray:
        return batched_log_target(self.spec, thetas, self.X, self.Y, self.prior_weight)

    def log_density_and_grad(self, thetas: np.ndarray):
        thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        values, grads = batched_loglik_grad(self.spec, thetas, self.X, self.Y)
        w = self.prior_weight / self.spec.prior_variance
        values -= 0.5 * w * np.einsum("pd,pd->p", thetas, thetas)
        grads -= w * thetas
        return values, grads

    def minibatches(self, n_batches: int) -> list["BNNTarget"]:
        """Contiguous split into ``n_batches`` targets; the last batch takes the remainder.

        Each batch's prior is raised to the power ``n_b / N`` so the
        log-targets sum exactly to the full one.
        """
        N = self.n_data
        if n_batches < 1 or n_batches > N:
            raise ConfigError(f"cannot split {N} samples into {n_batches} batches")
        size = N // n_batches
        bounds = [b * size for b in range(n_batches)] + [N]
        return [
            BNNTarget(self.spec, self.X[:, lo:hi], self.Y[:, lo:hi], self.prior_weight * (hi - lo) / N)
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ]


def adam_point_estimate(spec: NetworkSpec, X: np.ndarray, Y: np.ndarray, mode: str = "mle",
                        steps: int | None = None, step_size: float = 1e-2,
                        minibatch_size: int | None = 64, seed: int = 0, epochs: int = 200,
                        init: np.ndarray | None = None, beta1: float = 0.9, beta2: float = 0.999,
                        eps: float = 1e-8) -> np.ndarray:
    """Maximum-likelihood (``mle``) or MAP (``map``) estimate by Adam.

    ``steps`` counts parameter updates and defaults to ``epochs`` passes over
    the data.  The full-data objective is evaluated at the end of every epoch
    (every step when training full-batch) and the best iterate seen is
    returned.
    """
    if mode not in ("mle", "map"):
        raise ConfigError(f"mode must be 'mle' or 'map', got {mode!r}")
    X, Y = _check_inputs(spec, X, Y)
    N = X.shape[1]
    if N == 0:
        raise DataError("cannot fit a point estimate on an empty data set")
    batch = N if minibatch_size is None else int(min(max(1, minibatch_size), N))
    per_epoch = -(-N // batch)
    if steps is None:
        steps = epochs * per_epoch
    if steps < 1:
        raise ConfigError("steps must be at least 1")

    rng = np.random.default_rng(seed)
    theta = init_parameters(spec, rng) if init is None else np.array(init, dtype=float)
    prior_w = 1.0 if mode == "map" else 0.0

    def objective(th):
        value = float(batched_loglik(spec, th, X, Y)[0])
        return value + prior_w * log_prior(spec, th)

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    best, best_value = theta.copy(), -np.inf
    order = rng.permutation(N)
    pos = 0
    for step in range(1, steps + 1):
        if pos >= N:
            order = rng.permutation(N)
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        try:
            _, g = batched_loglik_grad(spec, theta[None, :], X[:, idx], Y[:, idx])
        except NumericalError as exc:
            raise NumericalError(f"Adam diverged at step {step}: {exc}") from exc
        g = g[0] * (N / len(idx)) - prior_w * theta / spec.prior_variance
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        theta = theta + step_size * m_hat / (np.sqrt(v_hat) + eps)
        if pos >= N or step == steps:
            try:
                value = objective(theta)
            except NumericalError as exc:
                raise NumericalError(f"Adam diverged at step {step}: {exc}") from exc
            if not np.isfinite(value):
                raise NumericalError(f"Adam diverged at step {step}: objective is {value}")
            if value > best_value:
                best, best_value = theta.copy(), value
    log.debug("adam %s: best objective %.4f after %d steps", mode, best_value, steps)
    return best
