"""Population Monte Carlo sampler with Langevin mean and robust covariance adaptation.

One iteration draws K samples from each of M Gaussian proposals, weights every
sample against the equal mixture of all proposals (deterministic-mixture
weights), resamples one survivor per proposal from its own K samples, and
adapts each proposal: the covariance becomes a convex combination of the
previous one, the weighted sample covariance and a covariance built from
clipped weights; the mean takes a covariance-scaled gradient step on
``log pi`` with backtracking.  The light variant keeps diagonal scales and
replaces the single full-data gradient step by one pass of mini-batch steps.

Everything is carried in the log domain; a target is any object exposing
``dim``, ``log_density(thetas)`` and ``log_density_and_grad(thetas)`` on
arrays of shape ``(P, dim)`` (plus ``minibatches(B)`` for the light variant).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .errors import ConfigError, DataError, DegeneracyError, NumericalError

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
JITTER_START = 1e-10
JITTER_ESCALATIONS = 6
DIAG_FLOOR = 1e-12


class Target(Protocol):
    dim: int

    def log_density(self, thetas: np.ndarray) -> np.ndarray: ...

    def log_density_and_grad(self, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


# ---------------------------------------------------------------------------
# proposals

def cholesky_with_jitter(cov: np.ndarray, max_escalations: int = JITTER_ESCALATIONS,
                         start: float = JITTER_START) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factor of ``cov``, adding ``eps * mean(diag) * I`` (eps x10 per retry) if needed.

    Returns ``(L, repaired_cov)``.
    """
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov), cov
    except np.linalg.LinAlgError:
        pass
    level = float(np.mean(np.diag(cov)))
    if not np.isfinite(level) or level <= 0:
        level = 1.0
    eye = np.eye(cov.shape[0])
    eps = start
    for _ in range(max_escalations + 1):
        repaired = cov + eps * level * eye
        try:
            return np.linalg.cholesky(repaired), repaired
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise NumericalError(f"covariance not positive definite after {max_escalations} jitter escalations")


@dataclass
class Proposal:
    mean: np.ndarray
    scale: np.ndarray

    @property
    def diagonal(self) -> bool:
        return self.scale.ndim == 1


@dataclass
class ProposalPopulation:
    """M Gaussian proposals; ``scales`` is ``(M, d, d)`` (covariances) or ``(M, d)`` (diagonal variances)."""

    means: np.ndarray
    scales: np.ndarray
    iteration: int = 1
    _factors: np.ndarray | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.scales = np.asarray(self.scales, dtype=float)
        M, d = self.means.shape
        if self.scales.shape not in ((M, d), (M, d, d)):
            raise DataError(f"scales of shape {self.scales.shape} do not match means {self.means.shape}")
        if self.diagonal and not np.all(self.scales > 0):
            raise DataError("diagonal scales must be strictly positive")

    @property
    def diagonal(self) -> bool:
        return self.scales.ndim == 2

    @property
    def size(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def __len__(self):
        return self.size

    def __getitem__(self, m: int) -> Proposal:
        return Proposal(self.means[m], self.scales[m])

    def factors(self) -> np.ndarray:
        """Cholesky factors ``(M, d, d)`` or elementwise standard deviations ``(M, d)``."""
        if self._factors is None:
            if self.diagonal:
                self._factors = np.sqrt(self.scales)
            else:
                chol = np.empty_like(self.scales)
                for m, cov in enumerate(self.scales):
                    try:
                        chol[m], self.scales[m] = cholesky_with_jitter(cov)
                    except NumericalError as exc:
                        raise NumericalError(f"proposal {m}: {exc}") from exc
                self._factors = chol
        return self._factors

    def log_densities(self, thetas: np.ndarray) -> np.ndarray:
        """Normalised log-density of every proposal at every point: ``(M, P)``."""
        thetas = np.atleast_2d(thetas)
        d = self.dim
        F = self.factors()
        out = np.empty((self.size, thetas.shape[0]))
        for i in range(self.size):
            diff = thetas - self.means[i]
            if self.diagonal:
                z = diff / F[i]
                logdet = 2.0 * np.sum(np.log(F[i]))
                out[i] = -0.5 * (d * LOG_2PI + logdet + np.einsum("pd,pd->p", z, z))
            else:
                z = solve_triangular(F[i], diff.T, lower=True, check_finite=False)
                logdet = 2.0 * np.sum(np.log(np.diag(F[i])))
                out[i] = -0.5 * (d * LOG_2PI + logdet + np.einsum("dp,dp->p", z, z))
        return out


def init_population(d_theta: int, M: int, sigma2: float, init_means: np.ndarray,
                    jitter_std: float | None = None, seed: int = 0,
                    diagonal: bool = False) -> ProposalPopulation:
    """Initial proposals with scale ``sigma2 * I``.

    ``init_means`` is either one center of length ``d_theta`` (replicated
    with Gaussian jitter of std ``jitter_std``, default ``0.05 * sqrt(sigma2)``)
    or an explicit ``(M, d_theta)`` array.
    """
    if not sigma2 > 0:
        raise ConfigError("sigma2 must be positive")
    if M < 1:
        raise ConfigError("M must be at least 1")
    init_means = np.asarray(init_means, dtype=float)
    if init_means.ndim == 1:
        if init_means.shape[0] != d_theta:
            raise DataError(f"center has length {init_means.shape[0]}, expected {d_theta}")
        if jitter_std is None:
            jitter_std = 0.05 * math.sqrt(sigma2)
        rng = np.random.default_rng([seed, 0, 7])
        means = init_means + jitter_std * rng.standard_normal((M, d_theta))
    else:
        if init_means.shape != (M, d_theta):
            raise DataError(f"init means have shape {init_means.shape}, expected {(M, d_theta)}")
        means = init_means.copy()
    if diagonal:
        scales = np.full((M, d_theta), float(sigma2))
    else:
        scales = np.broadcast_to(sigma2 * np.eye(d_theta), (M, d_theta, d_theta)).copy()
    return ProposalPopulation(means, scales, iteration=1)


def draw_samples(pop: ProposalPopulation, K: int, rng: np.random.Generator) -> np.ndarray:
    """``K`` draws from every proposal: array ``(M, K, d)``."""
    if K < 1:
        raise ConfigError("K must be at least 1")
    F = pop.factors()
    z = rng.standard_normal((pop.size, K, pop.dim))
    if pop.diagonal:
        return pop.means[:, None, :] + z * F[:, None, :]
    return pop.means[:, None, :] + np.matmul(z, np.swapaxes(F, 1, 2))


# ---------------------------------------------------------------------------
# weighting and resampling

def compute_dm_weights(pop: ProposalPopulation, samples: np.ndarray,
                       log_target_values: np.ndarray) -> np.ndarray:
    """Deterministic-mixture log-weights ``log pi - log((1/M) sum_i q_i)``, shape ``(M, K)``."""
    M, K, d = samples.shape
    log_q = pop.log_densities(samples.reshape(M * K, d))
    log_mix = logsumexp(log_q, axis=0) - math.log(pop.size)
    logw = np.asarray(log_target_values, dtype=float).reshape(M * K) - log_mix
    logw = np.where(np.isnan(logw), -np.inf, logw).reshape(M, K)
    if not np.any(np.isfinite(logw)):
        raise DegeneracyError("all importance weights are zero; increase the proposal scale "
                              "sigma2 or start from a better initialisation")
    return logw


def normalize_log_weights(log_weights: np.ndarray, axis=None) -> np.ndarray:
    """Normalised (linear) weights; an all-zero slice stays all-zero.

    Shifting by the maximum is exact for the large weights, so the result
    does not inherit the rounding of ``max + log(sum)`` at large ``|log w|``.
    """
    log_weights = np.asarray(log_weights, dtype=float)
    top = np.max(log_weights, axis=axis, keepdims=True)
    live = np.isfinite(top)
    with np.errstate(invalid="ignore"):
        w = np.exp(log_weights - np.where(live, top, 0.0))
    w = np.where(live, w, 0.0)
    total = np.sum(w, axis=axis, keepdims=True)
    return np.divide(w, total, out=np.zeros_like(w), where=total > 0)


def effective_sample_size(log_weights: np.ndarray) -> float:
    w = normalize_log_weights(np.ravel(log_weights))
    s = float(np.sum(w * w))
    return 1.0 / s if s > 0 else 0.0


@dataclass
class WeightedSampleSet:
    samples: np.ndarray            # (M, K, d)
    log_weights: np.ndarray        # (M, K)
    log_target_values: np.ndarray  # (M, K)
    iteration: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_weights.shape

    def normalized_weights(self, per_proposal: bool = True) -> np.ndarray:
        if per_proposal:
            return normalize_log_weights(self.log_weights, axis=1)
        return normalize_log_weights(self.log_weights)


def local_resample_indices(log_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One index per row drawn from Categorical(row-normalised weights)."""
    M, K = log_weights.shape
    w = normalize_log_weights(log_weights, axis=1)
    dead = w.sum(axis=1) == 0
    if dead.any():
        log.warning("all weights zero for proposals %s; resampling uniformly", np.flatnonzero(dead).tolist())
        w[dead] = 1.0 / K
    cdf = np.cumsum(w, axis=1)
    u = rng.random(M) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, K - 1)


def local_resample(sample_set: WeightedSampleSet, rng: np.random.Generator) -> np.ndarray:
    """Resample one survivor per proposal from that proposal's own K samples: ``(M, d)``."""
    idx = local_resample_indices(sample_set.log_weights, rng)
    return sample_set.samples[np.arange(len(idx)), idx]


# ---------------------------------------------------------------------------
# covariance adaptation

def weighted_covariance(samples: np.ndarray, norm_weights: np.ndarray, diagonal: bool = False) -> np.ndarray:
    """Weighted covariance about the weighted mean (population form).

    Accepts a single set ``(K, d)`` with weights ``(K,)`` or a batch
    ``(M, K, d)`` with weights ``(M, K)``.  Returns the diagonal only when
    ``diagonal``.
    """
    samples = np.asarray(samples, dtype=float)
    w = np.asarray(norm_weights, dtype=float)
    single = samples.ndim == 2
    if single:
        samples, w = samples[None], w[None]
    if samples.shape[1] == 1:
        log.warning("weighted covariance from a single sample is zero")
    centre = np.einsum("mk,mkd->md", w, samples)
    diff = samples - centre[:, None, :]
    if diagonal:
        cov = np.einsum("mk,mkd->md", w, diff * diff)
    else:
        cov = np.matmul(np.swapaxes(diff * w[:, :, None], 1, 2), diff)
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return cov[0] if single else cov


def cropped_weights(log_weights: np.ndarray) -> np.ndarray:
    """Clip the ``ceil(sqrt(K))`` largest weights to the value of the ``ceil(sqrt(K))``-th largest, renormalise.

    Works on a vector ``(K,)`` or row-wise on ``(M, K)``; returns linear
    normalised weights.  If fewer than ``ceil(sqrt(K))`` weights are nonzero
    the clip level is the smallest nonzero weight.
    """
    lw = np.asarray(log_weights, dtype=float)
    single = lw.ndim == 1
    lw = np.atleast_2d(lw)
    K = lw.shape[1]
    r = math.ceil(math.sqrt(K))
    ordered = -np.sort(-lw, axis=1)
    clip = ordered[:, r - 1].copy()
    dead = ~np.isfinite(clip)
    if dead.any():
        finite = np.where(np.isfinite(lw), lw, np.inf)
        clip[dead] = finite[dead].min(axis=1)
    clipped = np.minimum(lw, clip[:, None])
    out = normalize_log_weights(clipped, axis=1)
    return out[0] if single else out


def adapt_covariance(prev_scale: np.ndarray, sigma_hat: np.ndarray, sigma_tilde: np.ndarray,
                     beta_t: float, eta_t: float, diagonal: bool | None = None) -> np.ndarray:
    """``(1-beta) prev + beta (1-eta) hat + beta eta tilde``, repaired to stay positive definite.

    Full matrices get jitter until Cholesky succeeds; diagonal vectors are
    floored at ``1e-12``.  Inputs are one matrix ``(d, d)``, one diagonal
    ``(d,)``, or batches ``(M, d, d)`` / ``(M, d)``; a 2-d input is read as a
    single full matrix unless ``diagonal=True``.
    """
    if not 0 < beta_t <= 1:
        raise ConfigError(f"beta must lie in (0, 1], got {beta_t}")
    if not 0 <= eta_t <= 1:
        raise ConfigError(f"eta must lie in [0, 1], got {eta_t}")
    prev_scale, sigma_hat, sigma_tilde = (np.asarray(a, dtype=float) for a in (prev_scale, sigma_hat, sigma_tilde))
    if not prev_scale.shape == sigma_hat.shape == sigma_tilde.shape:
        raise DataError("covariance inputs must share one representation")
    if diagonal is None:
        diagonal = prev_scale.ndim == 1
    new = (1 - beta_t) * prev_scale + beta_t * (1 - eta_t) * sigma_hat + beta_t * eta_t * sigma_tilde
    if diagonal:
        return np.maximum(new, DIAG_FLOOR)
    if new.ndim == 2:
        return cholesky_with_jitter(new)[1]
    return np.stack([cholesky_with_jitter(c)[1] for c in new])


# ---------------------------------------------------------------------------
# mean adaptation

def _safe_log_density(target: Target, thetas: np.ndarray) -> np.ndarray:
    try:
        return target.log_density(thetas)
    except NumericalError:
        out = np.empty(thetas.shape[0])
        for i, th in enumerate(thetas):
            try:
                out[i] = target.log_density(th[None])[0]
            except NumericalError:
                out[i] = -np.inf
        return out


def _safe_value_and_grad(target: Target, thetas: np.ndarray):
    try:
        return target.log_density_and_grad(thetas)
    except NumericalError:
        values = np.full(thetas.shape[0], -np.inf)
        grads = np.full(thetas.shape, np.nan)
        for i, th in enumerate(thetas):
            try:
                v, g = target.log_density_and_grad(th[None])
                values[i], grads[i] = v[0], g[0]
            except NumericalError:
                pass
        return values, grads


@dataclass
class StepResult:
    means: np.ndarray
    gammas: np.ndarray     # accepted step size per proposal (0 = rejected)
    accepted: np.ndarray   # bool per proposal
    trials: np.ndarray     # number of target evaluations spent backtracking


def scaled_gradient_step(target: Target, means: np.ndarray, scales: np.ndarray, step_factor: float = 1.0,
                         max_trials: int = 20) -> StepResult:
    """Backtracking step ``mu + gamma * step_factor * Sigma grad log pi(mu)`` for a batch of means.

    ``gamma`` starts at 1 and halves until ``log pi`` strictly increases;
    after ``max_trials`` failures the mean is kept and ``gamma = 0``.  A zero
    gradient returns the mean with ``gamma = 1``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    scales = np.asarray(scales, dtype=float)
    M = means.shape[0]
    base, grads = _safe_value_and_grad(target, means)
    if scales.ndim == means.ndim:
        direction = scales * grads
    else:
        direction = np.einsum("mde,me->md", scales, grads)
    direction *= step_factor

    new = means.copy()
    gammas = np.zeros(M)
    accepted = np.zeros(M, dtype=bool)
    trials = np.zeros(M, dtype=int)
    bad = ~np.all(np.isfinite(direction), axis=1) | ~np.isfinite(base)
    if bad.any():
        log.warning("non-finite gradient for proposals %s; mean left unchanged", np.flatnonzero(bad).tolist())
    still = ~np.any(direction != 0, axis=1) & ~bad
    gammas[still] = 1.0
    pending = np.flatnonzero(~bad & ~still)
    gamma = 1.0
    for _ in range(max_trials):
        if pending.size == 0:
            break
        cand = means[pending] + gamma * direction[pending]
        vals = _safe_log_density(target, cand)
        trials[pending] += 1
        ok = vals > base[pending]
        hit = pending[ok]
        new[hit] = cand[ok]
        gammas[hit] = gamma
        accepted[hit] = True
        pending = pending[~ok]
        gamma *= 0.5
    return StepResult(new, gammas, accepted, trials)


def adapt_mean_full(target: Target, resampled_mean: np.ndarray, scale: np.ndarray, max_trials: int = 20,
                    step_factor: float = 1.0) -> tuple[np.ndarray, float]:
    """Langevin-type mean update of one proposal on the full-data target.

    Returns ``(new_mean, accepted_gamma)``.  ``scale`` may be a full
    covariance or a vector of diagonal variances.
    """
    mu = np.asarray(resampled_mean, dtype=float)
    res = scaled_gradient_step(target, mu[None], np.asarray(scale)[None], step_factor, max_trials)
    return res.means[0], float(res.gammas[0])


def light_gradient_pass(batch_targets: Sequence[Target], means: np.ndarray, diag_scales: np.ndarray,
                        max_trials: int = 20) -> tuple[np.ndarray, list[StepResult]]:
    """One epoch of half-step mini-batch updates, sequentially over the batch targets."""
    current = np.atleast_2d(np.asarray(means, dtype=float)).copy()
    results = []
    for bt in batch_targets:
        res = scaled_gradient_step(bt, current, diag_scales, 0.5, max_trials)
        current = res.means
        results.append(res)
    return current, results


def adapt_mean_light(target, resampled_mean: np.ndarray, diag_scale: np.ndarray, n_batches: int,
                     max_trials: int = 20) -> np.ndarray:
    """Mini-batch mean update of one proposal: B sequential steps ``+ (gamma/2) Delta grad log pi_b``."""
    diag_scale = np.asarray(diag_scale, dtype=float)
    if diag_scale.ndim != 1:
        raise DataError("the light update needs a diagonal scale vector")
    new, _ = light_gradient_pass(target.minibatches(n_batches), np.asarray(resampled_mean)[None],
                                 diag_scale[None], max_trials)
    return new[0]


# ---------------------------------------------------------------------------
# sampler

def constant_beta(value: float = 0.5) -> Callable[[int], float]:
    return lambda t: value


def harmonic_eta(t: int) -> float:
    return 1.0 / t


VARIANTS = ("full", "light")
PRESETS = {
    "pmcnet": dict(variant="full", adapt_mean=True, adapt_cov=True),
    "gradfree": dict(variant="full", adapt_mean=False, adapt_cov=True),
    "covfree": dict(variant="full", adapt_mean=True, adapt_cov=False),
    "dmpmc": dict(variant="full", adapt_mean=False, adapt_cov=False),
    "light": dict(variant="light", adapt_mean=True, adapt_cov=True),
}


@dataclass
class SamplerConfig:
    """Sampler settings.

    ``beta_schedule`` / ``eta_schedule`` map the iteration ``t`` (1-based) to
    the covariance-combination weights; ``eta`` is forced to 0 at ``t = T``.
    ``weight_normalization`` chooses whether the covariance estimates use the
    per-proposal (default) or the globally normalised weights.
    """

    M: int = 50
    K: int = 100
    T: int = 20
    sigma2: float = 1.0
    beta_schedule: Callable[[int], float] = field(default_factory=constant_beta)
    eta_schedule: Callable[[int], float] = harmonic_eta
    variant: str = "full"
    adapt_mean: bool = True
    adapt_cov: bool = True
    n_batches: int = 1
    max_trials: int = 20
    seed: int = 0
    jitter_std: float | None = None
    weight_normalization: str = "proposal"
    keep_all: bool = False

    def __post_init__(self):
        for name in ("M", "K", "T", "n_batches", "max_trials"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.weight_normalization not in ("proposal", "global"):
            raise ConfigError("weight_normalization must be 'proposal' or 'global'")

    @property
    def diagonal(self) -> bool:
        return self.variant == "light"

    def beta(self, t: int) -> float:
        return float(self.beta_schedule(t))

    def eta(self, t: int) -> float:
        return 0.0 if t >= self.T else float(self.eta_schedule(t))

    @classmethod
    def preset(cls, name: str, **overrides) -> "SamplerConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})


@dataclass
class IterationDiagnostics:
    iteration: int
    ess: float                 # global ESS / (M K)
    mean_proposal_ess: float   # mean over proposals of per-proposal ESS / K
    mean_log_target: float
    max_log_target: float
    accepted_fraction: float   # proposals whose mean step was accepted
    mean_gamma: float
    mean_updates: int
    cov_updates: int

    @property
    def adaptation_events(self) -> int:
        return self.mean_updates + self.cov_updates


@dataclass
class SamplerTrace:
    diagnostics: list[IterationDiagnostics]
    sample_sets: list[WeightedSampleSet]
    final_population: ProposalPopulation
    config: SamplerConfig

    def __len__(self):
        return len(self.diagnostics)

    @property
    def last(self) -> WeightedSampleSet:
        return self.sample_sets[-1]

    @property
    def adaptation_events(self) -> int:
        return sum(d.adaptation_events for d in self.diagnostics)


def _diagnose(ss: WeightedSampleSet) -> dict:
    M, K = ss.shape
    per = [effective_sample_size(row) / K for row in ss.log_weights]
    finite = ss.log_target_values[np.isfinite(ss.log_target_values)]
    return dict(
        iteration=ss.iteration,
        ess=effective_sample_size(ss.log_weights) / (M * K),
        mean_proposal_ess=float(np.mean(per)),
        mean_log_target=float(finite.mean()) if finite.size else -np.inf,
        max_log_target=float(finite.max()) if finite.size else -np.inf,
    )


def run_sampler(target: Target, config: SamplerConfig, init_means: np.ndarray | ProposalPopulation,
                trace_writer=None, callback: Callable[[WeightedSampleSet, ProposalPopulation], None] | None = None
                ) -> SamplerTrace:
    """Run ``config.T`` iterations of the sampler on ``target``.

    ``init_means`` is a center (jittered into M means), an ``(M, d)`` array,
    or a ready :class:`ProposalPopulation`.  ``trace_writer`` (optional)
    receives every iteration's weighted samples; ``callback`` is invoked
    with each sample set and the population that generated it.
    """
    if isinstance(init_means, ProposalPopulation):
        pop = init_means
        if pop.diagonal != config.diagonal:
            raise ConfigError("initial population scale representation does not match the variant")
    else:
        pop = init_population(target.dim, config.M, config.sigma2, init_means, config.jitter_std,
                              config.seed, config.diagonal)
    if pop.dim != target.dim:
        raise DataError(f"population dimension {pop.dim} does not match target dimension {target.dim}")
    batch_targets = target.minibatches(config.n_batches) if (config.variant == "light" and config.adapt_mean) else None

    M, K, d = pop.size, config.K, pop.dim
    diagnostics, kept = [], []
    for t in range(1, config.T + 1):
        rng = np.random.default_rng([config.seed, t])
        samples = draw_samples(pop, K, rng)
        logpi = _safe_log_density(target, samples.reshape(M * K, d)).reshape(M, K)
        try:
            logw = compute_dm_weights(pop, samples, logpi)
        except DegeneracyError as exc:
            raise DegeneracyError(f"iteration {t}: {exc}") from exc
        ss = WeightedSampleSet(samples, logw, logpi, t)
        if trace_writer is not None:
            trace_writer.append(ss)
        if callback is not None:
            callback(ss, pop)
        if config.keep_all:
            kept.append(ss)
        else:
            kept[:] = [ss]
        info = _diagnose(ss)
        step = dict(accepted_fraction=0.0, mean_gamma=0.0, mean_updates=0, cov_updates=0)

        # the adapted proposals after the final iteration are never sampled
        if t < config.T:
            mu_tilde = local_resample(ss, rng)
            scales = pop.scales
            if config.adapt_cov:
                hat = weighted_covariance(samples, ss.normalized_weights(), config.diagonal)
                tilde = weighted_covariance(samples, cropped_weights(logw), config.diagonal)
                if config.weight_normalization == "global":
                    # scale each proposal's estimates by its share of the total weight (times M)
                    mass = M * ss.normalized_weights(per_proposal=False).sum(axis=1)
                    mass = mass.reshape((M,) + (1,) * (hat.ndim - 1))
                    hat, tilde = mass * hat, mass * tilde
                scales = adapt_covariance(pop.scales, hat, tilde, config.beta(t), config.eta(t), config.diagonal)
                step["cov_updates"] = M
            means = mu_tilde
            if config.adapt_mean:
                if config.variant == "light":
                    means, results = light_gradient_pass(batch_targets, mu_tilde, scales, config.max_trials)
                    acc = np.mean([r.accepted.mean() for r in results])
                    gam = np.mean([r.gammas.mean() for r in results])
                    n_acc = int(sum(r.accepted.sum() for r in results))
                else:
                    res = scaled_gradient_step(target, mu_tilde, scales, 1.0, config.max_trials)
                    means, acc, gam, n_acc = res.means, res.accepted.mean(), res.gammas.mean(), int(res.accepted.sum())
                step.update(accepted_fraction=float(acc), mean_gamma=float(gam), mean_updates=n_acc)
            pop = ProposalPopulation(means, scales, iteration=t + 1)
        diagnostics.append(IterationDiagnostics(**info, **step))
        log.info("iteration %d/%d: ess=%.4f mean log pi=%.3f max=%.3f accepted=%.2f",
                 t, config.T, info["ess"], info["mean_log_target"], info["max_log_target"],
                 step["accepted_fraction"])
    return SamplerTrace(diagnostics, kept, pop, config)


# ---------------------------------------------------------------------------
# trace file

TRACE_MAGIC = b"PMCNETTR"
TRACE_VERSION = 1


def trace_record_dtype(d_theta: int) -> np.dtype:
    return np.dtype([("t", "<i4"), ("m", "<i4"), ("k", "<i4"), ("log_weight", "<f8"),
                     ("log_target", "<f8"), ("theta", "<f8", (d_theta,))])


class TraceWriter:
    """Append-only binary trace: a JSON header followed by fixed-size little-endian records.

    Layout: ``PMCNETTR``, uint32 version, uint32 header length, the header
    (``d_theta, M, K, T, seed, config_digest``), then one record
    ``(t, m, k, log_weight, log_target, theta)`` per sample.  Appends are
    serialised by a lock.
    """

    def __init__(self, path, d_theta: int, M: int, K: int, T: int, seed: int, config_digest: str = ""):
        import threading

        self.path = path
        self.header = {"d_theta": int(d_theta), "M": int(M), "K": int(K), "T": int(T),
                       "seed": int(seed), "config_digest": config_digest}
        self.dtype = trace_record_dtype(d_theta)
        self._lock = threading.Lock()
        self._fh = None

    def __enter__(self):
        import json
        import struct

        body = json.dumps(self.header, sort_keys=True).encode()
        self._fh = open(self.path, "wb")
        self._fh.write(TRACE_MAGIC + struct.pack("<II", TRACE_VERSION, len(body)) + body)
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def append(self, ss: WeightedSampleSet) -> None:
        M, K = ss.shape
        rec = np.empty(M * K, dtype=self.dtype)
        rec["t"] = ss.iteration
        rec["m"] = np.repeat(np.arange(M), K)
        rec["k"] = np.tile(np.arange(K), M)
        rec["log_weight"] = ss.log_weights.ravel()
        rec["log_target"] = ss.log_target_values.ravel()
        rec["theta"] = ss.samples.reshape(M * K, -1)
        with self._lock:
            if self._fh is None:
                raise RuntimeError("trace writer is not open")
            self._fh.write(rec.tobytes())


def read_trace(path) -> tuple[dict, list[WeightedSampleSet]]:
    """Read a trace file back into its header and per-iteration sample sets."""
    import json
    import struct

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != TRACE_MAGIC:
        raise DataError(f"{path}: not a sampler trace file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != TRACE_VERSION:
        raise DataError(f"{path}: unsupported trace version {version}")
    header = json.loads(raw[16:16 + n])
    dtype = trace_record_dtype(header["d_theta"])
    body = raw[16 + n:]
    if len(body) % dtype.itemsize:
        raise DataError(f"{path}: truncated trace record")
    rec = np.frombuffer(body, dtype=dtype)
    M, K = header["M"], header["K"]
    sets = []
    for t in np.unique(rec["t"]):
        r = rec[rec["t"] == t]
        if len(r) != M * K:
            raise DataError(f"{path}: iteration {t} has {len(r)} records, expected {M * K}")
        r = r[np.lexsort((r["k"], r["m"]))]
        sets.append(WeightedSampleSet(r["theta"].reshape(M, K, -1).copy(), r["log_weight"].reshape(M, K).copy(),
                                      r["log_target"].reshape(M, K).copy(), int(t)))
    return header, sets
