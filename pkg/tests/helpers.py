"""Closed-form targets for sampler tests (no network involved)."""

import numpy as np
from scipy.special import logsumexp


class GaussianTarget:
    """log pi(theta) = log N(theta; mean, cov) up to a constant."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)
        self.dim = self.mean.size

    def log_density(self, thetas):
        diff = np.atleast_2d(thetas) - self.mean
        return -0.5 * np.einsum("pd,de,pe->p", diff, self.prec, diff)

    def log_density_and_grad(self, thetas):
        diff = np.atleast_2d(thetas) - self.mean
        return -0.5 * np.einsum("pd,de,pe->p", diff, self.prec, diff), -diff @ self.prec

    def minibatches(self, n_batches):
        return [ScaledTarget(self, 1.0 / n_batches) for _ in range(n_batches)]


class ScaledTarget:
    def __init__(self, base, power):
        self.base, self.power, self.dim = base, power, base.dim

    def log_density(self, thetas):
        return self.power * self.base.log_density(thetas)

    def log_density_and_grad(self, thetas):
        v, g = self.base.log_density_and_grad(thetas)
        return self.power * v, self.power * g


class MixtureTarget:
    """Equal-weight mixture of isotropic Gaussians."""

    def __init__(self, centres, var):
        self.centres = np.asarray(centres, dtype=float)
        self.var = float(var)
        self.dim = self.centres.shape[1]

    @property
    def mean(self):
        return self.centres.mean(axis=0)

    def _parts(self, thetas):
        diff = np.atleast_2d(thetas)[:, None, :] - self.centres[None]
        return diff, -0.5 * np.sum(diff ** 2, axis=2) / self.var

    def log_density(self, thetas):
        _, lp = self._parts(thetas)
        return logsumexp(lp, axis=1)

    def log_density_and_grad(self, thetas):
        diff, lp = self._parts(thetas)
        v = logsumexp(lp, axis=1)
        r = np.exp(lp - v[:, None])
        return v, -np.einsum("pc,pcd->pd", r, diff) / self.var


def finite_difference(f, theta, h=1e-5):
    g = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        g[i] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def max_relative_error(a, b, floor=1e-6):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
