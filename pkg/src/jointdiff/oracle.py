"""Closed-form posterior-mean denoiser under an empirical data prior.

Treating a finite dataset as an atomic prior makes everything exact: after
VP noising, the posterior over clean samples is a softmax over the data
points, so E[(x, y) | x_t], the marginal log-density of x_t, and the score
are all available in closed form. Samplers driven by this denoiser are the
ground truth that learned denoisers and every numerical check in `verify`
are measured against.

The expectation conditions on the noisy image x_t alone; labels never enter
the weights. That asymmetry is what the joint samplers exploit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .datasets import JointDataset
from .schedules import Schedule


@dataclass(frozen=True)
class OracleDenoiser:
    """Exact E[(x, y) | x_t] over the atoms of `dataset`.

    Stateless per query; O(N * d_x) per evaluation, which is fine at desk
    scale (N up to a few thousand).
    """

    dataset: JointDataset
    schedule: Schedule

    @property
    def d_x(self) -> int:
        return self.dataset.d_x

    @property
    def d_y(self) -> int:
        return self.dataset.d_y

    def _coeffs(self, t) -> tuple[float, float]:
        t = float(t)
        if not (self.schedule.t_min <= t <= 1.0):
            raise ValueError(f"t = {t} outside [{self.schedule.t_min}, 1]")
        alpha, sigma = self.schedule.alpha_sigma(t)
        return float(alpha), float(sigma)

    def _log_weights(self, x_t: np.ndarray, t) -> np.ndarray:
        """Unnormalized log posterior weights, shape (n, N)."""
        alpha, sigma = self._coeffs(t)
        x_t = np.atleast_2d(np.asarray(x_t, dtype=float))
        if self.dataset.n == 0:
            raise ValueError("oracle dataset is empty")
        sq = cdist(x_t, alpha * self.dataset.x, "sqeuclidean")
        return -sq / (2.0 * sigma * sigma)

    def posterior_weights(self, x_t: np.ndarray, t) -> np.ndarray:
        """Softmax posterior over dataset atoms.

        Returns shape (N,) for a single query vector, (n, N) for a batch.
        Log-sum-exp normalization; naive exponentials underflow once sigma_t
        is small.
        """
        single = np.asarray(x_t).ndim == 1
        lw = self._log_weights(x_t, t)
        w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
        return w[0] if single else w

    def denoise(self, x_t: np.ndarray, t) -> tuple[np.ndarray, np.ndarray]:
        """Posterior means (x0_hat, y0_hat) given the noisy image only.

        x0_hat lies in the convex hull of the data; each K-block of y0_hat
        is a convex combination of one-hots, hence on the simplex.
        """
        single = np.asarray(x_t).ndim == 1
        lw = self._log_weights(x_t, t)
        w = np.exp(lw - logsumexp(lw, axis=1, keepdims=True))
        x0 = w @ self.dataset.x
        y0 = w @ self.dataset.y
        return (x0[0], y0[0]) if single else (x0, y0)

    def score(self, x_t: np.ndarray, t) -> np.ndarray:
        """Gradient of log p_t at x_t, via the posterior-mean identity.

        score = (alpha_t * E[x0 | x_t] - x_t) / sigma_t^2, so it is exact
        wherever denoise is.
        """
        alpha, sigma = self._coeffs(t)
        x0, _ = self.denoise(x_t, t)
        return (alpha * x0 - np.asarray(x_t, dtype=float)) / (sigma * sigma)

    def log_density(self, x_t: np.ndarray, t) -> np.ndarray:
        """log p_t(x_t) of the noised empirical distribution.

        Mixture of N Gaussians N(alpha_t x_i, sigma_t^2 I) with equal
        weights. Used by tests to check `score` against finite differences.
        """
        alpha, sigma = self._coeffs(t)
        single = np.asarray(x_t).ndim == 1
        lw = self._log_weights(x_t, t)
        const = np.log(self.dataset.n) + 0.5 * self.d_x * np.log(2.0 * np.pi * sigma * sigma)
        out = logsumexp(lw, axis=1) - const
        return float(out[0]) if single else out
