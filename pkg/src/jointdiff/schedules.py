"""Variance-preserving noise schedules.

A schedule fixes the forward corruption x_t = alpha_t * x_0 + sigma_t * eps
on continuous time t in [0, 1], together with the drift f(t) and squared
diffusion g^2(t) of the equivalent linear SDE

    dx_t = f(t) x_t dt + g(t) dw,

where f(t) = d log alpha_t / dt and g^2(t) = d sigma_t^2/dt - 2 f(t) sigma_t^2.
For variance-preserving schedules (alpha_t^2 + sigma_t^2 = 1) the second
identity collapses to g^2(t) = -2 f(t).

Two kinds are provided:

* ``linear-vp``: beta(t) = beta_min + t (beta_max - beta_min), with the
  closed form alpha_t = exp(-t^2 (beta_max - beta_min)/4 - t beta_min / 2).
* ``cosine-vp``: alpha_t = cos(pi t / (2 (1 + s))) with a small offset s so
  that alpha stays strictly positive on [0, 1].

A discrete DDPM table (beta_i linearly spaced, alpha-bar products) is derived
from the same (beta_min, beta_max) pair for parity checks against the
continuous schedule.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class Schedule:
    """Continuous VP noise schedule plus the matched discrete table.

    ``t_min`` is the floor below which sigma_t is too small for stable
    division in score formulas; samplers integrate down to ``t_min`` and
    finish with a single denoising step.
    """

    kind: str = "linear-vp"
    beta_min: float = 0.1
    beta_max: float = 20.0
    t_min: float = 1e-3
    t_max: float = 1.0
    T_discrete: int = 1000

    def __post_init__(self) -> None:
        if self.kind not in ("linear-vp", "cosine-vp"):
            raise ValueError(f"unknown schedule kind: {self.kind!r}")
        if not 0.0 < self.beta_min < self.beta_max:
            raise ValueError("need 0 < beta_min < beta_max")
        if not 0.0 < self.t_min < self.t_max <= 1.0:
            raise ValueError("need 0 < t_min < t_max <= 1")
        if self.T_discrete < 1:
            raise ValueError("T_discrete must be >= 1")

    # -- continuous schedule -------------------------------------------------

    def _check_domain(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError(f"t outside [0, 1]: {t}")
        return t

    def beta(self, t):
        """Instantaneous noise rate beta(t) = -2 f(t)."""
        t = self._check_domain(t)
        if self.kind == "linear-vp":
            return self.beta_min + t * (self.beta_max - self.beta_min)
        c = math.pi / (2.0 * (1.0 + _COSINE_OFFSET))
        return 2.0 * c * np.tan(c * t)

    def alpha_sigma(self, t):
        """Marginal coefficients (alpha_t, sigma_t) of q_t(x_t | x_0).

        Vectorized over ``t``; raises for t outside [0, 1].
        """
        t = self._check_domain(t)
        if self.kind == "linear-vp":
            log_alpha = -0.25 * t * t * (self.beta_max - self.beta_min) - 0.5 * t * self.beta_min
            alpha = np.exp(log_alpha)
        else:
            c = math.pi / (2.0 * (1.0 + _COSINE_OFFSET))
            alpha = np.cos(c * t)
        sigma = np.sqrt(np.maximum(0.0, 1.0 - alpha * alpha))
        return alpha, sigma

    def drift_diffusion(self, t):
        """SDE coefficients (f(t), g^2(t)).

        The closed forms are finite on all of [0, 1] for both kinds, so the
        domain is the full interval even though samplers only evaluate on
        [t_min, 1].
        """
        beta = self.beta(t)
        return -0.5 * beta, beta

    def snr(self, t):
        """Signal-to-noise ratio alpha_t^2 / sigma_t^2 (strictly decreasing)."""
        alpha, sigma = self.alpha_sigma(t)
        return (alpha * alpha) / (sigma * sigma)

    def d_alpha_over_sigma_dt(self, t):
        """d/dt (alpha_t / sigma_t) = f(t) alpha_t / sigma_t^3.

        Appears in the variation-of-constants form of the mask ODE; closed
        form follows from alpha' = f alpha and sigma' = -f alpha^2 / sigma.
        """
        alpha, sigma = self.alpha_sigma(t)
        f, _ = self.drift_diffusion(t)
        return f * alpha / (sigma ** 3)

    # -- discrete table ------------------------------------------------------

    def discrete_table(self, beta_start: float | None = None, beta_end: float | None = None) -> np.ndarray:
        """DDPM table of (alpha_i, sigma_i), i = 1..T_discrete.

        beta_i is linearly spaced from ``beta_start`` to ``beta_end``;
        alpha_i = sqrt(prod_{j<=i} (1 - beta_j)), sigma_i = sqrt(1 - alpha_i^2).
        Defaults derive the per-step betas from the continuous pair,
        beta_start = beta_min / T and beta_end = beta_max / T, which for the
        default schedule gives the conventional (1e-4, 0.02) and makes the
        table the discretization of the continuous schedule.

        Returns an array of shape (T_discrete, 2) with columns (alpha, sigma).
        """
        if beta_start is None:
            beta_start = self.beta_min / self.T_discrete
        if beta_end is None:
            beta_end = self.beta_max / self.T_discrete
        betas = np.linspace(beta_start, beta_end, self.T_discrete)
        alpha_bar = np.cumprod(1.0 - betas)
        alpha = np.sqrt(alpha_bar)
        sigma = np.sqrt(1.0 - alpha_bar)
        return np.stack([alpha, sigma], axis=1)

    # -- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "T_discrete": self.T_discrete,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return cls(**d)
