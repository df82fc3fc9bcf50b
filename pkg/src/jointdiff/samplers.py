"""Reverse-time integrators that turn a denoiser into a generative model.

Three methods over the same denoiser interface:

* ``euler-sde``: Euler-Maruyama on the reverse SDE,
  dz = [f z - g^2 (alpha E[z|x_t] - z)/sigma^2] dt + g dw, run from t=1 down.
* ``heun-ode``: second-order Heun on the probability-flow ODE (the same
  drift with g^2 halved, no noise).
* ``exponential-ode``: one-step exact solution of the ODE's linear part,
  z' = (sigma'/sigma) z + (alpha' - alpha sigma'/sigma) E[z|x_t], which is
  what variation of constants gives when E[z|x_t] is frozen over the step.

In joint mode the state is z = (x, y) and the drift uses E[(x, y) | x_t]:
the denoiser sees the image block only, so the x-coordinates evolve exactly
as they would without a mask attached. All updates are elementwise over the
state, which makes that block equality bit-exact, and tests assert it.

Every trajectory owns two seed-sequence child streams, one for x draws and
one for y draws, so the x noise a trajectory sees does not depend on whether
a mask is attached. Results are a pure function of (config, n): chunks are
cut the same way every run and parallel mapping over them writes disjoint
slices, so `jobs` never changes a byte. chunk_size is part of the config
because batched linear algebra may round differently at different batch
shapes (ulp-level).

The last step never divides by sigma_{t<t_min}: integration stops at t_min
and the final state is the denoiser's direct estimate ("denoise to zero").
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .schedules import Schedule
from .datasets import decode_labels

_METHODS = ("euler-sde", "heun-ode", "exponential-ode")
_Y_INITS = ("zeros", "normal")  # plus "constant:<c>"


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "heun-ode"
    steps: int = 400
    grid: str = "uniform"  # "uniform" | "log"
    t_start: float = 1.0
    t_end: float | None = None  # default: schedule.t_min
    y_init: str = "zeros"
    seed: int = 0
    denoise_to_zero: bool = True
    keep_trajectories: bool = False
    chunk_size: int = 256

    def __post_init__(self) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"method must be one of {_METHODS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.grid not in ("uniform", "log"):
            raise ValueError("grid must be 'uniform' or 'log'")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        _parse_y_init(self.y_init)


def _parse_y_init(policy: str) -> tuple[str, float]:
    if policy in _Y_INITS:
        return policy, 0.0
    if policy.startswith("constant:"):
        return "constant", float(policy.split(":", 1)[1])
    raise ValueError(f"y_init must be 'zeros', 'normal', or 'constant:<c>', got {policy!r}")


def time_grid(schedule: Schedule, steps: int, t_start: float = 1.0,
              t_end: float | None = None, kind: str = "uniform") -> np.ndarray:
    """Strictly decreasing integration grid from t_start to t_end.

    The log grid concentrates steps near t_min, where both the ODE drift and
    the posterior sharpen; uniform Heun steps there can exceed the stability
    limit once steps drop below ~1/(dt * g^2/sigma^2).
    """
    if t_end is None:
        t_end = schedule.t_min
    if not (0.0 < t_end < t_start <= 1.0):
        raise ValueError(f"need 0 < t_end < t_start <= 1, got ({t_start}, {t_end})")
    if kind == "uniform":
        grid = np.linspace(t_start, t_end, steps + 1)
    elif kind == "log":
        grid = np.geomspace(t_start, t_end, steps + 1)
    else:
        raise ValueError(f"unknown grid kind {kind!r}")
    grid[0], grid[-1] = t_start, t_end
    return grid


def _estimate(denoiser, z: np.ndarray, t, width: int) -> np.ndarray:
    """E[z | x_t] for the current state width (d_x alone, or d_x + d_y)."""
    x0, y0 = denoiser.denoise(z[:, :denoiser.d_x], t)
    if width == denoiser.d_x:
        return x0
    return np.concatenate([x0, y0], axis=1)


def reverse_sde_step(denoiser, schedule: Schedule, x_t: np.ndarray, t: float,
                     dt: float, noise: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step of the image-only reverse SDE, t -> t - dt."""
    f, g2 = schedule.drift_diffusion(t)
    alpha, sigma = schedule.alpha_sigma(t)
    x0, _ = denoiser.denoise(x_t, t)
    drift = f * x_t - g2 * (alpha * x0 - x_t) / (sigma * sigma)
    return x_t - dt * drift + np.sqrt(g2 * dt) * noise


def hybrid_sde_step(denoiser, schedule: Schedule, z_t: np.ndarray, t: float,
                    dt: float, noise: np.ndarray) -> np.ndarray:
    """Euler-Maruyama on the joint state; expectation conditions on x_t only."""
    f, g2 = schedule.drift_diffusion(t)
    alpha, sigma = schedule.alpha_sigma(t)
    z0 = _estimate(denoiser, z_t, t, z_t.shape[1])
    drift = f * z_t - g2 * (alpha * z0 - z_t) / (sigma * sigma)
    return z_t - dt * drift + np.sqrt(g2 * dt) * noise


def _pf_rhs(denoiser, schedule: Schedule, z: np.ndarray, t: float) -> np.ndarray:
    f, g2 = schedule.drift_diffusion(t)
    alpha, sigma = schedule.alpha_sigma(t)
    z0 = _estimate(denoiser, z, t, z.shape[1])
    return f * z - 0.5 * g2 * (alpha * z0 - z) / (sigma * sigma)


def probability_flow_step(denoiser, schedule: Schedule, z_t: np.ndarray, t: float,
                          dt: float) -> np.ndarray:
    """One Heun step of the probability-flow ODE, t -> t - dt.

    Works on either the image-only state or the joint state; the halved g^2
    is the only difference from the SDE drift.
    """
    k1 = _pf_rhs(denoiser, schedule, z_t, t)
    z_euler = z_t - dt * k1
    # t - dt can round an ulp below the schedule domain on coarse grids
    k2 = _pf_rhs(denoiser, schedule, z_euler, max(t - dt, schedule.t_min))
    return z_t - 0.5 * dt * (k1 + k2)


def exponential_ode_step(denoiser, schedule: Schedule, z_t: np.ndarray, t: float,
                         t_next: float) -> np.ndarray:
    """Exact ODE update under a frozen denoiser estimate, t -> t_next.

    At t_next == t the coefficient pair is (1, 0): the identity.
    """
    if not t_next <= t:
        raise ValueError("t_next must not exceed t")
    a_t, s_t = schedule.alpha_sigma(t)
    a_n, s_n = schedule.alpha_sigma(t_next)
    z0 = _estimate(denoiser, z_t, t, z_t.shape[1])
    ratio = s_n / s_t
    return ratio * z_t + (a_n - a_t * ratio) * z0


def denoise_to_zero(denoiser, z_t: np.ndarray, t: float) -> np.ndarray:
    """Terminal step: replace the state with E[z | x_t] directly."""
    return _estimate(denoiser, z_t, t, z_t.shape[1])


@dataclass
class Trajectory:
    """Retained integration path: times (m+1,), states (m+1, n, d)."""

    times: np.ndarray
    states: np.ndarray


@dataclass
class SampleResult:
    x0: np.ndarray
    y0: np.ndarray | None
    aborted: np.ndarray  # bool per trajectory; non-finite states, kept as NaN rows
    trajectories: Trajectory | None = None

    @property
    def n(self) -> int:
        return len(self.x0)


def sample_joint(denoiser, schedule: Schedule, cfg: SamplerConfig, n: int,
                 mode: str = "hybrid", jobs: int = 1) -> SampleResult:
    """Integrate n trajectories from noise down to t_min and denoise to zero.

    modes: "hybrid" carries (x, y) jointly; "plain" integrates x alone (y0
    stays None); "two-stage" integrates x alone and reads the mask off the
    final denoiser call, the factorized baseline route.

    Each trajectory's seed-sequence child splits into an x stream and a y
    stream: x_T and the x block of every SDE step noise come from the first,
    y_T (under y_init="normal") and the y noise from the second. Plain and
    hybrid runs with the same seed therefore feed identical noise to the x
    coordinates, which keeps their x outputs bit-identical. Chunks write
    disjoint output slices, so mapping them over `jobs` threads returns
    exactly the sequential result.
    """
    if mode not in ("hybrid", "plain", "two-stage"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "two-stage" and not cfg.denoise_to_zero:
        raise ValueError("two-stage mode reads the mask off the final denoise step")
    if n < 0:
        raise ValueError("n must be nonnegative")
    d_x, d_y = denoiser.d_x, denoiser.d_y
    joint_state = mode == "hybrid"
    d_z = d_x + d_y if joint_state else d_x
    times = time_grid(schedule, cfg.steps, cfg.t_start, cfg.t_end, cfg.grid)
    y_kind, y_const = _parse_y_init(cfg.y_init)

    x0 = np.empty((n, d_x))
    want_y = joint_state or mode == "two-stage"
    y0 = np.empty((n, d_y)) if want_y and d_y > 0 else None
    aborted = np.zeros(n, dtype=bool)
    states = np.empty((len(times), n, d_z)) if cfg.keep_trajectories else None

    children = np.random.SeedSequence(cfg.seed).spawn(n) if n else []

    def run_chunk(lo: int, hi: int) -> None:
        splits = [c.spawn(2) for c in children[lo:hi]]
        gens_x = [np.random.default_rng(s[0]) for s in splits]
        gens_y = [np.random.default_rng(s[1]) for s in splits]
        x = np.stack([g.standard_normal(d_x) for g in gens_x])
        if joint_state:
            if y_kind == "normal":
                y = np.stack([g.standard_normal(d_y) for g in gens_y])
            else:
                y = np.full((hi - lo, d_y), y_const if y_kind == "constant" else 0.0)
            z = np.concatenate([x, y], axis=1)
        else:
            z = x
        if states is not None:
            states[0, lo:hi] = z
        with np.errstate(invalid="ignore", over="ignore"):
            for k in range(cfg.steps):
                t, t_next = times[k], times[k + 1]
                dt = t - t_next
                if cfg.method == "euler-sde":
                    noise = np.stack([g.standard_normal(d_x) for g in gens_x])
                    if joint_state:
                        noise = np.concatenate(
                            [noise, np.stack([g.standard_normal(d_y) for g in gens_y])],
                            axis=1)
                        z = hybrid_sde_step(denoiser, schedule, z, t, dt, noise)
                    else:
                        z = reverse_sde_step(denoiser, schedule, z, t, dt, noise)
                elif cfg.method == "heun-ode":
                    z = probability_flow_step(denoiser, schedule, z, t, dt)
                else:
                    z = exponential_ode_step(denoiser, schedule, z, t, t_next)
                if states is not None:
                    states[k + 1, lo:hi] = z
            if cfg.denoise_to_zero:
                xh, yh = denoiser.denoise(z[:, :d_x], times[-1])
                x0[lo:hi] = xh
                if y0 is not None:
                    y0[lo:hi] = yh
            else:
                x0[lo:hi] = z[:, :d_x]
                if y0 is not None and joint_state:
                    y0[lo:hi] = z[:, d_x:]
        aborted[lo:hi] = ~np.isfinite(
            np.concatenate([x0[lo:hi], y0[lo:hi]], axis=1) if y0 is not None else x0[lo:hi]
        ).all(axis=1)

    bounds = [(lo, min(lo + cfg.chunk_size, n)) for lo in range(0, n, cfg.chunk_size)]
    if jobs > 1 and len(bounds) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(lambda b: run_chunk(*b), bounds))
    else:
        for lo, hi in bounds:
            run_chunk(lo, hi)

    traj = Trajectory(times, states) if states is not None else None
    return SampleResult(x0, y0, aborted, traj)


# -- CSV export --

def save_samples_csv(result: SampleResult, path, K: int | None = None,
                     P: int | None = None) -> None:
    """One row per trajectory: x components, y components, decoded classes.

    Aborted trajectories stay in the file (NaN columns, aborted=1) so
    failures are visible downstream.
    """
    d_x = result.x0.shape[1]
    d_y = result.y0.shape[1] if result.y0 is not None else 0
    decode = K is not None and P is not None and d_y == K * P and d_y > 0
    header = [f"x{i}" for i in range(d_x)] + [f"y{i}" for i in range(d_y)]
    if decode:
        header += [f"class{i}" for i in range(P)]
    header.append("aborted")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(result.n):
            row = [f"{v:.17g}" for v in result.x0[i]]
            if d_y:
                row += [f"{v:.17g}" for v in result.y0[i]]
            if decode:
                if np.isfinite(result.y0[i]).all():
                    row += [str(c) for c in decode_labels(result.y0[i], K, P)]
                else:
                    row += [""] * P
            row.append("1" if result.aborted[i] else "0")
            writer.writerow(row)


def save_trajectories_csv(traj: Trajectory, path) -> None:
    """Long format: trajectory, step, t, state components."""
    m, n, d = traj.states.shape
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "step", "t"] + [f"z{i}" for i in range(d)])
        for j in range(n):
            for k in range(m):
                writer.writerow([j, k, f"{traj.times[k]:.17g}"]
                                + [f"{v:.17g}" for v in traj.states[k, j]])
