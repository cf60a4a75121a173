"""Corruption schedules for the discrete diffusion chain.

A schedule fixes, for T steps over an alphabet of K ordinary tokens plus
one MASK state, the per-step probabilities

    alpha[t]  keep the token,
    beta[t]   move to each particular ordinary token (K*beta total),
    gamma[t]  move to MASK,

with alpha + K*beta + gamma = 1 at every step, together with the cumulative
quantities alpha_bar, beta_bar, gamma_bar that describe the t-step
composite transition in closed form:

    alpha_bar[t] = prod_{i<=t} alpha[i]
    gamma_bar[t] = 1 - prod_{i<=t} (1 - gamma[i])
    beta_bar[t]  = (1 - alpha_bar[t] - gamma_bar[t]) / K

Cumulative arrays are indexed 0..T (row 0 is the identity: alpha_bar=1,
others 0); per-step arrays are indexed 1..T (slot 0 is an unused identity
placeholder so that indices equal timesteps).

The standard construction ramps the cumulative quantities linearly:
gamma_bar and the total uniform mass K*beta_bar grow linearly from 0 to
their endpoints, and the per-step values are recovered by ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MASK_AND_REPLACE = "mask-and-replace"
UNIFORM = "uniform"

_TOL = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable corruption schedule; safe to share across threads."""

    T: int
    K: int
    strategy: str
    alpha: np.ndarray       # (T+1,), index 0 unused (identity placeholder)
    beta: np.ndarray        # (T+1,)
    gamma: np.ndarray       # (T+1,)
    alpha_bar: np.ndarray   # (T+1,), index 0 = 1
    beta_bar: np.ndarray    # (T+1,), index 0 = 0
    gamma_bar: np.ndarray   # (T+1,), index 0 = 0

    @property
    def mask_index(self) -> int:
        return self.K

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "alpha_bar", "beta_bar", "gamma_bar"):
            arr = getattr(self, name)
            if arr.shape != (self.T + 1,):
                raise ValueError(f"{name} must have shape ({self.T + 1},)")
            arr.setflags(write=False)


def build_schedule(T: int, K: int, gamma_bar_T: float, uniform_mass_T: float,
                   strategy: str = MASK_AND_REPLACE) -> NoiseSchedule:
    """Build a schedule with linear cumulative ramps.

    gamma_bar[t] = gamma_bar_T * t/T and K*beta_bar[t] = uniform_mass_T * t/T;
    alpha_bar is whatever mass remains.  Per-step values are recovered by

        alpha[t] = alpha_bar[t] / alpha_bar[t-1]
        gamma[t] = 1 - (1 - gamma_bar[t]) / (1 - gamma_bar[t-1])
        beta[t]  = (1 - alpha[t] - gamma[t]) / K

    uniform_mass_T is the *total* replacement mass K*beta_bar[T], not the
    per-entry value.  alpha_bar[T] = 0 (full corruption) is allowed; the
    recovery only ever divides by alpha_bar[t-1] for t <= T.

    Raises ValueError for infeasible endpoints, a cumulative alpha that
    vanishes before T, or any recovered per-step value outside [0, 1].
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    if strategy not in (MASK_AND_REPLACE, UNIFORM):
        raise ValueError(f"unknown strategy {strategy!r}")
    if strategy == UNIFORM and gamma_bar_T != 0.0:
        raise ValueError("uniform strategy requires gamma_bar_T = 0")
    if not (0.0 <= gamma_bar_T <= 1.0 and 0.0 <= uniform_mass_T <= 1.0):
        raise ValueError("endpoints must lie in [0, 1]")
    if gamma_bar_T + uniform_mass_T > 1.0 + _TOL:
        raise ValueError("infeasible schedule: gamma_bar_T + uniform_mass_T > 1")

    ts = np.arange(T + 1, dtype=np.float64)
    gamma_bar = gamma_bar_T * ts / T
    k_beta_bar = uniform_mass_T * ts / T
    alpha_bar = 1.0 - gamma_bar - k_beta_bar
    beta_bar = k_beta_bar / K

    alpha = np.ones(T + 1)
    beta = np.zeros(T + 1)
    gamma = np.zeros(T + 1)
    for t in range(1, T + 1):
        if alpha_bar[t - 1] <= 0.0:
            raise ValueError(f"infeasible schedule: alpha_bar vanishes at t={t - 1} < T")
        alpha[t] = alpha_bar[t] / alpha_bar[t - 1]
        gamma[t] = 1.0 - (1.0 - gamma_bar[t]) / (1.0 - gamma_bar[t - 1])
        beta[t] = (1.0 - alpha[t] - gamma[t]) / K
        for name, v in (("alpha", alpha[t]), ("beta", beta[t]), ("gamma", gamma[t])):
            if not (-_TOL <= v <= 1.0 + _TOL):
                raise ValueError(f"infeasible schedule: {name}[{t}] = {v} outside [0, 1]")
    np.clip(alpha, 0.0, 1.0, out=alpha)
    np.clip(beta, 0.0, 1.0, out=beta)
    np.clip(gamma, 0.0, 1.0, out=gamma)

    return NoiseSchedule(T=T, K=K, strategy=strategy, alpha=alpha, beta=beta,
                         gamma=gamma, alpha_bar=alpha_bar, beta_bar=beta_bar,
                         gamma_bar=gamma_bar)


def schedule_from_steps(alphas, gammas, K: int,
                        strategy: str = MASK_AND_REPLACE) -> NoiseSchedule:
    """Build a schedule from explicit per-step alpha[t], gamma[t] (t = 1..T).

    beta[t] is implied by the simplex constraint and cumulatives are
    accumulated by their defining products.  Mainly used to set up custom
    chains (identity steps, mask-only chains) in experiments and tests.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    gammas = np.asarray(gammas, dtype=np.float64)
    if alphas.shape != gammas.shape or alphas.ndim != 1 or alphas.size < 1:
        raise ValueError("alphas and gammas must be equal-length 1-D with T >= 1")
    if strategy == UNIFORM and np.any(gammas != 0.0):
        raise ValueError("uniform strategy requires gamma = 0 at every step")
    T = alphas.size

    alpha = np.concatenate([[1.0], alphas])
    gamma = np.concatenate([[0.0], gammas])
    beta = (1.0 - alpha - gamma) / K
    beta[0] = 0.0
    if np.any(alpha < -_TOL) or np.any(alpha > 1 + _TOL) or \
            np.any(gamma < -_TOL) or np.any(gamma > 1 + _TOL) or np.any(beta < -_TOL):
        raise ValueError("per-step values must lie in [0, 1] with alpha + K*beta + gamma = 1")

    alpha_bar = np.cumprod(alpha)
    gamma_bar = 1.0 - np.cumprod(1.0 - gamma)
    beta_bar = (1.0 - alpha_bar - gamma_bar) / K
    return NoiseSchedule(T=T, K=K, strategy=strategy, alpha=alpha, beta=beta,
                         gamma=gamma, alpha_bar=alpha_bar, beta_bar=beta_bar,
                         gamma_bar=gamma_bar)


def validate(s: NoiseSchedule, tol: float = _TOL) -> str | None:
    """Check every schedule invariant; return None or the first violation.

    Violations are reported as data (a human-readable string naming the
    invariant and the offending timestep), never raised.
    """
    if s.alpha_bar[0] != 1.0 or s.beta_bar[0] != 0.0 or s.gamma_bar[0] != 0.0:
        return "identity-row: cumulative row t=0 must be (1, 0, 0)"
    for t in range(1, s.T + 1):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(s, name)[t]
            if not (0.0 - tol <= v <= 1.0 + tol):
                return f"per-step-range: {name}[{t}] = {v} outside [0, 1]"
        simplex = s.alpha[t] + s.K * s.beta[t] + s.gamma[t]
        if abs(simplex - 1.0) > tol:
            return f"simplex: alpha + K*beta + gamma = {simplex} != 1 at t={t}"
        if s.strategy == UNIFORM and s.gamma[t] != 0.0:
            return f"uniform-no-mask: gamma[{t}] = {s.gamma[t]} != 0"
    prod_a = np.cumprod(s.alpha)
    prod_g = 1.0 - np.cumprod(1.0 - s.gamma)
    for t in range(1, s.T + 1):
        if abs(prod_a[t] - s.alpha_bar[t]) > tol:
            return f"alpha-bar-product: |prod alpha - alpha_bar| = {abs(prod_a[t] - s.alpha_bar[t])} at t={t}"
        if abs(prod_g[t] - s.gamma_bar[t]) > tol:
            return f"gamma-bar-product: mismatch {abs(prod_g[t] - s.gamma_bar[t])} at t={t}"
        resid = abs(s.beta_bar[t] - (1.0 - s.alpha_bar[t] - s.gamma_bar[t]) / s.K)
        if resid > tol:
            return f"beta-bar-consistency: residual {resid} at t={t}"
        if s.alpha_bar[t] > s.alpha_bar[t - 1] + tol:
            return f"alpha-bar-monotone: increases at t={t}"
        if s.gamma_bar[t] < s.gamma_bar[t - 1] - tol:
            return f"gamma-bar-monotone: decreases at t={t}"
    return None


def write_table(s: NoiseSchedule, path) -> None:
    """Write the schedule as a text table, one row per step, full precision."""
    with open(path, "w") as f:
        f.write(f"# T={s.T} K={s.K} strategy={s.strategy}\n")
        f.write("# t alpha beta gamma alpha_bar beta_bar gamma_bar\n")
        for t in range(1, s.T + 1):
            cols = (s.alpha[t], s.beta[t], s.gamma[t],
                    s.alpha_bar[t], s.beta_bar[t], s.gamma_bar[t])
            f.write(f"{t} " + " ".join(repr(float(c)) for c in cols) + "\n")


def read_table(path) -> NoiseSchedule:
    """Read a schedule written by :func:`write_table` (exact round trip)."""
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("# T="):
            raise ValueError("not a schedule table")
        fields = dict(item.split("=", 1) for item in header[2:].split())
        T, K, strategy = int(fields["T"]), int(fields["K"]), fields["strategy"]
        f.readline()  # column header
        rows = [line.split() for line in f if line.strip()]
    if len(rows) != T:
        raise ValueError(f"expected {T} rows, found {len(rows)}")
    cols = np.zeros((6, T + 1))
    cols[3, 0] = 1.0
    for row in rows:
        t = int(row[0])
        cols[:, t] = [float(v) for v in row[1:7]]
    return NoiseSchedule(T=T, K=K, strategy=strategy,
                         alpha=np.concatenate([[1.0], cols[0, 1:]]),
                         beta=np.concatenate([[0.0], cols[1, 1:]]),
                         gamma=np.concatenate([[0.0], cols[2, 1:]]),
                         alpha_bar=cols[3], beta_bar=cols[4], gamma_bar=cols[5])


def default_schedule(K: int, T: int = 100) -> NoiseSchedule:
    """The standard configuration: T steps, mask mass 0.9, uniform mass 0.1."""
    return build_schedule(T=T, K=K, gamma_bar_T=0.9, uniform_mass_T=0.1)
