"""Forward corruption process and its exact probability computations.

Everything here is a pure function of an immutable :class:`NoiseSchedule`.
Distributions over the K+1 token states (K ordinary plus MASK at index K)
are plain float64 vectors.  The composite t-step transition has the closed
form

    q(x_t | x0) = alpha_bar[t] * onehot(x0) + beta_bar[t] * ones_ordinary
                  + gamma_bar[t] * onehot(MASK)

so all single-position distributions cost O(K); dense transition matrices
are materialized only by the brute-force oracles used to cross-check the
closed form.
"""

from __future__ import annotations

import math

import numpy as np

from .schedule import MASK_AND_REPLACE, UNIFORM, NoiseSchedule

_UNDERFLOW = 1e-30


class ZeroProbabilityError(ValueError):
    """Raised when a posterior is conditioned on an unreachable (x_t, x0) pair."""


def _check_step(s: NoiseSchedule, t: int) -> None:
    if not 1 <= t <= s.T:
        raise ValueError(f"step t={t} outside [1, {s.T}]")


def _check_token(s: NoiseSchedule, x: int, ordinary_only: bool = False) -> None:
    hi = s.K - 1 if ordinary_only else s.K
    if not 0 <= x <= hi:
        kind = "ordinary token" if ordinary_only else "token"
        raise ValueError(f"{kind} {x} outside [0, {hi}]")


def transition_matrix(s: NoiseSchedule, t: int) -> np.ndarray:
    """Dense (K+1)x(K+1) single-step transition matrix, column-stochastic.

    Column n is the distribution of x_t given x_{t-1} = n.  Mask-and-replace:
    ordinary columns put alpha on the diagonal, beta on every ordinary row
    and gamma on the MASK row; the MASK column is absorbing.  Uniform: the
    MASK row of ordinary columns is zero and the MASK state is never entered.
    """
    _check_step(s, t)
    K, m = s.K, s.mask_index
    Q = np.full((K + 1, K + 1), s.beta[t])
    Q[np.diag_indices(K + 1)] += s.alpha[t]
    if s.strategy == MASK_AND_REPLACE:
        Q[m, :] = s.gamma[t]
    else:
        Q[m, :] = 0.0
    Q[:, m] = 0.0
    Q[m, m] = 1.0
    return Q


def forward_step_dist(x_prev: int, s: NoiseSchedule, t: int) -> np.ndarray:
    """q(x_t | x_{t-1} = x_prev): column x_prev of the step-t transition matrix."""
    _check_step(s, t)
    _check_token(s, x_prev)
    K, m = s.K, s.mask_index
    p = np.zeros(K + 1)
    if x_prev == m:
        p[m] = 1.0
        return p
    p[:K] = s.beta[t]
    p[x_prev] += s.alpha[t]
    p[m] = s.gamma[t] if s.strategy == MASK_AND_REPLACE else 0.0
    return p


def cumulative_dist(x0: int, s: NoiseSchedule, t: int) -> np.ndarray:
    """q(x_t | x0) in closed form, O(K); valid for t in [0, T].

    x0 must be ordinary: real data never contains MASK.
    """
    if x0 == s.mask_index:
        raise ValueError("data token cannot be MASK")
    _check_token(s, x0, ordinary_only=True)
    if not 0 <= t <= s.T:
        raise ValueError(f"step t={t} outside [0, {s.T}]")
    K = s.K
    p = np.zeros(K + 1)
    p[:K] = s.beta_bar[t]
    p[x0] += s.alpha_bar[t]
    p[s.mask_index] = s.gamma_bar[t]
    return p


def cumulative_dist_bruteforce(x0: int, s: NoiseSchedule, t: int) -> np.ndarray:
    """q(x_t | x0) by explicit left-multiplication of t transition matrices.

    Test oracle for the closed form; O(t K^2), intended for K <= 64, T <= 200.
    """
    if x0 == s.mask_index:
        raise ValueError("data token cannot be MASK")
    _check_token(s, x0, ordinary_only=True)
    if not 0 <= t <= s.T:
        raise ValueError(f"step t={t} outside [0, {s.T}]")
    v = np.zeros(s.K + 1)
    v[x0] = 1.0
    for i in range(1, t + 1):
        v = transition_matrix(s, i) @ v
    return v


def sample_xt(x0_grid, s: NoiseSchedule, t: int, rng: np.random.Generator):
    """Draw x_t ~ q(x_t | x0) independently per position of a token grid.

    Accepts and returns a plain integer array (any shape).  Each entry keeps
    its value with probability alpha_bar[t], is redrawn uniformly over the K
    ordinary tokens with probability K*beta_bar[t], and becomes MASK with
    probability gamma_bar[t] -- exactly the closed-form marginal.
    """
    _check_step(s, t)
    x0 = np.asarray(x0_grid)
    if np.any(x0 == s.mask_index) or np.any(x0 < 0) or np.any(x0 >= s.K):
        raise ValueError("input grid must contain ordinary tokens only")
    u = rng.random(x0.shape)
    r = rng.integers(0, s.K, size=x0.shape)
    keep = s.alpha_bar[t]
    replace = keep + s.K * s.beta_bar[t]
    out = np.where(u < keep, x0, np.where(u < replace, r, s.mask_index))
    return out.astype(np.int64)


def segment_params(s: NoiseSchedule, t_hi: int, t_lo: int) -> tuple[float, float, float]:
    """(alpha, beta, gamma) of the composite transition Q_{t_hi} ... Q_{t_lo+1}.

    The mask-and-replace family is closed under composition, so any segment
    of the chain is again described by three scalars:

        alpha_seg = prod alpha[i],  gamma_seg = 1 - prod (1 - gamma[i]),
        beta_seg  = (1 - alpha_seg - gamma_seg) / K

    over i in (t_lo, t_hi].  Products fall back to log space if any factor
    is small enough to underflow a running product.
    """
    if not 0 <= t_lo < t_hi <= s.T:
        raise ValueError(f"segment ({t_lo}, {t_hi}] outside 0 <= t_lo < t_hi <= {s.T}")
    a_fac = s.alpha[t_lo + 1:t_hi + 1]
    g_fac = 1.0 - s.gamma[t_lo + 1:t_hi + 1]
    alpha_seg = _stable_prod(a_fac)
    gamma_seg = 1.0 - _stable_prod(g_fac)
    beta_seg = (1.0 - alpha_seg - gamma_seg) / s.K
    return alpha_seg, beta_seg, gamma_seg


def _stable_prod(factors: np.ndarray) -> float:
    if factors.size == 0:
        return 1.0
    if np.any(factors < _UNDERFLOW):
        if np.any(factors == 0.0):
            return 0.0
        return math.exp(float(np.sum(np.log(factors))))
    return float(np.prod(factors))


def _segment_row(s: NoiseSchedule, x_t: int, a: float, b: float, g: float) -> np.ndarray:
    """Row x_t of the segment matrix as a vector over the previous state.

    Entry j is q(x_t | x_prev = j) under the composite segment transition.
    """
    K, m = s.K, s.mask_index
    f = np.zeros(K + 1)
    if x_t == m:
        f[:K] = g if s.strategy == MASK_AND_REPLACE else 0.0
        f[m] = 1.0
    else:
        f[:K] = b
        f[x_t] += a
    return f


def posterior(x_t: int, x0: int, s: NoiseSchedule, t: int) -> np.ndarray:
    """q(x_{t-1} | x_t, x0): the exact one-step Bayes reversal, O(K).

    Requires q(x_t | x0) > 0; conditioning on an unreachable pair raises
    :class:`ZeroProbabilityError` rather than inventing a fallback.
    """
    return posterior_strided(x_t, x0, s, t, 1)


def posterior_strided(x_t: int, x0_tilde: int, s: NoiseSchedule, t: int,
                      stride: int) -> np.ndarray:
    """q(x_{t-stride} | x_t, x0_tilde) using the composite segment transition.

    Bayes combination of the segment row q(x_t | x_{t-stride} = j) with the
    cumulative q(x_{t-stride} = j | x0_tilde); stride = t jumps straight to
    the (deterministic) clean token.
    """
    _check_step(s, t)
    _check_token(s, x_t)
    if x0_tilde == s.mask_index:
        raise ValueError("data token cannot be MASK")
    _check_token(s, x0_tilde, ordinary_only=True)
    if stride < 1 or t - stride < 0:
        raise ValueError(f"stride {stride} outside [1, t={t}]")
    if cumulative_dist(x0_tilde, s, t)[x_t] <= 0.0:
        raise ZeroProbabilityError(
            f"zero-probability condition: q(x_t={x_t} at t={t} | x0={x0_tilde}) = 0")
    a, b, g = segment_params(s, t, t - stride)
    f = _segment_row(s, x_t, a, b, g)
    numer = f * cumulative_dist(x0_tilde, s, t - stride)
    return numer / numer.sum()
