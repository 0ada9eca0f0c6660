"""Backward-Euler convolution quadrature for the Caputo derivative.

Also provides a Mittag-Leffler evaluator on the negative real axis, which
gives the exact decay of an eigenmode of the homogeneous problem and is
used to validate the time stepper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

__all__ = [
    "CQWeights",
    "TimeGrid",
    "check_order",
    "cq_weights",
    "discrete_caputo_apply",
    "mittag_leffler",
]


def check_order(alpha: float) -> float:
    """Validate a fractional order, returning it as a float."""
    alpha = float(alpha)
    if not (0.0 < alpha <= 1.0) or math.isnan(alpha):
        raise ValueError(f"fractional order alpha must lie in (0, 1], got {alpha}")
    return alpha


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_m = m * tau on [0, T]."""

    T: float
    n_steps: int

    def __post_init__(self) -> None:
        if self.T <= 0:
            raise ValueError(f"time horizon must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def tau(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass(frozen=True)
class CQWeights:
    """Taylor coefficients of (1 - z)^alpha, scaled by tau^-alpha on use."""

    alpha: float
    tau: float
    w: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        self.w.setflags(write=False)

    def __len__(self) -> int:
        return len(self.w)


def cq_weights(alpha: float, n: int, tau: float = 1.0) -> CQWeights:
    """Return the first ``n + 1`` backward-Euler CQ weights.

    Uses the recurrence ``w[j] = w[j-1] * (j - 1 - alpha) / j`` which
    yields ``(-1)^j binom(alpha, j)`` without evaluating Gamma functions.
    """
    alpha = check_order(alpha)
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    w = np.empty(n + 1)
    w[0] = 1.0
    for j in range(1, n + 1):
        w[j] = w[j - 1] * ((j - 1 - alpha) / j)
    return CQWeights(alpha=alpha, tau=float(tau), w=w)


def discrete_caputo_apply(weights: CQWeights, history) -> np.ndarray:
    """Apply the CQ Caputo derivative at the last time level of ``history``.

    ``history`` holds U^0, ..., U^n (first axis is time). The initial state
    is subtracted from every level, so constants map to zero.
    """
    hist = np.asarray(history, dtype=float)
    if hist.ndim == 0 or hist.shape[0] == 0:
        raise ValueError("history must contain at least the initial state")
    n = hist.shape[0] - 1
    if len(weights) < n + 1:
        raise ValueError(
            f"need {n + 1} weights for a history of {n + 1} levels, got {len(weights)}"
        )
    shifted = hist - hist[0]
    # w[0] pairs with U^n, w[n] with U^0
    w = weights.w[: n + 1][::-1]
    return np.tensordot(w, shifted, axes=(0, 0)) * weights.tau ** (-weights.alpha)


_SERIES_RADIUS = 1.0


def _ml_series(alpha: float, z: float) -> float:
    total = 0.0
    term_k = 0
    zk = 1.0
    while True:
        term = zk / math.gamma(alpha * term_k + 1.0)
        total += term
        if abs(term) < 1e-18 * max(abs(total), 1e-300) and term_k > 5:
            return total
        term_k += 1
        zk *= z
        if term_k > 400:
            return total


def _ml_integral(alpha: float, x: float) -> float:
    # E_a(-x) = sin(a pi)/(a pi) * int_0^inf exp(-(s x)^(1/a)) / ((s + cos(a pi))^2 + sin(a pi)^2) ds
    # obtained from the complete-monotonicity spectral density after r = s^(1/a)
    theta = alpha * math.pi
    # for alpha near 1, a pi rounds near pi; 1 - alpha is exact
    phi = math.pi * (1.0 - alpha)
    s0, sig = (math.cos(phi), math.sin(phi)) if alpha > 0.5 else (-math.cos(theta), math.sin(theta))
    inv = 1.0 / alpha

    def g(s: float) -> float:
        return math.exp(-((s * x) ** inv))

    # integrand is negligible once (s x)^(1/a) > 800
    s_max = 800.0**alpha / x
    # near alpha = 1 the kernel is a Lorentzian of width sin(a pi) around s0;
    # the Taylor part g(s0) + g'(s0)(s - s0) is integrated in closed form
    # (the linear term vanishes on a window symmetric about s0)
    peaked = sig < 0.1 and s0 < s_max
    g0 = g1 = r = 0.0
    if peaked:
        g0 = g(s0)
        g1 = -g0 * inv * x**inv * s0 ** (inv - 1.0)
        r = min(s0, s_max - s0, 0.5)

    def integrand(s: float) -> float:
        d = s - s0
        lin = g1 * d if abs(d) < r else 0.0
        return (g(s) - g0 - lin) / (d * d + sig * sig)

    pts = {0.5, 1.0, 2.0, s0}
    if peaked:
        pts |= {s0 - r, s0 + r}
        pts |= {s0 + k * sig for k in (-10, -1, 1, 10)}
    breaks = sorted(p for p in pts if 0 < p < s_max)
    pieces = [0.0, *breaks, s_max]
    total = 0.0
    for lo, hi in zip(pieces[:-1], pieces[1:]):
        # full_output keeps quad from warning when a piece is at roundoff level
        val = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=1e-13, limit=200, full_output=1)[0]
        total += val
    if peaked:
        total += g0 * (math.atan((s_max - s0) / sig) + math.atan(s0 / sig)) / sig
    return sig / theta * total


def mittag_leffler(alpha: float, z: float) -> float:
    """Evaluate E_alpha(z) = sum_k z^k / Gamma(alpha k + 1) for real z <= 0.

    The power series is summed directly for ``|z| <= 1``; beyond that a
    real-line integral representation is integrated numerically, which
    avoids the cancellation the alternating series suffers from.
    """
    alpha = check_order(alpha)
    z = float(z)
    if z > 0 or math.isnan(z):
        raise ValueError(f"mittag_leffler supports z <= 0 only, got {z}")
    if alpha == 1.0:
        return math.exp(z)
    if -z <= _SERIES_RADIUS:
        return _ml_series(alpha, z)
    return _ml_integral(alpha, -z)
