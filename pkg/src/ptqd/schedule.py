"""Diffusion constants: forward noising, reverse-step widths, forward SNR.

Steps are numbered ``t = 1..T``; internally the arrays are 0-indexed, so
``beta[t - 1]`` is the value at step ``t``.  ``alpha_bar_prev(1)`` is 1 by
convention, which forces the reverse-step width to zero at the final step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidConfigError, InvalidStepError

# Saturating value returned where an SNR denominator vanishes.
SNR_SENTINEL = 1e12

SNR_CONVENTIONS = ("alpha_bar", "step_alpha")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion constants, immutable after construction.

    ``sigma`` is the reverse-step standard deviation for the given ``eta``;
    ``sigma_calibrated`` is filled in by the correction stage and never
    exceeds ``sigma`` elementwise.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    eta: float
    sigma_calibrated: np.ndarray | None = None

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "sigma"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise InvalidConfigError(f"{name} must have shape ({self.T},)")
            arr.setflags(write=False)
        if self.sigma_calibrated is not None:
            if self.sigma_calibrated.shape != (self.T,):
                raise InvalidConfigError("sigma_calibrated must match the step count")
            if np.any(self.sigma_calibrated > self.sigma + 1e-15):
                raise InvalidConfigError("sigma_calibrated may not exceed sigma")
            self.sigma_calibrated.setflags(write=False)

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise InvalidStepError(f"step {t} outside 1..{self.T}")
        return t

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative alpha at step t-1, with the t=1 value defined as 1."""
        t = self.check_step(t)
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def effective_sigma(self, t: int, calibrated: bool) -> float:
        t = self.check_step(t)
        if calibrated:
            if self.sigma_calibrated is None:
                raise InvalidConfigError("schedule has no calibrated sigma")
            return float(self.sigma_calibrated[t - 1])
        return float(self.sigma[t - 1])

    def with_calibrated_sigma(self, sigma_calibrated: np.ndarray) -> "NoiseSchedule":
        return replace(self, sigma_calibrated=np.array(sigma_calibrated, dtype=float))


def build_schedule(T: int, beta_min: float, beta_max: float, eta: float) -> NoiseSchedule:
    """Linear beta schedule with the eta-parameterized reverse widths.

    ``sigma_t = eta * sqrt((1 - abar_{t-1}) / (1 - abar_t)) * sqrt(1 - abar_t / abar_{t-1})``,
    so eta=1 matches the ancestral sampler and eta=0 is deterministic.
    """
    T = int(T)
    if T < 1:
        raise InvalidConfigError("T must be at least 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidConfigError("need 0 < beta_min <= beta_max < 1")
    if not (0.0 <= eta <= 1.0):
        raise InvalidConfigError("eta must lie in [0, 1]")
    if T == 1:
        beta = np.array([beta_min], dtype=float)
    else:
        beta = beta_min + (beta_max - beta_min) * np.arange(T, dtype=float) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    abar_prev = np.concatenate(([1.0], alpha_bar[:-1]))
    sigma = eta * np.sqrt((1.0 - abar_prev) / (1.0 - alpha_bar)) * np.sqrt(1.0 - alpha_bar / abar_prev)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma, eta=float(eta))


def forward_diffuse(x0: np.ndarray, t: int, z: np.ndarray, s: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal of the forward chain at step ``t``."""
    t = s.check_step(t)
    x0 = np.asarray(x0, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.shape != x0.shape:
        raise InvalidStepError(f"noise shape {z.shape} does not match data shape {x0.shape}")
    abar = s.alpha_bar[t - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * z


def snr_forward(t: int, s: NoiseSchedule, convention: str = "alpha_bar") -> float:
    """Forward-process signal-to-noise ratio at step ``t``.

    The default convention is ``abar_t / (1 - abar_t)``, strictly decreasing
    in ``t``.  The ``step_alpha`` alternative uses the per-step ratio
    ``alpha_t**2 / sigma_t**2`` for sensitivity checks.  Saturates at
    ``SNR_SENTINEL`` where the denominator vanishes.
    """
    t = s.check_step(t)
    if convention == "alpha_bar":
        abar = float(s.alpha_bar[t - 1])
        if abar >= 1.0:
            return SNR_SENTINEL
        return min(abar / (1.0 - abar), SNR_SENTINEL)
    if convention == "step_alpha":
        sig = float(s.sigma[t - 1])
        if sig == 0.0:
            return SNR_SENTINEL
        return min(float(s.alpha[t - 1]) ** 2 / sig**2, SNR_SENTINEL)
    raise InvalidConfigError(f"unknown SNR convention {convention!r}")
