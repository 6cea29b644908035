"""Quantization-noise statistics and the three output corrections.

The quantized network's noise is split into a component proportional to the
full-precision output (slope ``k``, estimated by least squares and clamped
non-negative) and a residual modeled as Gaussian.  The corrections:

* dividing the quantized output by ``1 + k`` removes the proportional part,
* subtracting the per-channel residual means removes the bias,
* shrinking the reverse-step widths absorbs the residual variance so each
  step's total variance matches the original schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import kolmogorov, ndtr

from .errors import (
    DegenerateStatisticsError,
    InvalidInputError,
    InvalidScheduleError,
    InvalidStepError,
    UncalibratedError,
)
from .schedule import NoiseSchedule

STATS_FILE_VERSION = 1

# Below this many residual elements the normality test is skipped.
MIN_NORMALITY_SAMPLES = 20


@dataclass
class CorrectionStats:
    """Per-step correction constants collected from paired model runs.

    ``k`` is clamped non-negative, ``mu_q`` holds one mean per output
    channel, ``sigma_q2`` is a scalar residual variance per step.
    ``normality_p`` entries are NaN where the residual was degenerate.
    """

    k: np.ndarray
    mu_q: np.ndarray
    sigma_q2: np.ndarray
    n_samples: int
    normality_p: np.ndarray

    def __post_init__(self):
        self.k = np.asarray(self.k, dtype=float)
        self.mu_q = np.asarray(self.mu_q, dtype=float)
        self.sigma_q2 = np.asarray(self.sigma_q2, dtype=float)
        self.normality_p = np.asarray(self.normality_p, dtype=float)
        T = self.k.shape[0]
        if self.mu_q.ndim != 2 or self.mu_q.shape[0] != T:
            raise InvalidInputError("mu_q must have shape (T, channels)")
        if self.sigma_q2.shape != (T,) or self.normality_p.shape != (T,):
            raise InvalidInputError("sigma_q2 and normality_p must have shape (T,)")
        if np.any(self.k < 0):
            raise InvalidInputError("correlation coefficients must be non-negative")
        if np.any(self.sigma_q2 < 0):
            raise InvalidInputError("residual variances must be non-negative")
        if self.n_samples < 2:
            raise InvalidInputError("statistics need at least 2 samples")

    @property
    def T(self) -> int:
        return self.k.shape[0]

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise InvalidStepError(f"step {t} outside 1..{self.T}")
        return t

    def to_dict(self) -> dict:
        per_step = []
        for t in range(1, self.T + 1):
            p = self.normality_p[t - 1]
            per_step.append(
                {
                    "t": t,
                    "k": float(self.k[t - 1]),
                    "mu_q": self.mu_q[t - 1].tolist(),
                    "sigma_q2": float(self.sigma_q2[t - 1]),
                    "normality_p": None if np.isnan(p) else float(p),
                }
            )
        return {"version": STATS_FILE_VERSION, "n_samples": int(self.n_samples), "per_step": per_step}

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionStats":
        steps = sorted(d["per_step"], key=lambda e: e["t"])
        return cls(
            k=np.array([e["k"] for e in steps], dtype=float),
            mu_q=np.array([e["mu_q"] for e in steps], dtype=float),
            sigma_q2=np.array([e["sigma_q2"] for e in steps], dtype=float),
            n_samples=int(d["n_samples"]),
            normality_p=np.array(
                [np.nan if e["normality_p"] is None else e["normality_p"] for e in steps],
                dtype=float,
            ),
        )


def measure_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation between two equally shaped tensors."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise InvalidInputError("correlation inputs must have equal shapes")
    ac = a - a.mean()
    bc = b - b.mean()
    va = float(ac @ ac)
    vb = float(bc @ bc)
    if va == 0.0 or vb == 0.0:
        raise DegenerateStatisticsError("correlation undefined for zero-variance input")
    r = float(ac @ bc) / np.sqrt(va * vb)
    return float(np.clip(r, -1.0, 1.0))


def _flatten_pair(eps_fp, delta) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(eps_fp, np.ndarray):
        e = np.asarray(eps_fp, dtype=float).ravel()
        d = np.asarray(delta, dtype=float).ravel()
        if e.shape != d.shape:
            raise InvalidInputError("paired tensors must have equal element counts")
        return e, d
    eps_list, delta_list = list(eps_fp), list(delta)
    if len(eps_list) != len(delta_list):
        raise InvalidInputError("paired sets must have equal counts")
    es, ds = [], []
    for e, d in zip(eps_list, delta_list):
        e = np.asarray(e, dtype=float)
        d = np.asarray(d, dtype=float)
        if e.shape != d.shape:
            raise InvalidInputError("paired tensors must have equal shapes")
        es.append(e.ravel())
        ds.append(d.ravel())
    return np.concatenate(es), np.concatenate(ds)


def estimate_k(eps_fp, delta) -> float:
    """Least-squares slope of the noise on the full-precision output.

    Ordinary least squares with an intercept, fitted over all elements of
    all pairs; the intercept is left for the bias statistics.  Negative
    slopes are clamped to exactly 0.
    """
    e, d = _flatten_pair(eps_fp, delta)
    ec = e - e.mean()
    var = float(ec @ ec)
    if var == 0.0:
        raise DegenerateStatisticsError("slope undefined: zero-variance reference output")
    slope = float(ec @ (d - d.mean())) / var
    return max(slope, 0.0)


def apply_correction(eps_hat: np.ndarray, k: float, mu_q) -> np.ndarray:
    """Shared corrected-output arithmetic: ``(eps_hat - mu_q) / (1 + k)``."""
    return (np.asarray(eps_hat, dtype=float) - mu_q) / (1.0 + k)


def correct_epsilon(eps_hat: np.ndarray, t: int, stats: CorrectionStats | None) -> np.ndarray:
    """Undo the correlated part and the bias of a quantized output at step t."""
    if stats is None:
        raise UncalibratedError("correction requested without collected statistics")
    t = stats.check_step(t)
    return apply_correction(eps_hat, float(stats.k[t - 1]), stats.mu_q[t - 1])


def stats_from_traces(eps: np.ndarray, delta: np.ndarray) -> CorrectionStats:
    """Reduce paired per-step traces to correction statistics.

    ``eps`` and ``delta`` have shape (T, n, channels); ``delta`` is the
    quantized minus full-precision output on identical inputs.
    """
    eps = np.asarray(eps, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if eps.shape != delta.shape or eps.ndim != 3:
        raise InvalidInputError("traces must be (T, n, channels) arrays of equal shape")
    T, n, _ = eps.shape
    if n < 2:
        raise InvalidInputError("need at least 2 trajectories")
    k = np.empty(T)
    mu_q = np.empty((T, eps.shape[2]))
    sigma_q2 = np.empty(T)
    normality_p = np.full(T, np.nan)
    for i in range(T):
        k[i] = estimate_k(eps[i], delta[i])
        residual = delta[i] - k[i] * eps[i]
        mu_q[i] = residual.mean(axis=0)
        sigma_q2[i] = float(residual.var())
        flat = residual.ravel()
        if flat.size >= MIN_NORMALITY_SAMPLES and flat.std() > 0.0:
            _, normality_p[i] = normality_test(flat)
    return CorrectionStats(k=k, mu_q=mu_q, sigma_q2=sigma_q2, n_samples=n, normality_p=normality_p)


def collect_noise_stats(
    net,
    assign,
    s: NoiseSchedule,
    n: int = 1024,
    seed: int = 0,
    kind: str = "ddpm",
    workers: int = 1,
) -> CorrectionStats:
    """Teacher-forced statistics collection.

    Runs ``n`` full-precision trajectories and evaluates both the
    full-precision and the quantized network on the same states, so the
    recorded noise is purely the quantization effect at each step.
    """
    if n < 2:
        raise InvalidInputError("statistics need at least 2 trajectories")
    from .sampler import collect_paired_traces  # here to avoid a circular import

    eps, delta = collect_paired_traces(net, assign, s, kind=kind, n=n, seed=seed, workers=workers)
    return stats_from_traces(eps, delta)


def calibrate_variance_ddpm(s: NoiseSchedule, stats: CorrectionStats) -> np.ndarray:
    """Shrunk reverse-step widths absorbing the residual noise (ancestral rule).

    Per step: ``sigma'^2 = sigma^2 - beta^2 * sigma_q^2 / (alpha * (1 - abar) * (1 + k)^2)``
    clamped at zero where the residual variance exceeds the budget.
    """
    if stats.T != s.T:
        raise InvalidInputError("statistics and schedule cover different step counts")
    excess = s.beta**2 * stats.sigma_q2 / (s.alpha * (1.0 - s.alpha_bar) * (1.0 + stats.k) ** 2)
    var = np.where(s.sigma**2 >= excess, s.sigma**2 - excess, 0.0)
    return np.sqrt(var)


def calibrate_variance_ddim(
    s: NoiseSchedule, stats: CorrectionStats, include_correlation_factor: bool = True
) -> np.ndarray:
    """Shrunk reverse-step widths for the implicit-sampler rule.

    ``lambda_t`` is the total coefficient the residual noise picks up in one
    implicit step; the ``1 / (1 + k)^2`` factor is applied by default for
    consistency with the ancestral calibration and can be switched off.
    """
    if stats.T != s.T:
        raise InvalidInputError("statistics and schedule cover different step counts")
    abar = s.alpha_bar
    abar_prev = np.concatenate(([1.0], abar[:-1]))
    arg = 1.0 - abar_prev - s.sigma**2
    if np.any(arg < 0.0):
        raise InvalidScheduleError("1 - abar_prev - sigma^2 is negative; schedule invalid for ddim")
    lam = np.sqrt(abar_prev) * np.sqrt(1.0 - abar) / np.sqrt(abar) + np.sqrt(arg)
    denom = (1.0 + stats.k) ** 2 if include_correlation_factor else 1.0
    var = np.maximum(s.sigma**2 - lam**2 * stats.sigma_q2 / denom, 0.0)
    return np.sqrt(var)


def apply_variance_calibration(
    s: NoiseSchedule,
    stats: CorrectionStats,
    kind: str = "ddpm",
    include_correlation_factor: bool = True,
) -> NoiseSchedule:
    """Return a schedule copy with the calibrated widths filled in."""
    if kind == "ddpm":
        sig = calibrate_variance_ddpm(s, stats)
    elif kind == "ddim":
        sig = calibrate_variance_ddim(s, stats, include_correlation_factor)
    else:
        raise InvalidInputError(f"unknown sampler kind {kind!r}")
    return s.with_calibrated_sigma(sig)


def normality_test(residuals: np.ndarray) -> tuple[float, float]:
    """Kolmogorov-Smirnov test against a normal fitted by sample mean/std.

    Returns the KS statistic and the standard asymptotic p-value
    approximation ``P(sqrt(n) * D)`` from the Kolmogorov distribution.
    """
    x = np.asarray(residuals, dtype=float).ravel()
    if x.size < MIN_NORMALITY_SAMPLES:
        raise InvalidInputError(f"normality test needs at least {MIN_NORMALITY_SAMPLES} values")
    mean = x.mean()
    std = x.std(ddof=1)
    if std == 0.0:
        raise DegenerateStatisticsError("normality test undefined for constant input")
    n = x.size
    cdf = ndtr((np.sort(x) - mean) / std)
    grid = np.arange(1, n + 1) / n
    d_plus = float(np.max(grid - cdf))
    d_minus = float(np.max(cdf - (grid - 1.0 / n)))
    statistic = max(d_plus, d_minus)
    p = float(kolmogorov(np.sqrt(n) * statistic))
    return statistic, p
