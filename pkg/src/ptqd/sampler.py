"""Reverse-process steps and trajectory generation.

Both step rules accept a correction mode: the proportional and bias
corrections rewrite the network output, the variance calibration swaps the
scheduled step width for the shrunk one.  Trajectories are generated from
per-trajectory seeded streams (``seed + index``) in fixed-size chunks, so
results do not depend on the worker count or on chunk scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .correction import CorrectionStats, apply_correction
from .errors import (
    InvalidConfigError,
    InvalidInputError,
    InvalidScheduleError,
    UncalibratedError,
    VSCUnavailableError,
)
from .model import LayerQuantAssignment, NoisePredictor
from .schedule import NoiseSchedule

SAMPLER_KINDS = ("ddpm", "ddim")

# Trajectories are processed in blocks of this size regardless of worker
# count; only the scheduling of blocks changes with ``workers``.
TRAJECTORY_CHUNK = 256


@dataclass(frozen=True)
class CorrectionMode:
    """Which corrections a sampling run applies."""

    cnc: bool = False  # divide the output by 1 + k
    bc: bool = False  # subtract the per-channel residual means
    vsc: bool = False  # use the calibrated step widths

    @property
    def any(self) -> bool:
        return self.cnc or self.bc or self.vsc


def check_sampler_kind(kind: str) -> str:
    if kind not in SAMPLER_KINDS:
        raise InvalidConfigError(f"sampler kind must be one of {SAMPLER_KINDS}")
    return kind


def _effective_eps(eps, t: int, mode: CorrectionMode, stats: CorrectionStats | None):
    eps = np.asarray(eps, dtype=float)
    if not (mode.cnc or mode.bc):
        return eps
    if stats is None:
        raise UncalibratedError("correction mode requires collected statistics")
    t = stats.check_step(t)
    k = float(stats.k[t - 1]) if mode.cnc else 0.0
    mu = stats.mu_q[t - 1] if mode.bc else 0.0
    return apply_correction(eps, k, mu)


def ddpm_step(
    x_t,
    t: int,
    eps,
    s: NoiseSchedule,
    z,
    mode: CorrectionMode | None = None,
    stats: CorrectionStats | None = None,
):
    """One ancestral reverse step from ``x_t`` to ``x_{t-1}``."""
    mode = mode or CorrectionMode()
    t = s.check_step(t)
    x_t = np.asarray(x_t, dtype=float)
    z = np.asarray(z, dtype=float)
    eps_eff = _effective_eps(eps, t, mode, stats)
    sigma_eff = s.effective_sigma(t, mode.vsc)
    beta = s.beta[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - s.alpha_bar[t - 1]) * eps_eff) / np.sqrt(s.alpha[t - 1])
    return mean + sigma_eff * z


def ddim_step(
    x_t,
    t: int,
    eps,
    s: NoiseSchedule,
    z,
    mode: CorrectionMode | None = None,
    stats: CorrectionStats | None = None,
):
    """One implicit reverse step (cumulative-alpha convention)."""
    mode = mode or CorrectionMode()
    t = s.check_step(t)
    x_t = np.asarray(x_t, dtype=float)
    z = np.asarray(z, dtype=float)
    eps_eff = _effective_eps(eps, t, mode, stats)
    sigma_eff = s.effective_sigma(t, mode.vsc)
    abar = s.alpha_bar[t - 1]
    abar_prev = s.alpha_bar_prev(t)
    arg = 1.0 - abar_prev - sigma_eff**2
    if arg < 0.0:
        raise InvalidScheduleError(f"1 - abar_prev - sigma^2 negative at step {t}")
    x0_dir = (x_t - np.sqrt(1.0 - abar) * eps_eff) / np.sqrt(abar)
    return np.sqrt(abar_prev) * x0_dir + np.sqrt(arg) * eps_eff + sigma_eff * z


_STEP_FNS = {"ddpm": ddpm_step, "ddim": ddim_step}


def trajectory_noise(n: int, T: int, dim: int, seed: int) -> np.ndarray:
    """Noise draws for ``n`` trajectories, one seeded stream per trajectory.

    Row 0 of each trajectory is the prior draw; row ``j >= 1`` is the step
    noise used at step ``t = T - j + 1`` (ignored at the final step).
    """
    out = np.empty((n, T + 1, dim))
    for i in range(n):
        out[i] = np.random.default_rng(seed + i).standard_normal((T + 1, dim))
    return out


def _chunk_ranges(n: int, chunk: int):
    return [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]


def _run_chunks(fn, n: int, workers: int, chunk: int):
    ranges = _chunk_ranges(n, chunk)
    if workers <= 1 or len(ranges) == 1:
        return [fn(lo, hi) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: fn(*r), ranges))


def _make_eps_fn(net, assign):
    if isinstance(net, NoisePredictor):
        return lambda x, t: net.forward(x, t, assign=assign)
    if callable(net):
        if assign is not None:
            raise InvalidInputError("an assignment only applies to a NoisePredictor")
        return net
    raise InvalidInputError("net must be a NoisePredictor or a callable (x, t) -> eps")


def generate_samples(
    net,
    s: NoiseSchedule,
    kind: str = "ddpm",
    mode: CorrectionMode | None = None,
    n: int = 1,
    seed: int = 0,
    assign: LayerQuantAssignment | None = None,
    stats: CorrectionStats | None = None,
    plan=None,
    assignments_by_bit: dict[int, LayerQuantAssignment] | None = None,
    stats_by_bit: dict[int, CorrectionStats] | None = None,
    data_dim: int | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Draw ``n`` samples by iterating the chosen step rule from t=T to 1.

    With a mixed-precision plan, each step's activation assignment comes
    from the plan's bitwidth and the matching per-bitwidth statistics are
    used.  The final step adds no noise.  Identical seeds give bitwise
    identical outputs for any worker count.
    """
    kind = check_sampler_kind(kind)
    mode = mode or CorrectionMode()
    if n < 1:
        raise InvalidInputError("need n >= 1 samples")
    if mode.vsc and s.sigma_calibrated is None:
        raise InvalidConfigError("variance calibration requested but schedule has none")
    if mode.vsc and kind == "ddim" and s.eta == 0.0:
        raise VSCUnavailableError(
            "eta = 0 gives a zero noise schedule; variance calibration is unavailable"
        )
    if (mode.cnc or mode.bc) and stats is None and stats_by_bit is None:
        raise UncalibratedError("correction mode requires collected statistics")
    step_fn = _STEP_FNS[kind]
    if data_dim is None:
        if isinstance(net, NoisePredictor):
            data_dim = net.data_dim
        else:
            raise InvalidInputError("data_dim is required for a callable net")

    if plan is not None:
        if assignments_by_bit is None:
            raise UncalibratedError("a plan requires per-bitwidth assignments")
        for b in set(int(v) for v in plan.activation_bits):
            if b not in assignments_by_bit:
                raise UncalibratedError(f"plan assigns {b}-bit steps but no {b}-bit calibration exists")

    def eps_and_stats_for(t: int):
        if plan is None:
            return _make_eps_fn(net, assign), stats
        b = int(plan.activation_bits[t - 1])
        st = stats_by_bit.get(b) if stats_by_bit is not None else stats
        return _make_eps_fn(net, assignments_by_bit[b]), st

    def run(lo: int, hi: int) -> np.ndarray:
        noise = trajectory_noise(hi - lo, s.T, data_dim, seed + lo)
        x = noise[:, 0, :].copy()
        for t in range(s.T, 0, -1):
            eps_fn, st = eps_and_stats_for(t)
            eps = eps_fn(x, t)
            z = noise[:, s.T - t + 1, :] if t > 1 else np.zeros_like(x)
            x = step_fn(x, t, eps, s, z, mode=mode, stats=st)
        return x

    return np.concatenate(_run_chunks(run, n, workers, TRAJECTORY_CHUNK), axis=0)


def collect_paired_traces(
    net,
    assign: LayerQuantAssignment | None,
    s: NoiseSchedule,
    kind: str = "ddpm",
    n: int = 2,
    seed: int = 0,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced paired outputs along full-precision trajectories.

    The full-precision sampler produces the states; at every step both the
    full-precision and the quantized network are evaluated on the same
    state.  Returns ``(eps, delta)`` with shape (T, n, channels), where
    ``delta`` is quantized minus full-precision output.
    """
    kind = check_sampler_kind(kind)
    step_fn = _STEP_FNS[kind]
    if not isinstance(net, NoisePredictor):
        raise InvalidInputError("paired traces need a NoisePredictor")
    eps_fp_fn = _make_eps_fn(net, None)
    eps_q_fn = _make_eps_fn(net, assign)

    def run(lo: int, hi: int):
        noise = trajectory_noise(hi - lo, s.T, net.data_dim, seed + lo)
        x = noise[:, 0, :].copy()
        eps_out = np.empty((s.T, hi - lo, net.data_dim))
        delta_out = np.empty_like(eps_out)
        for t in range(s.T, 0, -1):
            eps_fp = eps_fp_fn(x, t)
            eps_q = eps_q_fn(x, t)
            eps_out[t - 1] = eps_fp
            delta_out[t - 1] = eps_q - eps_fp
            z = noise[:, s.T - t + 1, :] if t > 1 else np.zeros_like(x)
            x = step_fn(x, t, eps_fp, s, z)
        return eps_out, delta_out

    parts = _run_chunks(run, n, workers, TRAJECTORY_CHUNK)
    eps = np.concatenate([p[0] for p in parts], axis=1)
    delta = np.concatenate([p[1] for p in parts], axis=1)
    return eps, delta
