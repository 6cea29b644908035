"""Per-step SNR measurement, bitwidth selection and bit-operation accounting.

Weights keep a single bitwidth across all steps; only the activation
bitwidth varies.  A step gets the smallest bitwidth whose measured network
SNR exceeds the forward-process SNR, falling back to the largest available
bitwidth when none qualifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .schedule import SNR_SENTINEL

PLAN_FILE_VERSION = 1


@dataclass
class MixedPrecisionPlan:
    """Per-step activation bitwidths plus the traces that produced them."""

    weight_bitwidth: int
    bit_set: tuple[int, ...]
    activation_bits: np.ndarray  # (T,)
    snr_q: dict[int, np.ndarray]  # bitwidth -> (T,)
    snr_f: np.ndarray  # (T,)
    bops_per_step: np.ndarray | None = field(default=None)
    total_bops: float | None = None
    compression_ratio: float | None = None

    def __post_init__(self):
        self.activation_bits = np.asarray(self.activation_bits, dtype=int)
        self.snr_f = np.asarray(self.snr_f, dtype=float)
        self.bit_set = tuple(int(b) for b in self.bit_set)
        if not all(int(b) in self.bit_set for b in self.activation_bits):
            raise InvalidConfigError("every per-step bitwidth must come from the bit set")

    @property
    def T(self) -> int:
        return self.activation_bits.shape[0]

    def to_dict(self) -> dict:
        per_step = []
        for t in range(1, self.T + 1):
            per_step.append(
                {
                    "t": t,
                    "activation_bits": int(self.activation_bits[t - 1]),
                    "snr_q": {str(b): float(self.snr_q[b][t - 1]) for b in self.bit_set},
                    "snr_f": float(self.snr_f[t - 1]),
                    "bops": None if self.bops_per_step is None else float(self.bops_per_step[t - 1]),
                }
            )
        return {
            "version": PLAN_FILE_VERSION,
            "weight_bits": int(self.weight_bitwidth),
            "bit_set": list(self.bit_set),
            "per_step": per_step,
            "total_bops": None if self.total_bops is None else float(self.total_bops),
            "compression_ratio": None
            if self.compression_ratio is None
            else float(self.compression_ratio),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixedPrecisionPlan":
        steps = sorted(d["per_step"], key=lambda e: e["t"])
        bit_set = tuple(int(b) for b in d["bit_set"])
        snr_q = {
            b: np.array([e["snr_q"][str(b)] for e in steps], dtype=float) for b in bit_set
        }
        bops = [e["bops"] for e in steps]
        return cls(
            weight_bitwidth=int(d["weight_bits"]),
            bit_set=bit_set,
            activation_bits=np.array([e["activation_bits"] for e in steps], dtype=int),
            snr_q=snr_q,
            snr_f=np.array([e["snr_f"] for e in steps], dtype=float),
            bops_per_step=None if any(b is None for b in bops) else np.array(bops, dtype=float),
            total_bops=d.get("total_bops"),
            compression_ratio=d.get("compression_ratio"),
        )


def compute_snr_q(eps_fp, delta) -> float:
    """Ratio of output norm to noise norm over all concatenated elements.

    A noiseless set saturates at ``SNR_SENTINEL`` rather than erroring.
    """
    from .correction import _flatten_pair  # shared pairing rules

    e, d = _flatten_pair(eps_fp, delta)
    noise = float(np.linalg.norm(d))
    if noise == 0.0:
        return SNR_SENTINEL
    return min(float(np.linalg.norm(e)) / noise, SNR_SENTINEL)


def snr_q_per_step(eps: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Per-step SNR from (T, n, channels) paired traces."""
    eps = np.asarray(eps, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if eps.shape != delta.shape or eps.ndim != 3:
        raise InvalidInputError("traces must be (T, n, channels) arrays of equal shape")
    return np.array([compute_snr_q(eps[t], delta[t]) for t in range(eps.shape[0])])


def select_plan(
    snr_q: dict[int, np.ndarray],
    snr_f: np.ndarray,
    bit_set,
    weight_bits: int = 4,
) -> MixedPrecisionPlan:
    """Pick the smallest qualifying bitwidth per step.

    ``snr_q`` must be measured on uncorrected quantized models.  Steps where
    no bitwidth beats the forward SNR use the largest bitwidth available.
    """
    bits = tuple(sorted(int(b) for b in bit_set))
    if not bits:
        raise InvalidConfigError("bit set must not be empty")
    snr_f = np.asarray(snr_f, dtype=float)
    T = snr_f.shape[0]
    for b in bits:
        if b not in snr_q or np.asarray(snr_q[b]).shape != (T,):
            raise InvalidInputError(f"missing or misshaped SNR trace for {b}-bit")
    chosen = np.full(T, bits[-1], dtype=int)
    for t in range(T):
        for b in bits:
            if float(snr_q[b][t]) > snr_f[t]:
                chosen[t] = b
                break
    return MixedPrecisionPlan(
        weight_bitwidth=int(weight_bits),
        bit_set=bits,
        activation_bits=chosen,
        snr_q={b: np.asarray(snr_q[b], dtype=float) for b in bits},
        snr_f=snr_f,
    )


def _layer_macs(net) -> list[int]:
    if hasattr(net, "layer_macs"):
        return list(net.layer_macs())
    return [int(m) for m in net]


def compute_bops(net, plan: MixedPrecisionPlan, io_bits: int | None = 8):
    """Bit operations per step: ``MACs * weight_bits * activation_bits``.

    The first and last layers use ``io_bits`` for both operands; pass
    ``io_bits=None`` to disable that pinning.  Returns per-step totals, the
    grand total, and the compression ratio against a 32/32 run.
    """
    macs = _layer_macs(net)
    if not macs:
        raise InvalidInputError("need at least one layer")
    per_step = np.empty(plan.T)
    for t in range(plan.T):
        b_a = int(plan.activation_bits[t])
        total = 0.0
        for i, m in enumerate(macs):
            pinned = io_bits is not None and (i == 0 or i == len(macs) - 1)
            bw = io_bits if pinned else plan.weight_bitwidth
            ba = io_bits if pinned else b_a
            total += float(m) * bw * ba
        per_step[t] = total
    total = float(per_step.sum())
    fp_total = float(sum(macs)) * 32.0 * 32.0 * plan.T
    return per_step, total, fp_total / total
