"""Post-training quantization toolkit for toy diffusion samplers."""

from .correction import (
    CorrectionStats,
    apply_variance_calibration,
    calibrate_variance_ddim,
    calibrate_variance_ddpm,
    collect_noise_stats,
    correct_epsilon,
    estimate_k,
    measure_correlation,
    normality_test,
    stats_from_traces,
)
from .errors import PTQDError
from .metrics import MetricReport, moment_report, sliced_wasserstein
from .pipeline import ExperimentConfig, load_artifact, run_experiment, save_artifact
from .mixedprec import MixedPrecisionPlan, compute_bops, compute_snr_q, select_plan, snr_q_per_step
from .model import (
    LayerQuant,
    LayerQuantAssignment,
    NoisePredictor,
    calibrate_assignment,
    make_dataset,
    predict,
    train_toy,
)
from .quant import QuantConfig, UniformQuantizer, calibrate_clip_range, quantize_dequantize
from .sampler import (
    CorrectionMode,
    collect_paired_traces,
    ddim_step,
    ddpm_step,
    generate_samples,
)
from .schedule import NoiseSchedule, build_schedule, forward_diffuse, snr_forward

__all__ = [
    "CorrectionMode",
    "CorrectionStats",
    "ExperimentConfig",
    "LayerQuant",
    "LayerQuantAssignment",
    "MetricReport",
    "MixedPrecisionPlan",
    "NoisePredictor",
    "NoiseSchedule",
    "PTQDError",
    "QuantConfig",
    "UniformQuantizer",
    "apply_variance_calibration",
    "calibrate_assignment",
    "calibrate_clip_range",
    "calibrate_variance_ddim",
    "calibrate_variance_ddpm",
    "collect_noise_stats",
    "collect_paired_traces",
    "compute_bops",
    "compute_snr_q",
    "correct_epsilon",
    "ddim_step",
    "ddpm_step",
    "estimate_k",
    "forward_diffuse",
    "generate_samples",
    "load_artifact",
    "make_dataset",
    "measure_correlation",
    "moment_report",
    "normality_test",
    "predict",
    "quantize_dequantize",
    "run_experiment",
    "save_artifact",
    "select_plan",
    "sliced_wasserstein",
    "snr_forward",
    "snr_q_per_step",
    "stats_from_traces",
    "train_toy",
]
