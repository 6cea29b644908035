"""Experiment configuration, artifact persistence and stage orchestration.

A run is fully described by one JSON config; every stage persists its result
as a versioned JSON or CSV artifact in the output directory, and re-running
resumes from whatever artifacts already exist.  All randomness flows from
the named seeds in the config, so a finished run is byte-reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import correction as corr
from . import metrics as metrics_mod
from . import mixedprec as mp
from . import model as model_mod
from . import sampler as sampler_mod
from .errors import (
    ArtifactParseError,
    InvalidConfigError,
    PTQDError,
    StageError,
    UnsupportedVersionError,
)
from .schedule import NoiseSchedule, build_schedule, snr_forward

SUPPORTED_VERSIONS = (1,)

OUT_ENV_VAR = "PTQD_OUT"

# Exit codes per failure class; 0 is success, 1 an unexpected crash.
STAGE_EXIT_CODES = {
    "config": 2,
    "train": 3,
    "calibrate": 4,
    "stats": 5,
    "plan": 6,
    "sample": 7,
    "eval": 8,
    "report": 9,
    "io": 10,
}

ARTIFACTS = {
    "train": ("checkpoint.json",),
    "calibrate": ("calibration.json",),
    "stats": ("stats.json",),
    "plan": ("plan.json", "calibration_stepwise.json", "stats_stepwise.json"),
    "sample": ("samples.csv",),
    "eval": ("eval.json",),
    "report": ("report.json", "snr_vs_step.csv", "k_vs_step.csv", "sigma_schedule.csv"),
}

_SECTION_KEYS = {
    "dataset": {"kind", "n", "seed"},
    "schedule": {"T", "beta_min", "beta_max", "eta", "snr_convention"},
    "model": {
        "hidden_dims",
        "time_embedding_dim",
        "epochs",
        "lr",
        "lr_decay_epochs",
        "batch_size",
        "train_seed",
    },
    "quant": {
        "weight_bits",
        "activation_bits",
        "bit_set",
        "percentile",
        "calibration_passes",
        "calibration_seed",
    },
    "correction": {"cnc", "bc", "vsc", "ddim_correlation_factor"},
    "stats": {"n_samples", "seed"},
    "sampler": {"kind"},
    "evaluation": {
        "n_eval",
        "sample_seed",
        "metric_seed",
        "n_projections",
        "holdout_n",
        "holdout_seed",
    },
    "output": {"dir"},
}
_TOP_KEYS = set(_SECTION_KEYS) | {"workers"}


def _default_config() -> dict:
    return {
        "dataset": {"kind": "gmm2d", "n": 4096, "seed": 0},
        "schedule": {
            "T": 100,
            "beta_min": 1e-4,
            "beta_max": 0.02,
            "eta": 1.0,
            "snr_convention": "alpha_bar",
        },
        "model": {
            "hidden_dims": [128, 128, 128],
            "time_embedding_dim": 16,
            "epochs": 60,
            "lr": 2e-3,
            "lr_decay_epochs": 48,
            "batch_size": 128,
            "train_seed": 1,
        },
        "quant": {
            "weight_bits": 4,
            "activation_bits": 4,
            "bit_set": [4, 8],
            "percentile": 99.9,
            "calibration_passes": 256,
            "calibration_seed": 2,
        },
        "correction": {"cnc": True, "bc": True, "vsc": True, "ddim_correlation_factor": True},
        "stats": {"n_samples": 1024, "seed": 3},
        "sampler": {"kind": "ddpm"},
        "evaluation": {
            "n_eval": 2048,
            "sample_seed": 4,
            "metric_seed": 5,
            "n_projections": 128,
            "holdout_n": 4096,
            "holdout_seed": 6,
        },
        "output": {"dir": "runs/experiment"},
        "workers": 1,
    }


@dataclass
class ExperimentConfig:
    """Validated experiment description; see ``default_dict`` for the schema."""

    raw: dict = field(default_factory=_default_config)

    def __post_init__(self):
        self.raw = _validate_config(self.raw)

    @staticmethod
    def default_dict() -> dict:
        return _default_config()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(raw=d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(raw=_read_json(path))

    def to_dict(self) -> dict:
        return json.loads(canonical_json(self.raw))

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def quant_enabled(self) -> bool:
        return self.raw["quant"]["weight_bits"] is not None

    @property
    def mixed_precision(self) -> bool:
        return self.raw["quant"]["activation_bits"] == "mixed"

    @property
    def correction_mode(self) -> sampler_mod.CorrectionMode:
        c = self.raw["correction"]
        return sampler_mod.CorrectionMode(cnc=c["cnc"], bc=c["bc"], vsc=c["vsc"])

    def bit_list(self) -> list[int]:
        """Activation bitwidths this run must calibrate."""
        if not self.quant_enabled:
            return []
        if self.mixed_precision:
            return sorted(int(b) for b in self.raw["quant"]["bit_set"])
        return [int(self.raw["quant"]["activation_bits"])]

    def override_seeds(self, base: int) -> "ExperimentConfig":
        """Rewrite every named seed from one base value.

        Offsets: dataset +0, train +1, calibration +2, stats +3, sample +4,
        metric +5, holdout +6.
        """
        d = self.to_dict()
        d["dataset"]["seed"] = base
        d["model"]["train_seed"] = base + 1
        d["quant"]["calibration_seed"] = base + 2
        d["stats"]["seed"] = base + 3
        d["evaluation"]["sample_seed"] = base + 4
        d["evaluation"]["metric_seed"] = base + 5
        d["evaluation"]["holdout_seed"] = base + 6
        return ExperimentConfig(raw=d)

    def with_output_dir(self, out_dir: str) -> "ExperimentConfig":
        d = self.to_dict()
        d["output"]["dir"] = out_dir
        return ExperimentConfig(raw=d)


def _validate_config(raw: dict) -> dict:
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    merged = _default_config()
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    for section, keys in _SECTION_KEYS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise InvalidConfigError(f"config section {section!r} must be an object")
            bad = set(raw[section]) - keys
            if bad:
                raise InvalidConfigError(f"unknown keys in {section!r}: {sorted(bad)}")
            merged[section].update(raw[section])
    if "workers" in raw:
        merged["workers"] = int(raw["workers"])

    q = merged["quant"]
    has_w = q["weight_bits"] is not None
    has_a = q["activation_bits"] is not None
    if has_w != has_a:
        raise InvalidConfigError("weight_bits and activation_bits must be set together")
    if q["activation_bits"] == "mixed" and not q["bit_set"]:
        raise InvalidConfigError("mixed activation bits require a non-empty bit_set")
    c = merged["correction"]
    if not has_w and (c["cnc"] or c["bc"] or c["vsc"]):
        raise InvalidConfigError("corrections require a quantized model")
    if merged["schedule"]["eta"] == 0.0 and c["vsc"]:
        raise InvalidConfigError(
            "VSC-unavailable: eta = 0 gives a zero noise schedule, so variance "
            "schedule calibration cannot absorb anything"
        )
    kind = merged["sampler"]["kind"]
    if kind not in sampler_mod.SAMPLER_KINDS:
        raise InvalidConfigError(f"sampler kind must be one of {sampler_mod.SAMPLER_KINDS}")
    return merged


def canonical_json(payload) -> str:
    """The one serialization used for every JSON artifact."""
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _read_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ArtifactParseError(f"cannot read {path}: {e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise ArtifactParseError(f"malformed JSON in {path} at byte {e.pos}", offset=e.pos) from e


def save_artifact(path, artifact) -> Path:
    """Persist a typed artifact (or plain payload dict) as canonical JSON."""
    if hasattr(artifact, "to_dict"):
        payload = artifact.to_dict()
    else:
        payload = artifact
    if "version" not in payload:
        raise InvalidConfigError("artifacts must carry a version field")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(payload))
    return path


def load_artifact(path):
    """Load a persisted artifact, reconstructing its type from the schema."""
    payload = _read_json(path)
    version = payload.get("version")
    if version not in SUPPORTED_VERSIONS:
        raise UnsupportedVersionError(
            f"{path}: version {version!r} not in supported {SUPPORTED_VERSIONS}"
        )
    keys = set(payload)
    if {"arch", "weights", "time_embedding"} <= keys:
        return model_mod.NoisePredictor.from_dict(payload)
    if {"bit_set", "weight_bits", "per_step"} <= keys:
        return mp.MixedPrecisionPlan.from_dict(payload)
    if {"n_samples", "per_step"} <= keys:
        return corr.CorrectionStats.from_dict(payload)
    return payload


def _float_str(v) -> str:
    # matches the JSON float serialization, keeping CSV and JSON bitwise consistent
    return repr(float(v))


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (int, str)) else _float_str(c) for c in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_samples_csv(path) -> np.ndarray:
    lines = Path(path).read_text().strip().split("\n")
    return np.array([[float(v) for v in line.split(",")] for line in lines[1:]])


def resolve_out_dir(cfg: ExperimentConfig, cli_out: str | None = None) -> Path:
    """Output directory precedence: PTQD_OUT, then --out, then the config."""
    env = os.environ.get(OUT_ENV_VAR)
    if env:
        return Path(env)
    if cli_out:
        return Path(cli_out)
    return Path(cfg["output"]["dir"])


def build_schedule_from_config(cfg: ExperimentConfig) -> NoiseSchedule:
    sc = cfg["schedule"]
    return build_schedule(sc["T"], sc["beta_min"], sc["beta_max"], sc["eta"])


# --------------------------------------------------------------------------
# stages


def _wrap_stage(name: str):
    def deco(fn):
        def wrapper(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except PTQDError as e:
                raise StageError(name, STAGE_EXIT_CODES[name], str(e)) from e
            except OSError as e:
                raise StageError(name, STAGE_EXIT_CODES["io"], str(e)) from e

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper

    return deco


@_wrap_stage("train")
def stage_train(cfg: ExperimentConfig, out_dir: Path) -> model_mod.NoisePredictor:
    path = out_dir / "checkpoint.json"
    if path.exists():
        return load_artifact(path)
    ds = cfg["dataset"]
    mc = cfg["model"]
    data = model_mod.make_dataset(ds["kind"], ds["n"], ds["seed"])
    net = model_mod.train_toy(
        data,
        build_schedule_from_config(cfg),
        epochs=mc["epochs"],
        lr=mc["lr"],
        seed=mc["train_seed"],
        hidden_dims=tuple(mc["hidden_dims"]),
        d_emb=mc["time_embedding_dim"],
        batch_size=mc["batch_size"],
        lr_decay_epochs=mc["lr_decay_epochs"],
    )
    save_artifact(path, net)
    return net


def _assignments_from_payload(payload: dict) -> dict[int, model_mod.LayerQuantAssignment]:
    return {
        int(b): model_mod.LayerQuantAssignment.from_dict(d)
        for b, d in payload["per_bit"].items()
    }


@_wrap_stage("calibrate")
def stage_calibrate(cfg, out_dir, net, schedule) -> dict[int, model_mod.LayerQuantAssignment]:
    """Global clipping ranges for every activation bitwidth this run uses."""
    path = out_dir / "calibration.json"
    if path.exists():
        return _assignments_from_payload(load_artifact(path))
    q = cfg["quant"]
    acts = model_mod.collect_activation_samples(
        net,
        schedule,
        kind=cfg["sampler"]["kind"],
        n_passes=q["calibration_passes"],
        seed=q["calibration_seed"],
    )
    per_bit = {}
    for b in cfg.bit_list():
        per_bit[b] = model_mod.calibrate_assignment(
            net,
            schedule,
            weight_bits=q["weight_bits"],
            act_bits=b,
            percentile=q["percentile"],
            activation_samples=acts,
        )
    save_artifact(
        path,
        {"version": 1, "per_bit": {str(b): a.to_dict() for b, a in per_bit.items()}},
    )
    return per_bit


def _stats_payload(stats_by_bit, snr_by_bit) -> dict:
    return {
        "version": 1,
        "per_bit": {str(b): s.to_dict() for b, s in stats_by_bit.items()},
        "snr_q": {str(b): [float(v) for v in snr_by_bit[b]] for b in snr_by_bit},
    }


def _stats_from_payload(payload):
    stats_by_bit = {
        int(b): corr.CorrectionStats.from_dict(d) for b, d in payload["per_bit"].items()
    }
    snr_by_bit = {int(b): np.array(v, dtype=float) for b, v in payload["snr_q"].items()}
    return stats_by_bit, snr_by_bit


@_wrap_stage("stats")
def stage_stats(cfg, out_dir, net, schedule, assignments, *, stepwise=False):
    """Teacher-forced noise statistics and SNR traces per bitwidth."""
    path = out_dir / ("stats_stepwise.json" if stepwise else "stats.json")
    if path.exists():
        return _stats_from_payload(load_artifact(path))
    st = cfg["stats"]
    stats_by_bit, snr_by_bit = {}, {}
    for b, assign in assignments.items():
        eps, delta = sampler_mod.collect_paired_traces(
            net,
            assign,
            schedule,
            kind=cfg["sampler"]["kind"],
            n=st["n_samples"],
            seed=st["seed"],
            workers=cfg["workers"],
        )
        stats_by_bit[b] = corr.stats_from_traces(eps, delta)
        snr_by_bit[b] = mp.snr_q_per_step(eps, delta)
    save_artifact(path, _stats_payload(stats_by_bit, snr_by_bit))
    return stats_by_bit, snr_by_bit


@_wrap_stage("plan")
def stage_plan(cfg, out_dir, net, schedule, snr_by_bit):
    """Bitwidth selection, then per-step-range recalibration (second pass)."""
    plan_path = out_dir / "plan.json"
    cal_path = out_dir / "calibration_stepwise.json"
    if plan_path.exists() and cal_path.exists() and (out_dir / "stats_stepwise.json").exists():
        plan = load_artifact(plan_path)
        assignments = _assignments_from_payload(load_artifact(cal_path))
        stats_by_bit, _ = stage_stats(
            cfg, out_dir, net, schedule, assignments, stepwise=True
        )
        return plan, assignments, stats_by_bit
    q = cfg["quant"]
    snr_f = np.array(
        [
            snr_forward(t, schedule, convention=cfg["schedule"]["snr_convention"])
            for t in range(1, schedule.T + 1)
        ]
    )
    plan = mp.select_plan(snr_by_bit, snr_f, cfg.bit_list(), weight_bits=q["weight_bits"])
    per_step, total, ratio = mp.compute_bops(net, plan, io_bits=8)
    plan.bops_per_step, plan.total_bops, plan.compression_ratio = per_step, total, ratio

    # second pass: recalibrate each bitwidth on the steps the plan assigns it
    assignments = {}
    for b in cfg.bit_list():
        steps = np.flatnonzero(plan.activation_bits == b) + 1
        if steps.size == 0:
            continue
        assignments[b] = model_mod.calibrate_assignment(
            net,
            schedule,
            weight_bits=q["weight_bits"],
            act_bits=b,
            kind=cfg["sampler"]["kind"],
            n_passes=q["calibration_passes"],
            seed=q["calibration_seed"],
            percentile=q["percentile"],
            steps=steps,
        )
    save_artifact(plan_path, plan)
    save_artifact(
        cal_path,
        {"version": 1, "per_bit": {str(b): a.to_dict() for b, a in assignments.items()}},
    )
    stats_by_bit, _ = stage_stats(cfg, out_dir, net, schedule, assignments, stepwise=True)
    return plan, assignments, stats_by_bit


def merge_stats_by_plan(plan, stats_by_bit) -> corr.CorrectionStats:
    """Per-step statistics taken from whichever bitwidth the plan assigns."""
    T = plan.T
    first = next(iter(stats_by_bit.values()))
    k = np.empty(T)
    mu_q = np.empty((T, first.mu_q.shape[1]))
    sigma_q2 = np.empty(T)
    normality_p = np.empty(T)
    for t in range(T):
        st = stats_by_bit[int(plan.activation_bits[t])]
        k[t] = st.k[t]
        mu_q[t] = st.mu_q[t]
        sigma_q2[t] = st.sigma_q2[t]
        normality_p[t] = st.normality_p[t]
    return corr.CorrectionStats(
        k=k, mu_q=mu_q, sigma_q2=sigma_q2, n_samples=first.n_samples, normality_p=normality_p
    )


def _sampling_inputs(cfg, schedule, plan, assignments, stats_by_bit):
    """Resolve the (schedule, stats, kwargs) triple for generate_samples."""
    mode = cfg.correction_mode
    if not cfg.quant_enabled:
        return schedule, None, {}
    if cfg.mixed_precision:
        stats = merge_stats_by_plan(plan, stats_by_bit)
        kwargs = {
            "plan": plan,
            "assignments_by_bit": assignments,
            "stats_by_bit": stats_by_bit,
        }
    else:
        b = cfg.bit_list()[0]
        stats = stats_by_bit[b]
        kwargs = {"assign": assignments[b]}
    if mode.vsc:
        schedule = corr.apply_variance_calibration(
            schedule,
            stats,
            kind=cfg["sampler"]["kind"],
            include_correlation_factor=cfg["correction"]["ddim_correlation_factor"],
        )
    return schedule, stats, kwargs


@_wrap_stage("sample")
def stage_sample(cfg, out_dir, net, schedule, plan, assignments, stats_by_bit) -> np.ndarray:
    path = out_dir / "samples.csv"
    if path.exists():
        return read_samples_csv(path)
    ev = cfg["evaluation"]
    sched, stats, kwargs = _sampling_inputs(cfg, schedule, plan, assignments, stats_by_bit)
    samples = sampler_mod.generate_samples(
        net,
        sched,
        kind=cfg["sampler"]["kind"],
        mode=cfg.correction_mode,
        n=ev["n_eval"],
        seed=ev["sample_seed"],
        stats=stats,
        workers=cfg["workers"],
        **kwargs,
    )
    header = [f"c{i}" for i in range(samples.shape[1])]
    write_csv(path, header, samples)
    return samples


@_wrap_stage("eval")
def stage_eval(cfg, out_dir, samples) -> dict:
    path = out_dir / "eval.json"
    if path.exists():
        return load_artifact(path)
    ev = cfg["evaluation"]
    ds = cfg["dataset"]
    holdout = model_mod.make_dataset(ds["kind"], ev["holdout_n"], ev["holdout_seed"])
    report = metrics_mod.moment_report(
        holdout, samples, n_proj=ev["n_projections"], seed=ev["metric_seed"]
    )
    payload = {"version": 1, **report.to_dict()}
    save_artifact(path, payload)
    return payload


@_wrap_stage("report")
def stage_report(cfg, out_dir, schedule, plan, assignments, stats_by_bit, snr_by_bit, eval_payload):
    """Single JSON report plus the plot-ready per-step CSV tables."""
    sched_cal, merged_stats, _ = _sampling_inputs(cfg, schedule, plan, assignments, stats_by_bit)
    steps = list(range(1, schedule.T + 1))
    bits = sorted(snr_by_bit) if snr_by_bit else []
    snr_f = [
        snr_forward(t, schedule, convention=cfg["schedule"]["snr_convention"]) for t in steps
    ]
    write_csv(
        out_dir / "snr_vs_step.csv",
        ["t"] + [f"snr_q_{b}" for b in bits] + ["snr_f"],
        [[t] + [snr_by_bit[b][t - 1] for b in bits] + [snr_f[t - 1]] for t in steps],
    )
    stats_bits = sorted(stats_by_bit) if stats_by_bit else []
    write_csv(
        out_dir / "k_vs_step.csv",
        ["t"] + [f"k_{b}" for b in stats_bits],
        [[t] + [stats_by_bit[b].k[t - 1] for b in stats_bits] for t in steps],
    )
    sigma_cal = sched_cal.sigma_calibrated
    sigma_header = ["t", "beta", "alpha", "alpha_bar", "sigma"]
    if sigma_cal is not None:
        sigma_header.append("sigma_calibrated")
    write_csv(
        out_dir / "sigma_schedule.csv",
        sigma_header,
        [
            [t, schedule.beta[t - 1], schedule.alpha[t - 1], schedule.alpha_bar[t - 1],
             schedule.sigma[t - 1]]
            + ([sigma_cal[t - 1]] if sigma_cal is not None else [])
            for t in steps
        ],
    )
    config_echo = cfg.to_dict()
    config_echo.pop("workers")  # execution machinery, not experiment identity
    report = {
        "version": 1,
        "config": config_echo,
        "schedule": {
            "T": schedule.T,
            "eta": schedule.eta,
            "beta": schedule.beta.tolist(),
            "alpha": schedule.alpha.tolist(),
            "alpha_bar": schedule.alpha_bar.tolist(),
            "sigma": schedule.sigma.tolist(),
            "sigma_calibrated": None if sigma_cal is None else sigma_cal.tolist(),
        },
        "stats": None
        if not stats_by_bit
        else {str(b): stats_by_bit[b].to_dict() for b in stats_bits},
        "plan": None if plan is None else plan.to_dict(),
        "bops": None
        if plan is None
        else {
            "per_step": plan.bops_per_step.tolist(),
            "total": plan.total_bops,
            "compression_ratio": plan.compression_ratio,
        },
        "metrics": eval_payload,
        "samples_file": "samples.csv",
    }
    save_artifact(out_dir / "report.json", report)
    return report


def _constant_plan_for_accounting(cfg, schedule, snr_by_bit, net):
    """Uniform-bitwidth runs still get a BOPs account via a constant plan."""
    b = cfg.bit_list()[0]
    plan = mp.MixedPrecisionPlan(
        weight_bitwidth=cfg["quant"]["weight_bits"],
        bit_set=(b,),
        activation_bits=np.full(schedule.T, b, dtype=int),
        snr_q={b: snr_by_bit[b]},
        snr_f=np.array(
            [
                snr_forward(t, schedule, convention=cfg["schedule"]["snr_convention"])
                for t in range(1, schedule.T + 1)
            ]
        ),
    )
    per_step, total, ratio = mp.compute_bops(net, plan, io_bits=8)
    plan.bops_per_step, plan.total_bops, plan.compression_ratio = per_step, total, ratio
    return plan


STAGE_ORDER = ("train", "calibrate", "stats", "plan", "sample", "eval", "report")


def run_until(cfg: ExperimentConfig, out_dir=None, last: str = "report"):
    """Execute stages in order up to ``last``, resuming from artifacts.

    Returns the last stage's result (the report dict for a full run).
    """
    if last not in STAGE_ORDER:
        raise InvalidConfigError(f"unknown stage {last!r}")
    stop = STAGE_ORDER.index(last)
    out_dir = Path(out_dir) if out_dir is not None else resolve_out_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(canonical_json(cfg.to_dict()))
    schedule = build_schedule_from_config(cfg)

    net = stage_train(cfg, out_dir)
    if stop == 0:
        return net

    plan = None
    assignments = None
    stats_by_bit = {}
    snr_by_bit = {}
    if cfg.quant_enabled:
        assignments = stage_calibrate(cfg, out_dir, net, schedule)
    if stop == 1:
        return assignments
    if cfg.quant_enabled:
        stats_by_bit, snr_by_bit = stage_stats(cfg, out_dir, net, schedule, assignments)
    if stop == 2:
        return stats_by_bit, snr_by_bit
    if cfg.quant_enabled:
        if cfg.mixed_precision:
            plan, assignments, stats_by_bit = stage_plan(
                cfg, out_dir, net, schedule, snr_by_bit
            )
        else:
            plan = _constant_plan_for_accounting(cfg, schedule, snr_by_bit, net)
    if stop == 3:
        return plan

    samples = stage_sample(cfg, out_dir, net, schedule, plan, assignments, stats_by_bit)
    if stop == 4:
        return samples
    eval_payload = stage_eval(cfg, out_dir, samples)
    if stop == 5:
        return eval_payload
    return stage_report(
        cfg, out_dir, schedule, plan, assignments, stats_by_bit, snr_by_bit, eval_payload
    )


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Full pipeline: train, calibrate, stats, plan, sample, eval, report."""
    return run_until(cfg, out_dir=out_dir, last="report")
