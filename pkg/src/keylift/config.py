"""Run configuration: every knob materialized, serializable, fingerprintable.

A RunConfig is a tree of per-stage sections. All defaults are explicit so
`keylift config dump` prints the complete effective configuration, and a
sha256 fingerprint of the canonical JSON form is embedded in every output
file so downstream commands can refuse mismatched inputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml


@dataclass
class DataConfig:
    count: int = 50000
    seed: int = 0
    fovs: list = field(default_factory=lambda: [62.73, 70.21, 93.01])
    width: int = 640
    height: int = 480
    radius_lo: float = 1.5
    radius_hi: float = 2.5
    elevation_lo: float = 0.15
    elevation_hi: float = 1.1
    pixel_sigma: float = 2.0
    dropout_prob: float = 0.05
    outlier_prob: float = 0.01
    sequence_length: int = 3
    max_angle_step: float = 0.05
    max_azimuth_step: float = 0.01


@dataclass
class ScheduleConfig:
    beta0: float = 0.1
    beta1: float = 20.0
    t_max: float = 1.0
    t_min: float = 1e-4


@dataclass
class SamplerSettings:
    kind: str = "ddim"  # ddim | ode
    num_steps: int = 50
    eta: float = 0.0
    grid: str = "uniform"  # uniform | quadratic
    rtol: float = 1e-5
    atol: float = 1e-5
    num_candidates: int = 10
    init: str = "gaussian"  # gaussian | warm
    t_start: float = 0.2
    warm_num_steps: int = 10


@dataclass
class NetworkConfig:
    score_hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    score_activation: str = "tanh"
    time_embed_dim: int = 64
    time_embed_base: float = 1000.0
    regressor_hidden: list = field(default_factory=lambda: [128, 128])
    regressor_activation: str = "tanh"
    regressor_noise_aug: float = 0.01
    condition_mode: str = "nccs"  # nccs | pixels (ablation variant)
    pixel_condition_scale: float = 1e-3


@dataclass
class TrainingConfig:
    score_epochs: int = 200
    score_batch: int = 512
    score_lr: float = 2e-4
    regressor_epochs: int = 120
    regressor_batch: int = 512
    regressor_lr: float = 0.01
    # step decays mirror the 150/300/450-of-720 shape at desk scale
    regressor_lr_drops: list = field(default_factory=lambda: [25, 50, 75])
    regressor_lr_drop_factor: float = 0.1
    baseline_epochs: int = 200
    baseline_batch: int = 512
    baseline_lr: float = 2e-4


@dataclass
class FitSettings:
    max_irls_iterations: int = 10
    residual_scale: float = 0.03
    convergence_tol: float = 1e-6
    min_inliers: int = 3


@dataclass
class EvalConfig:
    mode: str = "single-frame"  # single-frame | online
    angles: str = "estimated"  # estimated | ground-truth
    lifter: str = "diffusion"  # diffusion | baseline | oracle
    conditions: str = "noisy"  # noisy | clean
    split: str = "test"  # train | val | test | all
    max_frames: int = 0  # 0 = no cap
    auc_threshold: float = 0.1
    auc_bins: int = 1000


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    fit: FitSettings = field(default_factory=FitSettings)
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


_SECTIONS = {
    "data": DataConfig,
    "schedule": ScheduleConfig,
    "sampler": SamplerSettings,
    "networks": NetworkConfig,
    "training": TrainingConfig,
    "fit": FitSettings,
    "eval": EvalConfig,
}


def _build(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from a (possibly partial) nested dict."""
    data = dict(data)
    kwargs = {}
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = _build(cls, data.pop(key) or {})
    for key in ("seed", "output_dir"):
        if key in data:
            kwargs[key] = data.pop(key)
    if data:
        raise ValueError(f"unknown config sections: {sorted(data)}")
    return RunConfig(**kwargs)


def dump_yaml(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def load_yaml(text: str) -> RunConfig:
    data = yaml.safe_load(text)
    return from_dict(data or {})


def merge_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply a nested partial dict on top of an existing config."""
    base = to_dict(cfg)
    for section, values in overrides.items():
        if isinstance(values, dict):
            base.setdefault(section, {}).update(values)
        else:
            base[section] = values
    return from_dict(base)


def fingerprint(cfg, *extra: str) -> str:
    """Stable content hash of a config (plus optional extra strings)."""
    payload = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256(payload.encode())
    for item in extra:
        h.update(b"|")
        h.update(str(item).encode())
    return h.hexdigest()
