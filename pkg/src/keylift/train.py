"""Training entry points for the three network roles.

Turns dataset records into training arrays and runs the role-appropriate
loop: denoising score matching for the score network, plain MSE for the
joint-angle regressor and for the capacity-matched regression baseline.
All three are deterministic functions of (records, config, seed).
"""

from __future__ import annotations

import numpy as np

from keylift import diffusion, net, posefit
from keylift.camera import to_nccs
from keylift.config import NetworkConfig, ScheduleConfig, TrainingConfig
from keylift.data import derive_rng


def lifting_arrays(records, condition_mode: str = "nccs", conditions: str = "noisy", pixel_scale: float = 1e-3):
    """(x0, cond) arrays for score/baseline training.

    x0 is the flattened camera-frame keypoints (M, 3N); cond packs the 2D
    observation per the shared condition layout (M, 3N).
    """
    x0 = np.stack([r.x_cam.points.ravel() for r in records])
    conds = []
    for r in records:
        c = r.c_noisy if conditions == "noisy" else r.c_clean
        obs = c if condition_mode == "pixels" else to_nccs(r.intrinsics, c)
        conds.append(diffusion.pack_observation(obs, condition_mode, pixel_scale))
    return x0, np.stack(conds)


def angle_arrays(records, noise_aug: float = 0.0, rng: np.random.Generator | None = None):
    """(features, targets) for the angle regressor.

    Features are centroid-subtracted camera-frame keypoints, optionally
    jittered with Gaussian noise before centering so the regressor
    tolerates imperfect lifted keypoints at inference time.
    """
    pts = np.stack([r.x_cam.points for r in records])
    if noise_aug > 0.0:
        if rng is None:
            raise ValueError("noise_aug needs an rng")
        pts = pts + rng.normal(0.0, noise_aug, pts.shape)
    feats = posefit.regressor_features(pts.reshape(len(records), -1))
    targets = np.stack([r.angles for r in records])
    return feats, targets


def schedule_from_config(cfg: ScheduleConfig) -> diffusion.DiffusionSchedule:
    return diffusion.DiffusionSchedule(cfg.beta0, cfg.beta1, cfg.t_max, cfg.t_min)


def train_score_model(
    records,
    n_keypoints: int,
    schedule: diffusion.DiffusionSchedule,
    netcfg: NetworkConfig,
    traincfg: TrainingConfig,
    seed: int,
    condition_mode: str | None = None,
    conditions: str = "noisy",
):
    """Train a score network on dataset records; returns (model, log)."""
    mode = condition_mode or netcfg.condition_mode
    x0, cond = lifting_arrays(records, mode, conditions, netcfg.pixel_condition_scale)
    model = diffusion.make_score_model(
        n_keypoints,
        derive_rng(seed, "score-init"),
        hidden=tuple(netcfg.score_hidden),
        activation=netcfg.score_activation,
        emb_dim=netcfg.time_embed_dim,
        emb_base=netcfg.time_embed_base,
        condition_mode=mode,
        pixel_scale=netcfg.pixel_condition_scale,
    )
    log = diffusion.train_score(
        schedule,
        model,
        x0,
        cond,
        epochs=traincfg.score_epochs,
        batch_size=traincfg.score_batch,
        lr=traincfg.score_lr,
        rng=derive_rng(seed, "score-train"),
    )
    return model, log


def train_regressor(records, chain, netcfg: NetworkConfig, traincfg: TrainingConfig, seed: int):
    """Train the joint-angle regressor; returns (params, log)."""
    feats, targets = angle_arrays(
        records, netcfg.regressor_noise_aug, derive_rng(seed, "regressor-aug")
    )
    dims = [feats.shape[1], *netcfg.regressor_hidden, chain.n_joints]
    params = net.init_params(dims, derive_rng(seed, "regressor-init"), netcfg.regressor_activation)
    log = net.train_mse(
        params,
        feats,
        targets,
        epochs=traincfg.regressor_epochs,
        batch_size=traincfg.regressor_batch,
        lr=traincfg.regressor_lr,
        rng=derive_rng(seed, "regressor-train"),
        lr_drop_epochs=tuple(traincfg.regressor_lr_drops),
        lr_drop_factor=traincfg.regressor_lr_drop_factor,
    )
    return params, log


def train_baseline(
    records,
    n_keypoints: int,
    netcfg: NetworkConfig,
    traincfg: TrainingConfig,
    seed: int,
    condition_mode: str | None = None,
    conditions: str = "noisy",
):
    """Train the regression baseline lifter (condition -> 3D keypoints).

    Capacity-matched to the score network: same hidden stack, same
    condition block, no time embedding.
    """
    mode = condition_mode or netcfg.condition_mode
    x0, cond = lifting_arrays(records, mode, conditions, netcfg.pixel_condition_scale)
    dims = [cond.shape[1], *netcfg.score_hidden, 3 * n_keypoints]
    params = net.init_params(dims, derive_rng(seed, "baseline-init"), netcfg.score_activation)
    log = net.train_mse(
        params,
        cond,
        x0,
        epochs=traincfg.baseline_epochs,
        batch_size=traincfg.baseline_batch,
        lr=traincfg.baseline_lr,
        rng=derive_rng(seed, "baseline-train"),
    )
    return params, log
