"""ADD/AUC metrics and the end-to-end evaluation harness.

Headline metrics follow the keypoint-ADD convention: per frame, the
ground-truth robot-frame keypoints are transformed by the estimated and
the ground-truth camera pose, and ADD is the mean per-keypoint distance
between the two. The report also carries the lifting ADD (generated
camera-frame keypoints against ground truth) since the two stages fail in
different ways.

AUC integrates the accuracy-vs-threshold curve up to a fixed threshold
(trapezoidal over uniform bins) and scales it to [0, 100].

Wall-clock numbers live in a separate ``timing`` block that is excluded
from the report's content hash, so reports are bit-reproducible under a
fixed seed while still recording latency.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from keylift import diffusion, net, posefit
from keylift.camera import Keypoints3D, to_nccs
from keylift.config import EvalConfig, FitSettings, SamplerSettings
from keylift.data import DataRecord, derive_rng
from keylift.kinematics import KinematicChain
from keylift.posefit import FitConfig

REPORT_FORMAT_VERSION = 1


def add_metric(x_est, x_gt) -> float:
    """Mean per-keypoint Euclidean distance, in meters.

    Accepts (N, 3) arrays or Keypoints3D; frame tags must match when both
    sides carry one.
    """
    if isinstance(x_est, Keypoints3D) and isinstance(x_gt, Keypoints3D):
        if x_est.frame != x_gt.frame:
            raise ValueError(f"frame mismatch: {x_est.frame} vs {x_gt.frame}")
    a = x_est.points if isinstance(x_est, Keypoints3D) else np.asarray(x_est, dtype=np.float64)
    b = x_gt.points if isinstance(x_gt, Keypoints3D) else np.asarray(x_gt, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def auc(errors, threshold: float, num_bins: int = 1000) -> float:
    """Normalized area under accuracy-vs-threshold up to ``threshold``, in [0, 100]."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("empty error list")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    taus = np.linspace(0.0, threshold, num_bins + 1)
    accuracy = (errors[None, :] <= taus[:, None]).mean(axis=1)
    return float(np.trapezoid(accuracy, taus) / threshold * 100.0)


@dataclass
class EvalReport:
    """Aggregated evaluation results plus provenance."""

    mode: str
    angles: str
    lifter: str
    conditions: str
    n_frames: int
    pose_add: list
    lift_add: list
    auc_threshold: float
    auc_at_threshold: float
    auc_reach_threshold: float
    auc_at_reach: float
    median_add: float
    mean_add: float
    config_fingerprint: str
    seed: int
    chain_hash: str
    timing: dict = field(default_factory=dict)

    def content_dict(self) -> dict:
        """Everything except wall-clock timing (the reproducible part)."""
        d = report_to_dict(self)
        d.pop("timing", None)
        return d


def report_to_dict(report: EvalReport) -> dict:
    return {
        "format": "keylift-report",
        "format_version": REPORT_FORMAT_VERSION,
        "mode": report.mode,
        "angles": report.angles,
        "lifter": report.lifter,
        "conditions": report.conditions,
        "n_frames": report.n_frames,
        "pose_add": list(map(float, report.pose_add)),
        "lift_add": list(map(float, report.lift_add)),
        "auc_threshold": report.auc_threshold,
        "auc_at_threshold": report.auc_at_threshold,
        "auc_reach_threshold": report.auc_reach_threshold,
        "auc_at_reach": report.auc_at_reach,
        "median_add": report.median_add,
        "mean_add": report.mean_add,
        "config_fingerprint": report.config_fingerprint,
        "seed": report.seed,
        "chain_hash": report.chain_hash,
        "timing": report.timing,
    }


def report_from_dict(d: dict) -> EvalReport:
    if d.get("format") != "keylift-report":
        raise ValueError("not a keylift report")
    if d.get("format_version") != REPORT_FORMAT_VERSION:
        raise ValueError(f"report format version {d.get('format_version')} unsupported")
    fields = {k: v for k, v in d.items() if k not in ("format", "format_version")}
    return EvalReport(**fields)


def save_report(report: EvalReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report_to_dict(report), f, sort_keys=True, indent=1)


def load_report(path) -> EvalReport:
    with open(path) as f:
        return report_from_dict(json.load(f))


def report_table(report: EvalReport) -> str:
    """Fixed-width text table of the headline numbers."""
    rows = [
        ("mode", report.mode),
        ("lifter", report.lifter),
        ("angles", report.angles),
        ("conditions", report.conditions),
        ("frames", str(report.n_frames)),
        (f"AUC@{report.auc_threshold:g}m", f"{report.auc_at_threshold:.2f}"),
        (f"AUC@{report.auc_reach_threshold:g}m (10% reach)", f"{report.auc_at_reach:.2f}"),
        ("median ADD (m)", f"{report.median_add:.4f}"),
        ("mean ADD (m)", f"{report.mean_add:.4f}"),
        ("mean lift ADD (m)", f"{float(np.mean(report.lift_add)):.4f}"),
    ]
    if report.timing:
        rows.append(("latency mean (ms)", f"{report.timing.get('mean_ms', 0.0):.1f}"))
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def compare_reports(a: EvalReport, b: EvalReport, tol_auc: float = 0.0, tol_add: float = 0.0):
    """Diff two reports' headline metrics; returns a list of difference strings."""
    diffs = []
    for name, attr, tol in (
        ("AUC@threshold", "auc_at_threshold", tol_auc),
        ("AUC@reach", "auc_at_reach", tol_auc),
        ("median ADD", "median_add", tol_add),
        ("mean ADD", "mean_add", tol_add),
    ):
        va, vb = getattr(a, attr), getattr(b, attr)
        if abs(va - vb) > tol:
            diffs.append(f"{name}: {va:.6g} vs {vb:.6g} (|diff| {abs(va - vb):.3g} > tol {tol:g})")
    if a.n_frames != b.n_frames:
        diffs.append(f"n_frames: {a.n_frames} vs {b.n_frames}")
    return diffs


@dataclass
class Pipeline:
    """Everything evaluate() needs to process frames."""

    chain: KinematicChain
    schedule: diffusion.DiffusionSchedule
    sampler: SamplerSettings
    fit: FitConfig
    score_model: diffusion.ScoreModel | None = None
    regressor: net.MlpParams | None = None
    baseline: net.MlpParams | None = None
    baseline_condition_mode: str = "nccs"
    baseline_pixel_scale: float = 1e-3


def fit_config_from_settings(s: FitSettings) -> FitConfig:
    return FitConfig(
        max_irls_iterations=s.max_irls_iterations,
        residual_scale=s.residual_scale,
        convergence_tol=s.convergence_tol,
        min_inliers=s.min_inliers,
    )


def _observation(record: DataRecord, conditions: str, condition_mode: str):
    c = record.c_noisy if conditions == "noisy" else record.c_clean
    if condition_mode == "pixels":
        return c
    return to_nccs(record.intrinsics, c)


def _lift_frame(pipe: Pipeline, record: DataRecord, cfg: EvalConfig, rng, previous):
    """One frame's 3D keypoint estimate; returns camera-frame Keypoints3D."""
    if cfg.lifter == "oracle":
        return record.x_cam
    if cfg.lifter == "baseline":
        obs = _observation(record, cfg.conditions, pipe.baseline_condition_mode)
        cond = diffusion.pack_observation(obs, pipe.baseline_condition_mode, pipe.baseline_pixel_scale)
        out, _ = net.forward(pipe.baseline, cond)
        return Keypoints3D(out.reshape(-1, 3), "camera")
    obs = _observation(record, cfg.conditions, pipe.score_model.condition_mode)
    sampler = pipe.sampler
    if cfg.mode == "online":
        init = "warm" if previous is not None else "gaussian"
        sampler = SamplerSettings(**{**sampler.__dict__, "init": init})
    return diffusion.lift(pipe.schedule, sampler, pipe.score_model, obs, rng, previous)


def evaluate(pipe: Pipeline, records, cfg: EvalConfig, seed: int, config_fingerprint: str = "", chain_hash: str = "") -> EvalReport:
    """Run the lifting + estimation pipeline over records and aggregate metrics.

    Online mode processes sequences in order and warm-starts each frame
    from the previous frame's lifted estimate; single-frame mode treats
    frames independently. Per-frame rng streams derive from (seed,
    sequence, frame), so results do not depend on iteration order.
    """
    if cfg.lifter == "diffusion" and pipe.score_model is None:
        raise ValueError("diffusion evaluation needs a score model")
    if cfg.lifter == "baseline" and pipe.baseline is None:
        raise ValueError("baseline evaluation needs baseline weights")
    if cfg.angles == "estimated" and pipe.regressor is None:
        raise ValueError("estimated-angles evaluation needs a regressor")
    records = list(records)
    if cfg.max_frames and len(records) > cfg.max_frames:
        records = records[: cfg.max_frames]
    if not records:
        raise ValueError("no records to evaluate")

    by_sequence: dict = {}
    for r in records:
        by_sequence.setdefault(r.sequence_id, []).append(r)
    for frames in by_sequence.values():
        frames.sort(key=lambda r: r.frame_index)

    pose_add, lift_add, latencies = [], [], []
    for seq_id in sorted(by_sequence):
        previous = None
        for record in by_sequence[seq_id]:
            rng = derive_rng(seed, "eval", seq_id, record.frame_index)
            t0 = time.perf_counter()
            x_hat = _lift_frame(pipe, record, cfg, rng, previous)
            override = record.angles if cfg.angles == "ground-truth" else None
            est = posefit.estimate(x_hat, pipe.regressor, pipe.chain, pipe.fit, override)
            latencies.append((time.perf_counter() - t0) * 1000.0)
            if cfg.mode == "online":
                previous = x_hat
            lift_add.append(add_metric(x_hat, record.x_cam))
            # ADD convention: estimated transform applied to the estimated
            # keypoints, against ground truth in camera frame. Using the
            # estimated X_rob keeps the metric invariant to the base-yaw /
            # camera-azimuth gauge, which is unobservable from keypoints.
            pose_add.append(
                add_metric(est.pose.apply(est.x_rob.points), record.x_cam.points)
            )

    pose_arr = np.asarray(pose_add)
    reach_threshold = 0.1 * pipe.chain.reach
    lat = np.asarray(latencies)
    return EvalReport(
        mode=cfg.mode,
        angles=cfg.angles,
        lifter=cfg.lifter,
        conditions=cfg.conditions,
        n_frames=len(records),
        pose_add=pose_add,
        lift_add=lift_add,
        auc_threshold=cfg.auc_threshold,
        auc_at_threshold=auc(pose_arr, cfg.auc_threshold, cfg.auc_bins),
        auc_reach_threshold=reach_threshold,
        auc_at_reach=auc(pose_arr, reach_threshold, cfg.auc_bins),
        median_add=float(np.median(pose_arr)),
        mean_add=float(np.mean(pose_arr)),
        config_fingerprint=config_fingerprint,
        seed=seed,
        chain_hash=chain_hash,
        timing={
            "mean_ms": float(lat.mean()),
            "median_ms": float(np.median(lat)),
            "p95_ms": float(np.percentile(lat, 95)),
            "total_s": float(lat.sum() / 1000.0),
        },
    )
