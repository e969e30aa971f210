"""Ablation suites reproducing the reference experiments at desk scale.

Each suite owns a working directory: the datasets and weights it needs
are generated/trained there on demand (``auto_train``) and reused on
later runs, keyed by config fingerprints. Every suite returns a summary
dict with a side-by-side table and, where a directional expectation
exists, a pass/fail verdict; the summary and all per-cell reports are
written into the working directory.

Suites:
    nccs         held-out-camera comparison of NCCS vs raw-pixel conditioning
    regression   diffusion lifting vs the capacity-matched MSE baseline
    samplers     DDIM vs probability-flow ODE, single-frame vs online
    candidates   mean ADD as a function of the candidate count K
    cross-camera per-camera metrics of one model across test FOVs
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from keylift import diffusion, net, train
from keylift.config import RunConfig, fingerprint
from keylift.data import generate_dataset, read_dataset, split_records, write_dataset
from keylift.kinematics import KinematicChain, chain_hash, default_chain
from keylift.metrics import EvalConfig, Pipeline, evaluate, fit_config_from_settings, report_to_dict

HARSH_PIXEL_SIGMA = 5.0
HARSH_DROPOUT = 0.15
WARM_T_START_SWEEP = (0.1, 0.2, 0.4)
CANDIDATE_SWEEP = (1, 5, 10, 100)

SUITES = ("nccs", "regression", "samplers", "candidates", "cross-camera")


class MissingArtifactError(RuntimeError):
    """A suite needs a dataset or weight file and auto_train is off."""


def _ensure_dataset(workdir: Path, tag: str, cfg: RunConfig, chain: KinematicChain, auto: bool):
    fp = fingerprint(cfg.data, chain_hash(chain))[:16]
    path = workdir / f"data-{tag}-{fp}.bin"
    if not path.exists():
        if not auto:
            raise MissingArtifactError(f"dataset {path} missing (rerun with --auto-train)")
        write_dataset(
            generate_dataset(chain, cfg.data), path, chain, extra={"config_fingerprint": fp}
        )
    records, _ = read_dataset(path, expected_chain=chain)
    return records


def _ensure_score(workdir: Path, tag: str, records, cfg: RunConfig, chain, schedule, auto: bool,
                  condition_mode: str | None = None):
    mode = condition_mode or cfg.networks.condition_mode
    fp = fingerprint(
        cfg.networks, fingerprint(cfg.training), fingerprint(cfg.schedule), mode, cfg.seed, tag
    )[:16]
    path = workdir / f"score-{tag}-{fp}.bin"
    if path.exists():
        return diffusion.load_score_model(path)[0]
    if not auto:
        raise MissingArtifactError(f"score weights {path} missing (rerun with --auto-train)")
    model, _ = train.train_score_model(
        split_records(records, "train"), chain.n_keypoints, schedule,
        cfg.networks, cfg.training, cfg.seed, condition_mode=mode,
    )
    diffusion.save_score_model(path, model, extra={"chain_hash": chain_hash(chain)})
    return model


def _ensure_regressor(workdir: Path, tag: str, records, cfg: RunConfig, chain, auto: bool):
    fp = fingerprint(cfg.networks, fingerprint(cfg.training), cfg.seed, tag)[:16]
    path = workdir / f"angles-{tag}-{fp}.bin"
    if path.exists():
        return net.load_params(path)[0]
    if not auto:
        raise MissingArtifactError(f"regressor weights {path} missing (rerun with --auto-train)")
    params, _ = train.train_regressor(
        split_records(records, "train"), chain, cfg.networks, cfg.training, cfg.seed
    )
    net.save_params(path, params, role="angles", extra={"chain_hash": chain_hash(chain)})
    return params


def _ensure_baseline(workdir: Path, tag: str, records, cfg: RunConfig, chain, auto: bool):
    fp = fingerprint(cfg.networks, fingerprint(cfg.training), cfg.seed, tag)[:16]
    path = workdir / f"baseline-{tag}-{fp}.bin"
    if path.exists():
        return net.load_params(path)[0]
    if not auto:
        raise MissingArtifactError(f"baseline weights {path} missing (rerun with --auto-train)")
    params, _ = train.train_baseline(
        split_records(records, "train"), chain.n_keypoints, cfg.networks, cfg.training, cfg.seed
    )
    net.save_params(path, params, role="baseline", extra={"chain_hash": chain_hash(chain)})
    return params


def _eval_row(cfg: RunConfig, chain, schedule, records, *, score_model=None, regressor=None,
              baseline=None, sampler=None, **eval_overrides):
    pipe = Pipeline(
        chain=chain,
        schedule=schedule,
        sampler=sampler or cfg.sampler,
        fit=fit_config_from_settings(cfg.fit),
        score_model=score_model,
        regressor=regressor,
        baseline=baseline,
        baseline_condition_mode=cfg.networks.condition_mode,
        baseline_pixel_scale=cfg.networks.pixel_condition_scale,
    )
    eval_cfg = dataclasses.replace(cfg.eval, **eval_overrides)
    return evaluate(
        pipe, records, eval_cfg, cfg.seed,
        config_fingerprint=fingerprint(cfg), chain_hash=chain_hash(chain),
    )


def _write_summary(workdir: Path, suite: str, summary: dict, reports: dict) -> dict:
    for name, report in reports.items():
        with open(workdir / f"report-{suite}-{name}.json", "w") as f:
            json.dump(report_to_dict(report), f, sort_keys=True, indent=1)
    with open(workdir / f"{suite}-summary.json", "w") as f:
        json.dump(summary, f, sort_keys=True, indent=1)
    return summary


def run_suite(suite: str, cfg: RunConfig, workdir, auto_train: bool = False,
              chain: KinematicChain | None = None) -> dict:
    """Run one ablation suite; returns (and writes) its summary dict."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    chain = chain or default_chain()
    schedule = train.schedule_from_config(cfg.schedule)
    if suite == "nccs":
        return _suite_nccs(cfg, workdir, auto_train, chain, schedule)
    if suite == "regression":
        return _suite_regression(cfg, workdir, auto_train, chain, schedule)
    if suite == "samplers":
        return _suite_samplers(cfg, workdir, auto_train, chain, schedule)
    if suite == "candidates":
        return _suite_candidates(cfg, workdir, auto_train, chain, schedule)
    if suite == "cross-camera":
        return _suite_cross_camera(cfg, workdir, auto_train, chain, schedule)
    raise ValueError(f"unknown suite {suite!r}; pick one of {SUITES}")


def _row_stats(report) -> dict:
    return {
        "auc": round(report.auc_at_threshold, 3),
        "median_add": round(report.median_add, 5),
        "mean_add": round(report.mean_add, 5),
        "mean_lift_add": round(float(np.mean(report.lift_add)), 5),
        "latency_ms": round(report.timing.get("mean_ms", 0.0), 2),
        "n_frames": report.n_frames,
    }


def _suite_nccs(cfg: RunConfig, workdir, auto, chain, schedule) -> dict:
    """Train on two FOVs, test on a held-out third; NCCS vs pixel conditioning."""
    train_cfg = dataclasses.replace(
        cfg, data=dataclasses.replace(cfg.data, fovs=list(cfg.data.fovs[:-1]))
    )
    test_fov = cfg.data.fovs[-1]
    test_cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(
            cfg.data,
            fovs=[test_fov],
            count=max(300, cfg.data.count // 10),
            seed=cfg.data.seed + 1,
        ),
    )
    train_records = _ensure_dataset(workdir, "nccs-train", train_cfg, chain, auto)
    test_records = _ensure_dataset(workdir, "nccs-test", test_cfg, chain, auto)
    regressor = _ensure_regressor(workdir, "nccs", train_records, train_cfg, chain, auto)
    reports = {}
    for mode in ("nccs", "pixels"):
        model = _ensure_score(
            workdir, f"nccs-{mode}", train_records, train_cfg, chain, schedule, auto,
            condition_mode=mode,
        )
        reports[mode] = _eval_row(
            cfg, chain, schedule, split_records(test_records, "all"),
            score_model=model, regressor=regressor, mode="single-frame", split="all",
        )
    ratio = reports["pixels"].mean_add / reports["nccs"].mean_add
    summary = {
        "suite": "nccs",
        "held_out_fov": test_fov,
        "train_fovs": list(cfg.data.fovs[:-1]),
        "rows": {mode: _row_stats(r) for mode, r in reports.items()},
        "mean_add_ratio_pixels_over_nccs": round(ratio, 3),
        "expectation": "w/o-NCCS mean ADD >= 5x NCCS mean ADD on the held-out camera",
        "passed": bool(ratio >= 5.0),
    }
    return _write_summary(workdir, "nccs", summary, reports)


def _suite_regression(cfg: RunConfig, workdir, auto, chain, schedule) -> dict:
    """Generation vs regression under default and harsh detection noise."""
    records = _ensure_dataset(workdir, "default", cfg, chain, auto)
    harsh_cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(
            cfg.data,
            pixel_sigma=HARSH_PIXEL_SIGMA,
            dropout_prob=HARSH_DROPOUT,
            count=max(300, cfg.data.count // 10),
            seed=cfg.data.seed + 2,
        ),
    )
    harsh_records = _ensure_dataset(workdir, "harsh", harsh_cfg, chain, auto)
    score_model = _ensure_score(workdir, "default", records, cfg, chain, schedule, auto)
    regressor = _ensure_regressor(workdir, "default", records, cfg, chain, auto)
    baseline = _ensure_baseline(workdir, "default", records, cfg, chain, auto)
    reports = {}
    for noise_tag, recs, split in (("default", records, "test"), ("harsh", harsh_records, "all")):
        for lifter in ("diffusion", "baseline"):
            for conditions in ("clean", "noisy"):
                name = f"{noise_tag}-{lifter}-{conditions}"
                reports[name] = _eval_row(
                    cfg, chain, schedule, split_records(recs, split),
                    score_model=score_model, regressor=regressor, baseline=baseline,
                    lifter=lifter, conditions=conditions, mode="single-frame", split=split,
                )
    diff_add = reports["harsh-diffusion-noisy"].mean_add
    base_add = reports["harsh-baseline-noisy"].mean_add
    summary = {
        "suite": "regression",
        "harsh_noise": {"pixel_sigma": HARSH_PIXEL_SIGMA, "dropout_prob": HARSH_DROPOUT},
        "rows": {name: _row_stats(r) for name, r in reports.items()},
        "expectation": "diffusion mean ADD < baseline mean ADD under harsh noisy 2D",
        "harsh_noisy_mean_add": {"diffusion": diff_add, "baseline": base_add},
        "passed": bool(diff_add < base_add),
    }
    return _write_summary(workdir, "regression", summary, reports)


def _suite_samplers(cfg: RunConfig, workdir, auto, chain, schedule) -> dict:
    """DDIM vs ODE, Gaussian-prior vs warm-start, plus the t_start sweep."""
    records = _ensure_dataset(workdir, "default", cfg, chain, auto)
    score_model = _ensure_score(workdir, "default", records, cfg, chain, schedule, auto)
    regressor = _ensure_regressor(workdir, "default", records, cfg, chain, auto)
    test = split_records(records, "test")
    base = cfg.sampler
    reports = {}

    def row(name, sampler, mode):
        reports[name] = _eval_row(
            cfg, chain, schedule, test,
            score_model=score_model, regressor=regressor, sampler=sampler, mode=mode,
        )

    row("ddim-single-m50", dataclasses.replace(base, kind="ddim"), "single-frame")
    row(
        "ddim-single-m10",
        dataclasses.replace(base, kind="ddim", num_steps=base.warm_num_steps),
        "single-frame",
    )
    for t_start in WARM_T_START_SWEEP:
        row(
            f"ddim-online-m10-t{t_start:g}",
            dataclasses.replace(base, kind="ddim", init="warm", t_start=t_start),
            "online",
        )
    row("ode-single", dataclasses.replace(base, kind="ode"), "single-frame")
    row("ode-online", dataclasses.replace(base, kind="ode", init="warm"), "online")

    warm = reports[f"ddim-online-m10-t{base.t_start:g}"]
    cold10 = reports["ddim-single-m10"]
    cold50 = reports["ddim-single-m50"]
    summary = {
        "suite": "samplers",
        "rows": {name: _row_stats(r) for name, r in reports.items()},
        "expectation": "warm-start m=10 AUC >= gaussian m=10 AUC; "
        "warm latency <= 0.6x gaussian m=50 latency",
        "warm_vs_cold10_auc": [warm.auc_at_threshold, cold10.auc_at_threshold],
        "warm_latency_ratio_vs_cold50": round(
            warm.timing["mean_ms"] / cold50.timing["mean_ms"], 3
        ),
        "passed": bool(
            warm.auc_at_threshold >= cold10.auc_at_threshold
            and warm.timing["mean_ms"] <= 0.6 * cold50.timing["mean_ms"]
        ),
    }
    return _write_summary(workdir, "samplers", summary, reports)


def _suite_candidates(cfg: RunConfig, workdir, auto, chain, schedule) -> dict:
    """Mean ADD as a function of the number of averaged candidates K."""
    records = _ensure_dataset(workdir, "default", cfg, chain, auto)
    score_model = _ensure_score(workdir, "default", records, cfg, chain, schedule, auto)
    regressor = _ensure_regressor(workdir, "default", records, cfg, chain, auto)
    test = split_records(records, "test")
    reports = {}
    for k in CANDIDATE_SWEEP:
        sampler = dataclasses.replace(cfg.sampler, num_candidates=k)
        reports[f"k{k}"] = _eval_row(
            cfg, chain, schedule, test,
            score_model=score_model, regressor=regressor, sampler=sampler, mode="single-frame",
        )
    curve = [(k, reports[f"k{k}"].mean_add) for k in CANDIDATE_SWEEP]
    summary = {
        "suite": "candidates",
        "rows": {name: _row_stats(r) for name, r in reports.items()},
        "curve_k_mean_add": curve,
        "expectation": "mean ADD at K=10 <= mean ADD at K=1",
        "passed": bool(reports["k10"].mean_add <= reports["k1"].mean_add),
    }
    return _write_summary(workdir, "candidates", summary, reports)


def _suite_cross_camera(cfg: RunConfig, workdir, auto, chain, schedule) -> dict:
    """Per-camera metrics of the default model across the test FOVs."""
    records = _ensure_dataset(workdir, "default", cfg, chain, auto)
    score_model = _ensure_score(workdir, "default", records, cfg, chain, schedule, auto)
    regressor = _ensure_regressor(workdir, "default", records, cfg, chain, auto)
    test = split_records(records, "test")
    reports = {}
    for fov in cfg.data.fovs:
        subset = [r for r in test if abs(_fov_of(r) - fov) < 1e-6]
        if not subset:
            continue
        reports[f"fov{fov:g}"] = _eval_row(
            cfg, chain, schedule, subset,
            score_model=score_model, regressor=regressor, mode="single-frame",
        )
    means = [r.mean_add for r in reports.values()]
    summary = {
        "suite": "cross-camera",
        "rows": {name: _row_stats(r) for name, r in reports.items()},
        "mean_add_spread_ratio": round(max(means) / min(means), 3) if means else None,
        "expectation": "informational: metrics stay comparable across cameras",
        "passed": None,
    }
    return _write_summary(workdir, "cross-camera", summary, reports)


def _fov_of(record) -> float:
    half = np.arctan((record.intrinsics.width / 2.0) / record.intrinsics.fx)
    return float(np.rad2deg(2.0 * half))


def render_summary(summary: dict) -> str:
    """Fixed-width text table of a suite summary."""
    lines = [f"suite: {summary['suite']}"]
    rows = summary.get("rows", {})
    if rows:
        cols = ["auc", "median_add", "mean_add", "mean_lift_add", "latency_ms", "n_frames"]
        name_w = max(len(n) for n in rows) + 2
        header = "".join(c.rjust(14) for c in cols)
        lines.append(" " * name_w + header)
        for name, stats in rows.items():
            lines.append(name.ljust(name_w) + "".join(str(stats[c]).rjust(14) for c in cols))
    for key, value in summary.items():
        if key in ("suite", "rows"):
            continue
        lines.append(f"{key}: {value}")
    return "\n".join(lines)
