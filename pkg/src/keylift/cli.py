"""Command-line orchestrator: data generation, training, evaluation, ablations.

Configuration precedence (highest first): config file (--config), then
command-line flags, then built-in defaults — a config file pins a whole
experiment regardless of stray flags. Every output file embeds the config
fingerprint of the run that produced it; eval refuses to mix artifacts
with mismatched fingerprints unless --force is given. The only
environment variable honored is KEYLIFT_OUTPUT_ROOT, the base directory
for relative output paths (default: current directory).
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path

import click
import numpy as np
import yaml

from keylift import ablate as ablate_mod
from keylift import diffusion, metrics, net, posefit, train
from keylift import config as config_mod
from keylift.config import RunConfig, fingerprint
from keylift.data import generate_dataset, read_dataset, split_records, write_dataset
from keylift.kinematics import chain_hash, default_chain, load_chain
from keylift.metrics import (
    Pipeline,
    compare_reports,
    evaluate,
    fit_config_from_settings,
    load_report,
    report_table,
    save_report,
)


def _out_root() -> Path:
    return Path(os.environ.get("KEYLIFT_OUTPUT_ROOT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _out_root() / p


def _load_cfg(config_path: str | None, overrides: dict) -> RunConfig:
    cfg = config_mod.merge_overrides(RunConfig(), overrides)
    if config_path:
        with open(config_path) as f:
            file_overrides = yaml.safe_load(f) or {}
        cfg = config_mod.merge_overrides(cfg, file_overrides)
    return cfg


def _chain_from_flag(chain_path: str | None):
    if chain_path:
        return load_chain(Path(chain_path).read_text())
    return default_chain()


@click.group()
def main():
    """Diffusion-based 2D-to-3D robot keypoint lifting pipeline."""


@main.command("gen-data")
@click.option("--out", default="dataset.bin", show_default=True, help="Output dataset path (relative to KEYLIFT_OUTPUT_ROOT).")
@click.option("--count", default=config_mod.DataConfig.count, show_default=True, help="Number of records.")
@click.option("--seed", default=config_mod.DataConfig.seed, show_default=True, help="Master data seed.")
@click.option("--fovs", default="62.73,70.21,93.01", show_default=True, help="Comma-separated horizontal FOVs in degrees.")
@click.option("--width", default=config_mod.DataConfig.width, show_default=True, help="Image width in pixels.")
@click.option("--height", default=config_mod.DataConfig.height, show_default=True, help="Image height in pixels.")
@click.option("--pixel-sigma", default=config_mod.DataConfig.pixel_sigma, show_default=True, help="Detection noise std-dev in pixels.")
@click.option("--dropout", default=config_mod.DataConfig.dropout_prob, show_default=True, help="Keypoint dropout probability.")
@click.option("--outlier", default=config_mod.DataConfig.outlier_prob, show_default=True, help="Keypoint outlier probability.")
@click.option("--chain", "chain_path", default=None, show_default="built-in 3R arm", help="Chain spec YAML file.")
@click.option("--config", "config_path", default=None, show_default="none", help="YAML config file (overrides flags).")
def cmd_gen_data(out, count, seed, fovs, width, height, pixel_sigma, dropout, outlier, chain_path, config_path):
    """Generate a synthetic paired dataset."""
    overrides = {
        "data": {
            "count": count,
            "seed": seed,
            "fovs": [float(f) for f in fovs.split(",")],
            "width": width,
            "height": height,
            "pixel_sigma": pixel_sigma,
            "dropout_prob": dropout,
            "outlier_prob": outlier,
        }
    }
    cfg = _load_cfg(config_path, overrides)
    chain = _chain_from_flag(chain_path)
    out_path = _resolve(out)
    if not out_path.parent.exists():
        raise click.ClickException(f"output directory does not exist: {out_path.parent}")
    fp = fingerprint(cfg.data, chain_hash(chain))
    n = write_dataset(
        generate_dataset(chain, cfg.data), out_path, chain, extra={"config_fingerprint": fp}
    )
    click.echo(f"wrote {n} records to {out_path} (fingerprint {fp[:16]})")


@main.command("train")
@click.option("--role", type=click.Choice(["score", "angles", "baseline"]), required=True, help="Which network to train.")
@click.option("--data", "data_path", required=True, help="Training dataset file.")
@click.option("--out", default=None, show_default="<role>.weights", help="Output weight file.")
@click.option("--seed", default=0, show_default=True, help="Training seed.")
@click.option("--epochs", default=None, type=int, show_default="role default", help="Override the role's epoch count.")
@click.option("--batch", default=None, type=int, show_default="role default", help="Override the role's batch size.")
@click.option("--lr", default=None, type=float, show_default="role default", help="Override the role's learning rate.")
@click.option("--condition-mode", type=click.Choice(["nccs", "pixels"]), default="nccs", show_default=True, help="2D conditioning space (pixels = w/o-NCCS ablation).")
@click.option("--conditions", type=click.Choice(["noisy", "clean"]), default="noisy", show_default=True, help="Train on noisy or clean detections.")
@click.option("--config", "config_path", default=None, show_default="none", help="YAML config file (overrides flags).")
def cmd_train(role, data_path, out, seed, epochs, batch, lr, condition_mode, conditions, config_path):
    """Train the score network, angle regressor, or regression baseline."""
    overrides: dict = {"seed": seed, "networks": {"condition_mode": condition_mode}}
    tkey = {"score": "score", "angles": "regressor", "baseline": "baseline"}[role]
    toverrides = {}
    if epochs is not None:
        toverrides[f"{tkey}_epochs"] = epochs
    if batch is not None:
        toverrides[f"{tkey}_batch"] = batch
    if lr is not None:
        toverrides[f"{tkey}_lr"] = lr
    if toverrides:
        overrides["training"] = toverrides
    cfg = _load_cfg(config_path, overrides)

    records, header = read_dataset(_resolve(data_path))
    chain = load_chain(header["chain_document"])
    train_records = split_records(records, "train")
    schedule = train.schedule_from_config(cfg.schedule)
    cfg_fp = fingerprint(cfg)
    extra = {
        "chain_hash": header["chain_hash"],
        "data_fingerprint": header.get("extra", {}).get("config_fingerprint", ""),
        "config_fingerprint": cfg_fp,
        "seed": cfg.seed,
        "conditions": conditions,
    }
    out_path = _resolve(out or f"{role}.weights")
    log_payload = {"role": role, "seed": cfg.seed, "config_fingerprint": cfg_fp}

    if role == "score":
        model, log = train.train_score_model(
            train_records, chain.n_keypoints, schedule, cfg.networks, cfg.training, cfg.seed,
            conditions=conditions,
        )
        diffusion.save_score_model(out_path, model, extra=extra)
    elif role == "angles":
        params, log = train.train_regressor(train_records, chain, cfg.networks, cfg.training, cfg.seed)
        net.save_params(out_path, params, role="angles", extra=extra)
        val = split_records(records, "val")
        if val:
            preds = np.stack(
                [posefit.regress_angles(params, r.x_cam.points, chain) for r in val]
            )
            targets = np.stack([r.angles for r in val])
            mae = np.abs(preds - targets).mean(axis=0)
            log_payload["val_mae_per_joint"] = [round(float(v), 5) for v in mae]
    else:
        params, log = train.train_baseline(
            train_records, chain.n_keypoints, cfg.networks, cfg.training, cfg.seed,
            conditions=conditions,
        )
        net.save_params(out_path, params, role="baseline", extra=extra)

    log_payload.update(
        {
            "epoch_losses": [round(v, 6) for v in log.epoch_losses],
            "epoch_medians": [round(v, 6) for v in log.epoch_medians],
            "steps": log.steps,
        }
    )
    log_path = Path(str(out_path) + ".log.json")
    with open(log_path, "w") as f:
        json.dump(log_payload, f, sort_keys=True, indent=1)
    click.echo(f"trained {role} -> {out_path} (log {log_path})")


@main.command("eval")
@click.option("--data", "data_path", required=True, help="Dataset file to evaluate on.")
@click.option("--weights", "weights_path", default=None, show_default="none", help="Score-network weight file (diffusion lifter).")
@click.option("--regressor", "regressor_path", default=None, show_default="none", help="Angle-regressor weight file.")
@click.option("--baseline", "baseline_path", default=None, show_default="none", help="Baseline-lifter weight file.")
@click.option("--mode", type=click.Choice(["single-frame", "online"]), default="single-frame", show_default=True, help="Frame handling; online warm-starts from the last frame.")
@click.option("--angles", type=click.Choice(["estimated", "ground-truth"]), default="estimated", show_default=True, help="Joint angles source (ground-truth bypasses the regressor).")
@click.option("--lifter", type=click.Choice(["diffusion", "baseline", "oracle"]), default="diffusion", show_default=True, help="3D lifting method (oracle injects ground truth).")
@click.option("--conditions", type=click.Choice(["noisy", "clean"]), default="noisy", show_default=True, help="Condition on noisy or clean detections.")
@click.option("--split", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True, help="Dataset split to evaluate.")
@click.option("--max-frames", default=0, show_default=True, help="Cap on evaluated frames (0 = all).")
@click.option("--k", "num_candidates", default=None, type=int, show_default="sampler default", help="Number of averaged candidates K.")
@click.option("--steps", default=None, type=int, show_default="sampler default", help="DDIM step count.")
@click.option("--sampler-kind", type=click.Choice(["ddim", "ode"]), default=None, show_default="config", help="Sampler family.")
@click.option("--seed", default=0, show_default=True, help="Evaluation seed.")
@click.option("--out", default="report.json", show_default=True, help="Report output path.")
@click.option("--force", is_flag=True, help="Proceed despite config-fingerprint mismatches.")
@click.option("--config", "config_path", default=None, show_default="none", help="YAML config file (overrides flags).")
def cmd_eval(data_path, weights_path, regressor_path, baseline_path, mode, angles, lifter,
             conditions, split, max_frames, num_candidates, steps, sampler_kind, seed, out,
             force, config_path):
    """Evaluate the pipeline and write an ADD/AUC report."""
    overrides: dict = {
        "seed": seed,
        "eval": {
            "mode": mode,
            "angles": angles,
            "lifter": lifter,
            "conditions": conditions,
            "split": split,
            "max_frames": max_frames,
        },
    }
    sampler_overrides = {}
    if num_candidates is not None:
        sampler_overrides["num_candidates"] = num_candidates
    if steps is not None:
        sampler_overrides["num_steps"] = steps
    if sampler_kind is not None:
        sampler_overrides["kind"] = sampler_kind
    if sampler_overrides:
        overrides["sampler"] = sampler_overrides
    cfg = _load_cfg(config_path, overrides)

    records, header = read_dataset(_resolve(data_path))
    chain = load_chain(header["chain_document"])
    data_fp = header.get("extra", {}).get("config_fingerprint", "")

    def check_weights(extra, what):
        if extra.get("chain_hash") and extra["chain_hash"] != header["chain_hash"]:
            raise click.ClickException(f"{what}: chain hash does not match the dataset")
        mismatch = extra.get("data_fingerprint") and data_fp and extra["data_fingerprint"] != data_fp
        if mismatch and not force:
            raise click.ClickException(
                f"{what}: config fingerprint mismatch with the dataset (use --force to override)"
            )

    score_model = None
    if cfg.eval.lifter == "diffusion":
        if not weights_path:
            raise click.ClickException("--weights is required for the diffusion lifter")
        score_model, extra = diffusion.load_score_model(_resolve(weights_path))
        check_weights(extra, "score weights")
    baseline_params = None
    if cfg.eval.lifter == "baseline":
        if not baseline_path:
            raise click.ClickException("--baseline is required for the baseline lifter")
        baseline_params, _, extra = net.load_params(_resolve(baseline_path))
        check_weights(extra, "baseline weights")
    regressor_params = None
    if cfg.eval.angles == "estimated":
        if not regressor_path:
            raise click.ClickException("--regressor is required for estimated angles")
        regressor_params, role, extra = net.load_params(_resolve(regressor_path))
        if role != "angles":
            raise click.ClickException(f"--regressor file has role {role!r}, expected 'angles'")
        check_weights(extra, "regressor weights")

    pipe = Pipeline(
        chain=chain,
        schedule=train.schedule_from_config(cfg.schedule),
        sampler=cfg.sampler,
        fit=fit_config_from_settings(cfg.fit),
        score_model=score_model,
        regressor=regressor_params,
        baseline=baseline_params,
        baseline_condition_mode=cfg.networks.condition_mode,
        baseline_pixel_scale=cfg.networks.pixel_condition_scale,
    )
    report = evaluate(
        pipe, split_records(records, cfg.eval.split), cfg.eval, cfg.seed,
        config_fingerprint=fingerprint(cfg), chain_hash=header["chain_hash"],
    )
    out_path = _resolve(out)
    save_report(report, out_path)
    click.echo(report_table(report))
    click.echo(f"report written to {out_path}")


@main.command("ablate")
@click.option("--suite", type=click.Choice(list(ablate_mod.SUITES)), required=True, help="Which ablation suite to run.")
@click.option("--workdir", default="ablation", show_default=True, help="Working directory for datasets/weights/reports.")
@click.option("--auto-train", is_flag=True, help="Generate data and train missing weights on demand.")
@click.option("--seed", default=0, show_default=True, help="Master seed.")
@click.option("--count", default=None, type=int, show_default="data default", help="Override dataset record count.")
@click.option("--max-frames", default=0, show_default=True, help="Cap evaluated frames per row (0 = all).")
@click.option("--k", "candidates", default=None, type=int, show_default="sampler default", help="Candidate count for evaluation rows.")
@click.option("--config", "config_path", default=None, show_default="none", help="YAML config file (overrides flags).")
def cmd_ablate(suite, workdir, auto_train, seed, count, max_frames, candidates, config_path):
    """Run an ablation suite and print its side-by-side table."""
    overrides: dict = {"seed": seed, "eval": {"max_frames": max_frames}}
    data_overrides = {"seed": seed}
    if count is not None:
        data_overrides["count"] = count
    overrides["data"] = data_overrides
    if candidates is not None:
        overrides["sampler"] = {"num_candidates": candidates}
    cfg = _load_cfg(config_path, overrides)
    summary = ablate_mod.run_suite(suite, cfg, _resolve(workdir), auto_train=auto_train)
    click.echo(ablate_mod.render_summary(summary))


@main.group("config")
def cmd_config():
    """Configuration utilities."""


@cmd_config.command("dump")
def cmd_config_dump():
    """Print the fully materialized default configuration as YAML."""
    click.echo(config_mod.dump_yaml(RunConfig()), nl=False)


@main.command("compare")
@click.argument("report_a")
@click.argument("report_b")
@click.option("--tol-auc", default=0.0, show_default=True, help="Allowed AUC difference in points.")
@click.option("--tol-add", default=0.0, show_default=True, help="Allowed ADD difference in meters.")
def cmd_compare(report_a, report_b, tol_auc, tol_add):
    """Diff two evaluation reports within tolerances; exit 1 on differences."""
    a = load_report(_resolve(report_a))
    b = load_report(_resolve(report_b))
    diffs = compare_reports(a, b, tol_auc=tol_auc, tol_add=tol_add)
    if diffs:
        for d in diffs:
            click.echo(d)
        raise SystemExit(1)
    click.echo("reports match within tolerances")


if __name__ == "__main__":
    main()
