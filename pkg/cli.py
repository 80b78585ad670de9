#!/usr/bin/env python3
"""
Command line for training, evaluating, predicting, probing channel
correlation and sweeping channel allocations.

    python cli.py train --config base.json --set loss.lambda_decor=0.01 --out runs/decor
    python cli.py eval --checkpoint runs/decor/best.ckpt --split test
    python cli.py predict --checkpoint runs/decor/best.ckpt --volume scan.nii.gz --out mask.nii.gz
    python cli.py probe --checkpoint runs/decor/best.ckpt --layer 2
    python cli.py sweep --config base.json --channels 32,64,128,256,512 --channels 248,248,112,112,112
"""

import functools
import logging
import os

import click

from config import Config, config_hash, load_config, save_config
from data.volumes import (
    build_dataset,
    load_image,
    load_volumes,
    normalize_intensity,
    read_manifest,
    read_split,
    save_volume,
    split_dataset,
    write_split,
)
from experiments import DEFAULT_PENALTIES, build_trials, parse_channels, run_sweep
from models.segmenter import InfectionSegmenter, load_checkpoint
from utils.exceptions import DataError, DecorNetError
from utils.helpers import RunManifest, format_score, write_json
from utils.metrics import METRIC_NAMES

logger = logging.getLogger(__name__)

SPLIT_FILE = "split.txt"


def handle_errors(command):
    """Map library errors to exit codes and close the run manifest."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            result = command(*args, **kwargs)
        except DecorNetError as e:
            manifest = ctx.meta.get("manifest")
            if manifest is not None:
                manifest.finish(f"failed ({type(e).__name__})")
            click.echo(f"❌ {e}", err=True)
            ctx.exit(e.exit_code)
        manifest = ctx.meta.get("manifest")
        if manifest is not None:
            manifest.finish("success")
        return result

    return wrapper


def start_run(command, out_dir, config_path, digest, filename="manifest.json"):
    manifest = RunManifest(
        command=command, config_path=config_path, config_hash=digest, output_dir=out_dir, filename=filename
    )
    manifest.write()
    click.get_current_context().meta["manifest"] = manifest
    return manifest


def _config_overrides(overrides, seed, deterministic=False):
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"train.seed={seed}")
    if deterministic:
        overrides.append("train.deterministic=true")
    return overrides


def _section_volumes(config, section, manifest_path=None, split_path=None):
    """Load one split section using the same split rule as training."""
    manifest_path = manifest_path or config.data.manifest
    if not manifest_path:
        raise DataError("bad_manifest", "no dataset manifest given (set data.manifest or --manifest)")
    manifest = read_manifest(manifest_path)
    split_path = split_path or config.data.split_file
    if split_path:
        split = read_split(split_path)
    else:
        split = split_dataset(list(manifest["volume_id"]), config.data.split_counts, config.train.seed)
    ids = split.ids(section)
    if not ids:
        raise DataError("missing_volume", f"split section '{section}' is empty")
    return load_volumes(manifest, ids, (config.data.window_low, config.data.window_high))


def _default_split_file(checkpoint_path):
    candidate = os.path.join(os.path.dirname(os.path.abspath(checkpoint_path)), SPLIT_FILE)
    return candidate if os.path.exists(candidate) else None


def _echo_scores(label, scores):
    click.echo(f"{label}: " + ", ".join(f"{name}={format_score(scores[name])}" for name in METRIC_NAMES))


config_option = click.option("--config", "config_path", type=click.Path(), default=None, help="JSON run config.")
set_option = click.option("--set", "overrides", multiple=True, help="Override as section.key=value.")
seed_option = click.option("--seed", type=int, default=None, help="Override train.seed.")
checkpoint_option = click.option("--checkpoint", required=True, type=click.Path(), help="Checkpoint archive.")
split_option = click.option("--split", "section", type=click.Choice(["train", "val", "test"]), default="test")
data_options = [
    click.option("--manifest", "manifest_path", type=click.Path(), default=None, help="Dataset manifest CSV."),
    click.option("--split-file", type=click.Path(), default=None, help="Split file with [train]/[val]/[test]."),
]


def with_data_options(command):
    for option in reversed(data_options):
        command = option(command)
    return command


@click.group()
@click.option("--log-level", default="INFO", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
def cli(log_level):
    """Infection segmentation with channel decorrelation."""
    logging.basicConfig(level=log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@set_option
@seed_option
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Run directory.")
@click.option("--deterministic", is_flag=True, help="Force deterministic kernels.")
@handle_errors
def train(config_path, overrides, seed, out_dir, deterministic):
    """Train a network and evaluate its best epoch on the test split."""
    config = load_config(config_path, _config_overrides(overrides, seed, deterministic))
    out_dir = out_dir or os.path.join(Config.RUNS_DIR, "train")
    start_run("train", out_dir, config_path, config_hash(config))
    save_config(config, os.path.join(out_dir, Config.CONFIG_SNAPSHOT))

    if not config.data.manifest:
        raise DataError("bad_manifest", "no dataset manifest configured (set data.manifest)")
    dataset, split = build_dataset(
        config.data.manifest,
        config.data.split_file,
        (config.data.window_low, config.data.window_high),
        config.train.seed,
        config.data.split_counts,
    )
    write_split(split, os.path.join(out_dir, SPLIT_FILE))
    click.echo(f"🔄 Training on {len(split.train)} volumes, validating on {len(split.val)}")

    segmenter = InfectionSegmenter(config)
    result = segmenter.train(dataset, out_dir)
    click.echo(f"✅ Best epoch {result.best.epoch}, validation dice {format_score(result.best.val_metrics['dice'])}")

    if dataset.test:
        report = InfectionSegmenter.from_checkpoint(result.best).evaluate(dataset.test)
        report.to_csv(os.path.join(out_dir, "metrics.csv"))
        report.to_json(os.path.join(out_dir, "metrics.json"))
        _echo_scores("📊 Test", report.mean)
    click.echo(f"📦 Run written to {out_dir}")


@cli.command(name="eval")
@checkpoint_option
@split_option
@with_data_options
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--threshold", type=float, default=Config.THRESHOLD, show_default=True)
@click.option("--n-jobs", type=int, default=1, show_default=True, help="Volumes scored in parallel.")
@handle_errors
def evaluate(checkpoint, section, manifest_path, split_file, out_dir, threshold, n_jobs):
    """Score a checkpoint on one split section."""
    ckpt = load_checkpoint(checkpoint)
    out_dir = out_dir or os.path.join(Config.RUNS_DIR, "eval")
    start_run("eval", out_dir, checkpoint, ckpt.config_hash)
    segmenter = InfectionSegmenter.from_checkpoint(ckpt)
    volumes = _section_volumes(
        segmenter.config, section, manifest_path, split_file or _default_split_file(checkpoint)
    )
    report = segmenter.evaluate(volumes, threshold, n_jobs=n_jobs, progress=True)
    report.to_csv(os.path.join(out_dir, f"metrics_{section}.csv"))
    report.to_json(os.path.join(out_dir, f"metrics_{section}.json"))
    _echo_scores(f"📊 {section} (mean of {len(volumes)} volumes)", report.mean)
    _echo_scores("📊 pooled", report.pooled)


@cli.command()
@checkpoint_option
@click.option("--volume", "volume_path", required=True, type=click.Path(), help="CT image (NIfTI).")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Mask file to write.")
@click.option("--threshold", type=float, default=Config.THRESHOLD, show_default=True)
@handle_errors
def predict(checkpoint, volume_path, out_path, threshold):
    """Write a binary infection mask for one CT volume."""
    ckpt = load_checkpoint(checkpoint)
    out_dir = os.path.dirname(os.path.abspath(out_path))
    start_run("predict", out_dir, checkpoint, ckpt.config_hash, f"{os.path.basename(out_path)}.manifest.json")
    segmenter = InfectionSegmenter.from_checkpoint(ckpt)
    voxels, affine = load_image(volume_path)
    data = segmenter.config.data
    mask = segmenter.predict_volume(normalize_intensity(voxels, data.window_low, data.window_high), threshold)
    save_volume(mask, out_path, affine)
    click.echo(f"✅ Mask with {int(mask.sum())} foreground voxels written to {out_path}")


@cli.command()
@checkpoint_option
@split_option
@with_data_options
@click.option("--layer", type=int, default=Config.PROBE_LAYER, show_default=True, help="Encoder unit (1-based).")
@click.option("--out", "out_dir", type=click.Path(), default=None)
@handle_errors
def probe(checkpoint, section, manifest_path, split_file, layer, out_dir):
    """Average the channel probability matrix of one encoder layer."""
    ckpt = load_checkpoint(checkpoint)
    out_dir = out_dir or os.path.join(Config.RUNS_DIR, "probe")
    start_run("probe", out_dir, checkpoint, ckpt.config_hash)
    segmenter = InfectionSegmenter.from_checkpoint(ckpt)
    volumes = _section_volumes(
        segmenter.config, section, manifest_path, split_file or _default_split_file(checkpoint)
    )
    result = segmenter.probe_correlation(volumes, layer)
    result.to_frame().to_csv(os.path.join(out_dir, f"probe_layer{layer}.csv"))
    write_json(
        {
            "layer": layer,
            "channels": int(result.matrix.shape[0]),
            "slices": result.n_slices,
            "mean_diagonal_mass": result.mean_diagonal_mass,
        },
        os.path.join(out_dir, f"probe_layer{layer}.json"),
    )
    click.echo(f"📊 Layer {layer}: mean diagonal mass {format_score(result.mean_diagonal_mass)}")


@cli.command()
@config_option
@set_option
@seed_option
@click.option("--channels", "channel_configs", multiple=True, required=True, help="Comma-separated channels.")
@click.option("--penalties", default=",".join(DEFAULT_PENALTIES), show_default=True)
@click.option("--out", "out_dir", type=click.Path(), default=None)
@click.option("--n-jobs", type=int, default=1, show_default=True, help="Trials trained in parallel.")
@handle_errors
def sweep(config_path, overrides, seed, channel_configs, penalties, out_dir, n_jobs):
    """Train every channel config with and without the decorrelation loss."""
    config = load_config(config_path, _config_overrides(overrides, seed))
    channels = [parse_channels(c) for c in channel_configs]
    penalty_list = tuple(p.strip() for p in penalties.split(",") if p.strip())
    # validates the full grid before anything is written
    build_trials(config, channels, penalty_list)
    out_dir = out_dir or os.path.join(Config.RUNS_DIR, "sweep")
    start_run("sweep", out_dir, config_path, config_hash(config))
    save_config(config, os.path.join(out_dir, Config.CONFIG_SNAPSHOT))
    if not config.data.manifest:
        raise DataError("bad_manifest", "no dataset manifest configured (set data.manifest)")
    dataset, split = build_dataset(
        config.data.manifest,
        config.data.split_file,
        (config.data.window_low, config.data.window_high),
        config.train.seed,
        config.data.split_counts,
    )
    write_split(split, os.path.join(out_dir, SPLIT_FILE))
    table = run_sweep(config, channels, dataset, out_dir, penalty_list, n_jobs)
    click.echo("📊 Channel sweep:")
    click.echo(table.to_string(index=False))


def main():
    cli()


if __name__ == "__main__":
    main()
