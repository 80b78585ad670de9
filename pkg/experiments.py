"""
Channel-allocation sweep: every channel config is trained with and without
the decorrelation penalty (or against any set of penalties) and scored on
the held-out split, producing one comparison table.
"""

import logging
import os
from dataclasses import dataclass

import pandas as pd
from joblib import Parallel, delayed

from config import RunConfig, from_dict
from models.decor_core import PENALTIES
from models.network import count_parameters
from models.segmenter import InfectionSegmenter, train
from utils.exceptions import ConfigError
from utils.metrics import METRIC_NAMES

logger = logging.getLogger(__name__)

SWEEP_TABLE = "sweep.csv"
DEFAULT_PENALTIES = ("none", "decor")


@dataclass
class SweepTrial:
    name: str
    channels: tuple
    penalty: str
    config: RunConfig


def parse_channels(text):
    try:
        channels = tuple(int(c) for c in text.replace("-", ",").split(",") if c.strip())
    except ValueError:
        raise ConfigError(f"channel config '{text}' must be comma-separated integers")
    return channels


def build_trials(base_config, channel_configs, penalties=DEFAULT_PENALTIES):
    """Validate the whole grid up front; any bad entry aborts before training."""
    channel_configs = [tuple(c) for c in channel_configs]
    if len(channel_configs) < 2:
        raise ConfigError("a sweep needs at least two channel configs")
    unknown = [p for p in penalties if p not in PENALTIES]
    if unknown:
        raise ConfigError(f"unknown penalties {unknown}; choose from {list(PENALTIES)}")
    trials = []
    for index, channels in enumerate(channel_configs):
        for penalty in penalties:
            data = base_config.to_dict()
            data["model"]["channels"] = list(channels)
            data["loss"]["penalty"] = penalty
            try:
                config = from_dict(data)
            except ConfigError as e:
                raise ConfigError(f"sweep entry {channels} / {penalty}: {e}")
            name = f"{index:02d}_{'-'.join(map(str, channels))}_{penalty}"
            trials.append(SweepTrial(name=name, channels=channels, penalty=penalty, config=config))
    return trials


def run_trial(trial, dataset, out_dir=None):
    run_dir = os.path.join(out_dir, trial.name) if out_dir else None
    logger.info("Sweep trial %s", trial.name)
    result = train(trial.config, dataset, run_dir)
    segmenter = InfectionSegmenter.from_checkpoint(result.best)
    report = segmenter.evaluate(dataset.test or dataset.val)
    row = {
        "config": "-".join(map(str, trial.channels)),
        "decor": trial.penalty == "decor",
        "penalty": trial.penalty,
        "parameters": count_parameters(segmenter.network),
        "best_epoch": result.best.epoch,
    }
    row.update({name: report.mean[name] for name in METRIC_NAMES})
    return row


def run_sweep(base_config, channel_configs, dataset, out_dir=None, penalties=DEFAULT_PENALTIES, n_jobs=1):
    """
    Train the grid and return the comparison table.

    Args:
        base_config (RunConfig): Shared settings for every trial
        channel_configs (list): Channel tuples to compare
        dataset (SegmentationDataset): Train/val/test volumes
        out_dir (str): Optional directory; each trial gets its own run directory
        penalties (tuple): Regularizers crossed with each channel config
        n_jobs (int): Trials trained concurrently (1 = sequential)
    """
    trials = build_trials(base_config, channel_configs, penalties)
    logger.info("Running %d sweep trials (n_jobs=%d)", len(trials), n_jobs)
    rows = Parallel(n_jobs=n_jobs)(delayed(run_trial)(t, dataset, out_dir) for t in trials)
    table = pd.DataFrame(rows, columns=["config", "decor", "penalty", *METRIC_NAMES, "parameters", "best_epoch"])
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        table.to_csv(os.path.join(out_dir, SWEEP_TABLE), index=False)
    return table
