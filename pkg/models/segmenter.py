"""
Training engine for the infection segmentation network.

``InfectionSegmenter`` owns one network and knows how to train it (epoch
loop with the combined objective, the plateau schedule and best-epoch
selection on validation Dice), evaluate it on volumes, predict masks, probe
the channel probability maps of an encoder layer and round-trip itself
through joblib checkpoints.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass, field

import joblib
import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed
from torch.utils.data import DataLoader
from tqdm import tqdm

from config import Config, RunConfig, config_hash, from_dict
from data.volumes import SliceDataset
from models.decor_core import combined_loss, decor_loss_per_sample
from models.network import NUM_LEVELS, NetworkSpec, build_network
from models.scheduler import PlateauScheduler
from utils.exceptions import CheckpointError, ConfigError, DataError, NumericalError
from utils.helpers import set_global_seed
from utils.metrics import METRIC_NAMES, VolumeMetrics, aggregate, confusion_counts

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "decornet-checkpoint"
CHECKPOINT_KEYS = ("network_spec", "state", "epoch", "val_metrics", "scheduler_state", "config", "config_hash")

# side lengths must survive four stride-2 encoder units
SLICE_MULTIPLE = 2 ** (NUM_LEVELS - 1)


def check_slice_size(shape, source):
    """Reject slice stacks whose in-plane size the network cannot halve four times."""
    height, width = shape[-2:]
    if height % SLICE_MULTIPLE or width % SLICE_MULTIPLE:
        raise DataError(
            "shape_mismatch",
            f"{source}: slices are {height}x{width}, both sides must be multiples of {SLICE_MULTIPLE}",
        )


@dataclass
class Checkpoint:
    network_spec: dict
    state: dict = field(repr=False)
    epoch: int
    val_metrics: dict
    scheduler_state: dict
    config: dict
    config_hash: str

    def save(self, path):
        payload = asdict(self)
        payload["format"] = CHECKPOINT_FORMAT
        joblib.dump(payload, path)
        return path


def load_checkpoint(path):
    try:
        payload = joblib.load(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a segmentation checkpoint")
    missing = [k for k in CHECKPOINT_KEYS if k not in payload]
    if missing:
        raise CheckpointError(f"checkpoint {path} lacks {missing}")
    return Checkpoint(**{k: payload[k] for k in CHECKPOINT_KEYS})


@dataclass
class TrainingResult:
    best: Checkpoint
    last: Checkpoint
    log: pd.DataFrame


@dataclass
class ProbeResult:
    layer: int
    matrix: np.ndarray
    n_slices: int

    @property
    def mean_diagonal_mass(self):
        return float(np.trace(self.matrix) / self.matrix.shape[0])

    def to_frame(self):
        names = [f"ch{i}" for i in range(self.matrix.shape[0])]
        return pd.DataFrame(self.matrix, index=names, columns=names)


def _device():
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


class InfectionSegmenter:
    def __init__(self, config=None, device=None):
        self.config = config or RunConfig()
        self.device = device or _device()
        self.network = build_network(self.config.model.network_spec()).to(self.device)

    # ------------------------------------------------------------------
    # checkpoints

    @classmethod
    def from_checkpoint(cls, checkpoint, device=None):
        if isinstance(checkpoint, str):
            checkpoint = load_checkpoint(checkpoint)
        try:
            config = from_dict(checkpoint.config)
            spec = NetworkSpec.from_dict(checkpoint.network_spec)
        except (ConfigError, KeyError, ValueError) as e:
            raise CheckpointError(f"checkpoint holds an invalid configuration: {e}")
        segmenter = cls.__new__(cls)
        segmenter.config = config
        segmenter.device = device or _device()
        segmenter.network = build_network(spec)
        try:
            segmenter.network.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in checkpoint.state.items()})
        except RuntimeError as e:
            raise CheckpointError(f"checkpoint weights do not match its network spec: {e}")
        segmenter.network.to(segmenter.device).eval()
        return segmenter

    def checkpoint(self, epoch, val_metrics=None, scheduler_state=None):
        state = {k: v.detach().cpu().numpy().copy() for k, v in self.network.state_dict().items()}
        return Checkpoint(
            network_spec=self.network.spec.to_dict(),
            state=state,
            epoch=epoch,
            val_metrics=dict(val_metrics or {}),
            scheduler_state=dict(scheduler_state or {}),
            config=self.config.to_dict(),
            config_hash=config_hash(self.config),
        )

    # ------------------------------------------------------------------
    # training

    def _make_optimizer(self):
        t = self.config.train
        logger.info("Using %s optimizer, lr0=%g", t.optimizer.upper(), t.lr0)
        if t.optimizer == "sgd":
            return torch.optim.SGD(self.network.parameters(), lr=t.lr0, momentum=t.momentum)
        return torch.optim.Adam(self.network.parameters(), lr=t.lr0)

    def train_step(self, images, masks, optimizer, kernels=None):
        """One optimization step; returns the loss breakdown."""
        logits, taps = self.network.forward_with_taps(images)
        parts = combined_loss(logits, masks, taps, self.config.loss, kernels)
        if not torch.isfinite(parts.total):
            raise NumericalError(
                f"non-finite loss (ce={parts.ce}, dice={parts.dice}, decor={parts.decor})"
            )
        optimizer.zero_grad()
        parts.total.backward()
        optimizer.step()
        return parts

    def train(self, dataset, run_dir=None):
        cfg = self.config
        t = cfg.train
        set_global_seed(t.seed, t.deterministic)
        self.network = build_network(cfg.model.network_spec()).to(self.device)

        slices = dataset.train_slices(cfg.data.drop_empty_slices)
        if not slices:
            raise DataError("empty_dataset", "training split has no slices")
        if not dataset.val:
            raise DataError("empty_dataset", "validation split is empty")
        for volume in list(dataset.train) + list(dataset.val):
            check_slice_size(volume.voxels.shape, volume.volume_id)

        policy = cfg.augment if cfg.augment.enabled else None
        slice_data = SliceDataset(slices, policy, seed=t.seed)
        loader = DataLoader(
            slice_data,
            batch_size=t.batch_size,
            shuffle=True,
            num_workers=t.num_workers,
            generator=torch.Generator().manual_seed(t.seed),
        )
        optimizer = self._make_optimizer()
        scheduler = PlateauScheduler(optimizer, t.lr0, t.plateau_patience, t.plateau_min_delta, t.lr_factor)
        kernels = self.network.encoder_kernels() if cfg.loss.penalty == "ortho" else None
        lam = cfg.loss.penalty_weight

        rows = []
        best = None
        best_dice = -math.inf
        iteration = 0
        exhausted = False
        val_metrics = {}
        for epoch in range(t.epochs):
            slice_data.set_epoch(epoch)
            self.network.train()
            totals = {"ce": 0.0, "dice": 0.0, "decor": 0.0}
            layer_totals = np.zeros(NUM_LEVELS)
            n_batches = 0
            for images, masks in loader:
                parts = self.train_step(images.to(self.device), masks.to(self.device), optimizer, kernels)
                totals["ce"] += parts.ce
                totals["dice"] += parts.dice
                totals["decor"] += parts.decor
                if len(parts.layer_losses) == NUM_LEVELS:
                    layer_totals += np.asarray(parts.layer_losses)
                n_batches += 1
                iteration += 1
                if t.max_iterations and iteration >= t.max_iterations:
                    exhausted = True
                    break

            means = {k: v / n_batches for k, v in totals.items()}
            epoch_loss = (
                cfg.loss.weight_ce * means["ce"] + cfg.loss.weight_dice * means["dice"] + lam * means["decor"]
            )
            lr = scheduler.state.current_lr
            scheduler.step(epoch_loss)

            row = {
                "epoch": epoch,
                "iteration": iteration,
                "lr": lr,
                "loss_total": epoch_loss,
                "loss_ce": means["ce"],
                "loss_dice": means["dice"],
                "loss_decor": means["decor"],
            }
            for level in range(NUM_LEVELS):
                row[f"decor_layer{level + 1}"] = layer_totals[level] / n_batches
            last_epoch = exhausted or epoch == t.epochs - 1
            if (epoch + 1) % t.val_every == 0 or last_epoch:
                val_metrics = self.evaluate(dataset.val).mean
                for name in METRIC_NAMES:
                    row[f"val_{name}"] = val_metrics[name]
                if val_metrics["dice"] > best_dice:
                    best_dice = val_metrics["dice"]
                    best = self.checkpoint(epoch, val_metrics, scheduler.state.to_dict())
                    logger.info("Epoch %d: new best validation Dice %.4f", epoch, best_dice)
            else:
                for name in METRIC_NAMES:
                    row[f"val_{name}"] = float("nan")
            rows.append(row)
            if exhausted:
                break

        last = self.checkpoint(rows[-1]["epoch"], val_metrics, scheduler.state.to_dict())
        log = pd.DataFrame(rows)
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            log.to_csv(os.path.join(run_dir, Config.TRAIN_LOG), index=False)
            best.save(os.path.join(run_dir, Config.BEST_CHECKPOINT))
            last.save(os.path.join(run_dir, Config.LAST_CHECKPOINT))
        return TrainingResult(best=best, last=last, log=log)

    # ------------------------------------------------------------------
    # inference

    @torch.no_grad()
    def predict_probabilities(self, images, batch_size=None):
        """Sigmoid probabilities for a (S, H, W) stack of windowed slices."""
        check_slice_size(images.shape, "input volume")
        self.network.eval()
        batch_size = batch_size or self.config.train.batch_size
        out = []
        for start in range(0, images.shape[0], batch_size):
            batch = torch.from_numpy(np.ascontiguousarray(images[start:start + batch_size], dtype=np.float32))
            logits = self.network(batch.unsqueeze(1).to(self.device))
            out.append(torch.sigmoid(logits)[:, 0].cpu().numpy())
        return np.concatenate(out, axis=0)

    def predict_volume(self, volume, threshold=Config.THRESHOLD):
        """Binary (S, H, W) mask for a windowed CtVolume or voxel array."""
        voxels = getattr(volume, "voxels", volume)
        return (self.predict_probabilities(voxels) > threshold).astype(np.uint8)

    def _score_volume(self, volume, threshold):
        pred = self.predict_volume(volume, threshold)
        slice_counts = tuple(confusion_counts(p, g) for p, g in zip(pred, volume.mask))
        total = slice_counts[0]
        for counts in slice_counts[1:]:
            total = total + counts
        return VolumeMetrics(volume_id=volume.volume_id, counts=total, slice_counts=slice_counts)

    def evaluate(self, volumes, threshold=Config.THRESHOLD, n_jobs=1, progress=False):
        if not volumes:
            raise DataError("missing_volume", "no volumes to evaluate")
        iterator = tqdm(volumes, desc="Evaluating", disable=not progress)
        results = Parallel(n_jobs=n_jobs, prefer="threads")(
            delayed(self._score_volume)(v, threshold) for v in iterator
        )
        return aggregate(results)

    @torch.no_grad()
    def probe_correlation(self, volumes, layer=Config.PROBE_LAYER):
        """Average the probability map of encoder ``layer`` (1-based) over all slices."""
        if not 1 <= layer <= NUM_LEVELS:
            raise ConfigError(f"layer must be between 1 and {NUM_LEVELS}, got {layer}")
        self.network.eval()
        eps = self.config.loss.epsilon
        total = None
        count = 0
        batch_size = self.config.train.batch_size
        for volume in volumes:
            check_slice_size(volume.voxels.shape, volume.volume_id)
            for start in range(0, volume.num_slices, batch_size):
                batch = torch.from_numpy(np.ascontiguousarray(volume.voxels[start:start + batch_size], dtype=np.float32))
                _, taps = self.network.forward_with_taps(batch.unsqueeze(1).to(self.device))
                _, prob = decor_loss_per_sample(taps[layer - 1].double(), eps, "autograd")
                summed = prob.sum(dim=0).cpu().numpy()
                total = summed if total is None else total + summed
                count += prob.shape[0]
        if not count:
            raise DataError("missing_volume", "no slices to probe")
        return ProbeResult(layer=layer, matrix=total / count, n_slices=count)


def train(config, dataset, run_dir=None):
    """Train a network for ``config``; returns the best/last checkpoints and the epoch log."""
    return InfectionSegmenter(config).train(dataset, run_dir)


def evaluate(checkpoint, volumes, threshold=Config.THRESHOLD, n_jobs=1):
    return InfectionSegmenter.from_checkpoint(checkpoint).evaluate(volumes, threshold, n_jobs)

