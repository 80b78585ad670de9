"""
CT volume ingestion, intensity windowing, volume-level splitting and the
torch dataset feeding training.

Volumes are stored as NIfTI files and listed in a manifest CSV with the
columns ``image_path, mask_path, volume_id``. Arrays are held slice-first,
(slices, rows, cols); NIfTI files store the slice axis last.
"""

import logging
import os
from dataclasses import dataclass, field

import nibabel as nib
import numpy as np
import pandas as pd
import torch
from sklearn.model_selection import train_test_split
from torch.utils.data import Dataset

from config import Config
from data.augment import augment
from utils.exceptions import DataError

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("image_path", "mask_path", "volume_id")
SPLIT_SECTIONS = ("train", "val", "test")


@dataclass
class CtVolume:
    voxels: np.ndarray
    mask: np.ndarray
    volume_id: str
    affine: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.voxels.shape != self.mask.shape:
            raise DataError(
                "shape_mismatch",
                f"volume {self.volume_id}: image {self.voxels.shape} vs mask {self.mask.shape}",
            )
        if self.voxels.ndim != 3:
            raise DataError("shape_mismatch", f"volume {self.volume_id} must be 3-D, got {self.voxels.shape}")

    @property
    def num_slices(self):
        return self.voxels.shape[0]


@dataclass
class SliceSample:
    image: np.ndarray
    mask: np.ndarray
    volume_id: str
    slice_index: int


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list

    def __post_init__(self):
        seen = {}
        for name in SPLIT_SECTIONS:
            for vid in getattr(self, name):
                if vid in seen:
                    raise DataError("bad_split", f"volume {vid} appears in both {seen[vid]} and {name}")
                seen[vid] = name

    def ids(self, section):
        if section not in SPLIT_SECTIONS:
            raise DataError("bad_split", f"unknown split section '{section}'")
        return list(getattr(self, section))


def _read_nifti(path):
    if not os.path.exists(path):
        return None
    try:
        image = nib.load(path)
        return np.asarray(image.dataobj, dtype=np.float32), image.affine
    except Exception as e:
        raise DataError("unreadable", f"cannot read {path}: {e}")


def load_volume(image_path, mask_path=None, volume_id=None):
    """Load an image/mask NIfTI pair as a slice-first CtVolume."""
    if mask_path is None:
        raise DataError("missing_mask", f"no mask given for {image_path}")
    loaded = _read_nifti(image_path)
    if loaded is None:
        raise DataError("unreadable", f"image file not found: {image_path}")
    voxels, affine = loaded
    loaded_mask = _read_nifti(mask_path)
    if loaded_mask is None:
        raise DataError("missing_mask", f"mask file not found: {mask_path}")
    mask, _ = loaded_mask
    if voxels.ndim != 3 or mask.ndim != 3:
        raise DataError("shape_mismatch", f"expected 3-D volumes, got {voxels.shape} and {mask.shape}")
    if volume_id is None:
        volume_id = os.path.basename(image_path).split(".")[0]
    return CtVolume(
        voxels=np.ascontiguousarray(np.moveaxis(voxels, -1, 0)),
        mask=np.ascontiguousarray(np.moveaxis(mask, -1, 0) > 0.5).astype(np.uint8),
        volume_id=str(volume_id),
        affine=affine,
    )


def load_image(image_path):
    """Slice-first voxels and affine of an image without a mask (for prediction)."""
    loaded = _read_nifti(image_path)
    if loaded is None:
        raise DataError("unreadable", f"image file not found: {image_path}")
    voxels, affine = loaded
    if voxels.ndim != 3:
        raise DataError("shape_mismatch", f"expected a 3-D volume, got {voxels.shape}")
    return np.ascontiguousarray(np.moveaxis(voxels, -1, 0)), affine


def save_volume(array, path, affine=None):
    """Write a slice-first array as NIfTI (slice axis last on disk)."""
    affine = np.eye(4) if affine is None else affine
    nib.save(nib.Nifti1Image(np.ascontiguousarray(np.moveaxis(array, 0, -1)), affine), path)


def normalize_intensity(volume, window_low=Config.WINDOW_LOW, window_high=Config.WINDOW_HIGH):
    """Clip to [low, high] then scale to [0, 1]. Accepts arrays or CtVolumes."""
    if not window_low < window_high:
        raise ValueError(f"degenerate intensity window ({window_low}, {window_high})")
    if isinstance(volume, CtVolume):
        return CtVolume(
            voxels=normalize_intensity(volume.voxels, window_low, window_high),
            mask=volume.mask,
            volume_id=volume.volume_id,
            affine=volume.affine,
        )
    clipped = np.clip(np.asarray(volume, dtype=np.float32), window_low, window_high)
    return ((clipped - window_low) / (window_high - window_low)).astype(np.float32)


def slice_volume(volume, drop_empty=False):
    """Split a (normalized) volume into SliceSamples."""
    samples = []
    for index in range(volume.num_slices):
        mask = volume.mask[index].astype(np.float32)
        if drop_empty and not mask.any():
            continue
        samples.append(SliceSample(volume.voxels[index].astype(np.float32), mask, volume.volume_id, index))
    return samples


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_sizes(n, counts=Config.SPLIT_COUNTS):
    if n == sum(counts):
        return tuple(counts)
    total = float(sum(counts))
    val = max(1, _round_half_up(n * counts[1] / total))
    test = max(1, _round_half_up(n * counts[2] / total))
    train = n - val - test
    if train < 1:
        raise DataError("too_few_volumes", f"{n} volumes cannot be split into train/val/test")
    return train, val, test


def split_dataset(volume_ids, counts=Config.SPLIT_COUNTS, seed=0):
    """Seeded volume-level split; exact counts when the corpus matches them, proportional otherwise."""
    ids = sorted(set(str(v) for v in volume_ids))
    if len(ids) != len(volume_ids):
        raise DataError("bad_manifest", "duplicate volume ids")
    if len(ids) < 3:
        raise DataError("too_few_volumes", f"need at least 3 volumes, got {len(ids)}")
    n_train, n_val, n_test = split_sizes(len(ids), counts)
    rest, test = train_test_split(ids, test_size=n_test, random_state=seed)
    train, val = train_test_split(rest, test_size=n_val, random_state=seed)
    logger.info("Split %d volumes into %d/%d/%d", len(ids), n_train, n_val, n_test)
    return DatasetSplit(train=sorted(train), val=sorted(val), test=sorted(test))


def write_split(split, path):
    with open(path, "w") as f:
        for name in SPLIT_SECTIONS:
            f.write(f"[{name}]\n")
            for vid in getattr(split, name):
                f.write(f"{vid}\n")


def read_split(path):
    if not os.path.exists(path):
        raise DataError("bad_split", f"split file not found: {path}")
    sections = {name: [] for name in SPLIT_SECTIONS}
    current = None
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                current = line[1:-1].strip().lower()
                if current not in sections:
                    raise DataError("bad_split", f"unknown section [{current}] in {path}")
                continue
            if current is None:
                raise DataError("bad_split", f"volume id before any section in {path}")
            sections[current].append(line)
    return DatasetSplit(**sections)


def read_manifest(path):
    """Manifest CSV as a DataFrame; relative paths resolve against the manifest's folder."""
    if not path or not os.path.exists(path):
        raise DataError("bad_manifest", f"dataset manifest not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except Exception as e:
        raise DataError("bad_manifest", f"cannot parse manifest {path}: {e}")
    missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
    if missing:
        raise DataError("bad_manifest", f"manifest {path} lacks columns {missing}")
    if frame["volume_id"].duplicated().any():
        raise DataError("bad_manifest", f"duplicate volume ids in {path}")
    root = os.path.dirname(os.path.abspath(path))
    for column in ("image_path", "mask_path"):
        frame[column] = [p if os.path.isabs(p) else os.path.join(root, p) for p in frame[column]]
    return frame


def load_volumes(manifest, volume_ids, window=(Config.WINDOW_LOW, Config.WINDOW_HIGH)):
    """Load and window the listed volumes, in the given order."""
    indexed = manifest.set_index("volume_id")
    missing = [vid for vid in volume_ids if vid not in indexed.index]
    if missing:
        raise DataError("missing_volume", f"volumes not in manifest: {missing}")
    volumes = []
    for vid in volume_ids:
        row = indexed.loc[vid]
        volume = load_volume(row["image_path"], row["mask_path"], vid)
        volumes.append(normalize_intensity(volume, *window))
    return volumes


@dataclass
class SegmentationDataset:
    """Windowed volumes for each split section."""

    train: list
    val: list
    test: list = field(default_factory=list)

    def train_slices(self, drop_empty=False):
        return [s for v in self.train for s in slice_volume(v, drop_empty)]


def build_dataset(manifest_path, split_path=None, window=(Config.WINDOW_LOW, Config.WINDOW_HIGH),
                  seed=0, counts=Config.SPLIT_COUNTS):
    manifest = read_manifest(manifest_path)
    if split_path:
        split = read_split(split_path)
    else:
        split = split_dataset(list(manifest["volume_id"]), counts, seed)
    return SegmentationDataset(
        train=load_volumes(manifest, split.train, window),
        val=load_volumes(manifest, split.val, window),
        test=load_volumes(manifest, split.test, window),
    ), split


class SliceDataset(Dataset):
    """Torch view over SliceSamples, augmenting on access when a policy is set."""

    def __init__(self, samples, policy=None, seed=0):
        self.samples = list(samples)
        self.policy = policy
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch):
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        sample = self.samples[idx]
        if self.policy is not None:
            sample = augment(sample, self.policy, epoch=self.epoch, seed=self.seed)
        image = torch.from_numpy(np.ascontiguousarray(sample.image, dtype=np.float32)).unsqueeze(0)
        mask = torch.from_numpy(np.ascontiguousarray(sample.mask, dtype=np.float32)).unsqueeze(0)
        return image, mask
