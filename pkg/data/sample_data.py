#!/usr/bin/env python3
"""
Synthetic CT Data Generator for infection segmentation.
This script generates small lung-like CT volumes with geometric "infection"
regions, writes them as NIfTI files and lists them in a manifest.
"""

import os

import numpy as np
import pandas as pd

from data.volumes import CtVolume, save_volume

LUNG_HU = -850.0
INFECTION_HU = -300.0
NOISE_HU = 40.0


def _shape_mask(size, rng):
    """One random circle, ellipse or rectangle as a boolean mask."""
    rows, cols = np.mgrid[0:size, 0:size]
    kind = rng.choice(["circle", "ellipse", "rectangle"])
    cy, cx = rng.integers(size // 4, 3 * size // 4, size=2)
    if kind == "circle":
        r = rng.integers(size // 10, size // 5)
        return (rows - cy) ** 2 + (cols - cx) ** 2 <= r**2
    if kind == "ellipse":
        a, b = rng.integers(size // 12, size // 5, size=2)
        return ((rows - cy) / a) ** 2 + ((cols - cx) / b) ** 2 <= 1.0
    h, w = rng.integers(size // 8, size // 4, size=2)
    return (np.abs(rows - cy) <= h // 2) & (np.abs(cols - cx) <= w // 2)


def generate_slice(size, rng, n_shapes=2, empty=False):
    """
    Generate one slice in Hounsfield-like units.

    Args:
        size (int): Edge length of the square slice
        rng (numpy.random.Generator): Random generator
        n_shapes (int): Number of infection regions
        empty (bool): Produce a slice without infection

    Returns:
        tuple: (image, mask) arrays of shape (size, size)
    """
    mask = np.zeros((size, size), dtype=bool)
    if not empty:
        for _ in range(n_shapes):
            mask |= _shape_mask(size, rng)
    image = np.full((size, size), LUNG_HU) + rng.normal(0, NOISE_HU, (size, size))
    image[mask] = INFECTION_HU + rng.normal(0, NOISE_HU, int(mask.sum()))
    return image.astype(np.float32), mask.astype(np.uint8)


def generate_volume(volume_id, n_slices=4, size=64, seed=42, empty_fraction=0.0):
    """Generate a CtVolume (HU intensities) with a reproducible seed."""
    rng = np.random.default_rng(seed)
    images, masks = [], []
    for _ in range(n_slices):
        image, mask = generate_slice(size, rng, empty=rng.random() < empty_fraction)
        images.append(image)
        masks.append(mask)
    return CtVolume(voxels=np.stack(images), mask=np.stack(masks), volume_id=volume_id, affine=np.eye(4))


def write_synthetic_dataset(out_dir, n_volumes=10, n_slices=4, size=64, seed=42, empty_fraction=0.25):
    """
    Write NIfTI volumes plus ``manifest.csv`` and return the manifest path.

    Args:
        out_dir (str): Target directory
        n_volumes (int): Number of volumes to generate
        n_slices (int): Slices per volume
        size (int): Slice edge length (must be divisible by 16 for training)
        seed (int): Base random seed
        empty_fraction (float): Probability of an infection-free slice
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i in range(n_volumes):
        volume_id = f"vol_{i:03d}"
        volume = generate_volume(volume_id, n_slices, size, seed + i, empty_fraction)
        image_path = f"{volume_id}.nii.gz"
        mask_path = f"{volume_id}_mask.nii.gz"
        save_volume(volume.voxels, os.path.join(out_dir, image_path))
        save_volume(volume.mask, os.path.join(out_dir, mask_path))
        rows.append({"image_path": image_path, "mask_path": mask_path, "volume_id": volume_id})
    manifest_path = os.path.join(out_dir, "manifest.csv")
    pd.DataFrame(rows, columns=["image_path", "mask_path", "volume_id"]).to_csv(manifest_path, index=False)
    return manifest_path


def main():
    """Main function to generate and save a synthetic dataset."""
    print("Synthetic CT infection dataset generator")
    print("=" * 60)
    out_dir = os.environ.get("DECORNET_SYNTHETIC_DIR", "data/synthetic")
    manifest = write_synthetic_dataset(out_dir)
    frame = pd.read_csv(manifest)
    print(f"Generated {len(frame)} volumes in {out_dir}")
    print(f"Manifest written to {manifest}")


if __name__ == "__main__":
    main()
