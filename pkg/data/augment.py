"""
Training-time augmentation of 2-D CT slices.

Geometric transforms (rotation, scaling, elastic deformation, mirroring) are
applied identically to image and mask; intensity transforms (gamma, shift)
touch only the image. Masks are interpolated linearly and re-binarized at 0.5.
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from utils.helpers import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class AugmentationPolicy:
    rotation_range: tuple = (-15.0, 15.0)
    scale_range: tuple = (0.9, 1.1)
    elastic_alpha: float = 100.0
    elastic_sigma: float = 10.0
    gamma_range: tuple = (0.8, 1.2)
    mirror_axes: tuple = (0, 1)
    mirror_probability: float = 0.5
    intensity_shift: float = 0.1
    probability: float = 0.5
    enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        self.rotation_range = tuple(float(v) for v in self.rotation_range)
        self.scale_range = tuple(float(v) for v in self.scale_range)
        self.gamma_range = tuple(float(v) for v in self.gamma_range)
        self.mirror_axes = tuple(int(a) for a in self.mirror_axes)

    @classmethod
    def identity(cls, seed=0):
        return cls(
            rotation_range=(0.0, 0.0),
            scale_range=(1.0, 1.0),
            elastic_alpha=0.0,
            gamma_range=(1.0, 1.0),
            mirror_axes=(),
            intensity_shift=0.0,
            seed=seed,
        )

    @property
    def is_identity(self):
        return not self.enabled or (
            self.rotation_range == (0.0, 0.0)
            and self.scale_range == (1.0, 1.0)
            and self.elastic_alpha == 0.0
            and self.gamma_range == (1.0, 1.0)
            and not self.mirror_axes
            and self.intensity_shift == 0.0
        )

    def sanitized(self):
        """Copy with degenerate parameters clamped; each clamp is logged."""
        changes = {}

        def clamp(name, value, low, high=None):
            fixed = max(value, low) if high is None else min(max(value, low), high)
            if fixed != value:
                changes[name] = fixed
            return fixed

        scale = tuple(clamp("scale_range", v, 1e-3) for v in self.scale_range)
        gamma = tuple(clamp("gamma_range", v, 1e-3) for v in self.gamma_range)
        if scale[0] > scale[1]:
            scale = scale[::-1]
            changes["scale_range"] = scale
        if gamma[0] > gamma[1]:
            gamma = gamma[::-1]
            changes["gamma_range"] = gamma
        rotation = self.rotation_range
        if rotation[0] > rotation[1]:
            rotation = rotation[::-1]
            changes["rotation_range"] = rotation
        probability = clamp("probability", self.probability, 0.0, 1.0)
        mirror_probability = clamp("mirror_probability", self.mirror_probability, 0.0, 1.0)
        alpha = clamp("elastic_alpha", self.elastic_alpha, 0.0)
        sigma = clamp("elastic_sigma", self.elastic_sigma, 1e-3)
        shift = clamp("intensity_shift", abs(self.intensity_shift), 0.0, 1.0)
        axes = tuple(a for a in self.mirror_axes if a in (0, 1))
        if axes != self.mirror_axes:
            changes["mirror_axes"] = axes

        for name, value in changes.items():
            logger.warning("Augmentation parameter %s clamped to %s", name, value)
        return replace(
            self,
            rotation_range=rotation,
            scale_range=scale,
            gamma_range=gamma,
            probability=probability,
            mirror_probability=mirror_probability,
            elastic_alpha=alpha,
            elastic_sigma=sigma,
            intensity_shift=shift,
            mirror_axes=axes,
        )


def _affine_matrix(angle_deg, scale):
    theta = np.deg2rad(angle_deg)
    rotation = np.array([[np.cos(theta), np.sin(theta)], [-np.sin(theta), np.cos(theta)]])
    # snap so quarter turns become exact index permutations
    return np.round(rotation, 12) / scale


def _warp(array, coords):
    # zero fill outside the slice for image and mask alike
    return ndimage.map_coordinates(array, coords, order=1, mode="constant", cval=0.0)


def _geometric_coords(shape, rng, policy):
    """Sampling coordinates for the geometric part, or None when nothing fires."""
    height, width = shape
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    changed = False

    angle = 0.0
    scale = 1.0
    if policy.rotation_range != (0.0, 0.0) and rng.random() < policy.probability:
        angle = rng.uniform(*policy.rotation_range)
        changed = True
    if policy.scale_range != (1.0, 1.0) and rng.random() < policy.probability:
        scale = rng.uniform(*policy.scale_range)
        changed = True
    if changed:
        matrix = _affine_matrix(angle, scale)
        rel = np.stack([rows - center[0], cols - center[1]])
        src = np.tensordot(matrix, rel, axes=1)
        rows, cols = src[0] + center[0], src[1] + center[1]

    if policy.elastic_alpha > 0 and rng.random() < policy.probability:
        dr = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), policy.elastic_sigma) * policy.elastic_alpha
        dc = ndimage.gaussian_filter(rng.uniform(-1, 1, shape), policy.elastic_sigma) * policy.elastic_alpha
        rows, cols = rows + dr, cols + dc
        changed = True

    return np.stack([rows, cols]) if changed else None


def augment(sample, policy, rng=None, epoch=0, seed=0):
    """Return an augmented copy of ``sample``.

    Without an explicit ``rng`` the generator is seeded from
    (seed, policy.seed, epoch, volume_id, slice_index), where ``seed`` is the
    run's global seed, so a sample is augmented the same way every time for a
    given run and epoch.
    """
    if policy.is_identity:
        return replace(sample, image=sample.image.copy(), mask=sample.mask.copy())
    policy = policy.sanitized()
    if rng is None:
        rng = np.random.default_rng(derive_seed(seed, policy.seed, epoch, sample.volume_id, sample.slice_index))

    image = np.asarray(sample.image, dtype=np.float64)
    mask = np.asarray(sample.mask, dtype=np.float64)

    coords = _geometric_coords(image.shape, rng, policy)
    if coords is not None:
        image = _warp(image, coords)
        mask = (_warp(mask, coords) > 0.5).astype(np.float64)

    for axis in policy.mirror_axes:
        if rng.random() < policy.mirror_probability:
            image = np.flip(image, axis=axis)
            mask = np.flip(mask, axis=axis)

    if policy.gamma_range != (1.0, 1.0) and rng.random() < policy.probability:
        image = np.clip(image, 0.0, 1.0) ** rng.uniform(*policy.gamma_range)
    if policy.intensity_shift > 0 and rng.random() < policy.probability:
        image = image + rng.uniform(-policy.intensity_shift, policy.intensity_shift)

    image = np.clip(image, 0.0, 1.0).astype(sample.image.dtype)
    mask = np.ascontiguousarray(mask).astype(sample.mask.dtype)
    return replace(sample, image=np.ascontiguousarray(image), mask=mask)
