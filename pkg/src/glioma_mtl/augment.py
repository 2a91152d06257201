"""Training-time augmentation: crop, rotation, brightness and contrast shifts.

Geometric transforms share their sampled parameters between the four channels
and the mask of a sample; intensity transforms never touch the mask. All
randomness comes from a ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .data_model import Sample
from .errors import AugmentError


@dataclass(frozen=True)
class AugmentConfig:
    probability: float = 0.35
    factor: int = 2
    crop_max: int = 20
    rotation_max_deg: float = 30.0
    brightness_max: float = 0.2
    contrast_range: tuple = (0.85, 1.15)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise AugmentError(f"probability must be in [0, 1], got {self.probability}")
        if self.factor < 1:
            raise AugmentError(f"factor must be >= 1, got {self.factor}")
        if self.crop_max < 0:
            raise AugmentError(f"crop_max must be >= 0, got {self.crop_max}")


def random_crop(sample: Sample, rng, crop_max=20) -> Sample:
    """Zero-fill a random number of border voxels per dimension.

    For each axis ``k ~ U{0..crop_max}`` voxels are blanked, split uniformly at
    random between the two faces. The shape is unchanged.
    """
    spatial = sample.image.shape[1:]
    for axis, n in enumerate(spatial):
        if n <= 2 * crop_max:
            raise AugmentError(
                f"dimension {axis} has {n} voxels, needs more than 2*crop_max={2 * crop_max}")
    keep = []
    for n in spatial:
        k = int(rng.integers(0, crop_max + 1))
        before = int(rng.integers(0, k + 1))
        keep.append(slice(before, n - (k - before)))
    box = tuple(keep)
    image = np.zeros_like(sample.image)
    image[(slice(None),) + box] = sample.image[(slice(None),) + box]
    mask = None
    if sample.mask is not None:
        mask = np.zeros_like(sample.mask)
        mask[box] = sample.mask[box]
    return replace(sample, image=image, mask=mask)


def rotation_matrix(angles_deg):
    """Rotation about axes 0, 1, 2 (applied in that order)."""
    a, b, c = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(a), -np.sin(a)], [0, np.sin(a), np.cos(a)]])
    ry = np.array([[np.cos(b), 0, np.sin(b)], [0, 1, 0], [-np.sin(b), 0, np.cos(b)]])
    rz = np.array([[np.cos(c), -np.sin(c), 0], [np.sin(c), np.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotate(sample: Sample, angles_deg) -> Sample:
    """Rotate about the volume centre; trilinear for channels, nearest for the mask."""
    if not np.any(angles_deg):
        return sample
    rot = rotation_matrix(angles_deg)
    spatial = np.array(sample.image.shape[1:])
    centre = (spatial - 1) / 2.0
    # affine_transform maps output coords to input coords: x_in = R^T (x_out - c) + c
    inv = rot.T
    offset = centre - inv @ centre
    image = np.stack([
        ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0)
        for ch in sample.image]).astype(sample.image.dtype)
    mask = None
    if sample.mask is not None:
        mask = ndimage.affine_transform(sample.mask, inv, offset=offset, order=0,
                                        mode="constant", cval=0)
    return replace(sample, image=image, mask=mask)


def random_rotate(sample: Sample, rng, rotation_max_deg=30.0) -> Sample:
    angles = rng.uniform(-rotation_max_deg, rotation_max_deg, size=3)
    return rotate(sample, angles)


def brightness_shift(volume, rng, brightness_max=0.2):
    """Add one ``delta ~ U(0, brightness_max)`` to every voxel."""
    delta = rng.uniform(0.0, brightness_max)
    return np.asarray(volume) + np.asarray(delta, dtype=np.asarray(volume).dtype)


def scale_contrast(volume, factor):
    volume = np.asarray(volume)
    mean = volume.mean()
    return (mean + factor * (volume - mean)).astype(volume.dtype)


def contrast_shift(volume, rng, contrast_range=(0.85, 1.15)):
    """Scale about the volume mean: ``v' = mean + f * (v - mean)``."""
    return scale_contrast(volume, rng.uniform(*contrast_range))


def augment_sample(sample: Sample, rng, config: AugmentConfig) -> Sample:
    """Apply each augmentation type independently with ``config.probability``."""
    p = config.probability
    apply = rng.random(4) < p
    if apply[0]:
        sample = random_crop(sample, rng, config.crop_max)
    if apply[1]:
        sample = random_rotate(sample, rng, config.rotation_max_deg)
    if apply[2]:
        sample = replace(sample, image=brightness_shift(sample.image, rng, config.brightness_max))
    if apply[3]:
        # one factor per sample, each channel scaled about its own mean
        factor = rng.uniform(*config.contrast_range)
        sample = replace(sample, image=np.stack([scale_contrast(ch, factor) for ch in sample.image]))
    return sample


def augment_epoch_stream(dataset: Sequence[Sample], config: AugmentConfig,
                         epoch: int = 0) -> Iterator[Sample]:
    """Yield every sample ``config.factor`` times in a seeded random order.

    The generator for epoch ``e`` is seeded from ``(config.seed, e)`` so the
    stream is reproducible and differs between epochs.
    """
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(np.repeat(np.arange(len(dataset)), config.factor))
    for idx in order:
        sample = dataset[int(idx)]
        if config.probability > 0:
            sample = augment_sample(sample, rng, config)
        yield sample
