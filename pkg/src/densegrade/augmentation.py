"""Runtime geometric augmentation.

Each training sample gets a fresh transform every epoch. The random stream
for a sample is keyed by ``(seed, epoch, sample_index)``, so results do not
depend on batch composition or on how work is split across threads.

Geometry is in pixel coordinates ``(x, y)`` with the origin at the top-left
pixel centre. The forward map is ``shift . C . shear . rotate . C^-1``, where
``C`` moves the origin to the image centre; flips are applied first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

_AUG_STREAM = 0x41554721


@dataclass
class AugmentationPolicy:
    rotation_max_deg: float = 30.0
    width_shift_frac: float = 0.1
    height_shift_frac: float = 0.1
    shear_max_deg: float = 15.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    fill_mode: str = "nearest"
    fill_value: float = 0.0
    interpolation: str = "bilinear"

    def validate(self) -> None:
        for name in ("rotation_max_deg", "shear_max_deg"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("width_shift_frac", "height_shift_frac"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")
        for name in ("hflip_prob", "vflip_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.fill_mode not in ("nearest", "constant"):
            raise ValueError(f"fill_mode must be 'nearest' or 'constant', got {self.fill_mode!r}")
        if self.interpolation != "bilinear":
            raise ValueError("only bilinear interpolation is supported")

    @classmethod
    def none(cls) -> "AugmentationPolicy":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    def is_identity(self) -> bool:
        return (self.rotation_max_deg == 0 and self.width_shift_frac == 0
                and self.height_shift_frac == 0 and self.shear_max_deg == 0
                and self.hflip_prob == 0 and self.vflip_prob == 0)


@dataclass
class SampledTransform:
    angle_deg: float
    shear_deg: float
    shift_x: float  # fraction of width
    shift_y: float  # fraction of height
    hflip: bool
    vflip: bool

    @classmethod
    def identity(cls) -> "SampledTransform":
        return cls(0.0, 0.0, 0.0, 0.0, False, False)

    def matrix(self, height: int, width: int) -> np.ndarray:
        """2x3 forward affine map from input to output pixel coordinates."""
        a = math.radians(self.angle_deg)
        s = math.radians(self.shear_deg)
        rot = np.array([[math.cos(a), -math.sin(a), 0.0],
                        [math.sin(a), math.cos(a), 0.0],
                        [0.0, 0.0, 1.0]])
        shear = np.array([[1.0, -math.sin(s), 0.0],
                          [0.0, math.cos(s), 0.0],
                          [0.0, 0.0, 1.0]])
        cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
        to_c = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
        back = np.array([[1.0, 0.0, cx + self.shift_x * width],
                         [0.0, 1.0, cy + self.shift_y * height],
                         [0.0, 0.0, 1.0]])
        return (back @ shear @ rot @ to_c)[:2]

    def is_identity(self) -> bool:
        return (self.angle_deg == 0 and self.shear_deg == 0 and self.shift_x == 0
                and self.shift_y == 0 and not self.hflip and not self.vflip)


def sample_stream(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([_AUG_STREAM, int(seed), int(epoch), int(index)])


def sample_transform(policy: AugmentationPolicy, rng: np.random.Generator) -> SampledTransform:
    """Draw one transform. Always consumes six uniforms so streams stay aligned."""
    u = rng.random(6)
    return SampledTransform(
        angle_deg=(2.0 * u[0] - 1.0) * policy.rotation_max_deg,
        shear_deg=(2.0 * u[1] - 1.0) * policy.shear_max_deg,
        shift_x=(2.0 * u[2] - 1.0) * policy.width_shift_frac,
        shift_y=(2.0 * u[3] - 1.0) * policy.height_shift_frac,
        hflip=bool(u[4] < policy.hflip_prob),
        vflip=bool(u[5] < policy.vflip_prob),
    )


def apply_transform(image: np.ndarray, t: SampledTransform,
                    policy: AugmentationPolicy = None) -> np.ndarray:
    """Warp a ``C x H x W`` image by inverse mapping with bilinear sampling."""
    policy = policy or AugmentationPolicy()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[1] < 2 or image.shape[2] < 2:
        raise ValueError(f"expected a C x H x W image with H, W >= 2, got {image.shape}")
    out = image
    if t.hflip:
        out = out[:, :, ::-1]
    if t.vflip:
        out = out[:, ::-1, :]
    if t.angle_deg == 0 and t.shear_deg == 0 and t.shift_x == 0 and t.shift_y == 0:
        return np.ascontiguousarray(out)
    _, h, w = image.shape
    fwd = np.vstack([t.matrix(h, w), [0.0, 0.0, 1.0]])
    if abs(np.linalg.det(fwd)) < 1e-12:
        raise ValueError("degenerate (non-invertible) transform")
    inv = np.linalg.inv(fwd)[:2]
    nearest = policy.fill_mode == "nearest"
    return kernels.bilinear_warp(out, inv, nearest, policy.fill_value)


def augment_sample(image: np.ndarray, policy: AugmentationPolicy, seed: int, epoch: int,
                   index: int) -> np.ndarray:
    if policy.is_identity():
        return image
    t = sample_transform(policy, sample_stream(seed, epoch, index))
    return apply_transform(image, t, policy)


def augment_batch(images: np.ndarray, labels, policy: AugmentationPolicy, seed: int, epoch: int,
                  sample_indices) -> tuple:
    """Augment an ``N x C x H x W`` batch; labels are returned untouched."""
    images = np.asarray(images)
    if len(images) == 0:
        raise ValueError("augment_batch needs a non-empty batch")
    if len(sample_indices) != len(images):
        raise ValueError("one sample index per image is required")
    if policy.is_identity():
        return images, labels
    out = np.empty_like(images)
    for i, (img, idx) in enumerate(zip(images, sample_indices)):
        out[i] = augment_sample(img, policy, seed, epoch, idx)
    return out, labels
