"""Modified-Sobel edge augmentation.

The operator adds ``sigma`` to the centre of the Sobel kernel, so flat regions
come through scaled by ``sigma`` while edges come through as gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imaging import LinearImage

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
BEST_SIGMA = math.sqrt(2.0) / 2.0


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class EdgeOperator:
    sigma: float
    fx: np.ndarray
    fy: np.ndarray

    @property
    def fx_grad(self) -> np.ndarray:
        return SOBEL_X.copy()

    @property
    def fx_img(self) -> np.ndarray:
        k = np.zeros((3, 3))
        k[1, 1] = self.sigma
        return k


@dataclass(frozen=True, eq=False)
class EdgeImage:
    intensity: np.ndarray
    valid: np.ndarray
    angle: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]


def make_operator(sigma: float) -> EdgeOperator:
    sigma = float(sigma)
    if not math.isfinite(sigma) or sigma < 0:
        raise ValueError(f"sigma must be finite and >= 0, got {sigma}")
    fx = SOBEL_X.copy()
    fx[1, 1] = sigma
    return EdgeOperator(sigma, fx, fx.T.copy())


# Centre tap last: conv(fx) and conv(fx_grad) then share every partial sum,
# which makes the grad/img decomposition hold bit-for-bit.
_TAP_ORDER = [(a, b) for a in range(3) for b in range(3) if (a, b) != (1, 1)] + [(1, 1)]


def convolve3x3(channel: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """True 2-D convolution (kernel flipped) with replicate padding."""
    channel = np.asarray(channel, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (3, 3):
        raise ShapeError("kernel must be 3x3")
    if channel.ndim != 2 or channel.shape[0] < 3 or channel.shape[1] < 3:
        raise ShapeError(f"channel must be at least 3x3, got {channel.shape}")
    h, w = channel.shape
    padded = np.pad(channel, 1, mode="edge")
    flipped = kernel[::-1, ::-1]
    out = np.zeros_like(channel)
    for a, b in _TAP_ORDER:
        out += flipped[a, b] * padded[a : a + h, b : b + w]
    return out


def edge_augment(img: LinearImage, sigma: float = BEST_SIGMA, with_angle: bool = False) -> EdgeImage:
    op = make_operator(sigma)
    if img.height < 3 or img.width < 3:
        raise ShapeError("image must be at least 3x3")
    gx = np.stack([convolve3x3(img.pixels[..., c], op.fx) for c in range(3)], axis=-1)
    gy = np.stack([convolve3x3(img.pixels[..., c], op.fy) for c in range(3)], axis=-1)
    intensity = np.sqrt(gx * gx + gy * gy)

    angle = None
    if with_angle:
        with np.errstate(divide="ignore", invalid="ignore"):
            angle = np.arctan(gy / gx)
        angle = np.where(gx == 0, np.where(gy == 0, 0.0, np.pi / 2), angle)

    # a pixel is usable only if its whole 3x3 footprint is valid and unpadded
    src = img.valid
    valid = np.zeros_like(src)
    core = np.ones((img.height - 2, img.width - 2), dtype=bool)
    for a in range(3):
        for b in range(3):
            core &= src[a : a + img.height - 2, b : b + img.width - 2]
    valid[1:-1, 1:-1] = core
    return EdgeImage(intensity, valid, angle)
