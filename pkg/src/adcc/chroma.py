"""Log-chrominance coordinates and the two-channel histogram input."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .edges import EdgeImage
from .imaging import Illuminant, LinearImage


@dataclass(frozen=True)
class UVCoord:
    u: float
    v: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError(f"non-finite UV coordinate ({self.u}, {self.v})")

    def __iter__(self):
        yield self.u
        yield self.v


@dataclass(frozen=True)
class HistogramGeometry:
    """``bins`` x ``bins`` grid covering [u_min, u_min + bins*epsilon) and likewise for v."""

    bins: int = 64
    u_min: float = -3.0
    v_min: float = -3.0
    epsilon: float = 6.0 / 64

    def __post_init__(self):
        if self.bins < 1 or self.epsilon <= 0:
            raise ValueError("bins must be positive and epsilon > 0")

    def index(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bin indices with half-open bins; out-of-range values clamp to the edge bins."""
        iu = np.floor((np.asarray(u) - self.u_min) / self.epsilon)
        iv = np.floor((np.asarray(v) - self.v_min) / self.epsilon)
        iu = np.clip(iu, 0, self.bins - 1).astype(np.int64)
        iv = np.clip(iv, 0, self.bins - 1).astype(np.int64)
        return iu, iv

    def in_range(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        hi_u = self.u_min + self.bins * self.epsilon
        hi_v = self.v_min + self.bins * self.epsilon
        return (u >= self.u_min) & (u < hi_u) & (v >= self.v_min) & (v < hi_v)

    def centers(self) -> np.ndarray:
        return self.u_min + (np.arange(self.bins) + 0.5) * self.epsilon

    @classmethod
    def spanning(cls, bins: int, lo: float = -3.0, hi: float = 3.0) -> "HistogramGeometry":
        """``bins`` equal bins covering [lo, hi) on both axes."""
        return cls(bins=bins, u_min=lo, v_min=lo, epsilon=(hi - lo) / bins)

    def to_dict(self) -> dict:
        return {"bins": self.bins, "u_min": self.u_min, "v_min": self.v_min, "epsilon": self.epsilon}


@dataclass(frozen=True, eq=False)
class ChromaHistogram:
    """``weights[iu, iv]``; ``total_mass`` is the pre-normalisation pixel count."""

    geometry: HistogramGeometry
    weights: np.ndarray
    total_mass: float


_TINY = np.finfo(np.float64).tiny


def pixel_to_uv(pixel) -> UVCoord:
    r, g, b = (float(x) for x in pixel)
    if min(r, g, b) <= 0:
        raise ValueError("log-chrominance needs strictly positive channels")
    return UVCoord(math.log(r / g), math.log(b / g))


def illuminant_to_uv(light: Illuminant) -> UVCoord:
    return pixel_to_uv(light.rgb)


def uv_to_illuminant(uv) -> Illuminant:
    u, v = (float(x) for x in uv)
    if not (math.isfinite(u) and math.isfinite(v)):
        raise ValueError("uv must be finite")
    # shifting both exponents by the same amount cancels after normalisation
    m = max(u, v, 0.0)
    rgb = np.array([math.exp(u - m), math.exp(-m), math.exp(v - m)])
    # extreme coordinates underflow; keep the components strictly positive
    rgb = np.maximum(rgb, _TINY)
    return Illuminant(rgb / np.linalg.norm(rgb))


def uv_array_to_rgb(uv: np.ndarray) -> np.ndarray:
    """Vectorised ``uv_to_illuminant`` for an (N, 2) array; returns (N, 3) unit rows."""
    uv = np.asarray(uv, dtype=np.float64)
    m = np.maximum(uv.max(axis=1), 0.0)
    rgb = np.stack([np.exp(uv[:, 0] - m), np.exp(-m), np.exp(uv[:, 1] - m)], axis=1)
    rgb = np.maximum(rgb, _TINY)
    return rgb / np.linalg.norm(rgb, axis=1, keepdims=True)


def _histogram(values: np.ndarray, mask: np.ndarray, geom: HistogramGeometry, normalize: bool):
    usable = mask & np.all(values > 0, axis=-1)
    px = values[usable]
    weights = np.zeros((geom.bins, geom.bins))
    total = float(px.shape[0])
    if px.shape[0]:
        u = np.log(px[:, 0] / px[:, 1])
        v = np.log(px[:, 2] / px[:, 1])
        iu, iv = geom.index(u, v)
        np.add.at(weights, (iu, iv), 1.0)
        if normalize:
            weights /= total
    return ChromaHistogram(geom, weights, total)


def build_histogram(img: LinearImage, geom: HistogramGeometry = HistogramGeometry(), normalize: bool = True) -> ChromaHistogram:
    return _histogram(img.pixels, img.valid, geom, normalize)


def build_edge_histogram(edge: EdgeImage, geom: HistogramGeometry = HistogramGeometry(), normalize: bool = True) -> ChromaHistogram:
    return _histogram(edge.intensity, edge.valid, geom, normalize)


def diagnostic_features(m_img: ChromaHistogram, m_edge: ChromaHistogram, sigma: float):
    """Shared, edge-only and image-only chrominance maps, for inspection.

    Returns ``(common, edge_gradients, image_only)``; inputs must be raw counts
    on the same geometry.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive for the diagnostic features")
    if m_img.geometry != m_edge.geometry:
        raise ValueError("histograms must share a geometry")
    a = m_img.weights
    e = m_edge.weights / (math.sqrt(2.0) * sigma)
    return np.minimum(a, e), np.maximum(e - a, 0.0), np.maximum(a - e, 0.0)
