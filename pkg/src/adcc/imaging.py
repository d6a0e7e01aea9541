"""Image containers, ingestion, preprocessing and von Kries correction."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

SQRT3 = np.sqrt(3.0)
FULL_SCALE_16 = 65535


class ImageFormatError(ValueError):
    pass


class MaskError(ValueError):
    pass


class ResizeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinearImage:
    """H x W x 3 linear-light image with a per-pixel validity mask.

    Invalid pixels are forced to zero on construction so that the
    "masked pixels are black" invariant can never be violated downstream.
    """

    pixels: np.ndarray
    valid: np.ndarray = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageFormatError(f"expected HxWx3 pixels, got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ImageFormatError("empty image")
        if not np.all(np.isfinite(px)) or np.any(px < 0):
            raise ValueError("pixels must be finite and non-negative")
        if self.valid is None:
            valid = np.ones(px.shape[:2], dtype=bool)
        else:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != px.shape[:2]:
                raise ImageFormatError("validity mask shape mismatch")
        px = np.where(valid[..., None], px, 0.0)
        px.setflags(write=False)
        valid = valid.copy()
        valid.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "valid", valid)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def crop(self, top: int, left: int, height: int, width: int) -> "LinearImage":
        sl = (slice(top, top + height), slice(left, left + width))
        return LinearImage(self.pixels[sl], self.valid[sl])


@dataclass(frozen=True)
class CameraMeta:
    black_level: tuple = (0.0, 0.0, 0.0)
    saturation_fraction: float = 0.98
    bit_depth: int = 16

    def __post_init__(self):
        if self.bit_depth not in (8, 12, 16):
            raise ValueError(f"unsupported bit depth {self.bit_depth}")
        if not 0.0 < self.saturation_fraction <= 1.0:
            raise ValueError("saturation_fraction must lie in (0, 1]")
        bl = tuple(float(b) for b in np.broadcast_to(self.black_level, (3,)))
        object.__setattr__(self, "black_level", bl)
        if max(bl) >= self.saturation_fraction * self.full_scale:
            raise ValueError("black level must be below the saturation level")

    @property
    def full_scale(self) -> int:
        return 2**self.bit_depth - 1

    @classmethod
    def from_file(cls, path) -> "CameraMeta":
        """Parse a ``key=value`` metadata file (black_level_r/g/b, saturation, bit_depth)."""
        kv = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, _, value = line.partition("=")
                kv[key.strip()] = value.strip()
        bl = tuple(float(kv.get(f"black_level_{c}", 0.0)) for c in "rgb")
        return cls(
            black_level=bl,
            saturation_fraction=float(kv.get("saturation", 0.98)),
            bit_depth=int(kv.get("bit_depth", 16)),
        )


@dataclass(frozen=True)
class PolygonMask:
    """Quadrilateral in (row, col) source coordinates, e.g. a color checker outline."""

    corners: tuple

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=np.float64)
        if c.shape != (4, 2) or not np.all(np.isfinite(c)):
            raise MaskError("polygon needs 4 finite (row, col) corners")
        if abs(_shoelace(c)) < 1e-12:
            raise MaskError("degenerate polygon (zero area)")
        if _segments_cross(c[0], c[1], c[2], c[3]) or _segments_cross(c[1], c[2], c[3], c[0]):
            raise MaskError("self-intersecting polygon")
        object.__setattr__(self, "corners", tuple(map(tuple, c)))

    @classmethod
    def from_file(cls, path) -> "PolygonMask":
        """Read ``x0 y0 x1 y1 x2 y2 x3 y3`` (x = column, y = row)."""
        with open(path, encoding="utf-8") as fh:
            vals = [float(t) for t in fh.read().split()]
        if len(vals) != 8:
            raise MaskError(f"{path}: expected 8 numbers, got {len(vals)}")
        xy = np.asarray(vals).reshape(4, 2)
        return cls(tuple((y, x) for x, y in xy))

    def rasterize(self, height: int, width: int) -> np.ndarray:
        """Boolean mask of pixels whose centers fall inside the polygon.

        Crossing test with half-open edge spans, so a center lying exactly on a
        shared boundary is claimed by at most one side.
        """
        rows = np.arange(height)[:, None] + 0.5
        cols = np.arange(width)[None, :] + 0.5
        inside = np.zeros((height, width), dtype=bool)
        pts = np.asarray(self.corners)
        for i in range(4):
            (r1, c1), (r2, c2) = pts[i], pts[(i + 1) % 4]
            if r1 == r2:
                continue
            spans = (r1 <= rows) & (rows < r2) | (r2 <= rows) & (rows < r1)
            c_cross = c1 + (rows - r1) * (c2 - c1) / (r2 - r1)
            inside ^= spans & (cols < c_cross)
        return inside


def _shoelace(c: np.ndarray) -> float:
    x, y = c[:, 1], c[:, 0]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return np.sign((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))

    return (
        orient(p1, p2, p3) * orient(p1, p2, p4) < 0
        and orient(p3, p4, p1) * orient(p3, p4, p2) < 0
    )


@dataclass(frozen=True)
class Illuminant:
    """Unit-norm RGB light-source gains."""

    rgb: np.ndarray = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.rgb, dtype=np.float64).reshape(-1)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ValueError("illuminant must be a finite 3-vector")
        if np.any(v <= 0):
            raise ValueError(f"illuminant components must be positive: {v}")
        n = np.linalg.norm(v)
        if abs(n - 1.0) > 1e-12:
            v = v / n
        v.setflags(write=False)
        object.__setattr__(self, "rgb", v)

    def __iter__(self):
        return iter(self.rgb)

    def __eq__(self, other):
        return isinstance(other, Illuminant) and np.array_equal(self.rgb, other.rgb)

    def __hash__(self):
        return hash(self.rgb.tobytes())

    def __repr__(self):
        r, g, b = self.rgb
        return f"Illuminant({r:.6f}, {g:.6f}, {b:.6f})"


CANONICAL = Illuminant(np.full(3, 1.0 / SQRT3))


def load_image_16bit(path, bit_depth: int = 16) -> tuple[LinearImage, np.ndarray]:
    """Read a 3-channel PNG/TIFF and return ``(image scaled to [0,1], raw integers)``.

    ``bit_depth=12`` means the stored values occupy the low 12 bits; they are
    left-shifted by 4 before scaling to the 16-bit range. 8-bit files are
    accepted (synthetic data) and scaled by 1/255.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot decode image {path}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected 3 channels, got shape {raw.shape}")
    raw = raw[..., ::-1].copy()
    if raw.dtype == np.uint8:
        pixels = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        pixels = raw_to_linear(raw, bit_depth)
    else:
        raise ImageFormatError(f"{path}: unsupported sample type {raw.dtype}")
    return LinearImage(pixels), raw


def raw_to_linear(raw: np.ndarray, bit_depth: int = 16) -> np.ndarray:
    if bit_depth not in (12, 16):
        raise ImageFormatError(f"unsupported bit depth {bit_depth}")
    shift = 16 - bit_depth
    return (raw.astype(np.int64) << shift).astype(np.float64) / FULL_SCALE_16


def save_png16(path, pixels: np.ndarray) -> None:
    """Write linear [0,1] pixels as a 16-bit RGB PNG."""
    q = np.round(np.clip(pixels, 0.0, 1.0) * FULL_SCALE_16).astype(np.uint16)
    if not cv2.imwrite(os.fspath(path), q[..., ::-1]):
        raise OSError(f"cannot write {path}")


def save_png8(path, img8: np.ndarray) -> None:
    arr = img8[..., ::-1] if img8.ndim == 3 else img8
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(arr)):
        raise OSError(f"cannot write {path}")


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    # R[i, j] = fraction of destination cell i covered by source pixel j
    edges = np.arange(n_dst + 1) * (n_src / n_dst)
    lo = np.maximum(edges[:-1, None], np.arange(n_src)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n_src)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / (n_src / n_dst)


def area_downsample(img: LinearImage, height: int, width: int) -> LinearImage:
    """Exact box-filter resampling; output pixels with >50% invalid footprint are invalid."""
    if height > img.height or width > img.width:
        raise ResizeError(f"target {height}x{width} exceeds source {img.height}x{img.width}")
    if (height, width) == (img.height, img.width):
        return img
    ry = _area_weights(img.height, height)
    rx = _area_weights(img.width, width)
    valid = img.valid.astype(np.float64)
    valid_frac = ry @ valid @ rx.T
    summed = np.einsum("ih,hwc,jw->ijc", ry, img.pixels * valid[..., None], rx)
    out_valid = valid_frac >= 0.5
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(out_valid[..., None], summed / valid_frac[..., None], 0.0)
    return LinearImage(out, out_valid)


def preprocess(
    img: LinearImage,
    meta: CameraMeta = CameraMeta(),
    raw: np.ndarray | None = None,
    mcc: PolygonMask | None = None,
    target: tuple[int, int] | None = (256, 384),
) -> LinearImage:
    """Black level, saturation, checker masking, rotation, downsampling, rescaling.

    ``raw`` holds the integer sensor values used for the saturation test; when
    it is ``None`` (already-linear input) no pixel is rejected as saturated.
    ``target=None`` keeps the (rotated) source size.
    """
    if target is not None and target[0] > target[1]:
        raise ResizeError("target height must not exceed target width")
    scale = 2 ** (16 - meta.bit_depth) / FULL_SCALE_16 if meta.bit_depth != 8 else 1 / 255
    black = np.asarray(meta.black_level) * scale
    pixels = np.clip(img.pixels - black, 0.0, None)
    valid = img.valid.copy()

    if raw is not None:
        if raw.shape != img.pixels.shape:
            raise ImageFormatError("raw grid does not match image shape")
        saturated = np.any(raw >= meta.saturation_fraction * meta.full_scale, axis=2)
        valid &= ~saturated

    if mcc is not None:
        valid &= ~mcc.rasterize(img.height, img.width)

    if pixels.shape[0] > pixels.shape[1]:
        pixels = np.rot90(pixels)
        valid = np.rot90(valid)

    out = LinearImage(pixels, valid)
    if target is not None:
        out = area_downsample(out, *target)

    peak = out.pixels.max()
    if peak > 0:
        out = LinearImage(out.pixels / peak, out.valid)
    return out


def apply_illuminant_correction(img: LinearImage, est: Illuminant) -> LinearImage:
    """Divide each channel by sqrt(3) * est_c so the canonical light is the identity."""
    gains = est.rgb * SQRT3
    out = np.clip(img.pixels / gains, 0.0, 1.0)
    return LinearImage(out, img.valid)


def tint(img: LinearImage, light: Illuminant, clip: bool = True) -> LinearImage:
    """Render a canonical-light image under ``light`` (inverse of the correction)."""
    out = img.pixels * (light.rgb * SQRT3)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return LinearImage(out, img.valid)


def gamma_encode(img: LinearImage | np.ndarray, gamma: float = 1 / 2.2) -> np.ndarray:
    px = img.pixels if isinstance(img, LinearImage) else np.asarray(img, dtype=np.float64)
    return np.round(255.0 * np.clip(px, 0.0, 1.0) ** gamma).astype(np.uint8)
