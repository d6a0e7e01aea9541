"""Datasets, augmentation, training and patch-median inference."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import network as net
from . import tensor as T
from .chroma import HistogramGeometry, build_edge_histogram, build_histogram, uv_array_to_rgb, uv_to_illuminant
from .edges import BEST_SIGMA, edge_augment
from .evalkit import angular_errors
from .imaging import (
    CANONICAL,
    SQRT3,
    CameraMeta,
    Illuminant,
    LinearImage,
    PolygonMask,
    load_image_16bit,
    preprocess,
    save_png16,
)
from .network import ModelConfig, ModelParams

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    image: LinearImage
    truth: Illuminant
    id: str


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.1
    decay_at_fraction: float = 0.9
    epochs: int = 1500
    patches_per_image: int = 16
    sigma: float = BEST_SIGMA
    seed: int = 0
    edge_channel: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.patches_per_image < 0:
            raise ValueError("batch_size and epochs must be positive, patches_per_image >= 0")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch; the decay applies from 90% of the run on."""
        start = int(round(self.decay_at_fraction * self.epochs))
        return self.lr * self.lr_decay if epoch >= start else self.lr


# ColorChecker Classic patches as 8-bit sRGB, row-major from dark skin to black
CHECKER_SRGB8 = np.array([
    [115, 82, 68], [194, 150, 130], [98, 122, 157], [87, 108, 67], [133, 128, 177], [103, 189, 170],
    [214, 126, 44], [80, 91, 166], [193, 90, 99], [94, 60, 108], [157, 188, 64], [224, 163, 46],
    [56, 61, 150], [70, 148, 73], [175, 54, 60], [231, 199, 31], [187, 86, 149], [8, 133, 161],
    [243, 243, 242], [200, 200, 200], [160, 160, 160], [122, 122, 121], [85, 85, 85], [52, 52, 52],
])


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


CHECKER_LINEAR = srgb_to_linear(CHECKER_SRGB8 / 255.0)


@dataclass(frozen=True)
class SyntheticSceneConfig:
    """Mondrian generator settings.

    ``palette="checker"`` draws each rectangle from the 24 ColorChecker surfaces
    with log-normal per-channel jitter; ``"uniform"`` draws every channel
    independently from ``reflectance_range``. Both clip to that range.
    """

    grid: tuple = (4, 6)
    size: tuple = (64, 96)
    reflectance_range: tuple = (0.05, 0.95)
    illuminant_angle_max_deg: float = 25.0
    noise_sd: float = 0.005
    palette: str = "checker"
    palette_jitter: float = 0.1

    def __post_init__(self):
        if self.palette not in ("checker", "uniform"):
            raise ValueError(f"unknown palette {self.palette!r}")


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple

    def train_test(self, k: int) -> tuple[list, list]:
        test = list(self.folds[k])
        train = [i for j, f in enumerate(self.folds) if j != k for i in f]
        return train, test


@dataclass
class TrainResult:
    model: ModelParams
    history: list = field(default_factory=list)  # (epoch, mean_loss, lr)


# ---------------------------------------------------------------- synthetic data

def random_illuminant(rng: np.random.Generator, max_angle_deg: float) -> Illuminant:
    """Uniform draw from the spherical cap of half-angle ``max_angle_deg`` around the canonical light."""
    if max_angle_deg <= 0:
        return CANONICAL
    cos_t = rng.uniform(math.cos(math.radians(max_angle_deg)), 1.0)
    phi = rng.uniform(0.0, 2 * math.pi)
    axis = CANONICAL.rgb
    e1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
    e2 = np.cross(axis, e1)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    v = cos_t * axis + sin_t * (math.cos(phi) * e1 + math.sin(phi) * e2)
    return Illuminant(v)


def mondrian(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> np.ndarray:
    rows, cols = cfg.grid
    h, w = cfg.size
    lo, hi = cfg.reflectance_range
    if cfg.palette == "uniform":
        colors = rng.uniform(lo, hi, size=(rows, cols, 3))
    else:
        idx = rng.integers(0, len(CHECKER_LINEAR), size=(rows, cols))
        jitter = np.exp(rng.normal(0.0, cfg.palette_jitter, size=(rows, cols, 3)))
        colors = np.clip(CHECKER_LINEAR[idx] * jitter, lo, hi)
    ri = np.minimum(np.arange(h) * rows // h, rows - 1)
    ci = np.minimum(np.arange(w) * cols // w, cols - 1)
    return colors[ri][:, ci]


def synth_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator, sample_id: str = "synth") -> Sample:
    """Mondrian reflectances lit by a random illuminant through the diagonal model.

    Gains are sqrt(3) * L rescaled so the strongest channel gain is 1, which keeps
    the scene below saturation without changing its chromaticity.
    """
    refl = mondrian(cfg, rng)
    light = random_illuminant(rng, cfg.illuminant_angle_max_deg)
    gains = light.rgb * SQRT3
    img = refl * (gains / gains.max())
    if cfg.noise_sd > 0:
        img = img + rng.normal(0.0, cfg.noise_sd, size=img.shape)
    return Sample(LinearImage(np.clip(img, 0.0, 1.0)), light, sample_id)


def synth_dataset(n: int, cfg: SyntheticSceneConfig = SyntheticSceneConfig(), seed: int = 0) -> list[Sample]:
    return [
        synth_scene(cfg, np.random.default_rng([seed, i]), f"scene{i:04d}")
        for i in range(n)
    ]


# ---------------------------------------------------------------- dataset layout

def save_dataset(root, samples: Sequence[Sample]) -> None:
    """Write ``images/<id>.png`` (16-bit) and ``truth.csv``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / "truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "L_r", "L_g", "L_b"])
        for s in samples:
            save_png16(root / "images" / f"{s.id}.png", s.image.pixels)
            w.writerow([s.id, *(f"{x:.12f}" for x in s.truth.rgb)])


def load_dataset(root, target: tuple[int, int] | None = None, bit_depth: int | None = None) -> list[Sample]:
    """Read the benchmark layout: images/*.png, optional masks/<id>.txt and camera.txt, truth.csv."""
    root = Path(root)
    meta = CameraMeta.from_file(root / "camera.txt") if (root / "camera.txt").exists() else CameraMeta()
    if bit_depth is not None:
        meta = replace(meta, bit_depth=bit_depth)
    samples = []
    with open(root / "truth.csv", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            sid = row["id"]
            img, raw = load_image_16bit(root / "images" / f"{sid}.png", bit_depth=meta.bit_depth if meta.bit_depth != 8 else 16)
            mask_path = root / "masks" / f"{sid}.txt"
            mcc = PolygonMask.from_file(mask_path) if mask_path.exists() else None
            if raw.dtype == np.uint8:
                meta_i = replace(meta, bit_depth=8)
            else:
                meta_i = meta
            img = preprocess(img, meta_i, raw=raw, mcc=mcc, target=target)
            truth = Illuminant([float(row["L_r"]), float(row["L_g"]), float(row["L_b"])])
            samples.append(Sample(img, truth, sid))
    if not samples:
        raise ValueError(f"{root}: empty dataset")
    return samples


# ---------------------------------------------------------------- augmentation

def sample_patch(img: LinearImage, rng: np.random.Generator) -> LinearImage:
    """Random crop whose height and width are independently 50-100% of the source."""
    s_h, s_w = rng.uniform(0.5, 1.0, size=2)
    ph = min(img.height, max(1, int(round(img.height * s_h))))
    pw = min(img.width, max(1, int(round(img.width * s_w))))
    top = int(rng.integers(0, img.height - ph + 1))
    left = int(rng.integers(0, img.width - pw + 1))
    return img.crop(top, left, ph, pw)


def randomize_color(
    patch: LinearImage, truth: Illuminant, rng: np.random.Generator | None = None, m=None
) -> tuple[LinearImage, Illuminant]:
    """Scale each channel by m_c ~ U[0.5, 1]; the truth receives the same multiplier."""
    m = rng.uniform(0.5, 1.0, size=3) if m is None else np.asarray(m, dtype=np.float64)
    return LinearImage(patch.pixels * m, patch.valid), Illuminant(truth.rgb * m)


def featurize(
    img: LinearImage,
    sigma: float = BEST_SIGMA,
    geom: HistogramGeometry = HistogramGeometry(),
    edge_channel: bool = True,
) -> np.ndarray:
    """(2, B, B) normalised image and edge log-chroma histograms."""
    out = np.zeros((2, geom.bins, geom.bins))
    out[0] = build_histogram(img, geom, normalize=True).weights
    if edge_channel and img.height >= 3 and img.width >= 3:
        out[1] = build_edge_histogram(edge_augment(img, sigma), geom, normalize=True).weights
    return out


# ---------------------------------------------------------------- training

def epoch_items(samples, cfg: TrainConfig, geom, epoch: int, base_features: np.ndarray):
    """Features and truths for one epoch: every full image plus p recoloured patches.

    Patch generators are keyed by (seed, epoch, sample, patch) so the result does
    not depend on evaluation order.
    """
    p = cfg.patches_per_image
    n = len(samples)
    x = np.empty((n * (1 + p), 2, geom.bins, geom.bins), dtype=np.float32)
    y = np.empty((n * (1 + p), 3))
    x[:n] = base_features
    y[:n] = [s.truth.rgb for s in samples]
    k = n
    for i, s in enumerate(samples):
        for j in range(p):
            rng = np.random.default_rng([cfg.seed, epoch, i, j])
            patch, light = randomize_color(sample_patch(s.image, rng), s.truth, rng)
            x[k] = featurize(patch, cfg.sigma, geom, cfg.edge_channel)
            y[k] = light.rgb
            k += 1
    return x, y


def train(
    samples: Sequence[Sample],
    cfg: TrainConfig = TrainConfig(),
    model_cfg: ModelConfig = ModelConfig(),
    geom: HistogramGeometry | None = None,
    log_path=None,
    checkpoint_path=None,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Mini-batch Adam on the cosine loss; returns the final model and per-epoch losses."""
    if not samples:
        raise net.ConfigError("training needs at least one sample")
    geom = geom or HistogramGeometry.spanning(model_cfg.input_bins)
    model = net.init_params(model_cfg, seed=cfg.seed, geometry=geom, sigma=cfg.sigma)
    model.metadata.update({
        "train.epochs": cfg.epochs,
        "train.patches_per_image": cfg.patches_per_image,
        "train.batch_size": cfg.batch_size,
        "train.lr": cfg.lr,
        "train.edge_channel": int(cfg.edge_channel),
    })
    base = np.stack([featurize(s.image, cfg.sigma, geom, cfg.edge_channel) for s in samples]).astype(np.float32)
    state = T.AdamState()
    result = TrainResult(model)
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if logf:
            logf.write("epoch, mean_loss, lr\n")
        for epoch in range(cfg.epochs):
            lr = cfg.lr_at(epoch)
            x, y = epoch_items(samples, cfg, geom, epoch, base)
            order = np.random.default_rng([cfg.seed, epoch, 1 << 20]).permutation(len(x))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                model.zero_grad()
                with T.Tape() as tape:
                    pred = net.forward(model, T.Tensor(x[idx]), training=True)
                    loss = net.loss(pred, y[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, batch starting {start}")
                tape.backward(loss)
                T.adam_step(model.params, state, lr)
                total += value * len(idx)
            mean_loss = total / len(order)
            result.history.append((epoch, mean_loss, lr))
            if logf:
                logf.write(f"{epoch}, {mean_loss:.9g}, {lr:.3g}\n")
                logf.flush()
            if progress:
                progress(epoch, mean_loss, lr)
            if checkpoint_path and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                net.save_model(checkpoint_path, model)
    finally:
        if logf:
            logf.close()
    if checkpoint_path:
        net.save_model(checkpoint_path, model)
    return result


# ---------------------------------------------------------------- inference

def _predict_uv(model, feats: np.ndarray) -> np.ndarray:
    if callable(model):
        return np.asarray(model(feats), dtype=np.float64)
    return net.predict_uv(model, feats)


def _model_sigma_geom(model, sigma, geom):
    if isinstance(model, ModelParams):
        return (model.sigma if sigma is None else sigma), (geom or model.geometry)
    return (BEST_SIGMA if sigma is None else sigma), (geom or HistogramGeometry())


def predict_single(model, img: LinearImage, sigma=None, geom=None, edge_channel: bool = True) -> Illuminant:
    sigma, geom = _model_sigma_geom(model, sigma, geom)
    uv = _predict_uv(model, featurize(img, sigma, geom, edge_channel)[None])[0]
    return uv_to_illuminant(uv)


def aggregate_candidates(candidates: np.ndarray) -> Illuminant:
    """Channel-wise median of candidate illuminants, renormalised.

    An even count takes the mean of the two central order statistics.
    """
    c = np.asarray(candidates, dtype=np.float64).reshape(-1, 3)
    med = np.median(c, axis=0)
    return Illuminant(med / np.linalg.norm(med))


def predict_aggregate(
    model,
    img: LinearImage,
    p: int = 16,
    rng: np.random.Generator | None = None,
    sigma=None,
    geom=None,
    edge_channel: bool = True,
) -> Illuminant:
    """Median over the full-image prediction and ``p`` random (uncoloured) patches."""
    sigma, geom = _model_sigma_geom(model, sigma, geom)
    if p == 0:
        return predict_single(model, img, sigma, geom, edge_channel)
    rng = rng if rng is not None else np.random.default_rng(0)
    views = [img] + [sample_patch(img, rng) for _ in range(p)]
    feats = np.stack([featurize(v, sigma, geom, edge_channel) for v in views])
    return aggregate_candidates(uv_array_to_rgb(_predict_uv(model, feats)))


def evaluate(model, samples: Sequence[Sample], p: int = 0, seed: int = 0, edge_channel: bool = True) -> np.ndarray:
    """Per-sample angular errors (degrees) of ``predict_aggregate``."""
    est = np.stack([
        predict_aggregate(model, s.image, p, np.random.default_rng([seed, i]), edge_channel=edge_channel).rgb
        for i, s in enumerate(samples)
    ])
    truth = np.stack([s.truth.rgb for s in samples])
    return angular_errors(truth, est)


# ---------------------------------------------------------------- cross validation

def threefold_split(ids: Sequence[str], seed: int = 0, k: int = 3) -> FoldSplit:
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    return FoldSplit(tuple([ids[i] for i in order[f::k]] for f in range(k)))


def cross_validate(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    k: int = 3,
    p_test: int = 16,
    seed: int = 0,
) -> tuple[dict, list]:
    """Train on k-1 folds, test on the held-out one; returns ({id: error}, models)."""
    by_id = {s.id: s for s in samples}
    split = threefold_split(list(by_id), seed, k)
    errors, models = {}, []
    for f in range(k):
        train_ids, test_ids = split.train_test(f)
        result = train([by_id[i] for i in train_ids], cfg, model_cfg)
        test = [by_id[i] for i in test_ids]
        errs = evaluate(result.model, test, p_test, seed=seed + f, edge_channel=cfg.edge_channel)
        errors.update(zip(test_ids, errs))
        models.append(result.model)
        log.info("fold %d: mean error %.3f deg over %d images", f, float(np.mean(errs)), len(test))
    return errors, models


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ADCC_THREADS", "1")))
    except ValueError:
        return 1
