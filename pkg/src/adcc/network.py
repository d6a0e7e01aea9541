"""Dense-connection network with channel/spatial attention regressing (L_u, L_v)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .chroma import HistogramGeometry
from .edges import BEST_SIGMA
from .tensor import Tensor

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    block_layers: tuple = (2, 2, 2, 2)
    growth_rate: int = 12
    stem_channels: int = 24
    cbam_reduction: int = 16
    input_bins: int = 64
    input_channels: int = 2

    def __post_init__(self):
        object.__setattr__(self, "block_layers", tuple(int(n) for n in self.block_layers))
        if self.input_channels != 2:
            raise ConfigError("the network takes exactly two histogram channels")
        if not self.block_layers or min(self.block_layers) < 1:
            raise ConfigError("block_layers must list positive layer counts")
        if self.growth_rate < 1 or self.stem_channels < 1 or self.cbam_reduction < 1:
            raise ConfigError("growth_rate, stem_channels and cbam_reduction must be positive")
        size = self.input_bins
        for _ in self.block_layers[:-1]:
            if size % 2:
                raise ConfigError(f"input_bins={self.input_bins} cannot be halved {len(self.block_layers) - 1} times")
            size //= 2
        if self.final_channels % self.cbam_reduction:
            raise ConfigError(
                f"attention input has {self.final_channels} channels, not divisible by reduction {self.cbam_reduction}"
            )

    @classmethod
    def densenet121(cls, **kw) -> "ModelConfig":
        """Full-depth layout with dense blocks of 6, 12, 24 and 16 layers."""
        return cls(block_layers=(6, 12, 24, 16), **kw)

    def channel_plan(self) -> list[tuple[int, int]]:
        """(channels entering, channels leaving) for every dense block."""
        plan, c = [], self.stem_channels
        for i, n in enumerate(self.block_layers):
            out = c + n * self.growth_rate
            plan.append((c, out))
            c = out // 2 if i < len(self.block_layers) - 1 else out
        return plan

    @property
    def final_channels(self) -> int:
        return self.channel_plan()[-1][1]


@dataclass
class ModelParams:
    config: ModelConfig
    params: dict
    buffers: dict
    geometry: HistogramGeometry = field(default_factory=HistogramGeometry)
    sigma: float = BEST_SIGMA
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def all_tensors(self) -> dict:
        return {**self.params, **self.buffers}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "ModelParams":
        def conv(d, grad):
            return {k: Tensor(v.data.astype(dtype), requires_grad=grad, name=k) for k, v in d.items()}

        return ModelParams(
            self.config, conv(self.params, True), conv(self.buffers, False),
            self.geometry, self.sigma, self.seed, dict(self.metadata),
        )


# ---------------------------------------------------------------- construction

def _layer_specs(cfg: ModelConfig):
    """Yield (name, shape, kind) for every tensor; a pure function of the config."""
    k = cfg.growth_rate

    def bn(prefix, c):
        yield f"{prefix}.scale", (c,), "one"
        yield f"{prefix}.shift", (c,), "zero"
        yield f"{prefix}.running_mean", (c,), "buf0"
        yield f"{prefix}.running_var", (c,), "buf1"

    yield "stem.weight", (cfg.stem_channels, cfg.input_channels, 3, 3), "he"
    plan = cfg.channel_plan()
    for b, (c_in, c_out) in enumerate(plan):
        for i in range(cfg.block_layers[b]):
            c = c_in + i * k
            p = f"block{b}.layer{i}"
            yield from bn(f"{p}.bn1", c)
            yield f"{p}.conv1.weight", (4 * k, c, 1, 1), "he"
            yield from bn(f"{p}.bn2", 4 * k)
            yield f"{p}.conv2.weight", (k, 4 * k, 3, 3), "he"
        if b < len(plan) - 1:
            yield from bn(f"transition{b}.bn", c_out)
            yield f"transition{b}.conv.weight", (c_out // 2, c_out, 1, 1), "he"
    c = cfg.final_channels
    hidden = c // cfg.cbam_reduction
    yield "cbam.fc1.weight", (hidden, c), "he"
    yield "cbam.fc1.bias", (hidden,), "zero"
    yield "cbam.fc2.weight", (c, hidden), "he"
    yield "cbam.fc2.bias", (c,), "zero"
    yield "cbam.spatial.weight", (1, 2, 7, 7), "he"
    yield "cbam.spatial.bias", (1,), "zero"
    yield from bn("head.bn", c)
    yield "head.fc.weight", (2, c), "he"
    yield "head.fc.bias", (2,), "zero"


def init_params(
    cfg: ModelConfig = ModelConfig(),
    seed: int = 0,
    dtype=np.float32,
    geometry: HistogramGeometry | None = None,
    sigma: float = BEST_SIGMA,
) -> ModelParams:
    """He (fan-in) normal init for weights; unit scale / zero shift for normalisation."""
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for name, shape, kind in _layer_specs(cfg):
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif kind in ("one", "buf1"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        t = Tensor(arr.astype(dtype), requires_grad=not kind.startswith("buf"), name=name)
        (buffers if kind.startswith("buf") else params)[name] = t
    geometry = geometry or HistogramGeometry(bins=cfg.input_bins)
    if geometry.bins != cfg.input_bins:
        raise ConfigError("histogram geometry and model input size disagree")
    return ModelParams(cfg, params, buffers, geometry, float(sigma), int(seed))


# ---------------------------------------------------------------- building blocks

def _bn_relu(x, model: ModelParams, prefix: str, training: bool):
    p, b = model.params, model.buffers
    return T.batch_norm_relu(
        x, p[f"{prefix}.scale"], p[f"{prefix}.shift"],
        b[f"{prefix}.running_mean"], b[f"{prefix}.running_var"],
        training, BN_MOMENTUM, BN_EPS,
    )


def dense_layer(x: Tensor, model: ModelParams, prefix: str, training: bool = False) -> Tensor:
    """BN-ReLU-conv1x1 (4K) then BN-ReLU-conv3x3 (K); spatial size preserved."""
    p = model.params
    expected = p[f"{prefix}.conv1.weight"].shape[1]
    if x.shape[1] != expected:
        raise T.ShapeError(f"{prefix} expects {expected} channels, got {x.shape[1]}")
    h = _bn_relu(x, model, f"{prefix}.bn1", training)
    h = T.conv2d(h, p[f"{prefix}.conv1.weight"])
    h = _bn_relu(h, model, f"{prefix}.bn2", training)
    return T.conv2d(h, p[f"{prefix}.conv2.weight"], padding=1)


def dense_block(x: Tensor, model: ModelParams, index: int, training: bool = False) -> Tensor:
    """Every layer sees the concatenation of the block input and all earlier outputs."""
    features = [x]
    for i in range(model.config.block_layers[index]):
        inp = features[0] if len(features) == 1 else T.concat_channels(features)
        features.append(dense_layer(inp, model, f"block{index}.layer{i}", training))
    return T.concat_channels(features)


def transition(x: Tensor, model: ModelParams, index: int, training: bool = False) -> Tensor:
    h = _bn_relu(x, model, f"transition{index}.bn", training)
    h = T.conv2d(h, model.params[f"transition{index}.conv.weight"])
    return T.avg_pool(h, 2, 2)


def cbam(x: Tensor, model: ModelParams, probe: dict | None = None) -> Tensor:
    """Channel attention from pooled descriptors, then spatial attention from a 7x7 conv."""
    p = model.params
    n, c = x.shape[:2]

    def mlp(z):
        z = T.relu(T.fully_connected(z, p["cbam.fc1.weight"], p["cbam.fc1.bias"]))
        return T.fully_connected(z, p["cbam.fc2.weight"], p["cbam.fc2.bias"])

    att_c = T.sigmoid(T.add(mlp(T.global_avg_pool(x)), mlp(T.global_max_pool(x))))
    x = T.mul(x, T.reshape(att_c, (n, c, 1, 1)))
    pooled = T.concat_channels([T.channel_mean(x), T.channel_max(x)])
    att_s = T.sigmoid(T.conv2d(pooled, p["cbam.spatial.weight"], p["cbam.spatial.bias"], padding=3))
    if probe is not None:
        probe["channel_attention"] = att_c.data.copy()
        probe["spatial_attention"] = att_s.data[:, 0].copy()
    return T.mul(x, att_s)


def forward(model: ModelParams, x, training: bool = False, probe: dict | None = None) -> Tensor:
    """Histogram batch (N, 2, B, B) -> (N, 2) predicted (L_u, L_v).

    A single (2, B, B) input is promoted to a batch of one.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.params["stem.weight"].dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    cfg = model.config
    if x.ndim != 4 or x.shape[1] != cfg.input_channels:
        raise T.ShapeError(f"network input must be (N, 2, B, B), got {x.shape}")
    h = T.conv2d(x, model.params["stem.weight"], padding=1)
    n_blocks = len(cfg.block_layers)
    for b in range(n_blocks):
        h = dense_block(h, model, b, training)
        if b < n_blocks - 1:
            h = transition(h, model, b, training)
    h = cbam(h, model, probe)
    h = _bn_relu(h, model, "head.bn", training)
    h = T.global_avg_pool(h)
    return T.fully_connected(h, model.params["head.fc.weight"], model.params["head.fc.bias"])


def predict_uv(model: ModelParams, batch: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Eval-mode forward over an (N, 2, B, B) array without recording, in chunks."""
    dtype = model.params["stem.weight"].dtype
    out = [forward(model, Tensor(batch[i : i + chunk].astype(dtype))).data for i in range(0, len(batch), chunk)]
    return np.concatenate(out).astype(np.float64)


# ---------------------------------------------------------------- loss

def loss(pred_uv, truth) -> Tensor:
    """Mean of ``1 - cos`` between uv-decoded predictions and unit ground truths.

    ``pred_uv`` is an (N, 2) or (2,) tensor; ``truth`` is an Illuminant, a list of
    them, or an (N, 3) array.
    """
    pred_uv = pred_uv if isinstance(pred_uv, Tensor) else Tensor(np.asarray(pred_uv, dtype=np.float64))
    uv = pred_uv.data.reshape(-1, 2).astype(np.float64)
    if hasattr(truth, "rgb"):
        truth = [truth]
    if isinstance(truth, (list, tuple)) and truth and hasattr(truth[0], "rgb"):
        truth = np.stack([t.rgb for t in truth])
    lit = np.asarray(truth, dtype=np.float64).reshape(-1, 3)
    lit = lit / np.linalg.norm(lit, axis=1, keepdims=True)
    if lit.shape[0] != uv.shape[0]:
        raise T.ShapeError("prediction and truth counts differ")

    m = np.maximum(uv.max(axis=1), 0.0)
    a = np.stack([np.exp(uv[:, 0] - m), np.exp(-m), np.exp(uv[:, 1] - m)], axis=1)
    norm = np.linalg.norm(a, axis=1)
    cos = np.sum(lit * a, axis=1) / norm
    n = uv.shape[0]
    value = np.mean(1.0 - cos)

    def bw(g):
        # d cos / d a = L/|a| - cos a/|a|^2 ;  a_r = e^u, a_b = e^v (shift m cancels)
        dcos_da = lit / norm[:, None] - cos[:, None] * a / (norm**2)[:, None]
        d_uv = np.stack([dcos_da[:, 0] * a[:, 0], dcos_da[:, 2] * a[:, 2]], axis=1)
        grad = (-float(g) / n) * d_uv
        return (grad.reshape(pred_uv.shape).astype(pred_uv.dtype),)

    return T.record(np.asarray(value, dtype=np.float64), (pred_uv,), bw)


# ---------------------------------------------------------------- checkpoints

def save_model(path, model: ModelParams, extra: dict | None = None) -> None:
    cfg = model.config
    meta = {
        "model.block_layers": ",".join(map(str, cfg.block_layers)),
        "model.growth_rate": cfg.growth_rate,
        "model.stem_channels": cfg.stem_channels,
        "model.cbam_reduction": cfg.cbam_reduction,
        "model.input_bins": cfg.input_bins,
        "model.input_channels": cfg.input_channels,
        "geometry.bins": model.geometry.bins,
        "geometry.u_min": repr(model.geometry.u_min),
        "geometry.v_min": repr(model.geometry.v_min),
        "geometry.epsilon": repr(model.geometry.epsilon),
        "sigma": repr(model.sigma),
        "seed": model.seed,
    }
    meta.update(model.metadata)
    meta.update(extra or {})
    T.save_tensors(path, {k: v.data for k, v in model.all_tensors().items()}, {k: str(v) for k, v in meta.items()})


def load_model(path) -> ModelParams:
    tensors, meta = T.load_tensors(path)
    cfg = ModelConfig(
        block_layers=tuple(int(x) for x in meta["model.block_layers"].split(",")),
        growth_rate=int(meta["model.growth_rate"]),
        stem_channels=int(meta["model.stem_channels"]),
        cbam_reduction=int(meta["model.cbam_reduction"]),
        input_bins=int(meta["model.input_bins"]),
        input_channels=int(meta["model.input_channels"]),
    )
    geom = HistogramGeometry(
        bins=int(meta["geometry.bins"]),
        u_min=float(meta["geometry.u_min"]),
        v_min=float(meta["geometry.v_min"]),
        epsilon=float(meta["geometry.epsilon"]),
    )
    params, buffers = {}, {}
    for name, shape, kind in _layer_specs(cfg):
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name}")
        arr = tensors[name]
        if arr.shape != shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != expected {shape}")
        buf = kind.startswith("buf")
        (buffers if buf else params)[name] = Tensor(arr.copy(), requires_grad=not buf, name=name)
    known = {k for k in meta if k.startswith(("model.", "geometry.")) or k in ("sigma", "seed")}
    extra = {k: v for k, v in meta.items() if k not in known}
    return ModelParams(cfg, params, buffers, geom, float(meta["sigma"]), int(meta["seed"]), extra)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
