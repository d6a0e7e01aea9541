"""Command-line entry point: ``adcc {synth,train,eval,estimate,correct,viz}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import network as net
from . import pipeline as P
from .chroma import build_edge_histogram, build_histogram, diagnostic_features, illuminant_to_uv
from .edges import edge_augment
from .evalkit import summarize, write_errors_csv
from .imaging import Illuminant, apply_illuminant_correction, gamma_encode, load_image_16bit, preprocess, save_png8

log = logging.getLogger("adcc")

# config-file keys that are not TrainConfig fields
MODEL_KEYS = {"block_layers", "growth_rate", "stem_channels", "cbam_reduction", "bins"}
TRAIN_KEYS = {f.name for f in fields(P.TrainConfig)}
FLAG_TO_FIELD = {"patches": "patches_per_image"}


class CliError(Exception):
    pass


def read_config(path) -> dict:
    """``key = value`` lines; keys mirror flag names (dashes or underscores)."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _coerce(key: str, value):
    if isinstance(value, str):
        if key == "block_layers":
            return tuple(int(v) for v in value.replace(" ", "").split(","))
        if key in ("edge_channel",):
            return value.lower() in ("1", "true", "yes", "on")
        if key in ("sigma", "lr", "lr_decay", "decay_at_fraction"):
            return float(value)
        return int(value)
    return value


def build_configs(args) -> tuple[P.TrainConfig, net.ModelConfig]:
    settings = {}
    if args.config:
        settings.update(read_config(args.config))
    for key, value in vars(args).items():
        if value is not None and key not in ("command", "data", "out", "config", "log", "func", "verbose"):
            settings[key] = value
    train_kw, model_kw = {}, {}
    for key, value in settings.items():
        key = FLAG_TO_FIELD.get(key, key)
        if key == "no_edge":
            if value:
                train_kw["edge_channel"] = False
            continue
        if key in TRAIN_KEYS:
            train_kw[key] = _coerce(key, value)
        elif key in MODEL_KEYS:
            model_kw["input_bins" if key == "bins" else key] = _coerce(key, value)
        else:
            raise CliError(f"unknown setting '{key}'")
    return P.TrainConfig(**train_kw), net.ModelConfig(**model_kw)


def _estimation_image(path, bit_depth=16):
    img, raw = load_image_16bit(path, bit_depth=bit_depth)
    return img, preprocess(img, raw=raw if raw.dtype == np.uint16 else None, target=None)


def _estimate(model, img, patches, seed):
    return P.predict_aggregate(model, img, patches, np.random.default_rng(seed))


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = P.SyntheticSceneConfig(
        grid=tuple(args.grid), size=tuple(args.size),
        illuminant_angle_max_deg=args.max_angle, noise_sd=args.noise, palette=args.palette,
    )
    P.save_dataset(args.out, P.synth_dataset(args.count, cfg, seed=args.seed))
    print(f"wrote {args.count} scenes to {args.out}")


def cmd_train(args):
    cfg, model_cfg = build_configs(args)
    data = P.load_dataset(args.data)
    log_path = args.log or f"{args.out}.log"

    def progress(epoch, loss, lr):
        log.info("epoch %d  loss %.6f  lr %.1e", epoch, loss, lr)

    res = P.train(data, cfg, model_cfg, log_path=log_path, checkpoint_path=args.out, progress=progress)
    print(f"trained {cfg.epochs} epochs on {len(data)} images; final loss {res.history[-1][1]:.6f}")
    print(f"checkpoint: {args.out}\nloss log: {log_path}")


def _train_config_from(model: net.ModelParams) -> P.TrainConfig:
    meta = model.metadata
    kw = {"sigma": model.sigma, "seed": model.seed}
    for key, field_name, conv in (
        ("train.epochs", "epochs", int),
        ("train.patches_per_image", "patches_per_image", int),
        ("train.batch_size", "batch_size", int),
        ("train.lr", "lr", float),
        ("train.edge_channel", "edge_channel", lambda s: bool(int(s))),
    ):
        if key in meta:
            kw[field_name] = conv(meta[key])
    return P.TrainConfig(**kw)


def cmd_eval(args):
    model = net.load_model(args.ckpt)
    data = P.load_dataset(args.data)
    edge = bool(int(model.metadata.get("train.edge_channel", "1")))
    if args.folds == 1:
        errors = P.evaluate(model, data, args.patches, seed=args.seed, edge_channel=edge)
        ids = [s.id for s in data]
    elif args.folds >= 2:
        errs, _ = P.cross_validate(data, _train_config_from(model), model.config, k=args.folds, p_test=args.patches, seed=args.seed)
        ids = [s.id for s in data]
        errors = np.array([errs[i] for i in ids])
    else:
        raise CliError("--folds must be >= 1")
    csv_path = args.csv or f"{args.ckpt}.errors.csv"
    write_errors_csv(csv_path, ids, errors)
    print(summarize(errors).format())
    print(f"per-image errors: {csv_path}")


def cmd_estimate(args):
    model = net.load_model(args.ckpt)
    _, img = _estimation_image(args.image)
    est = _estimate(model, img, args.patches, args.seed)
    u, v = illuminant_to_uv(est)
    print("{:.6f} {:.6f} {:.6f}".format(*est.rgb))
    print(f"({u:.6f}, {v:.6f})")


def cmd_correct(args):
    img, prepared = _estimation_image(args.image)
    if args.oracle is not None:
        est = Illuminant(args.oracle)
    elif args.ckpt:
        est = _estimate(net.load_model(args.ckpt), prepared, args.patches, args.seed)
    else:
        raise CliError("correct needs --ckpt or --oracle")
    save_png8(args.out, gamma_encode(apply_illuminant_correction(img, est)))
    print("{:.6f} {:.6f} {:.6f}".format(*est.rgb))


def _to_gray8(a: np.ndarray) -> np.ndarray:
    peak = float(a.max())
    return np.zeros(a.shape, np.uint8) if peak <= 0 else np.round(255 * a / peak).astype(np.uint8)


def cmd_viz(args):
    model = net.load_model(args.ckpt)
    _, img = _estimation_image(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geom, sigma = model.geometry, model.sigma
    m_img = build_histogram(img, geom, normalize=False)
    m_edge = build_edge_histogram(edge_augment(img, sigma), geom, normalize=False)
    maps = {"image_hist": m_img.weights, "edge_hist": m_edge.weights}
    if sigma > 0:
        common, edge_only, img_only = diagnostic_features(m_img, m_edge, sigma)
        maps.update(common=common, edge_only=edge_only, image_only=img_only)
    probe = {}
    net.forward(model, P.featurize(img, sigma, geom)[None], probe=probe)
    att = probe["spatial_attention"][0]
    rep = max(1, geom.bins // att.shape[0])
    maps["spatial_attention"] = np.kron(att, np.ones((rep, rep)))
    for name, a in maps.items():
        # rows follow u, columns follow v
        save_png8(out / f"{name}.png", _to_gray8(a))
    with open(out / "geometry.txt", "w", encoding="utf-8") as fh:
        for k, v in geom.to_dict().items():
            fh.write(f"{k} = {v}\n")
        fh.write(f"sigma = {sigma!r}\naxes = rows:u columns:v\n")
    print(f"wrote {len(maps)} maps to {out}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adcc", description="Histogram-based illuminant estimation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic Mondrian dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--grid", type=int, nargs=2, default=[4, 6], metavar=("R", "C"))
    s.add_argument("--size", type=int, nargs=2, default=[64, 96], metavar=("H", "W"))
    s.add_argument("--max-angle", type=float, default=25.0)
    s.add_argument("--noise", type=float, default=0.005)
    s.add_argument("--palette", choices=["checker", "uniform"], default="checker",
                   help="reflectances from ColorChecker surfaces or uniform per channel")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--log")
    t.add_argument("--epochs", type=int)
    t.add_argument("--patches", type=int)
    t.add_argument("--sigma", type=float)
    t.add_argument("--bins", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--no-edge", action="store_true", default=None, help="zero the edge-histogram channel")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="cross-validate or evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--folds", type=int, default=3)
    e.add_argument("--patches", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--csv")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (
        ("estimate", cmd_estimate, "print the estimated illuminant of one image"),
        ("correct", cmd_correct, "white-balance one image and write an 8-bit PNG"),
        ("viz", cmd_viz, "dump histograms, diagnostic features and attention maps"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--image", required=True)
        c.add_argument("--ckpt", required=name != "correct")
        if name != "estimate":
            c.add_argument("--out", required=True)
        if name != "viz":
            c.add_argument("--patches", type=int, default=16)
            c.add_argument("--seed", type=int, default=0)
        if name == "correct":
            c.add_argument("--oracle", type=float, nargs=3, metavar=("L_R", "L_G", "L_B"))
        c.set_defaults(func=func)
    return ap


def _thread_limit():
    n = os.environ.get("ADCC_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=P.worker_count())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            args.func(args)
    except (CliError, OSError, ValueError, RuntimeError, KeyError) as exc:
        if isinstance(exc, FileNotFoundError):
            msg = f"no such file or directory: {exc.filename or exc}"
        else:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
        print(f"adcc: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
