"""Desk-scale reference experiment: train on two synthetic folds, test on the third.

Reports the held-out angular-error summary next to the Gray-World and
White-Patch baselines, optionally with the edge channel zeroed. Example:

    python scripts/reference_run.py --epochs 150 --patches 1 --out runs/ref
    python scripts/reference_run.py --epochs 150 --patches 1 --no-edge --out runs/noedge
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from adcc import network as net
from adcc import pipeline as P
from adcc.evalkit import angular_errors, gray_world, summarize, white_patch, write_errors_csv


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=500)
    ap.add_argument("--scene-seed", type=int, default=0)
    ap.add_argument("--split-seed", type=int, default=0)
    ap.add_argument("--fold", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--patches", type=int, default=1, help="recoloured patches per image and epoch")
    ap.add_argument("--test-patches", type=int, nargs="+", default=[0, 4, 16])
    ap.add_argument("--no-edge", action="store_true")
    ap.add_argument("--palette", choices=["checker", "uniform"], default="checker")
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene_cfg = P.SyntheticSceneConfig(palette=args.palette)
    data = P.synth_dataset(args.scenes, scene_cfg, seed=args.scene_seed)
    train_ids, test_ids = P.threefold_split([s.id for s in data], seed=args.split_seed).train_test(args.fold)
    by_id = {s.id: s for s in data}
    train, test = [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]
    truth = np.stack([s.truth.rgb for s in test])

    results = {"config": vars(args)}
    for name, fn in (("gray_world", gray_world), ("white_patch", white_patch)):
        err = angular_errors(truth, np.stack([fn(s.image).rgb for s in test]))
        results[name] = summarize(err).__dict__
        print(f"{name:12s} mean {err.mean():.3f}  median {np.median(err):.3f}")

    cfg = P.TrainConfig(epochs=args.epochs, patches_per_image=args.patches, seed=args.scene_seed, edge_channel=not args.no_edge)
    t0 = time.perf_counter()

    def progress(epoch, loss, lr):
        print(f"epoch {epoch:4d}  loss {loss:.6f}  lr {lr:.0e}  {time.perf_counter() - t0:7.0f} s", flush=True)

    res = P.train(train, cfg, net.ModelConfig(), log_path=out / "loss.log", checkpoint_path=out / "model.ckpt", progress=progress)
    results["train_seconds"] = time.perf_counter() - t0

    for p in args.test_patches:
        err = P.evaluate(res.model, test, p, seed=args.split_seed, edge_channel=cfg.edge_channel)
        results[f"test_p{p}"] = summarize(err).__dict__
        write_errors_csv(out / f"errors_p{p}.csv", test_ids, err)
        print(f"held-out p={p:<3d} mean {err.mean():.3f}  median {np.median(err):.3f}")
    err = P.evaluate(res.model, train, 0, edge_channel=cfg.edge_channel)
    results["train_p0"] = summarize(err).__dict__
    print(f"training set  mean {err.mean():.3f}")
    (out / "results.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
