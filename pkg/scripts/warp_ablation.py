"""Warping-module ablation.

For each seed, trains two base models on the same deforming synthetic
scenes with identical batches: one with the reference-warping offsets
trainable, one with them frozen at zero. Compares held-out MSE.

Usage:
    python3 scripts/warp_ablation.py --out runs/ablation --seeds 0,1,2
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from dynfield import dataio, training


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--frames", type=int, default=40, help="frames per scene")
    p.add_argument("--held-out", type=int, default=8, help="trailing frames per scene kept out of training")
    p.add_argument("--coarse", type=int, default=400)
    p.add_argument("--joint", type=int, default=600)
    p.add_argument("--rays", type=int, default=64)
    p.add_argument("--samples", type=int, default=24)
    p.add_argument("--refs", type=int, default=4)
    p.add_argument("--amplitude", type=float, default=1.0)
    return p.parse_args(argv)


def run_arm(scenes, held_ids, cfg):
    train_subsets = [s.subset(list(range(len(s) - len(held_ids)))) for s in scenes]
    model, _ = training.train_base(train_subsets, cfg)
    mses = []
    for scene, subset in zip(scenes, train_subsets):
        refs = training.clip_references(model, subset, cfg.n_references)
        rows = training.evaluate_frames(model, scene, held_ids, cfg, refs=refs)
        mses.extend(r["mse"] for r in rows)
    return float(np.mean(mses))


def run_seed(seed, args, out_dir):
    data = os.path.join(out_dir, f"seed{seed}_data")
    dirs = []
    for i in range(2):
        path = os.path.join(data, f"scene_{i}")
        if not os.path.isdir(path):
            dataio.generate_synthetic_scene(
                path, seed=seed * 31 + i, n_frames=args.frames,
                resolution=args.resolution, deformation_amplitude=args.amplitude)
        dirs.append(path)
    scenes = [dataio.load_scene(d) for d in dirs]
    held_ids = list(range(args.frames - args.held_out, args.frames))

    base_cfg = dict(
        coarse_iters=args.coarse, joint_iters=args.joint,
        rays_per_batch=args.rays, n_samples=args.samples,
        n_references=args.refs, seed=seed, log_every=10 ** 9)
    warped = run_arm(scenes, held_ids, training.TrainConfig(**base_cfg, train_warp=True))
    frozen = run_arm(scenes, held_ids, training.TrainConfig(**base_cfg, train_warp=False))
    return warped, frozen


def main(argv=None):
    args = parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]

    results = []
    for seed in seeds:
        t0 = time.perf_counter()
        warped, frozen = run_seed(seed, args, args.out)
        dt = time.perf_counter() - t0
        better = warped < frozen
        results.append({"seed": seed, "warped_mse": warped, "frozen_mse": frozen,
                        "warped_better": better})
        print(f"seed {seed}: warped mse {warped:.6f} vs frozen mse {frozen:.6f} "
              f"-> {'warped better' if better else 'FROZEN BETTER'} ({dt:.0f} s)")

    wins = sum(r["warped_better"] for r in results)
    print(f"warping wins {wins}/{len(results)} seeds")
    with open(os.path.join(args.out, "results.json"), "w") as f:
        json.dump(results, f, indent=2)
    return 0 if wins == len(results) else 1


if __name__ == "__main__":
    sys.exit(main())
