"""Mask-supervision ablation on the 20-scene occlusion set.

Trains "w/o supervision" (gamma_mask=0) and "w supervision" (gamma_mask>0)
for each seed at an equal step budget and reports mean train 3D IoU plus
the own-mask vs occluder-mask attention statistic.

    python3 scripts/ablation.py --steps 4000 --seeds 0 1 2
"""
import argparse
import json
import time

import numpy as np

from iafa import data as D
from iafa import detector as det
from iafa.losses import LossWeights


def run(scenes, seed, steps, gamma_mask, cfg):
    tcfg = det.TrainConfig(steps=steps, seed=seed, weights=LossWeights(1.0, 1.0, gamma_mask))
    res = det.train(scenes, cfg, tcfg)
    iou = det.mean_train_iou(scenes, res.params, cfg)
    rows = [r for s in scenes for r in det.occlusion_attention(s, res.params, cfg)]
    flags = [f for s in scenes for f in det.resolvable_occlusions(s, cfg).values()]
    wins = sum(own > occ for _, _, own, occ in rows)
    return {"seed": seed, "gamma_mask": gamma_mask, "iou": iou,
            "own_gt_occluder": wins, "occluded": len(rows), "resolvable": sum(flags),
            "wins_on_resolvable": sum(own > occ for (_, _, own, occ), f in zip(rows, flags) if f),
            "final_total": res.curve[-1][4]}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=4000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--gamma-mask", type=float, default=1.0)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()
    scenes = D.generate_dataset(args.scenes, args.data_seed, D.SceneConfig(occlusion_pairs=1))
    cfg = det.DetectorConfig()
    results = []
    for seed in args.seeds:
        for g in (0.0, args.gamma_mask):
            t = time.time()
            r = run(scenes, seed, args.steps, g, cfg)
            r["seconds"] = round(time.time() - t, 1)
            results.append(r)
            print(json.dumps(r), flush=True)
    for g in (0.0, args.gamma_mask):
        ious = [r["iou"] for r in results if r["gamma_mask"] == g]
        print(f"gamma_mask={g}: mean IoU {np.mean(ious):.4f} per seed {[round(x, 4) for x in ious]}")


if __name__ == "__main__":
    main()
