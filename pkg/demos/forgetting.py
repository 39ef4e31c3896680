"""Train a base field, then add views from a new regime three ways and watch
what happens to the old views.

    python demos/forgetting.py [--steps-scale 0.3]

Prints per-regime PSNR for the base, plain finetuning, finetuning with KD,
and the residual controller with and without gating.
"""
import argparse

import numpy as np

from deltanerf.experiment import gated_pair, render_eval
from deltanerf.gating import GateConfig, base_view_of
from deltanerf.metrics import psnr
from deltanerf.scene import gen_terrain, make_dataset
from deltanerf.train import TrainConfig, finetune, poses_of, train_base, train_incremental


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps-scale", type=float, default=0.3, help="fraction of the default step budget")
    args = ap.parse_args()

    scene = gen_terrain(args.seed)
    split = make_dataset(scene, 5, 4, 4, seed=args.seed)
    frame = scene.frame()
    cfg = TrainConfig(seed=args.seed)
    n = lambda steps: max(20, int(steps * args.steps_scale))
    poses = poses_of(split.initial)

    def report(name, outs):
        by = {"initial": [], "incremental": []}
        for o, v in zip(outs, split.test):
            by[v.meta["regime"]].append(psnr(np.clip(o["rgb"], 0, 1), v.rgb))
        print(f"{name:18s} old views {np.mean(by['initial']):6.2f} dB   new views {np.mean(by['incremental']):6.2f} dB")

    render = lambda m: [render_eval(m, v, frame, 24) for v in split.test]

    print("training the base on the initial views ...")
    base, _ = train_base(split.initial, frame, cfg.replace(steps=n(1000)))
    report("base", render(base))

    inc = cfg.replace(steps=n(600))
    ft, _ = finetune(base, split.incremental, frame, inc)
    report("finetune", render(ft))
    ftkd, _ = finetune(base, split.incremental, frame, inc, kd=True, anchor_poses=poses)
    report("finetune + KD", render(ftkd))

    comp, _ = train_incremental(base, split.incremental, frame, inc, anchor_poses=poses)
    outs = render(comp)
    report("controller", outs)
    anchor = render(base_view_of(comp))
    report("controller, gated", [gated_pair(b, r, v, GateConfig()) for b, r, v in zip(anchor, outs, split.test)])
    print(f"base hash unchanged: {base.hash() == comp.base.hash()}")


if __name__ == "__main__":
    main()
