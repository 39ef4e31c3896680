"""Pick a compact, depth-covering subset from a pool of 17 views.

    python demos/view_selection.py [--tau 0.95]
"""
import argparse

from deltanerf.scene import gen_terrain, sample_view
from deltanerf.viewselect import select_views


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tau", type=float, default=0.95)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    scene = gen_terrain(args.seed)
    pool = [sample_view(scene, "initial" if i % 2 == 0 else "incremental", args.seed, i) for i in range(17)]
    rep = select_views(pool, tau=args.tau, seed=args.seed)
    print(rep.text(), end="")


if __name__ == "__main__":
    main()
