"""Command-line entry point: ``deltanerf <subcommand> ...``.

Exit codes: 0 ok, 1 configuration / input error, 2 numeric failure,
3 invariant violation.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .controller import CompositeField
from .errors import ConfigError, ContractError, InvariantError, NumericError
from .experiment import (ExperimentPlan, ExperimentResult, MetricRow, emit_report, gated_pair, mean_scores,
                         read_metrics_csv, render_eval, run_experiment, write_metrics_csv)
from .field import FieldArch, FieldParams
from .gating import GateConfig, base_view_of
from .scene import gen_terrain, load_dataset, make_dataset, save_dataset
from .train import (STUDENT_ARCH, VARIANTS, TrainConfig, distill_student, poses_of, train_base, train_baseline,
                    train_incremental)
from .viewselect import read_manifest, select_views, write_selection

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the numeric-failure code
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _read_json(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def _train_cfg(args, section):
    """TrainConfig from the JSON config's ``section`` plus command-line overrides."""
    d = dict(_read_json(args.config).get(section, {}))
    for key in ("steps", "lr", "batch_rays", "n_samples", "lambda_kd", "lambda_ewc", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return TrainConfig.from_dict(d)


def _gate_cfg(args):
    d = dict(_read_json(getattr(args, "config", None)).get("gate", {}))
    if getattr(args, "lam", None) is not None:
        d["lam"] = args.lam
    try:
        return GateConfig(**d)
    except (TypeError, ContractError) as e:
        raise ConfigError(f"bad gate config: {e}") from e


def _arch(args, section, default):
    d = _read_json(args.config).get(section)
    if d is None:
        return default
    try:
        return FieldArch.from_dict(d)
    except TypeError as e:
        raise ConfigError(f"bad {section}: {e}") from e


def _load(data):
    if not Path(data, "scene.json").exists():
        raise ConfigError(f"{data}: not a dataset directory (run gen-scene first)")
    return load_dataset(data)


def _subset(views, manifest):
    if manifest is None:
        return views
    keep = set(read_manifest(manifest))
    out = [v for v in views if v.index in keep]
    if not out:
        raise ConfigError(f"manifest {manifest} selects none of these views")
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_scene(args):
    scene = gen_terrain(args.seed)
    split = make_dataset(scene, args.n_initial, args.n_incremental, args.n_test, seed=args.seed,
                         size=args.size, noise_level=args.noise)
    save_dataset(scene, split, args.out)
    print(f"wrote {len(split.all_views())} views of scene {scene.identity()[:12]} to {args.out}")


def cmd_select_views(args):
    _, split = _load(args.data)
    pools = {"initial": split.initial, "incremental": split.incremental,
             "train": split.initial + split.incremental}
    rep = select_views(pools[args.split], tau=args.tau, seed=args.seed, floor=args.floor)
    path = write_selection(rep, args.out)
    print(rep.text(), end="")
    print(f"manifest: {path}")


def cmd_train_base(args):
    scene, split = _load(args.data)
    cfg = _train_cfg(args, "base")
    arch = _arch(args, "arch", FieldArch())
    model, log = train_base(_subset(split.initial, args.manifest), scene.frame(), cfg, arch,
                            n_images=len(split.initial))
    model.save(args.out)
    if args.log:
        log.write_csv(args.log)
    print(f"base {model.hash()[:12]}  params {model.param_count()}  final loss {log.final_loss():.5f}")


def cmd_train_incremental(args):
    scene, split = _load(args.data)
    base = FieldParams.load(args.base)
    poses = poses_of(split.initial) if args.kd_anchor == "poses" else None
    comp, log = train_incremental(base, _subset(split.incremental, args.manifest), scene.frame(),
                                  _train_cfg(args, "incremental"), anchor_poses=poses)
    comp.save(args.out)
    if args.log:
        log.write_csv(args.log)
    print(f"controller for base {base.hash()[:12]}  params {comp.param_count()}  final loss {log.final_loss():.5f}")


def cmd_train_baseline(args):
    scene, split = _load(args.data)
    base = FieldParams.load(args.base) if args.base else None
    if base is None and args.variant != "joint":
        raise ConfigError(f"variant {args.variant} needs --base")
    model, log = train_baseline(args.variant, split, scene.frame(), _train_cfg(args, "base"),
                                _train_cfg(args, "incremental"), base, _arch(args, "arch", FieldArch()),
                                kd_anchor=args.kd_anchor)
    model.save(args.out, meta={"variant": args.variant})
    if args.log and log is not None:
        log.write_csv(args.log)
    print(f"{args.variant}  params {model.param_count()}")


def cmd_distill(args):
    scene, split = _load(args.data)
    base = FieldParams.load(args.base)
    comp = CompositeField.load(args.controller, base)
    student, log = distill_student(comp, _gate_cfg(args), split.initial + split.incremental, scene.frame(),
                                   _train_cfg(args, "distill"), _arch(args, "student_arch", STUDENT_ARCH))
    student.save(args.out, kind="student")
    print(f"student params {student.param_count()} ({student.param_count() / comp.param_count():.1%} of teacher)")


def cmd_evaluate(args):
    scene, split = _load(args.data)
    frame, tests = scene.frame(), split.test
    model = FieldParams.load(args.model)
    n = args.n_samples
    if args.controller:
        comp = CompositeField.load(args.controller, model)
        outs = [render_eval(comp, v, frame, n) for v in tests]
        params = comp.param_count()
        if args.gated:
            anchor = [render_eval(base_view_of(comp), v, frame, n) for v in tests]
            outs = [gated_pair(b, r, v, _gate_cfg(args)) for b, r, v in zip(anchor, outs, tests)]
    else:
        if args.gated:
            raise ConfigError("--gated needs --controller")
        outs = [render_eval(model, v, frame, n) for v in tests]
        params = model.param_count()
    p, s, m = mean_scores(outs, tests)
    row = MetricRow(args.seed, args.method, p, s, m, params)
    if args.out:
        rows = read_metrics_csv(args.out) if args.append and Path(args.out).exists() else []
        write_metrics_csv(rows + [row], args.out)
    print(f"{args.method}: psnr {p:.3f} dB  ssim {s:.4f}  mae {m:.3f} m  params {params}")


def _plan(args, **overrides):
    plan = ExperimentPlan.from_dict({**_read_json(args.config), **overrides})
    if args.seeds:
        plan.seeds = [int(s) for s in args.seeds.split(",")]
    return plan


def cmd_ablate(args):
    plan = _plan(args, ablation=True, out_dir=args.out)
    res = run_experiment(plan, progress=print)
    _finish(res)


def cmd_report(args):
    if args.metrics:
        rows = read_metrics_csv(args.metrics)
        emit_report(ExperimentResult(rows, [], [], {}), args.out)
        print(f"report written to {args.out}")
        return
    if not args.config:
        raise ConfigError("report needs --config (run the pipeline) or --metrics (re-plot)")
    res = run_experiment(_plan(args, out_dir=args.out), progress=print)
    _finish(res)


def _finish(res):
    if res.failures:
        for seed, name, msg in res.failures:
            print(f"FAILED seed {seed} {name}: {msg}", file=sys.stderr)
        kinds = " ".join(m for _, _, m in res.failures)
        if "InvariantError" in kinds:
            raise InvariantError("one or more stages violated an invariant")
        if "NumericError" in kinds:
            raise NumericError("one or more stages hit a numeric failure")
        raise ConfigError("one or more stages failed")


# ---------------------------------------------------------------- parser


def build_parser():
    p = _Parser(prog="deltanerf", description="Incremental residual radiance-field lab on toy terrain.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def train_flags(sp):
        sp.add_argument("--config", help="JSON file with base/incremental/distill/gate sections")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-rays", dest="batch_rays", type=int)
        sp.add_argument("--n-samples", dest="n_samples", type=int)
        sp.add_argument("--lambda-kd", dest="lambda_kd", type=float)
        sp.add_argument("--lambda-ewc", dest="lambda_ewc", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--log", help="write the per-step loss log as CSV")
        sp.add_argument("--kd-anchor", dest="kd_anchor", choices=("poses", "new"), default="poses",
                        help="KD on rays from the initial views' poses (default) or on the training batch")

    sp = sub.add_parser("gen-scene", help="generate a toy terrain and its view splits")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-initial", type=int, default=5)
    sp.add_argument("--n-incremental", type=int, default=4)
    sp.add_argument("--n-test", type=int, default=2)
    sp.add_argument("--size", type=int, default=32)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.set_defaults(fn=cmd_gen_scene)

    sp = sub.add_parser("select-views", help="depth-aware subset selection; writes a manifest")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("initial", "incremental", "train"), default="train")
    sp.add_argument("--tau", type=float, default=0.95)
    sp.add_argument("--floor", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_select_views)

    sp = sub.add_parser("train-base", help="train the base field on the initial views")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    train_flags(sp)
    sp.set_defaults(fn=cmd_train_base)

    sp = sub.add_parser("train-incremental", help="train a residual controller over a frozen base")
    sp.add_argument("--data", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--manifest")
    train_flags(sp)
    sp.set_defaults(fn=cmd_train_incremental)

    sp = sub.add_parser("train-baseline", help="joint / initial_only / finetune / finetune_kd / ewc")
    sp.add_argument("--variant", required=True, choices=VARIANTS)
    sp.add_argument("--data", required=True)
    sp.add_argument("--base")
    sp.add_argument("--out", required=True)
    train_flags(sp)
    sp.set_defaults(fn=cmd_train_baseline)

    sp = sub.add_parser("distill", help="compress base + controller into a small student field")
    sp.add_argument("--data", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lam", type=float, help="gate sharpness")
    train_flags(sp)
    sp.set_defaults(fn=cmd_distill)

    sp = sub.add_parser("evaluate", help="score a checkpoint on the test views")
    sp.add_argument("--data", required=True)
    sp.add_argument("--model", required=True, help="field, baseline or student checkpoint (or the base, with --controller)")
    sp.add_argument("--controller")
    sp.add_argument("--gated", action="store_true")
    sp.add_argument("--lam", type=float)
    sp.add_argument("--config")
    sp.add_argument("--method", default="model")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-samples", type=int, default=24)
    sp.add_argument("--out", help="metrics CSV to write")
    sp.add_argument("--append", action="store_true", help="append to an existing metrics CSV")
    sp.set_defaults(fn=cmd_evaluate)

    for name, fn, hlp in (("ablate", cmd_ablate, "run every controller/KD/gating combination"),
                          ("report", cmd_report, "run the full pipeline from a plan file and write the report")):
        sp = sub.add_parser(name, help=hlp)
        sp.add_argument("--config", required=(name == "ablate"))
        sp.add_argument("--out", required=True)
        sp.add_argument("--seeds", help="comma-separated seeds overriding the plan")
        if name == "report":
            sp.add_argument("--metrics", help="re-plot an existing metrics.csv instead of running")
        sp.set_defaults(fn=fn)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except (ConfigError, ContractError, FileNotFoundError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
