"""Experiment orchestration: train every method on a toy scene, score it on
the shared test views and write the report.

Metric table columns (``metrics.csv``)::

    seed, method, psnr, ssim, mae, params

Wall-clock times go to ``timings.csv`` instead so that the metric file is
byte-identical across reruns.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, ContractError, DeltaNerfError
from .field import FieldArch
from .gating import GateConfig, base_view_of, fuse, gate_map
from .metrics import mae_dsm, psnr, ssim
from .render import depth_to_altitude, render_image
from .scene import DatasetSplit, gen_terrain, make_dataset
from .train import (STUDENT_ARCH, TrainConfig, distill_student, finetune, make_ewc_state, poses_of, train_base,
                    train_incremental)
from .viewselect import select_views

METHODS = ("initial_only", "finetune", "finetune_kd", "ewc", "joint", "delta_ungated", "delta_gated", "student")
METRIC_COLUMNS = ("seed", "method", "psnr", "ssim", "mae", "params")
ACC_FLOOR = 0.1
KD_ANCHORS = ("poses", "new")

# (controller, kd, gating) -> method name
ABLATION = {
    (False, False, False): "finetune",
    (False, True, False): "finetune_kd",
    (False, False, True): "finetune_gated",
    (False, True, True): "finetune_kd_gated",
    (True, False, False): "delta_nokd_ungated",
    (True, False, True): "delta_nokd_gated",
    (True, True, False): "delta_ungated",
    (True, True, True): "delta_gated",
}


def ablation_name(controller, kd, gating):
    return ABLATION[(bool(controller), bool(kd), bool(gating))]


@dataclass
class ExperimentPlan:
    seeds: list = field(default_factory=lambda: [0])
    n_initial: int = 5
    n_incremental: int = 4
    n_test: int = 4
    image_size: int = 32
    noise_level: float = 0.01
    methods: list = field(default_factory=lambda: list(METHODS))
    ablation: bool = False
    select: bool = False  # train on the selected subset of each pool
    tau: float = 0.95
    selection_floor: float = 0.5
    base: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1000))
    incremental: TrainConfig = field(default_factory=lambda: TrainConfig(steps=600))
    distill: TrainConfig = field(default_factory=lambda: TrainConfig(steps=1500, lr=4e-3))
    gate: GateConfig = field(default_factory=GateConfig)
    arch: FieldArch = field(default_factory=FieldArch)
    student_arch: FieldArch = STUDENT_ARCH
    eval_samples: int = 24
    kd_anchor: str = "poses"  # "poses": KD on rays from the initial poses; "new": on the training batch
    out_dir: str | None = None

    def __post_init__(self):
        if not self.methods and not self.ablation:
            raise ConfigError("plan has no methods")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}; choose from {METHODS}")
        if not self.seeds:
            raise ConfigError("plan needs at least one seed")
        if self.kd_anchor not in KD_ANCHORS:
            raise ConfigError(f"kd_anchor must be one of {KD_ANCHORS}")
        if min(self.n_initial, self.n_incremental, self.n_test) < 1:
            raise ConfigError("split sizes must be positive")

    def method_list(self):
        names = list(self.methods)
        if self.ablation:
            names += [n for n in ABLATION.values() if n not in names]
        return names

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("arch", "student_arch"):
            d[k] = getattr(self, k).to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown plan keys: {sorted(unknown)}")
        for k in ("base", "incremental", "distill"):
            if k in d:
                d[k] = TrainConfig.from_dict(d[k])
        if "gate" in d:
            try:
                d["gate"] = GateConfig(**d["gate"])
            except (TypeError, ContractError) as e:
                raise ConfigError(f"bad gate config: {e}") from e
        for k in ("arch", "student_arch"):
            if k in d:
                d[k] = FieldArch.from_dict(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read plan {path}: {e}") from e


@dataclass
class MetricRow:
    seed: int
    method: str
    psnr: float
    ssim: float
    mae: float
    params: int

    def cells(self):
        return [str(self.seed), self.method, repr(float(self.psnr)), repr(float(self.ssim)),
                repr(float(self.mae)), str(int(self.params))]


@dataclass
class ExperimentResult:
    rows: list
    timings: list  # (seed, stage, seconds)
    failures: list  # (seed, method, message)
    images: dict  # (seed, method) -> per-test-view renders
    models: dict = field(default_factory=dict)  # (seed, name) -> model
    selections: dict = field(default_factory=dict)

    def table(self, seed=None):
        """{method: MetricRow} for one seed (the first if None)."""
        seed = self.rows[0].seed if seed is None else seed
        return {r.method: r for r in self.rows if r.seed == seed}

    def value(self, method, metric="psnr", seed=None):
        return getattr(self.table(seed)[method], metric)


# ---------------------------------------------------------------- evaluation


def render_eval(model, view, frame, n_samples):
    """Render a test view with the first appearance embedding (row 0)."""
    return render_image(model, view.camera, frame, 0, view.sun_dir, n_samples)


def gated_pair(base_out, refined_out, view, config):
    g = gate_map(base_out, refined_out, view.rgb, config)
    return {"rgb": fuse(base_out["rgb"], refined_out["rgb"], g), "depth": refined_out["depth"],
            "acc": refined_out["acc"], "gate": g}


def score(out, view):
    """(psnr, ssim, mae) of one render against a test view."""
    rgb = np.clip(out["rgb"], 0.0, 1.0)
    alt_pred = depth_to_altitude(out["depth"], view.camera)
    alt_gt = depth_to_altitude(view.depth_gt, view.camera)
    mask = out["acc"] >= ACC_FLOOR
    mae = mae_dsm(alt_pred, alt_gt, mask) if mask.any() else float("nan")
    return psnr(rgb, view.rgb), ssim(rgb, view.rgb), mae


def mean_scores(outs, views):
    s = np.array([score(o, v) for o, v in zip(outs, views)])
    return tuple(float(x) for x in s.mean(axis=0))


# ---------------------------------------------------------------- pipeline


def build_split(plan, seed):
    scene = gen_terrain(seed)
    split = make_dataset(scene, plan.n_initial, plan.n_incremental, plan.n_test, seed=seed,
                         size=plan.image_size, noise_level=plan.noise_level)
    selections = {}
    if plan.select:
        keep = {}
        for name in ("initial", "incremental"):
            pool = getattr(split, name)
            rep = select_views(pool, plan.tau, seed=seed, floor=plan.selection_floor)
            selections[name] = rep
            keep[name] = [v for v in pool if v.index in set(rep.selected)]
        split = DatasetSplit(keep["initial"], keep["incremental"], split.test)
    return scene, split, selections


class _Timer:
    def __init__(self, log, seed, stage):
        self.log, self.seed, self.stage = log, seed, stage

    def __enter__(self):
        self.t = time.perf_counter()

    def __exit__(self, *exc):
        self.log.append((self.seed, self.stage, time.perf_counter() - self.t))


def run_seed(plan, seed, result, progress=None):
    say = progress or (lambda msg: None)
    scene, split, selections = build_split(plan, seed)
    result.selections[seed] = selections
    frame = scene.frame()
    bcfg = plan.base.replace(seed=seed)
    icfg = plan.incremental.replace(seed=seed)
    wanted = set(plan.method_list())
    poses = poses_of(split.initial) if plan.kd_anchor == "poses" else None
    tests = split.test
    T = result.timings

    def evaluate(name, outs, params):
        p, s, m = mean_scores(outs, tests)
        result.rows.append(MetricRow(seed, name, p, s, m, params))
        result.images[(seed, name)] = outs
        say(f"seed {seed} {name:20s} psnr {p:6.2f}  ssim {s:.3f}  mae {m:.2f}")

    def guarded(name, fn):
        try:
            fn()
        except DeltaNerfError as e:
            result.failures.append((seed, name, f"{type(e).__name__}: {e}"))
            say(f"seed {seed} {name} FAILED: {e}")

    render = lambda model: [render_eval(model, v, frame, plan.eval_samples) for v in tests]

    with _Timer(T, seed, "base"):
        base, _ = train_base(split.initial, frame, bcfg, plan.arch)
    result.models[(seed, "base")] = base
    base_outs = render(base)
    if "initial_only" in wanted:
        evaluate("initial_only", base_outs, base.param_count())

    refined = {}  # method -> (model, renders)

    def run_finetune(name, kd=False, ewc=False):
        def go():
            with _Timer(T, seed, name):
                state = make_ewc_state(base, split.initial, frame, icfg) if ewc else None
                model, _ = finetune(base, split.incremental, frame, icfg, kd=kd, ewc=state, anchor_poses=poses)
            refined[name] = (model, render(model))
            result.models[(seed, name)] = model
            evaluate(name, refined[name][1], model.param_count())
        guarded(name, go)

    needs = lambda *names: any(n in wanted for n in names)
    if needs("finetune", "finetune_gated"):
        run_finetune("finetune")
    if needs("finetune_kd", "finetune_kd_gated"):
        run_finetune("finetune_kd", kd=True)
    if needs("ewc"):
        run_finetune("ewc", ewc=True)
    for name in ("finetune", "finetune_kd"):
        if f"{name}_gated" in wanted and name in refined:
            outs = [gated_pair(b, r, v, plan.gate) for b, r, v in zip(base_outs, refined[name][1], tests)]
            evaluate(f"{name}_gated", outs, refined[name][0].param_count())

    if needs("joint"):
        def go_joint():
            with _Timer(T, seed, "joint"):
                model, _ = train_base(split.initial + split.incremental, frame,
                                      bcfg.replace(steps=bcfg.steps + icfg.steps), plan.arch)
            result.models[(seed, "joint")] = model
            evaluate("joint", render(model), model.param_count())
        guarded("joint", go_joint)

    def run_delta(tag, cfg, gated_name, ungated_name):
        def go():
            with _Timer(T, seed, tag):
                comp, _ = train_incremental(base, split.incremental, frame, cfg, anchor_poses=poses)
            result.models[(seed, tag)] = comp
            outs = render(comp)
            anchor = [render_eval(base_view_of(comp), v, frame, plan.eval_samples) for v in tests]
            if ungated_name in wanted:
                evaluate(ungated_name, outs, comp.param_count())
            if gated_name in wanted or (tag == "delta" and "student" in wanted):
                g = [gated_pair(b, r, v, plan.gate) for b, r, v in zip(anchor, outs, tests)]
                evaluate(gated_name, g, comp.param_count())
        guarded(tag, go)

    if needs("delta_gated", "delta_ungated", "student"):
        run_delta("delta", icfg, "delta_gated", "delta_ungated")
    if needs("delta_nokd_gated", "delta_nokd_ungated"):
        run_delta("delta_nokd", icfg.replace(lambda_kd=0.0), "delta_nokd_gated", "delta_nokd_ungated")

    if "student" in wanted and (seed, "delta") in result.models:
        def go_student():
            comp = result.models[(seed, "delta")]
            with _Timer(T, seed, "student"):
                student, _ = distill_student(comp, plan.gate, split.initial + split.incremental, frame,
                                             plan.distill.replace(seed=seed), plan.student_arch)
            result.models[(seed, "student")] = student
            evaluate("student", render(student), student.param_count())
        guarded("student", go_student)
    return result


def run_experiment(plan, progress=None):
    result = ExperimentResult([], [], [], {})
    for seed in plan.seeds:
        try:
            run_seed(plan, seed, result, progress)
        except DeltaNerfError as e:
            result.failures.append((seed, "pipeline", f"{type(e).__name__}: {e}"))
            if progress:
                progress(traceback.format_exc())
    if plan.out_dir:
        emit_report(result, plan.out_dir, plan)
    return result


# ---------------------------------------------------------------- report


def write_metrics_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow(r.cells())


def read_metrics_csv(path):
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        if tuple(header) != METRIC_COLUMNS:
            raise ContractError(f"{path}: unexpected header {header}")
        return [MetricRow(int(s), m, float(p), float(q), float(a), int(n)) for s, m, p, q, a, n in rd]


def _mean_by_method(rows, metric):
    out = {}
    for r in rows:
        out.setdefault(r.method, []).append(getattr(r, metric))
    return {m: float(np.nanmean(v)) for m, v in out.items()}


def bar_svg(values, title, unit=""):
    """Minimal horizontal bar chart as an SVG string."""
    names = list(values)
    vals = np.array([values[n] for n in names], float)
    finite = vals[np.isfinite(vals)]
    hi = max(float(finite.max()) if finite.size else 1.0, 1e-9)
    row, left, width = 22, 150, 300
    h = 40 + row * len(names)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{left + width + 90}" height="{h}" font-family="monospace" font-size="12">',
             f'<text x="8" y="18" font-weight="bold">{title}</text>']
    for k, (n, v) in enumerate(zip(names, vals)):
        y = 30 + k * row
        w = 0 if not np.isfinite(v) else max(0.0, v) / hi * width
        parts.append(f'<text x="8" y="{y + 14}">{n}</text>')
        parts.append(f'<rect x="{left}" y="{y}" width="{w:.1f}" height="{row - 6}" fill="#4a7ab5"/>')
        parts.append(f'<text x="{left + w + 6:.1f}" y="{y + 14}">{v:.3f}{unit}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _grid(images):
    return np.concatenate(images, axis=1)


def _norm01(a):
    a = np.asarray(a, float)
    lo, hi = np.nanmin(a), np.nanmax(a)
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


def emit_report(result, directory, plan=None):
    """metrics.csv, timings.csv, failures.txt, per-method image strips and one SVG per metric."""
    if not result.rows:
        raise ContractError("nothing to report: no metric rows")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.rows, d / "metrics.csv")
    with open(d / "timings.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("seed", "stage", "seconds"))
        for s, stage, sec in result.timings:
            w.writerow((s, stage, f"{sec:.3f}"))
    (d / "failures.txt").write_text("".join(f"seed {s} {m}: {msg}\n" for s, m, msg in result.failures))
    if plan is not None:
        (d / "plan.json").write_text(json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n")
    img = d / "images"
    img.mkdir(exist_ok=True)
    for (seed, method), outs in sorted(result.images.items()):
        stem = f"seed{seed}_{method}"
        io.write_ppm(img / f"{stem}_rgb.ppm", _grid([np.clip(o["rgb"], 0, 1) for o in outs]))
        io.write_pgm(img / f"{stem}_depth.pgm", _norm01(_grid([o["depth"] for o in outs])))
        if "gate" in outs[0]:
            io.write_pgm(img / f"{stem}_gate.pgm", _grid([o["gate"] for o in outs]))
    units = {"psnr": " dB", "ssim": "", "mae": " m"}
    for metric in ("psnr", "ssim", "mae"):
        svg = bar_svg(_mean_by_method(result.rows, metric), f"{metric.upper()} (mean over seeds)", units[metric])
        (d / f"{metric}.svg").write_text(svg)
    return d
