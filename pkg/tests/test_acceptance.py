"""Acceptance criteria, one verdict line each.

The heavy criteria share one three-seed run of the default experiment plan.
Verdict lines are collected in ``conftest.ACCEPTANCE`` and printed in the
terminal summary.
"""
import time

import numpy as np
import pytest

from deltanerf import autodiff as ad
from deltanerf.autodiff import Tensor
from deltanerf.controller import CompositeField
from deltanerf.experiment import ExperimentPlan, run_experiment
from deltanerf.field import FieldArch, FieldParams
from deltanerf.gating import GateConfig, fuse, gate, gated_render
from deltanerf.render import composite, render_image
from deltanerf.scene import gen_terrain, make_dataset, orbit_camera, sample_view, sun_direction
from deltanerf.train import (EwcState, TrainConfig, estimate_fisher, ewc_penalty, finetune, make_ewc_state, rays_of,
                             rgb_loss, train_base, train_incremental)
from deltanerf.viewselect import coverage, embed_view, embedding_matrices, select_views, validate_selection

from conftest import ACCEPTANCE
from test_field import random_query

SEEDS = (0, 1, 2)
TIME_TARGET_S = 30 * 60
SHORT = TrainConfig(steps=40)


def verdict(num, name, ok, detail):
    ACCEPTANCE.append(f"[{'PASS' if ok else 'FAIL'}] {num:02d} {name}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    plan = ExperimentPlan(seeds=list(SEEDS), out_dir=str(out))
    t = time.perf_counter()
    res = run_experiment(plan)
    return res, time.perf_counter() - t, out


@pytest.fixture(scope="module")
def small_scene():
    s = gen_terrain(0)
    return s, make_dataset(s, 2, 2, 1, seed=0, size=16), s.frame()


def per_seed(res, method):
    return np.array([res.value(method, seed=s) for s in SEEDS])


# ---------------------------------------------------------------- 1


def test_01_identity_at_init():
    rng = np.random.default_rng(0)
    base = FieldParams.init(FieldArch(), n_images=5, seed=0)
    comp = CompositeField.from_base(base, 4, seed=1)
    q = random_query(1000, rng, n_images=5)
    a, b = base.point_forward(q), comp.point_forward(q)
    fields = ("density", "rgb", "beta", "sun_vis", "sky")
    same_q = all(np.array_equal(getattr(a, f).data, getattr(b, f).data) for f in fields)

    s = gen_terrain(0)
    cam, sun = orbit_camera(s, 30.0, 60.0, size=64), sun_direction(120.0, 45.0)
    ia = render_image(base, cam, s.frame(), 0, sun, 24)
    ib = render_image(comp, cam, s.frame(), 0, sun, 24)
    same_img = all(np.array_equal(ia[k], ib[k]) for k in ("rgb", "depth", "acc", "beta"))
    verdict(1, "identity at init", same_q and same_img,
            f"1000 queries bit-exact={same_q}, 64x64 image bit-exact={same_img}")


# ---------------------------------------------------------------- 2


@pytest.mark.slow
def test_02_base_hash_frozen(small_scene, full_run):
    _, split, frame = small_scene
    base, _ = train_base(split.initial, frame, SHORT)
    before = base.hash()
    comp, _ = train_incremental(base, split.incremental, frame, SHORT)
    short_ok = base.hash() == before == comp.base.hash()
    res = full_run[0]
    full_ok = all(res.models[(s, "delta")].base.hash() == res.models[(s, "base")].hash() for s in SEEDS)
    verdict(2, "base unchanged by incremental training", short_ok and full_ok,
            f"hash {before[:12]} kept={short_ok}, experiment bases kept on {len(SEEDS)} seeds={full_ok}")


# ---------------------------------------------------------------- 3


def test_03_gradient_checks():
    rng = np.random.default_rng(3)
    base = FieldParams.init(FieldArch(), n_images=3, seed=0)
    comp = CompositeField.from_base(base, 1, seed=2).trainable()
    for k, v in comp.ctrl.params.items():
        if ".zero." in k:
            v.data[:] = rng.normal(0, 0.05, size=v.shape)
    q = random_query(8, rng, n_images=4)

    def comp_loss():
        o = comp.point_forward(q)
        return ad.square(o.rgb - 0.4).sum() + o.density.mean() + o.sun_vis.sum() + o.sky.mean()

    e_comp = ad.grad_check(comp_loss, comp.tensors(), max_entries=6)

    c = Tensor(rng.uniform(size=(16, 3)), requires_grad=True)
    beta = Tensor(rng.uniform(0.05, 0.5, size=16), requires_grad=True)
    gt = rng.uniform(size=(16, 3))
    e_beta = ad.grad_check(lambda: rgb_loss(c, gt, beta, 3), [c, beta])

    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    state = EwcState({"w": rng.normal(size=(4, 5))}, {"w": rng.uniform(size=(4, 5))}, 100.0)
    e_ewc = ad.grad_check(lambda: ewc_penalty({"w": w}, state), [w])
    worst = max(e_comp, e_beta, e_ewc)
    verdict(3, "gradient checks", worst <= 1e-4,
            f"composite {e_comp:.2e}, beta-weighted {e_beta:.2e}, ewc {e_ewc:.2e} (tol 1e-4)")


# ---------------------------------------------------------------- 4


def test_04_gate_algebra(small_scene):
    rng = np.random.default_rng(4)
    e = rng.uniform(0, 1, 10**5)
    s = rng.uniform(0.1, 10, 10**5)
    half = np.all(gate(e, e, s, 1000.0) == 0.5)
    e2 = rng.uniform(0, 1, 10**5)
    sym = float(np.max(np.abs(gate(e, e2, s, 7.0) + gate(e2, e, s, 7.0) - 1.0)))
    cb, cr = rng.uniform(size=(10**5, 3)), rng.uniform(size=(10**5, 3))
    g = rng.uniform(size=10**5)
    f = fuse(cb, cr, g)
    convex = bool(np.all(f >= np.minimum(cb, cr) - 1e-15) and np.all(f <= np.maximum(cb, cr) + 1e-15))

    _, split, frame = small_scene
    base = FieldParams.init(FieldArch(), n_images=2, seed=0)
    comp = CompositeField.from_base(base, 2, seed=1)
    for k, v in comp.ctrl.params.items():
        if ".zero." in k:
            v.data[:] = rng.normal(0, 0.1, size=v.shape)
    view = split.test[0]
    on = gated_render(comp, view, frame, GateConfig(), j=0, n_samples=24)
    off = render_image(comp, view.camera, frame, 0, view.sun_dir, 24)
    depth_same = np.array_equal(on["depth"], off["depth"])
    ok = half and sym <= 1e-12 and convex and depth_same
    verdict(4, "gate algebra", ok,
            f"g=0.5 at ties={half}, symmetry err {sym:.1e}, convex on 1e5={convex}, depth bit-identical={depth_same}")


# ---------------------------------------------------------------- 5


def test_05_transmittance():
    rng = np.random.default_rng(5)
    worst, in_range = 0.0, True
    for _ in range(10):
        n = int(rng.integers(2, 48))
        sigma = rng.exponential(rng.uniform(0.01, 30), size=(10**4, n))
        delta = rng.uniform(0.001, 0.5, size=(10**4, n))
        res = composite(sigma, rng.uniform(size=(10**4, n, 3)), delta, np.cumsum(delta, axis=1))
        T, a, acc = res.transmittance.data, res.alpha.data, res.acc.data
        worst = max(worst, float(np.max(np.abs(T[:, 1:] - T[:, :-1] * (1 - a[:, :-1])))))
        in_range &= bool(np.all((acc >= 0) & (acc <= 1)))
    sd = np.log(2.0)
    two = composite(np.array([[sd, sd]]), np.ones((1, 2, 3)), np.ones((1, 2)), np.array([[1.0, 2.0]]))
    ex = float(np.max(np.abs(two.weights.data - [[0.5, 0.25]])))
    ok = worst <= 1e-12 and in_range and ex <= 1e-12
    verdict(5, "transmittance telescoping", ok,
            f"1e5 rays max err {worst:.1e}, acc in [0,1]={in_range}, two-sample weights err {ex:.1e}")


# ---------------------------------------------------------------- 6-8, 10 (full experiment)


@pytest.mark.slow
def test_06_method_ordering(full_run):
    res, seconds, _ = full_run
    assert not res.failures, res.failures
    gated, ftkd, ft, joint = (per_seed(res, m) for m in ("delta_gated", "finetune_kd", "finetune", "joint"))
    order = bool(np.all(gated >= ftkd) and np.all(ftkd >= ft))
    close = bool(np.all(gated >= joint - 1.5))
    fmt = lambda a: "/".join(f"{x:.2f}" for x in a)
    verdict(6, "PSNR ordering", order and close,
            f"gated {fmt(gated)} >= ft+kd {fmt(ftkd)} >= ft {fmt(ft)}; joint {fmt(joint)}; "
            f"wall {seconds / 60:.1f} min (target {TIME_TARGET_S // 60})")


@pytest.mark.slow
def test_07_gating_helps(full_run):
    res = full_run[0]
    gated, ungated = per_seed(res, "delta_gated"), per_seed(res, "delta_ungated")
    wins = int(np.sum(gated > ungated))
    verdict(7, "gated beats ungated", wins == len(SEEDS),
            f"{wins}/{len(SEEDS)} seeds, margin {np.round(gated - ungated, 2).tolist()} dB")


@pytest.mark.slow
def test_08_student(full_run):
    res = full_run[0]
    ratios = [res.table(s)["student"].params / res.table(s)["delta_gated"].params for s in SEEDS]
    gap = per_seed(res, "delta_gated") - per_seed(res, "student")
    ok = max(ratios) <= 0.20 and bool(np.all(gap <= 2.0))
    verdict(8, "student distillation", ok,
            f"size {max(ratios):.1%} of composite, psnr gap to teacher {np.round(gap, 2).tolist()} dB (tol 2)")


# ---------------------------------------------------------------- 9


def test_09_view_selection():
    s = gen_terrain(0)
    pool = [sample_view(s, "initial" if i % 2 == 0 else "incremental", 0, i) for i in range(17)]
    rep = select_views(pool, tau=0.95, seed=0)
    mats = embedding_matrices([embed_view(v) for v in pool])
    passed, facets = validate_selection(rep.selected, list(range(17)), mats, floor=0.5)
    ranges = {v.index: embed_view(v).depth_range for v in pool}

    rng = np.random.default_rng(9)
    mono = True
    for _ in range(1000):
        big = [i for i in range(17) if rng.uniform() < 0.6] or [0]
        small = [i for i in big if rng.uniform() < 0.5]
        mono &= coverage(small, range(17), ranges) <= coverage(big, range(17), ranges)
    ok = len(rep.selected) <= 9 and rep.coverage >= 0.95 and passed and mono
    verdict(9, "view selection", ok,
            f"{len(rep.selected)} of 17 views, coverage {rep.coverage:.3f}, "
            f"min facet {min(facets.values()):.2f}, monotone on 1000 pairs={mono}")


# ---------------------------------------------------------------- 10


@pytest.mark.slow
def test_10_baselines(small_scene, full_run):
    _, split, frame = small_scene
    base, _ = train_base(split.initial, frame, SHORT)
    cfg = SHORT.replace(lambda_ewc=0.0)
    ft, _ = finetune(base, split.incremental, frame, cfg)
    state = make_ewc_state(base, split.initial, frame, cfg)
    ewc, _ = finetune(base, split.incremental, frame, cfg, ewc=state)
    bit = ft.hash() == ewc.hash()

    fisher = estimate_fisher(base, rays_of(split.initial, frame), 64, 8, names=list(state.anchor))
    anchored = EwcState({k: base.params[k].data.copy() for k in fisher}, fisher, 100.0)
    at_anchor = ewc_penalty(base.params, anchored).item()

    res = full_run[0]
    joint, init = per_seed(res, "joint"), per_seed(res, "initial_only")
    wins = int(np.sum(joint >= init))
    ok = bit and at_anchor == 0.0 and wins == len(SEEDS)
    verdict(10, "baselines", ok,
            f"ewc(0)==finetune bit-exact={bit}, penalty at anchor {at_anchor}, joint>=initial {wins}/{len(SEEDS)}")


# ---------------------------------------------------------------- 11


@pytest.mark.slow
def test_11_reproducible_metrics(full_run, tmp_path):
    res, _, out = full_run
    plan = ExperimentPlan.load(out / "plan.json")
    plan.out_dir = str(tmp_path)
    run_experiment(plan)
    a, b = (out / "metrics.csv").read_bytes(), (tmp_path / "metrics.csv").read_bytes()
    verdict(11, "reproducible metrics", a == b,
            f"{len(a.splitlines()) - 1} rows, byte-identical={a == b}")
