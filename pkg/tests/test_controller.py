import numpy as np
import pytest

from deltanerf import autodiff as ad
from deltanerf.autodiff import Tensor
from deltanerf.controller import CompositeField, ControllerParams, head_residual_forward, trunk_residual_forward
from deltanerf.errors import ContractError
from deltanerf.field import FieldArch, FieldParams, positional_encode
from test_field import random_query

FIELDS = ("density", "rgb", "beta", "sun_vis", "sky")


def outputs(model, q):
    o = model.point_forward(q)
    return {f: getattr(o, f).data for f in FIELDS}


def test_zero_controller_is_bit_exact_identity(tiny_base, rng):
    comp = CompositeField.from_base(tiny_base, 2, seed=0)
    q = random_query(1000, rng, n_images=3)
    a, b = outputs(tiny_base, q), outputs(comp, q)
    for f in FIELDS:
        assert np.array_equal(a[f], b[f]), f


def test_every_output_projection_starts_at_zero(tiny_base):
    ctrl = ControllerParams.init_zero(tiny_base)
    zeros = [k for k in ctrl.params if ".zero." in k]
    assert zeros and all(not ctrl.params[k].data.any() for k in zeros)
    hidden = [k for k in ctrl.params if k.endswith(".W") and ".zero." not in k]
    assert all(ctrl.params[k].data.any() for k in hidden)
    assert not any("density" in k or "beta" in k for k in ctrl.params)


def test_zero_layers_receive_gradient(tiny_base, rng):
    comp = CompositeField.from_base(tiny_base, 1).trainable()
    out = comp.point_forward(random_query(32, rng))
    ad.backward(ad.square(out.rgb - 0.9).sum() + out.density.sum())
    assert np.any(comp.ctrl.params["ctrl.trunk.4.zero.W"].grad != 0)
    assert np.any(comp.ctrl.params["ctrl.head.rgb.2.zero.W"].grad != 0)


def test_perturbing_last_trunk_projection_only_changes_last_layer(tiny_base, rng):
    ctrl = ControllerParams.init_zero(tiny_base)
    enc = Tensor(positional_encode(rng.uniform(-1, 1, (20, 3)), tiny_base.arch.levels_x))
    before = trunk_residual_forward(tiny_base, ctrl, enc, return_layers=True)
    ctrl.params["ctrl.trunk.4.zero.W"].data[:] = rng.normal(size=ctrl.params["ctrl.trunk.4.zero.W"].shape)
    after = trunk_residual_forward(tiny_base, ctrl, enc, return_layers=True)
    for i in range(3):
        assert np.array_equal(before[i].data, after[i].data)
    assert not np.array_equal(before[3].data, after[3].data)


def test_trunk_residual_changes_density_head_residual_does_not(tiny_base, rng):
    q = random_query(50, rng)
    comp = CompositeField.from_base(tiny_base, 1)
    base = outputs(comp, q)
    comp.ctrl.params["ctrl.head.rgb.2.zero.W"].data[:] = 1.0
    heads_only = outputs(comp, q)
    assert np.array_equal(heads_only["density"], base["density"]) and np.array_equal(heads_only["beta"], base["beta"])
    assert not np.array_equal(heads_only["rgb"], base["rgb"])
    comp.ctrl.params["ctrl.trunk.2.zero.W"].data[:] = 0.5
    both = outputs(comp, q)
    assert not np.array_equal(both["density"], base["density"])


def test_head_residual_refuses_physical_heads(tiny_base):
    ctrl = ControllerParams.init_zero(tiny_base)
    with pytest.raises(ContractError):
        head_residual_forward(tiny_base, ctrl, "density", Tensor(np.zeros((1, 16))))


def test_rgb_stays_in_unit_range_for_wild_controller(tiny_base, rng):
    comp = CompositeField.from_base(tiny_base, 1)
    for k, v in comp.ctrl.params.items():
        v.data[:] = rng.normal(0, 5, size=v.shape)
    o = comp.point_forward(random_query(200, rng))
    assert np.all((o.rgb.data >= 0) & (o.rgb.data <= 1))


def test_one_layer_head_reduces_to_sum():
    arch = FieldArch(width=8, depth=2, skip_layer=None, head_hidden=4, head_layers=1, levels_x=1, levels_d=1, embed_dim=2)
    base = FieldParams.init(arch, 1)
    ctrl = ControllerParams.init_zero(base)
    rng = np.random.default_rng(0)
    for k in ("ctrl.head.sky.1.zero.W", "ctrl.head.sky.1.zero.b"):
        ctrl.params[k].data[:] = rng.normal(size=ctrl.params[k].shape)
    u = Tensor(rng.normal(size=(5, 3)))
    got = head_residual_forward(base, ctrl, "sky", u).data
    f1 = u.data @ base.params["head.sky.1.W"].data.T + base.params["head.sky.1.b"].data
    hc = u.data @ ctrl.params["ctrl.head.sky.1.W"].data.T + ctrl.params["ctrl.head.sky.1.b"].data
    df = hc @ ctrl.params["ctrl.head.sky.1.zero.W"].data.T + ctrl.params["ctrl.head.sky.1.zero.b"].data
    assert np.allclose(got, 1 / (1 + np.exp(-(f1 + df))))


def test_composite_grad_check_through_both_streams(tiny_base, rng):
    comp = CompositeField.from_base(tiny_base, 1, seed=2).trainable()
    for k, v in comp.ctrl.params.items():
        if ".zero." in k:
            v.data[:] = rng.normal(0, 0.3, size=v.shape)
    q = random_query(12, rng, n_images=4)
    f = lambda: (ad.square(comp.point_forward(q).rgb - 0.4).sum() + comp.point_forward(q).density.mean())
    assert ad.grad_check(f, comp.tensors(), max_entries=5) <= 1e-4


def test_new_image_beta_uses_fresh_row_and_base_head(tiny_base, rng):
    comp = CompositeField.from_base(tiny_base, 2)
    q = random_query(10, rng)
    q.j = np.full(10, 4)
    beta = comp.point_forward(q).beta.data
    ref = FieldParams(tiny_base.arch, {**tiny_base.params, "embed": comp.embed}, 3).point_forward(q).beta.data
    assert np.array_equal(beta, ref)


def test_mismatched_base_rejected(tiny_base, tmp_path):
    comp = CompositeField.from_base(tiny_base, 1)
    comp.save(tmp_path / "c.ckpt")
    other = FieldParams.init(tiny_base.arch, 3, seed=99)
    with pytest.raises(ContractError):
        CompositeField.load(tmp_path / "c.ckpt", other)
    with pytest.raises(ContractError):
        CompositeField(other, comp.ctrl, comp.embed, comp.j_old)
    back = CompositeField.load(tmp_path / "c.ckpt", tiny_base)
    assert back.param_count() == comp.param_count()


def test_embedding_masks_freeze_old_rows(tiny_base):
    comp = CompositeField.from_base(tiny_base, 2)
    m = comp.masks()[-1]
    assert not m[:3].any() and m[3:].all()
