import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deltanerf import autodiff as ad
from deltanerf.errors import ContractError, NumericError
from deltanerf.field import FieldParams
from deltanerf.render import (RayBatch, composite, render_image, render_rays, sample_along, sample_ray,
                              slab_bounds)
from deltanerf.scene import orbit_camera


def test_two_sample_worked_example():
    # sigma*delta = ln 2 at both samples -> alpha = 0.5, T = (1, 0.5), w = (0.5, 0.25)
    sd = np.log(2.0)
    res = composite(np.array([[sd, sd]]), np.array([[[1.0, 0, 0], [0, 1.0, 0]]]), np.ones((1, 2)),
                    np.array([[1.0, 3.0]]))
    assert np.allclose(res.weights.data, [[0.5, 0.25]], atol=1e-12, rtol=0)
    assert np.allclose(res.transmittance.data, [[1.0, 0.5]], atol=1e-12, rtol=0)
    assert np.allclose(res.color.data, [[0.5, 0.25, 0.0]], atol=1e-12, rtol=0)
    assert res.acc.data[0] == pytest.approx(0.75, abs=1e-12)
    assert res.depth.data[0] == pytest.approx((0.5 * 1 + 0.25 * 3) / 0.75, abs=1e-12)


def test_single_sample_alpha_one():
    res = composite(np.array([[1e3]]), np.full((1, 1, 3), 0.4), np.ones((1, 1)), np.array([[2.0]]))
    assert np.allclose(res.color.data, 0.4) and res.acc.data[0] == 1.0


def test_empty_ray_has_zero_color_and_finite_depth():
    res = composite(np.zeros((1, 4)), np.ones((1, 4, 3)), np.ones((1, 4)), np.arange(4.0)[None])
    assert res.acc.data[0] == 0.0 and np.all(res.color.data == 0.0) and np.isfinite(res.depth.data[0])


def test_nan_density_rejected():
    with pytest.raises(NumericError):
        composite(np.array([[np.nan, 1.0]]), np.ones((1, 2, 3)), np.ones((1, 2)), np.ones((1, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31))
def test_transmittance_telescopes(n, seed):
    rng = np.random.default_rng(seed)
    sigma = rng.exponential(rng.uniform(0.01, 20), size=(16, n))
    delta = rng.uniform(0.001, 0.5, size=(16, n))
    res = composite(sigma, rng.uniform(size=(16, n, 3)), delta, np.cumsum(delta, axis=1))
    T, a = res.transmittance.data, res.alpha.data
    assert np.allclose(T[:, 1:], T[:, :-1] * (1 - a[:, :-1]), atol=1e-12)
    acc = res.acc.data
    assert np.all(acc >= 0) and np.all(acc <= 1 + 1e-12)
    # sum of weights = 1 - final transmittance
    assert np.allclose(acc, 1 - T[:, -1] * (1 - a[:, -1]), atol=1e-12)


def test_sample_along_midpoints_and_bins():
    t, d = sample_along(np.array([1.0]), np.array([3.0]), 4)
    assert np.allclose(t, [[1.25, 1.75, 2.25, 2.75]]) and np.allclose(d, 0.5)


def test_stratified_samples_stay_in_bins():
    t, d = sample_ray(0.0, 1.0, 8, stratified=True, seed=3)
    k = np.floor(t[0] / d[0, 0])
    assert np.array_equal(k, np.arange(8))


def test_too_few_samples():
    with pytest.raises(ContractError):
        sample_along(np.zeros(1), np.ones(1), 1)


def test_slab_bounds_vertical_ray():
    near, far = slab_bounds(np.array([[0.0, 0, 5]]), np.array([[0.0, 0, -1]]), -1.0, 1.0)
    assert near[0] == 4.0 and far[0] == 6.0


def test_slab_rejects_upward_rays():
    with pytest.raises(ContractError):
        slab_bounds(np.array([[0.0, 0, 5]]), np.array([[0.0, 0, 1]]), -1.0, 1.0)


def test_render_grad_flows_to_density(tiny_arch, scene):
    m = FieldParams.init(tiny_arch, 1, seed=0).trainable()
    cam = orbit_camera(scene, 0.0, 75.0, size=4)
    from deltanerf.render import camera_rays
    rays = camera_rays(cam, scene.frame(), np.array([0.0, 0.0, 1.0]), 0)
    res = render_rays(m, rays, 8)
    W = m.params["head.density.2.W"]
    assert ad.grad_check(lambda: render_rays(m, rays, 8).color.sum(), [W], max_entries=8) <= 1e-5
    assert res.color.shape == (16, 3)


def test_render_image_chunking_is_bit_identical(tiny_arch, scene):
    m = FieldParams.init(tiny_arch, 1, seed=0)
    cam = orbit_camera(scene, 20.0, 75.0, size=10)
    sun = np.array([0.3, 0.2, 0.93])
    a = render_image(m, cam, scene.frame(), 0, sun, n_samples=8, chunk_size=4096)
    b = render_image(m, cam, scene.frame(), 0, sun, n_samples=8, chunk_size=7)
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_raybatch_indexing_and_cat():
    r = RayBatch(np.zeros((4, 3)), np.tile([0, 0, -1.0], (4, 1)), np.zeros(4), np.ones(4), np.arange(4),
                 np.zeros((4, 3)), np.arange(12.0).reshape(4, 3))
    both = RayBatch.cat([r[:2], r[2:]])
    assert len(both) == 4 and np.array_equal(both.rgb, r.rgb) and both.depth is None
