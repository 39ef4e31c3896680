"""A freshly attached controller changes nothing, bit for bit.

    python demos/identity.py
"""
import numpy as np

from deltanerf.controller import CompositeField
from deltanerf.field import FieldParams
from deltanerf.render import render_image
from deltanerf.scene import gen_terrain, orbit_camera, sun_direction


def main():
    scene = gen_terrain(0)
    base = FieldParams.init(n_images=3, seed=0)
    comp = CompositeField.from_base(base, 2)
    cam, sun = orbit_camera(scene, 20.0, 70.0, size=64), sun_direction(140.0, 60.0)
    a = render_image(base, cam, scene.frame(), 0, sun, 24)
    b = render_image(comp, cam, scene.frame(), 0, sun, 24)
    for k in ("rgb", "depth", "beta"):
        print(f"{k:6s} identical: {np.array_equal(a[k], b[k])}")
    print(f"base params {base.param_count()}, with controller {comp.param_count()}")


if __name__ == "__main__":
    main()
