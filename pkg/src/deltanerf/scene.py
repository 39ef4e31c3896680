"""Synthetic satellite-like scenes: heightfield terrain, materials, sun.

A :class:`SceneModel` is the ground-truth world.  Views are rendered with
pinhole cameras at high elevation angles; each pixel's depth is the exact
ray/heightfield intersection distance and its colour is Lambertian sun
shading plus a sky ambient term plus per-view Gaussian noise.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import io
from .errors import ContractError

MATERIALS = np.array([
    [0.22, 0.40, 0.18],  # vegetation
    [0.58, 0.47, 0.33],  # bare soil
    [0.70, 0.70, 0.72],  # concrete
    [0.45, 0.22, 0.18],  # roof tiles
])
SKY_BASE = np.array([0.55, 0.68, 0.95])
AMBIENT = 0.35


@dataclass
class SceneModel:
    heightfield: np.ndarray  # (G, G) altitudes in meters
    albedo: np.ndarray  # (G, G, 3) in [0, 1]
    extent: float  # side length of the square tile, meters
    seed: int

    def __post_init__(self):
        g = self.heightfield.shape[0]
        if self.heightfield.shape != (g, g) or g < 32:
            raise ContractError("heightfield must be a square grid of at least 32x32")
        if self.albedo.shape != (g, g, 3):
            raise ContractError("albedo must be (G, G, 3)")

    @property
    def grid_size(self):
        return self.heightfield.shape[0]

    @property
    def cell(self):
        return self.extent / (self.grid_size - 1)

    def identity(self):
        """Content hash; every view of the scene records it."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.heightfield, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.albedo, dtype="<f8").tobytes())
        h.update(repr(float(self.extent)).encode())
        return h.hexdigest()[:16]

    def frame(self):
        return Frame.for_scene(self)

    # bilinear lookups, xy in world meters (array (..., 2))
    def _grid_coords(self, xy):
        g = self.grid_size
        f = (np.asarray(xy) + self.extent / 2.0) / self.cell
        f = np.clip(f, 0.0, g - 1.0)
        i0 = np.minimum(np.floor(f).astype(int), g - 2)
        return i0, f - i0

    def _bilinear(self, grid, xy):
        i0, w = self._grid_coords(xy)
        ix, iy = i0[..., 0], i0[..., 1]
        wx, wy = w[..., 0], w[..., 1]
        if grid.ndim == 3:
            wx, wy = wx[..., None], wy[..., None]
        # grid is indexed [iy, ix]
        return ((1 - wx) * (1 - wy) * grid[iy, ix] + wx * (1 - wy) * grid[iy, ix + 1]
                + (1 - wx) * wy * grid[iy + 1, ix] + wx * wy * grid[iy + 1, ix + 1])

    def height_at(self, xy):
        return self._bilinear(self.heightfield, xy)

    def albedo_at(self, xy):
        return self._bilinear(self.albedo, xy)

    def normal_at(self, xy):
        dhdy, dhdx = np.gradient(self.heightfield, self.cell)
        gx = self._bilinear(dhdx, xy)
        gy = self._bilinear(dhdy, xy)
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)


@dataclass(frozen=True)
class Frame:
    """Shared normalization: world meters -> [-1, 1] box used by every model."""

    center: tuple
    scale: float
    z_lo: float  # world altitude bounds of the sampling slab
    z_hi: float

    @classmethod
    def for_scene(cls, scene):
        h = scene.heightfield
        pad = max(1.0, 0.1 * float(h.max() - h.min()))
        z_lo, z_hi = float(h.min()) - pad, float(h.max()) + pad
        return cls((0.0, 0.0, 0.5 * (z_lo + z_hi)), scene.extent / 2.0, z_lo, z_hi)

    def to_norm(self, p):
        return (np.asarray(p) - np.asarray(self.center)) / self.scale

    def to_world(self, p):
        return np.asarray(p) * self.scale + np.asarray(self.center)

    @property
    def z_bounds_norm(self):
        c = self.center[2]
        return (self.z_lo - c) / self.scale, (self.z_hi - c) / self.scale


def _smooth_noise(rng, g, sigmas, weights):
    out = np.zeros((g, g))
    for s, w in zip(sigmas, weights):
        f = gaussian_filter(rng.standard_normal((g, g)), s, mode="wrap")
        out += w * f / (np.abs(f).max() + 1e-12)
    return out


def gen_terrain(seed, grid_size=64, relief_amplitude=12.0, extent=100.0):
    """Procedural heightfield with a few material regions; deterministic per seed."""
    if grid_size < 32:
        raise ContractError("grid_size must be >= 32")
    rng = np.random.default_rng(seed)
    g = grid_size
    relief = _smooth_noise(rng, g, [g / 6, g / 14, g / 30], [1.0, 0.45, 0.15])
    relief = (relief - relief.min()) / (np.ptp(relief) + 1e-12)
    height = relief_amplitude * relief
    mat = _smooth_noise(rng, g, [g / 10, g / 24], [1.0, 0.3])
    cuts = np.quantile(mat, [0.3, 0.6, 0.85])
    labels = np.digitize(mat, cuts)
    texture = 1.0 + 0.08 * _smooth_noise(rng, g, [1.0], [1.0])
    albedo = np.clip(MATERIALS[labels] * texture[..., None], 0.0, 1.0)
    return SceneModel(height, albedo, float(extent), int(seed))


# ---------------------------------------------------------------- cameras


@dataclass
class Camera:
    origin: np.ndarray  # (3,) world meters
    rotation: np.ndarray  # (3, 3) camera->world, columns: right, down, forward
    width: int
    height: int
    focal: float  # pixels

    def ray_dirs(self):
        """Unit world-space directions through pixel centres, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u - self.width / 2) / self.focal, (v - self.height / 2) / self.focal,
                      np.ones_like(u)], axis=-1)
        d = d @ self.rotation.T
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self):
        return {"origin": self.origin.tolist(), "rotation": self.rotation.tolist(),
                "width": self.width, "height": self.height, "focal": self.focal}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["origin"], float), np.array(d["rotation"], float),
                   int(d["width"]), int(d["height"]), float(d["focal"]))


def look_at(origin, target, width, height, focal):
    origin, target = np.asarray(origin, float), np.asarray(target, float)
    fwd = target - origin
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.999 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return Camera(origin, np.stack([right, down, fwd], axis=1), width, height, focal)


def orbit_camera(scene, azimuth_deg, elevation_deg, size=32, distance=300.0, footprint=0.6):
    """Camera on a sphere around the tile centre; ``footprint`` is the
    fraction of the tile spanned by the image at nadir."""
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    target = np.array([0.0, 0.0, float(np.mean(scene.heightfield))])
    origin = target + distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    focal = distance * size / (footprint * scene.extent)
    return look_at(origin, target, size, size, focal)


def sun_direction(azimuth_deg, elevation_deg):
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def sky_color(sun_dir):
    return SKY_BASE * (0.6 + 0.4 * float(sun_dir[2]))


# ---------------------------------------------------------------- rendering


def intersect(scene, origins, dirs, n_march=400, n_bisect=40):
    """First intersection distance of world rays with the heightfield.

    Returns (t, hit_mask).  Rays are marched through the altitude slab of
    the terrain and refined by bisection.
    """
    origins = np.broadcast_to(origins, dirs.shape)
    h = scene.heightfield
    z_hi, z_lo = float(h.max()) + 1e-6, float(h.min()) - 1e-6
    dz = dirs[..., 2]
    if np.any(dz >= 0):
        return np.zeros(dirs.shape[:-1]), np.zeros(dirs.shape[:-1], bool)
    t0 = (origins[..., 2] - z_hi) / -dz
    t1 = (origins[..., 2] - z_lo) / -dz
    ts = t0[..., None] + (t1 - t0)[..., None] * np.linspace(0.0, 1.0, n_march)
    pts = origins[..., None, :] + ts[..., None] * dirs[..., None, :]
    below = pts[..., 2] <= scene.height_at(pts[..., :2])
    hit = below.any(axis=-1)
    k = np.argmax(below, axis=-1)
    lo = np.take_along_axis(ts, np.maximum(k - 1, 0)[..., None], -1)[..., 0]
    hi = np.take_along_axis(ts, k[..., None], -1)[..., 0]
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        p = origins + mid[..., None] * dirs
        under = p[..., 2] <= scene.height_at(p[..., :2])
        hi = np.where(under, mid, hi)
        lo = np.where(under, lo, mid)
    t = hi
    p = origins + t[..., None] * dirs
    inside = np.all(np.abs(p[..., :2]) <= scene.extent / 2.0, axis=-1)
    return t, hit & inside


@dataclass
class ViewRecord:
    rgb: np.ndarray  # (H, W, 3)
    depth_gt: np.ndarray  # (H, W) meters along the ray
    camera: Camera
    sun_dir: np.ndarray  # (3,) unit
    timestamp: float
    index: int
    scene_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.rgb.shape[:2]


def shade(scene, points, sun_dir):
    """Noise-free Lambertian + sky ambient colour at world surface points."""
    xy = points[..., :2]
    lambert = np.maximum(0.0, scene.normal_at(xy) @ sun_dir)
    light = lambert[..., None] + AMBIENT * sky_color(sun_dir)
    return scene.albedo_at(xy) * light


def render_view(scene, camera, sun_dir, timestamp=0.0, noise_level=0.01, index=0, noise_seed=None):
    sun_dir = np.asarray(sun_dir, float)
    sun_dir = sun_dir / np.linalg.norm(sun_dir)
    dirs = camera.ray_dirs()
    t, hit = intersect(scene, camera.origin, dirs)
    if not hit.any():
        raise ContractError("camera misses the scene entirely")
    if not hit.all():
        raise ContractError(f"{int((~hit).sum())} pixels miss the terrain tile; narrow the camera footprint")
    pts = camera.origin + t[..., None] * dirs
    rgb = shade(scene, pts, sun_dir)
    if noise_level > 0:
        rng = np.random.default_rng([scene.seed, index, 7] if noise_seed is None else noise_seed)
        rgb = rgb + noise_level * rng.standard_normal(rgb.shape)
    return ViewRecord(np.clip(rgb, 0.0, 1.0), t, camera, sun_dir, float(timestamp), int(index),
                      scene.identity())


# ---------------------------------------------------------------- datasets

# Geometry regimes.  Initial and incremental pools differ in camera azimuth
# and in sun elevation/azimuth; test views alternate between the two.
REGIMES = {
    "initial": {"cam_az": (-50.0, 50.0), "cam_el": (68.0, 84.0), "sun_az": (120.0, 160.0), "sun_el": (58.0, 72.0)},
    "incremental": {"cam_az": (130.0, 230.0), "cam_el": (62.0, 80.0), "sun_az": (200.0, 250.0), "sun_el": (32.0, 46.0)},
}


@dataclass
class DatasetSplit:
    initial: list
    incremental: list
    test: list

    def all_views(self):
        return self.initial + self.incremental + self.test


def _view_rng(seed, index):
    return np.random.default_rng([int(seed), int(index), 11])


def timestamp_for(seed, index):
    """Acquisition time in days; depends only on (seed, index)."""
    return 30.0 * index + float(_view_rng(seed, index).uniform(0.0, 10.0))


def sample_view(scene, regime, seed, index, size=32, noise_level=0.01):
    r = REGIMES[regime]
    rng = _view_rng(seed, index)
    rng.uniform()  # timestamp draw
    cam = orbit_camera(scene, rng.uniform(*r["cam_az"]), rng.uniform(*r["cam_el"]), size=size)
    sun = sun_direction(rng.uniform(*r["sun_az"]), rng.uniform(*r["sun_el"]))
    v = render_view(scene, cam, sun, timestamp_for(seed, index), noise_level, index,
                    noise_seed=[int(seed), int(index), 13])
    v.meta["regime"] = regime
    return v


def make_dataset(scene, n_initial, n_incremental, n_test, seed=0, size=32, noise_level=0.01):
    """Disjoint initial / incremental / test views of one scene.

    Indices run 0..n-1 with initial views first, then incremental, then
    test.  Test views alternate initial-like and incremental-like geometry
    starting with initial-like.
    """
    if min(n_initial, n_incremental, n_test) < 1:
        raise ContractError("every split needs at least one view")
    idx = 0
    out = {"initial": [], "incremental": [], "test": []}
    for name, count in (("initial", n_initial), ("incremental", n_incremental)):
        for _ in range(count):
            out[name].append(sample_view(scene, name, seed, idx, size, noise_level))
            idx += 1
    for k in range(n_test):
        regime = "initial" if k % 2 == 0 else "incremental"
        v = sample_view(scene, regime, seed, idx, size, noise_level)
        v.meta["split"] = "test"
        out["test"].append(v)
        idx += 1
    for name in ("initial", "incremental"):
        for v in out[name]:
            v.meta["split"] = name
    return DatasetSplit(out["initial"], out["incremental"], out["test"])


# ---------------------------------------------------------------- disk layout
#
#   <dir>/scene.json          seed, extent, grid size, identity
#   <dir>/heightfield.f64     (G, G) float array
#   <dir>/albedo.f64          (G, G, 3) float array
#   <dir>/views/view_0003.ppm 16-bit RGB
#   <dir>/views/view_0003.depth.f64
#   <dir>/views/view_0003.json camera, sun_dir, timestamp, index, split


def save_scene(scene, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    io.write_f64(d / "heightfield.f64", scene.heightfield)
    io.write_f64(d / "albedo.f64", scene.albedo)
    meta = {"seed": scene.seed, "extent": scene.extent, "grid_size": scene.grid_size, "identity": scene.identity()}
    (d / "scene.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_scene(directory):
    d = Path(directory)
    meta = json.loads((d / "scene.json").read_text())
    return SceneModel(io.read_f64(d / "heightfield.f64"), io.read_f64(d / "albedo.f64"),
                      float(meta["extent"]), int(meta["seed"]))


def save_view(view, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = f"view_{view.index:04d}"
    io.write_ppm(d / f"{stem}.ppm", view.rgb)
    io.write_f64(d / f"{stem}.depth.f64", view.depth_gt)
    meta = {"camera": view.camera.to_dict(), "sun_dir": view.sun_dir.tolist(), "timestamp": view.timestamp,
            "index": view.index, "scene_id": view.scene_id, **view.meta}
    (d / f"{stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_view(directory, index):
    d = Path(directory)
    stem = f"view_{index:04d}"
    meta = json.loads((d / f"{stem}.json").read_text())
    extra = {k: v for k, v in meta.items() if k not in ("camera", "sun_dir", "timestamp", "index", "scene_id")}
    return ViewRecord(io.read_ppm(d / f"{stem}.ppm"), io.read_f64(d / f"{stem}.depth.f64"),
                      Camera.from_dict(meta["camera"]), np.array(meta["sun_dir"], float),
                      float(meta["timestamp"]), int(meta["index"]), meta["scene_id"], extra)


def save_dataset(scene, split, directory):
    save_scene(scene, directory)
    for v in split.all_views():
        save_view(v, Path(directory) / "views")


def load_dataset(directory):
    scene = load_scene(directory)
    vdir = Path(directory) / "views"
    views = sorted((load_view(vdir, int(p.stem.split("_")[1])) for p in vdir.glob("view_*.json")),
                   key=lambda v: v.index)
    groups = {"initial": [], "incremental": [], "test": []}
    for v in views:
        groups[v.meta.get("split", "initial")].append(v)
    return scene, DatasetSplit(groups["initial"], groups["incremental"], groups["test"])
