"""Deterministic synthetic scenes: textured point clouds, z-buffered point
splat renders, and ground-truth camera orbits for desk-scale verification.

The same procedural value-noise field drives both surface displacement and
intensity, so geometric keypoints and intensity keypoints co-locate the way
they do on real embossed surfaces.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraView, Intrinsics, Pose, look_at, project_points, in_frustum_mask, save_poses
from .image import Image, save_pgm
from .pointcloud import PointCloud, save_ply

LAYOUTS = ("textured-box-room", "wall-with-bumps", "two-wall-occluder")


@dataclass
class SceneSpec:
    layout: str
    point_spacing: float
    texture_seed: int
    extent: tuple  # (ex, ey, ez) scene units
    noise_wavelength: float | None = None  # default: min(extent) / 10
    displacement_amplitude: float | None = None  # default: layout-dependent
    noise_octaves: int = 5
    noise_persistence: float = 0.6  # octave amplitude decay; higher = richer detail

    def __post_init__(self):
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}, expected one of {LAYOUTS}")
        if self.point_spacing <= 0:
            raise ValueError("point_spacing must be positive")
        ext = np.asarray(self.extent, dtype=np.float64).reshape(3)
        if np.any(ext <= 10.0 * self.point_spacing):
            raise ValueError("extent must exceed 10 x point_spacing in every axis")
        self.extent = tuple(float(x) for x in ext)

    def wavelength(self) -> float:
        return self.noise_wavelength if self.noise_wavelength is not None else min(self.extent) / 10.0

    def amplitude(self) -> float:
        if self.displacement_amplitude is not None:
            return self.displacement_amplitude
        if self.layout == "two-wall-occluder":
            return 0.0  # flat walls keep the occlusion geometry exact
        return 3.0 * self.point_spacing


# ---------------------------------------------------------------------------
# Procedural value noise (seeded, integer-hash lattice, smooth interpolation)
# ---------------------------------------------------------------------------

_M1 = np.uint64(0x9E3779B97F4A7C15)
_M2 = np.uint64(0xBF58476D1CE4E5B9)
_M3 = np.uint64(0x94D049BB133111EB)


def _hash01(ix, iy, iz, seed: int) -> np.ndarray:
    """Lattice hash -> floats in [0, 1). splitmix64-style mixing."""
    seed_term = np.uint64((seed * 0xD6E8FEB86659FD93) & 0xFFFFFFFFFFFFFFFF)
    h = (
        ix.astype(np.uint64) * _M1
        ^ iy.astype(np.uint64) * _M2
        ^ iz.astype(np.uint64) * _M3
        ^ seed_term
    )
    h ^= h >> np.uint64(30)
    h *= _M2
    h ^= h >> np.uint64(27)
    h *= _M3
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2 ** 64)


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise(points: np.ndarray, seed: int, wavelength: float, octaves: int = 5,
                persistence: float = 0.6) -> np.ndarray:
    """Multi-octave 3-D value noise in [0, 1], deterministic per seed."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(pts.shape[0])
    total = 0.0
    amp = 1.0
    for o in range(octaves):
        freq = 2.0 ** o / wavelength
        p = pts * freq + 1000.0  # shift away from the integer-lattice origin
        i0 = np.floor(p).astype(np.int64)
        f = _smooth(p - i0)
        acc = np.zeros(pts.shape[0])
        for dz in (0, 1):
            wz = f[:, 2] if dz else 1.0 - f[:, 2]
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1.0 - f[:, 1]
                for dx in (0, 1):
                    wx = f[:, 0] if dx else 1.0 - f[:, 0]
                    corner = _hash01(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, seed + o)
                    acc += corner * wx * wy * wz
        out += amp * acc
        total += amp
        amp *= persistence
    return out / total


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------


def _axis_counts(length: float, spacing: float) -> int:
    return int(round(length / spacing)) + 1


def _face_grid(origin, a_dir, b_dir, a_len, b_len, spacing):
    na = _axis_counts(a_len, spacing)
    nb = _axis_counts(b_len, spacing)
    ai = np.linspace(0.0, a_len, na)
    bi = np.linspace(0.0, b_len, nb)
    aa, bb = np.meshgrid(ai, bi, indexing="ij")
    origin = np.asarray(origin, dtype=np.float64)
    a_dir = np.asarray(a_dir, dtype=np.float64)
    b_dir = np.asarray(b_dir, dtype=np.float64)
    pts = origin + aa.reshape(-1, 1) * a_dir + bb.reshape(-1, 1) * b_dir
    return pts


def expected_point_count(spec: SceneSpec) -> int:
    """Closed-form grid count for the layout (duplicated box edges included)."""
    ex, ey, ez = spec.extent
    s = spec.point_spacing
    nx, ny, nz = (_axis_counts(d, s) for d in (ex, ey, ez))
    if spec.layout == "textured-box-room":
        return 2 * (nx * ny + ny * nz + nx * nz)
    if spec.layout == "wall-with-bumps":
        return nx * ny
    # two-wall-occluder: full back wall + centered half-extent front wall
    fx = _axis_counts(ex / 2.0, s)
    fy = _axis_counts(ey / 2.0, s)
    return nx * ny + fx * fy


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Regular-grid sampling of the layout surfaces; intensity and (where the
    layout allows) inward displacement come from one shared noise field."""
    ex, ey, ez = spec.extent
    s = spec.point_spacing
    faces = []  # (points, inward_normal)
    if spec.layout == "textured-box-room":
        faces = [
            (_face_grid((0, 0, 0), (1, 0, 0), (0, 1, 0), ex, ey, s), (0, 0, 1)),     # floor
            (_face_grid((0, 0, ez), (1, 0, 0), (0, 1, 0), ex, ey, s), (0, 0, -1)),   # ceiling
            (_face_grid((0, 0, 0), (1, 0, 0), (0, 0, 1), ex, ez, s), (0, 1, 0)),     # y = 0 wall
            (_face_grid((0, ey, 0), (1, 0, 0), (0, 0, 1), ex, ez, s), (0, -1, 0)),   # y = ey wall
            (_face_grid((0, 0, 0), (0, 1, 0), (0, 0, 1), ey, ez, s), (1, 0, 0)),     # x = 0 wall
            (_face_grid((ex, 0, 0), (0, 1, 0), (0, 0, 1), ey, ez, s), (-1, 0, 0)),   # x = ex wall
        ]
    elif spec.layout == "wall-with-bumps":
        faces = [(_face_grid((0, 0, ez), (1, 0, 0), (0, 1, 0), ex, ey, s), (0, 0, -1))]
    else:  # two-wall-occluder
        back = _face_grid((0, 0, ez), (1, 0, 0), (0, 1, 0), ex, ey, s)
        front = _face_grid((ex / 4.0, ey / 4.0, 0.55 * ez), (1, 0, 0), (0, 1, 0), ex / 2.0, ey / 2.0, s)
        faces = [(back, (0, 0, -1)), (front, (0, 0, -1))]

    wavelength = spec.wavelength()
    amplitude = spec.amplitude()
    parts = []
    intens = []
    for pts, normal in faces:
        fld = value_noise(pts, spec.texture_seed, wavelength, spec.noise_octaves,
                          spec.noise_persistence)
        n = np.asarray(normal, dtype=np.float64)
        displaced = pts + (fld[:, None] * 2.0 - 1.0) * amplitude * n
        parts.append(displaced)
        intens.append(fld)
    return PointCloud(np.concatenate(parts, axis=0), np.clip(np.concatenate(intens), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Z-buffered point splat renderer
# ---------------------------------------------------------------------------


def _disc_offsets(radius_px: int):
    r = int(radius_px)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= r * r
    return dy[keep], dx[keep]


def render_view(cloud: PointCloud, view: CameraView, splat_radius_px: int = 2):
    """Render intensities with nearest-depth-wins splatting.

    Returns (Image, depth_buffer). Depth ties break by ascending point index
    so rendering is deterministic. Uncovered pixels are 0 (depth +inf).
    """
    w, h = view.width, view.height
    u, v, depth = project_points(cloud.positions, view.pose, view.intrinsics)
    ok = in_frustum_mask(u, v, depth, w, h)
    zbuf = np.full((h, w), np.inf)
    img = np.zeros((h, w))
    if not np.any(ok):
        return Image(img), zbuf

    px = np.floor(u[ok]).astype(np.int64)
    py = np.floor(v[ok]).astype(np.int64)
    pz = depth[ok]
    pi = cloud.intensities[ok]
    src = np.arange(cloud.count)[ok]

    dys, dxs = _disc_offsets(splat_radius_px)
    pix_all = []
    z_all = []
    idx_all = []
    for dy, dx in zip(dys.tolist(), dxs.tolist()):
        cx = px + dx
        cy = py + dy
        keep = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        pix_all.append(cy[keep] * w + cx[keep])
        z_all.append(pz[keep])
        idx_all.append(np.nonzero(keep)[0])
    pix = np.concatenate(pix_all)
    z = np.concatenate(z_all)
    local = np.concatenate(idx_all)

    # winner per pixel: smallest depth, then smallest source index
    order = np.lexsort((src[local], z, pix))
    pix_s = pix[order]
    first = np.ones(pix_s.size, dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    zbuf.flat[pix[win]] = z[win]
    img.flat[pix[win]] = pi[local[win]]
    return Image(img), zbuf


# ---------------------------------------------------------------------------
# Benchmark bundles: cloud.ply + images/NNN.pgm + poses.json + manifest.json
# ---------------------------------------------------------------------------


def _orbit_view(spec: SceneSpec, image_id: int, angle: float, radius_frac: float,
                z_frac: float, width: int, height: int, fov_deg: float) -> CameraView:
    ex, ey, ez = spec.extent
    center = np.array([ex / 2.0, ey / 2.0, ez / 2.0])
    if spec.layout == "textured-box-room":
        r = radius_frac * min(ex, ey) / 2.0
        eye = center + np.array([r * math.cos(angle), r * math.sin(angle), (z_frac - 0.5) * 0.3 * ez])
        target = center + np.array([0.1 * ex * math.cos(angle * 2.3), 0.1 * ey * math.sin(angle * 1.7), 0.0])
    else:
        # wall layouts: hover in front of the wall plane, look at wall center
        eye = np.array([
            ex * (0.35 + 0.3 * radius_frac),
            ey * (0.35 + 0.3 * z_frac),
            0.12 * ez + 0.08 * ez * math.cos(angle),
        ])
        target = np.array([ex / 2.0, ey / 2.0, ez])
    pose = look_at(eye, target)
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    k = Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0)
    return CameraView(image_id=image_id, intrinsics=k, pose=pose, width=width, height=height)


def make_benchmark(spec: SceneSpec, n_train: int, n_query: int, seed: int, out_dir,
                   width: int = 320, height: int = 240, fov_deg: float = 70.0,
                   splat_radius_px: int = 2, min_coverage: float = 0.3,
                   extra_manifest: dict | None = None) -> dict:
    """Generate a scene, render a pose orbit, and write the bundle to disk.

    Every pose is checked for >= min_coverage rendered-pixel fraction (the
    candidate orbit slot is nudged deterministically until it passes).
    Returns the manifest dict.
    """
    if n_train < 1 or n_query < 1:
        raise ValueError("need at least one training and one query view")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)

    cloud = generate_scene(spec)
    rng = np.random.default_rng(seed)
    total = n_train + n_query

    views = []
    images = []
    for i in range(total):
        base_angle = 2.0 * math.pi * i / total
        jitter = rng.uniform(-0.5, 0.5) * (2.0 * math.pi / total) * 0.5
        radius_frac = rng.uniform(0.35, 0.55)
        z_frac = rng.uniform(0.3, 0.7)
        for attempt in range(12):
            view = _orbit_view(spec, i, base_angle + jitter + attempt * 0.13,
                               radius_frac, z_frac, width, height, fov_deg)
            img, zbuf = render_view(cloud, view, splat_radius_px)
            coverage = float(np.count_nonzero(np.isfinite(zbuf))) / (width * height)
            if coverage >= min_coverage:
                break
        else:
            raise RuntimeError(f"no covering pose found for view {i}")
        views.append(view)
        images.append(img)

    save_ply(cloud, out / "cloud.ply")
    for view, img in zip(views, images):
        save_pgm(img, out / "images" / f"{view.image_id:03d}.pgm")
    save_poses(views, out / "poses.json")
    manifest = {
        "train": list(range(n_train)),
        "query": list(range(n_train, total)),
        "scene": {
            "layout": spec.layout,
            "point_spacing": spec.point_spacing,
            "texture_seed": spec.texture_seed,
            "extent": list(spec.extent),
            "noise_wavelength": spec.wavelength(),
            "displacement_amplitude": spec.amplitude(),
        },
        "seed": seed,
        "image_size": [width, height],
        "n_points": cloud.count,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
