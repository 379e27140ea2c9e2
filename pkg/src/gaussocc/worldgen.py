"""Procedural indoor scenes, camera trajectories and synthetic image features.

Room layouts are drawn with integer draws from a PCG64 generator in voxel
units, so the same seed gives the same grid on every platform.  Object sizes
are fractions of the room, which keeps small test rooms and full 60x60x36
rooms structurally alike.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._validation import ValidationError
from .camera import Z_FAR, Z_NEAR, CameraModel, intrinsics, look_at, pixel_rays, project
from .gaussians import NUM_CLASSES, SceneBox
from .gce import FeaturePyramid
from .splat import OccupancyGrid

FREE, CEILING, FLOOR, WALL, WINDOW, CHAIR, BED, SOFA, TABLE, TVS, FURNITURE, OBJECTS = range(12)

MAX_ATTEMPTS = 100


class LayoutError(ValidationError):
    """The requested objects could not be placed without overlap."""


@dataclass
class SceneSpec:
    seed: int = 0
    dims: tuple = (60, 60, 36)
    voxel_size: float = 0.08
    origin: tuple = (0.0, 0.0, 0.0)
    wall_thickness: int = 1
    floor_thickness: int = 1
    ceiling_thickness: int = 1
    counts: dict = field(
        default_factory=lambda: {
            "window": 1,
            "chair": 2,
            "bed": 1,
            "sofa": 1,
            "table": 1,
            "tvs": 1,
            "furniture": 1,
            "objects": 3,
        }
    )

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.origin = tuple(float(o) for o in self.origin)
        if any(v < 0 for v in self.counts.values()):
            raise ValidationError("object counts must be >= 0")
        unknown = set(self.counts) - set(_BUILDERS) - {"window"}
        if unknown:
            raise ValidationError(f"unknown object kinds: {sorted(unknown)}")
        t = (self.wall_thickness, self.floor_thickness, self.ceiling_thickness)
        if min(t) < 0:
            raise ValidationError("slab thicknesses must be >= 0")
        x, y, z = self.dims
        if 2 * self.wall_thickness >= min(x, y) - 2 or self.floor_thickness + self.ceiling_thickness >= z - 2:
            raise ValidationError("room interior is too small for the requested slabs")

    @property
    def box(self):
        return SceneBox.from_dims(self.dims, self.voxel_size, self.origin)

    def to_json(self):
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["origin"] = list(self.origin)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(**d)


class _Room:
    """Mutable layout state while a scene is built."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        self.labels = np.zeros(spec.dims, dtype=np.uint8)
        x, y, z = spec.dims
        w = spec.wall_thickness
        self.x0, self.x1 = w, x - w
        self.y0, self.y1 = w, y - w
        self.z0, self.z1 = spec.floor_thickness, z - spec.ceiling_thickness
        # footprint of standing objects, with a one-voxel margin
        self.taken = np.zeros((x, y), dtype=bool)
        # (x, y, w, d, top z) of placed tables, where small objects may stand
        self.table_tops = []

    @property
    def interior(self):
        return self.x1 - self.x0, self.y1 - self.y0, self.z1 - self.z0

    def randint(self, lo, hi):
        """Integer in ``[lo, hi]`` inclusive."""
        return int(self.rng.integers(lo, hi + 1))

    def frac(self, n, lo, hi, minimum=1):
        """Random length between ``lo`` and ``hi`` fractions of ``n``."""
        a = max(minimum, int(round(n * lo)))
        b = max(a, int(round(n * hi)))
        return self.randint(a, b)

    def place_footprint(self, w, d, against_wall):
        """Find a free ``w x d`` rectangle on the floor; returns its corner or None."""
        ix, iy, _ = self.interior
        for _ in range(MAX_ATTEMPTS):
            ww, dd = (w, d) if self.randint(0, 1) == 0 else (d, w)
            if ww > ix or dd > iy:
                continue
            if against_wall:
                side = self.randint(0, 3)
                if side == 0:
                    x, y = self.x0, self.randint(self.y0, self.y1 - dd)
                elif side == 1:
                    x, y = self.x1 - ww, self.randint(self.y0, self.y1 - dd)
                elif side == 2:
                    x, y = self.randint(self.x0, self.x1 - ww), self.y0
                else:
                    x, y = self.randint(self.x0, self.x1 - ww), self.y1 - dd
            else:
                x = self.randint(self.x0, self.x1 - ww)
                y = self.randint(self.y0, self.y1 - dd)
            region = self.taken[max(x - 1, 0): x + ww + 1, max(y - 1, 0): y + dd + 1]
            if not region.any():
                self.taken[x: x + ww, y: y + dd] = True
                return x, y, ww, dd
        return None


def _box(room, cls, x, y, z, w, d, h):
    room.labels[x: x + w, y: y + d, z: z + h] = cls


def _legs(room, cls, x, y, w, d, h):
    for lx in (x, x + w - 1):
        for ly in (y, y + d - 1):
            _box(room, cls, lx, ly, room.z0, 1, 1, h)


def _build_bed(room):
    ix, iy, iz = room.interior
    spot = room.place_footprint(room.frac(ix, 0.32, 0.42, 3), room.frac(iy, 0.22, 0.3, 3), against_wall=True)
    if spot is None:
        return False
    x, y, w, d = spot
    _box(room, BED, x, y, room.z0, w, d, room.frac(iz, 0.14, 0.2, 2))
    return True


def _build_sofa(room):
    ix, iy, iz = room.interior
    spot = room.place_footprint(room.frac(ix, 0.28, 0.36, 3), room.frac(iy, 0.14, 0.2, 2), against_wall=False)
    if spot is None:
        return False
    x, y, w, d = spot
    seat = room.frac(iz, 0.14, 0.18, 1)
    _box(room, SOFA, x, y, room.z0, w, d, seat)
    back = room.frac(iz, 0.3, 0.36, seat + 1)
    if w >= d:
        _box(room, SOFA, x, y, room.z0, w, 1, back)
    else:
        _box(room, SOFA, x, y, room.z0, 1, d, back)
    return True


def _build_table(room):
    ix, iy, iz = room.interior
    spot = room.place_footprint(room.frac(ix, 0.2, 0.28, 3), room.frac(iy, 0.14, 0.22, 3), against_wall=False)
    if spot is None:
        return False
    x, y, w, d = spot
    h = room.frac(iz, 0.24, 0.3, 2)
    _legs(room, TABLE, x, y, w, d, h - 1)
    _box(room, TABLE, x, y, room.z0 + h - 1, w, d, 1)
    room.table_tops.append((x, y, w, d, room.z0 + h))
    return True


def _build_chair(room):
    ix, iy, iz = room.interior
    side = room.frac(min(ix, iy), 0.1, 0.14, 2)
    spot = room.place_footprint(side, side, against_wall=False)
    if spot is None:
        return False
    x, y, w, d = spot
    seat = room.frac(iz, 0.14, 0.18, 2)
    _legs(room, CHAIR, x, y, w, d, seat - 1)
    _box(room, CHAIR, x, y, room.z0 + seat - 1, w, d, 1)
    back = room.frac(iz, 0.34, 0.4, seat + 1)
    _box(room, CHAIR, x, y, room.z0 + seat, w, 1, back - seat)
    return True


def _build_furniture(room):
    ix, iy, iz = room.interior
    spot = room.place_footprint(room.frac(ix, 0.2, 0.28, 2), room.frac(iy, 0.1, 0.16, 2), against_wall=True)
    if spot is None:
        return False
    x, y, w, d = spot
    _box(room, FURNITURE, x, y, room.z0, w, d, room.frac(iz, 0.55, 0.75, 3))
    return True


def _build_tvs(room):
    ix, iy, iz = room.interior
    for _ in range(MAX_ATTEMPTS):
        w = room.frac(min(ix, iy), 0.16, 0.24, 3)
        h = room.frac(iz, 0.12, 0.18, 2)
        z = room.z0 + room.frac(iz, 0.4, 0.55, 1)
        if z + h > room.z1:
            continue
        side = room.randint(0, 3)
        if side < 2:
            x = room.x0 if side == 0 else room.x1 - 1
            y = room.randint(room.y0, room.y1 - w)
            region = (slice(x, x + 1), slice(y, y + w), slice(z, z + h))
        else:
            y = room.y0 if side == 2 else room.y1 - 1
            x = room.randint(room.x0, room.x1 - w)
            region = (slice(x, x + w), slice(y, y + 1), slice(z, z + h))
        if not room.labels[region].any():
            room.labels[region] = TVS
            return True
    return False


def _build_objects(room):
    ix, iy, iz = room.interior
    r = room.frac(min(ix, iy, iz), 0.05, 0.08, 1)
    tops = room.table_tops
    for _ in range(MAX_ATTEMPTS):
        size = 2 * r + 1
        if tops and room.randint(0, 1) == 0:
            tx, ty, tw, td, tz = tops[room.randint(0, len(tops) - 1)]
            if tw < size or td < size:
                continue
            x, y, z = room.randint(tx, tx + tw - size), room.randint(ty, ty + td - size), tz
        else:
            x = room.randint(room.x0, room.x1 - size)
            y = room.randint(room.y0, room.y1 - size)
            z = room.z0
        if z + size > room.z1:
            continue
        sl = (slice(x, x + size), slice(y, y + size), slice(z, z + size))
        on_floor = z == room.z0
        if room.labels[sl].any() or (on_floor and room.taken[x: x + size, y: y + size].any()):
            continue
        # rasterized ellipsoid (sphere in voxel units) inscribed in the cell block
        g = np.arange(size) - r
        inside = (g[:, None, None] ** 2 + g[None, :, None] ** 2 + g[None, None, :] ** 2) <= r * r + r
        block = room.labels[sl]
        block[inside] = OBJECTS
        if on_floor:
            room.taken[x: x + size, y: y + size] = True
        return True
    return False


def _build_window(room):
    ix, iy, iz = room.interior
    w_th = room.spec.wall_thickness
    if w_th == 0:
        return False
    for _ in range(MAX_ATTEMPTS):
        side = room.randint(0, 3)
        length = iy if side < 2 else ix
        w = room.frac(length, 0.2, 0.32, 2)
        h = room.frac(iz, 0.25, 0.4, 2)
        z = room.z0 + room.frac(iz, 0.3, 0.45, 1)
        if z + h > room.z1:
            continue
        if side < 2:
            x = 0 if side == 0 else room.x1
            y = room.randint(room.y0, room.y1 - w)
            region = (slice(x, x + w_th), slice(y, y + w), slice(z, z + h))
        else:
            y = 0 if side == 2 else room.y1
            x = room.randint(room.x0, room.x1 - w)
            region = (slice(x, x + w), slice(y, y + w_th), slice(z, z + h))
        if np.all(room.labels[region] == WALL):
            room.labels[region] = WINDOW
            return True
    return False


_BUILDERS = {
    "furniture": _build_furniture,
    "bed": _build_bed,
    "sofa": _build_sofa,
    "table": _build_table,
    "chair": _build_chair,
    "tvs": _build_tvs,
    "objects": _build_objects,
}


def generate_scene(spec):
    """Rasterize a random furnished room described by ``spec``.

    Raises :class:`LayoutError` when an object cannot be placed after
    ``MAX_ATTEMPTS`` jittered tries.
    """
    rng = np.random.Generator(np.random.PCG64(int(spec.seed)))
    room = _Room(spec, rng)
    lab = room.labels
    lab[:, :, : spec.floor_thickness] = FLOOR
    if spec.ceiling_thickness:
        lab[:, :, room.z1:] = CEILING
    walls = np.ones(spec.dims[:2], dtype=bool)
    walls[room.x0: room.x1, room.y0: room.y1] = False
    lab[:, :, room.z0: room.z1][walls] = WALL
    for _ in range(spec.counts.get("window", 0)):
        if not _build_window(room):
            raise LayoutError("could not place window")
    for kind, builder in _BUILDERS.items():
        for _ in range(spec.counts.get(kind, 0)):
            if not builder(room):
                raise LayoutError(f"could not place {kind} after {MAX_ATTEMPTS} attempts")
    return OccupancyGrid(spec.box, lab)


def trajectory(box, frames=30, seed=0, step=0.16, H=120, W=160, fov_deg=60.0, height_frac=0.5):
    """Orbit of inward-looking cameras, ``step`` meters of arc apart, with seeded jitter."""
    if frames < 1:
        raise ValidationError("frames must be >= 1")
    rng = np.random.Generator(np.random.PCG64(int(seed) + 1))
    center = box.center()
    radius = 0.2 * min(box.extent[0], box.extent[1])
    z = box.origin[2] + height_frac * box.extent[2]
    K = intrinsics(H, W, fov_deg)
    cams = []
    start = rng.uniform(0, 2 * np.pi)
    for i in range(frames):
        theta = start + i * step / radius
        eye = np.array([center[0] + radius * np.cos(theta), center[1] + radius * np.sin(theta), z])
        eye += rng.normal(0.0, 0.01, size=3)
        target = np.array([center[0], center[1], z]) + rng.normal(0.0, 0.05, size=3)
        cams.append(CameraModel(K, look_at(eye, target), H, W))
    return cams


def trajectory_to_json(cams):
    return json.dumps([c.to_dict() for c in cams], indent=1)


def trajectory_from_json(text):
    return [CameraModel.from_dict(d) for d in json.loads(text)]


def frustum_mask(cam, box, z_near=Z_NEAR, z_far=Z_FAR):
    """Voxels whose centers project into the image with depth in ``(z_near, z_far)``."""
    _, valid = project(box.voxel_centers(), cam, z_near=z_near, z_far=z_far)
    return valid


def raymarch(grid, cam, far=Z_FAR):
    """First occupied voxel along each pixel ray.

    Returns ``(labels, depth)`` of shape ``(H, W)``; depth is camera z.  Rays
    advance half a voxel per step; misses give the free class at depth ``far``.
    """
    box = grid.box
    dirs_cam = pixel_rays(cam)
    Rwc = cam.E[:, :3]
    dirs = dirs_cam @ Rwc  # camera-to-world rotation is Rwc^T
    origin_w = cam.position
    norms = np.linalg.norm(dirs_cam, axis=-1)
    dt = 0.5 * box.voxel_size / norms
    labels = np.zeros((cam.H, cam.W), dtype=np.uint8)
    depth = np.full((cam.H, cam.W), far)
    alive = np.ones((cam.H, cam.W), dtype=bool)
    dims = np.asarray(box.dims)
    borigin = np.asarray(box.origin)
    t = np.full((cam.H, cam.W), Z_NEAR)
    max_steps = int(np.ceil(far / dt.min())) + 1
    for _ in range(max_steps):
        if not alive.any():
            break
        pts = origin_w + t[..., None] * dirs
        idx = np.floor((pts - borigin) / box.voxel_size).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < dims), axis=-1) & alive
        lab = np.zeros_like(labels)
        ii = idx[inside]
        lab[inside] = grid.labels[ii[:, 0], ii[:, 1], ii[:, 2]]
        hit = inside & (lab != 0)
        labels[hit] = lab[hit]
        depth[hit] = t[hit]
        alive &= ~hit
        t = t + dt
        alive &= t < far
    return labels, depth


def render_feature_pyramid(grid, cam, levels=3, c_feat=96, num_classes=NUM_CLASSES, far=Z_FAR):
    """Synthetic image features standing in for a learned backbone.

    Level 0 holds a one-hot class map, normalized depth, then zero padding up
    to ``c_feat`` channels; level ``l`` is the ``2**l`` average pooling of level 0.
    Returns ``(pyramid, depth)``.
    """
    if levels < 1:
        raise ValidationError("levels must be >= 1")
    if c_feat < num_classes + 1:
        raise ValidationError(f"c_feat must be >= {num_classes + 1}")
    labels, depth = raymarch(grid, cam, far=far)
    base = np.zeros((cam.H, cam.W, c_feat))
    base[..., :num_classes] = np.eye(num_classes)[labels]
    base[..., num_classes] = depth / far
    maps = [base]
    for lvl in range(1, levels):
        s = 2**lvl
        h, w = cam.H // s, cam.W // s
        if h == 0 or w == 0:
            raise ValidationError(f"image {cam.H}x{cam.W} too small for {levels} levels")
        maps.append(base[: h * s, : w * s].reshape(h, s, w, s, c_feat).mean(axis=(1, 3)))
    return FeaturePyramid(maps, [2**lvl for lvl in range(levels)]), depth
