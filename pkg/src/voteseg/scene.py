"""Synthetic desk-scale scenes and the ASCII PLY scene format.

A scene is a labeled point cloud: positions, unit normals, RGB colors,
per-point semantic class, and per-point instance id (-1 on background).
The generator builds a rectangular room (floor + four walls, no ceiling)
and drops boxes, spheres, and cylinders on the floor with pairwise
non-overlapping bounding spheres. Everything is a pure function of the
seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOOR, WALL, BOX, SPHERE, CYLINDER = 0, 1, 2, 3, 4
CLASS_NAMES = ("floor", "wall", "box", "sphere", "cylinder")
OBJECT_CLASSES = (BOX, SPHERE, CYLINDER)
NUM_CLASSES = 5


class SceneError(ValueError):
    """Scene invariant violation."""


class SceneGenError(SceneError):
    """Generation could not satisfy the placement constraints."""


class EmptyCropError(SceneError):
    """Crop window contains no object points."""


class PlyParseError(SceneError):
    """Malformed scene file; message names the offending line."""


@dataclass
class Scene:
    """Immutable-by-convention labeled point cloud."""

    scene_id: str
    positions: np.ndarray  # (N,3) float64
    normals: np.ndarray    # (N,3) float64, unit rows
    colors: np.ndarray     # (N,3) float64 in [0,1]
    semantic_label: np.ndarray  # (N,) int64
    instance_id: np.ndarray     # (N,) int64, -1 on background

    @property
    def n_points(self) -> int:
        return self.positions.shape[0]

    def object_mask(self) -> np.ndarray:
        return self.instance_id >= 0

    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.instance_id)
        return ids[ids >= 0]

    def instance_centers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-instance (ids, bbox centers, bounding-sphere radii).

        The center is the midpoint of the instance's axis-aligned bounding
        box; the radius is the max distance from that center to any of the
        instance's points.
        """
        ids = self.instance_ids()
        centers = np.zeros((ids.size, 3))
        radii = np.zeros(ids.size)
        for k, i in enumerate(ids):
            pts = self.positions[self.instance_id == i]
            c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
            centers[k] = c
            radii[k] = np.linalg.norm(pts - c, axis=1).max()
        return ids, centers, radii

    def instance_class(self, instance: int) -> int:
        sel = self.semantic_label[self.instance_id == instance]
        if sel.size == 0:
            raise SceneError(f"instance {instance} has no points")
        return int(sel[0])


def validate_scene(scene: Scene) -> None:
    n = scene.positions.shape[0]
    for name in ("positions", "normals", "colors"):
        a = getattr(scene, name)
        if a.shape != (n, 3):
            raise SceneError(f"{name} has shape {a.shape}, want ({n}, 3)")
        if not np.isfinite(a).all():
            raise SceneError(f"{name} contains non-finite values")
    for name in ("semantic_label", "instance_id"):
        a = getattr(scene, name)
        if a.shape != (n,):
            raise SceneError(f"{name} has shape {a.shape}, want ({n},)")
    norms = np.linalg.norm(scene.normals, axis=1)
    if n and not np.allclose(norms, 1.0, atol=1e-6):
        raise SceneError("normals are not unit length")
    if np.any((scene.semantic_label < 0) | (scene.semantic_label >= NUM_CLASSES)):
        raise SceneError("semantic label out of range")
    obj = scene.instance_id >= 0
    if np.any(~np.isin(scene.semantic_label[obj], OBJECT_CLASSES)):
        raise SceneError("instance point carries a background class")
    if np.any(np.isin(scene.semantic_label[~obj], OBJECT_CLASSES)):
        raise SceneError("background point carries an object class")
    for i in np.unique(scene.instance_id[obj]):
        cls = np.unique(scene.semantic_label[scene.instance_id == i])
        if cls.size != 1:
            raise SceneError(f"instance {i} spans classes {cls.tolist()}")


@dataclass
class SceneGenParams:
    seed: int = 0
    room_extent: tuple[float, float, float] = (6.0, 6.0, 3.0)
    objects_per_scene: tuple[int, int] = (4, 12)
    object_classes: tuple[int, ...] = OBJECT_CLASSES
    points_per_m2: float = 400.0
    noise_sigma: float = 0.005


@dataclass
class PlacedObject:
    """Layout record for one generated object (frame: translate then z-rotate)."""

    kind: int
    center: np.ndarray      # (3,)
    z_angle: float
    half_extents: np.ndarray  # box: (hx,hy,hz); sphere: (r,r,r); cylinder: (r,r,h/2)
    bound_radius: float


_BASE_COLORS = {
    FLOOR: (0.45, 0.42, 0.40),
    WALL: (0.78, 0.78, 0.75),
    BOX: (0.75, 0.22, 0.18),
    SPHERE: (0.18, 0.65, 0.28),
    CYLINDER: (0.20, 0.35, 0.78),
}


def _surface_count(area: float, density: float) -> int:
    return max(1, int(round(area * density)))


def _sample_box(rng, half: np.ndarray, density: float):
    hx, hy, hz = half
    faces = [
        # (area, fixed axis, sign)
        (4 * hy * hz, 0, +1), (4 * hy * hz, 0, -1),
        (4 * hx * hz, 1, +1), (4 * hx * hz, 1, -1),
        (4 * hx * hy, 2, +1), (4 * hx * hy, 2, -1),
    ]
    pts, nrm = [], []
    for area, axis, sign in faces:
        n = _surface_count(area, density)
        p = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
        p[:, axis] = sign * half[axis]
        normal = np.zeros((n, 3))
        normal[:, axis] = sign
        pts.append(p)
        nrm.append(normal)
    return np.concatenate(pts), np.concatenate(nrm)


def _sample_sphere(rng, radius: float, density: float):
    n = _surface_count(4 * math.pi * radius**2, density)
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return radius * d, d


def _sample_cylinder(rng, radius: float, half_h: float, density: float):
    h = 2 * half_h
    n_side = _surface_count(2 * math.pi * radius * h, density)
    theta = rng.uniform(0, 2 * math.pi, size=n_side)
    z = rng.uniform(-half_h, half_h, size=n_side)
    side = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    side_n = np.stack([np.cos(theta), np.sin(theta), np.zeros(n_side)], axis=1)
    pts, nrm = [side], [side_n]
    for sign in (+1, -1):
        n_cap = _surface_count(math.pi * radius**2, density)
        r = radius * np.sqrt(rng.uniform(0, 1, size=n_cap))
        t = rng.uniform(0, 2 * math.pi, size=n_cap)
        cap = np.stack([r * np.cos(t), r * np.sin(t), np.full(n_cap, sign * half_h)], axis=1)
        cap_n = np.zeros((n_cap, 3))
        cap_n[:, 2] = sign
        pts.append(cap)
        nrm.append(cap_n)
    return np.concatenate(pts), np.concatenate(nrm)


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_background(rng, extent, density: float):
    ex, ey, ez = extent
    hx, hy = ex / 2, ey / 2
    panels = [
        # (origin, u axis, v axis, u len, v len, inward normal, class)
        ((-hx, -hy, 0.0), (1, 0, 0), (0, 1, 0), ex, ey, (0, 0, 1), FLOOR),
        ((-hx, -hy, 0.0), (1, 0, 0), (0, 0, 1), ex, ez, (0, 1, 0), WALL),
        ((-hx, hy, 0.0), (1, 0, 0), (0, 0, 1), ex, ez, (0, -1, 0), WALL),
        ((-hx, -hy, 0.0), (0, 1, 0), (0, 0, 1), ey, ez, (1, 0, 0), WALL),
        ((hx, -hy, 0.0), (0, 1, 0), (0, 0, 1), ey, ez, (-1, 0, 0), WALL),
    ]
    pts, nrm, cls = [], [], []
    for origin, u, v, lu, lv, normal, label in panels:
        n = _surface_count(lu * lv, density)
        a = rng.uniform(0, lu, size=n)
        b = rng.uniform(0, lv, size=n)
        p = (np.asarray(origin)[None, :]
             + a[:, None] * np.asarray(u, dtype=float)[None, :]
             + b[:, None] * np.asarray(v, dtype=float)[None, :])
        pts.append(p)
        nrm.append(np.tile(np.asarray(normal, dtype=float), (n, 1)))
        cls.append(np.full(n, label, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(nrm), np.concatenate(cls)


def _place_objects(rng, params: SceneGenParams) -> list[PlacedObject]:
    ex, ey, ez = params.room_extent
    lo, hi = params.objects_per_scene
    count = int(rng.integers(lo, hi + 1))
    placed: list[PlacedObject] = []
    attempts = 0
    margin = 0.05
    while len(placed) < count:
        attempts += 1
        if attempts > 10_000:
            raise SceneGenError(
                f"scene too crowded: {len(placed)}/{count} objects placed "
                f"after {attempts - 1} attempts")
        kind = int(rng.choice(np.asarray(params.object_classes)))
        if kind == BOX:
            half = rng.uniform(0.15, 0.45, size=3)
            z_angle = float(rng.uniform(0, 2 * math.pi))
            center_z = half[2]
            bound = float(np.linalg.norm(half))
            footprint = math.hypot(half[0], half[1])
        elif kind == SPHERE:
            r = float(rng.uniform(0.15, 0.4))
            half = np.array([r, r, r])
            z_angle = 0.0
            center_z = r
            bound = r
            footprint = r
        else:
            r = float(rng.uniform(0.12, 0.35))
            half_h = float(rng.uniform(0.15, 0.5))
            half = np.array([r, r, half_h])
            z_angle = 0.0
            center_z = half_h
            bound = math.hypot(r, half_h)
            footprint = r
        if 2 * half[2] > ez:
            continue
        x_lo, x_hi = -ex / 2 + footprint + margin, ex / 2 - footprint - margin
        y_lo, y_hi = -ey / 2 + footprint + margin, ey / 2 - footprint - margin
        if x_lo >= x_hi or y_lo >= y_hi:
            continue  # object cannot fit this room at all; counts as an attempt
        cx = float(rng.uniform(x_lo, x_hi))
        cy = float(rng.uniform(y_lo, y_hi))
        center = np.array([cx, cy, center_z])
        ok = True
        for other in placed:
            if np.linalg.norm(center - other.center) < bound + other.bound_radius + margin:
                ok = False
                break
        if ok:
            placed.append(PlacedObject(kind, center, z_angle, half, bound))
    return placed


def generate_scene_with_layout(params: SceneGenParams) -> tuple[Scene, list[PlacedObject]]:
    """Generate a scene and return the object layout used to build it."""
    rng = np.random.default_rng(params.seed)
    layout = _place_objects(rng, params)

    pts_list, nrm_list, cls_list, inst_list = [], [], [], []
    bg_pts, bg_nrm, bg_cls = _sample_background(rng, params.room_extent, params.points_per_m2)
    pts_list.append(bg_pts)
    nrm_list.append(bg_nrm)
    cls_list.append(bg_cls)
    inst_list.append(np.full(bg_pts.shape[0], -1, dtype=np.int64))

    for inst, obj in enumerate(layout):
        if obj.kind == BOX:
            local, local_n = _sample_box(rng, obj.half_extents, params.points_per_m2)
        elif obj.kind == SPHERE:
            local, local_n = _sample_sphere(rng, obj.half_extents[0], params.points_per_m2)
        else:
            local, local_n = _sample_cylinder(rng, obj.half_extents[0], obj.half_extents[2],
                                              params.points_per_m2)
        rot = _rot_z(obj.z_angle)
        p = local @ rot.T + obj.center
        n = local_n @ rot.T
        pts_list.append(p)
        nrm_list.append(n)
        cls_list.append(np.full(p.shape[0], obj.kind, dtype=np.int64))
        inst_list.append(np.full(p.shape[0], inst, dtype=np.int64))

    positions = np.concatenate(pts_list)
    normals = np.concatenate(nrm_list)
    semantic = np.concatenate(cls_list)
    instance = np.concatenate(inst_list)

    # Sensor noise: isotropic, norm clipped to 3 sigma so every point stays
    # within 3*noise_sigma of the true surface.
    if params.noise_sigma > 0:
        noise = rng.normal(0.0, params.noise_sigma, size=positions.shape)
        norms = np.linalg.norm(noise, axis=1, keepdims=True)
        cap = 3.0 * params.noise_sigma
        scale = np.minimum(1.0, cap / np.maximum(norms, 1e-300))
        positions = positions + noise * scale

    colors = np.empty_like(positions)
    for label in range(NUM_CLASSES):
        sel = semantic == label
        colors[sel] = _BASE_COLORS[label]
    for inst_id in range(len(layout)):
        sel = instance == inst_id
        colors[sel] += rng.uniform(-0.08, 0.08, size=3)
    colors += rng.normal(0.0, 0.03, size=colors.shape)
    np.clip(colors, 0.0, 1.0, out=colors)

    scene = Scene(
        scene_id=f"scene_{params.seed}",
        positions=positions,
        normals=normals,
        colors=colors,
        semantic_label=semantic,
        instance_id=instance,
    )
    validate_scene(scene)
    return scene, layout


def generate_scene(params: SceneGenParams) -> Scene:
    scene, _ = generate_scene_with_layout(params)
    return scene


# ---------------------------------------------------------------------------
# PLY I/O

_PROPERTIES = (
    ("float", "x"), ("float", "y"), ("float", "z"),
    ("float", "nx"), ("float", "ny"), ("float", "nz"),
    ("float", "red"), ("float", "green"), ("float", "blue"),
    ("int", "semantic_label"), ("int", "instance_id"),
)


def save_scene(scene: Scene, path) -> None:
    """Write the ASCII PLY dialect; the filename stem is the scene id."""
    path = Path(path)
    n = scene.n_points
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property {t} {name}" for t, name in _PROPERTIES]
    lines.append("end_header")
    cols = np.concatenate([scene.positions, scene.normals, scene.colors], axis=1)
    body = []
    for i in range(n):
        row = cols[i]
        body.append(" ".join(f"{v:.9g}" for v in row)
                    + f" {scene.semantic_label[i]} {scene.instance_id[i]}")
    path.write_text("\n".join(lines + body) + "\n")


def load_scene(path) -> Scene:
    """Parse the ASCII PLY dialect; raises PlyParseError naming the bad line."""
    path = Path(path)
    with open(path) as f:
        lines = f.read().splitlines()

    def fail(lineno: int, why: str):
        raise PlyParseError(f"{path.name}: line {lineno}: {why}")

    if not lines or lines[0].strip() != "ply":
        fail(1, "expected 'ply' magic")
    i = 1
    if i >= len(lines) or lines[i].strip() != "format ascii 1.0":
        fail(i + 1, "expected 'format ascii 1.0'")
    i += 1
    n_vertex = None
    props: list[tuple[str, str]] = []
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("comment"):
            i += 1
            continue
        if line.startswith("element"):
            parts = line.split()
            if len(parts) != 3 or parts[1] != "vertex":
                fail(i + 1, f"unsupported element '{line}'")
            if n_vertex is not None:
                fail(i + 1, "duplicate vertex element")
            try:
                n_vertex = int(parts[2])
            except ValueError:
                fail(i + 1, f"bad vertex count '{parts[2]}'")
            i += 1
            continue
        if line.startswith("property"):
            parts = line.split()
            if len(parts) != 3:
                fail(i + 1, f"bad property line '{line}'")
            props.append((parts[1], parts[2]))
            i += 1
            continue
        if line == "end_header":
            i += 1
            break
        fail(i + 1, f"unexpected header line '{line}'")
    else:
        fail(len(lines), "missing end_header")
    if n_vertex is None:
        fail(i, "missing vertex element")
    if tuple(props) != _PROPERTIES:
        want = ", ".join(f"{t} {n}" for t, n in _PROPERTIES)
        got = ", ".join(f"{t} {n}" for t, n in props)
        fail(i, f"property list mismatch: want [{want}], got [{got}]")

    data = np.empty((n_vertex, 9))
    sem = np.empty(n_vertex, dtype=np.int64)
    inst = np.empty(n_vertex, dtype=np.int64)
    row = 0
    for lineno in range(i, len(lines)):
        line = lines[lineno].strip()
        if not line:
            continue
        if row >= n_vertex:
            fail(lineno + 1, f"more than {n_vertex} vertex rows")
        parts = line.split()
        if len(parts) != 11:
            fail(lineno + 1, f"expected 11 fields, got {len(parts)}")
        try:
            data[row] = [float(v) for v in parts[:9]]
            sem[row] = int(parts[9])
            inst[row] = int(parts[10])
        except ValueError:
            fail(lineno + 1, "non-numeric field")
        row += 1
    if row != n_vertex:
        fail(len(lines), f"expected {n_vertex} vertex rows, found {row}")

    return Scene(
        scene_id=path.stem,
        positions=data[:, 0:3].copy(),
        normals=data[:, 3:6].copy(),
        colors=data[:, 6:9].copy(),
        semantic_label=sem,
        instance_id=inst,
    )


# ---------------------------------------------------------------------------
# augmentation and cropping

def _rot_xyz(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment(scene: Scene, seed: int) -> Scene:
    """Random flip, rotate, and scale; labels untouched, normals stay unit.

    Draw order is fixed (z-angle, x-tilt, y-tilt, two flips, scale) so a
    seed fully determines the transform. Rotation is about the origin;
    the scale factor never touches the normals.
    """
    rng = np.random.default_rng(seed)
    az = rng.uniform(-math.pi, math.pi)
    tilt = math.radians(10.0)
    ax = rng.uniform(-tilt, tilt)
    ay = rng.uniform(-tilt, tilt)
    flip_x = rng.uniform() < 0.5
    flip_y = rng.uniform() < 0.5
    s = rng.uniform(0.9, 1.1)

    flip = np.array([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
    rot = _rot_xyz(ax, ay, az)
    positions = (scene.positions * flip) @ rot.T * s
    normals = (scene.normals * flip) @ rot.T
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return Scene(
        scene_id=scene.scene_id,
        positions=positions,
        normals=normals,
        colors=scene.colors.copy(),
        semantic_label=scene.semantic_label.copy(),
        instance_id=scene.instance_id.copy(),
    )


def subset(scene: Scene, idx: np.ndarray) -> Scene:
    return Scene(
        scene_id=scene.scene_id,
        positions=scene.positions[idx].copy(),
        normals=scene.normals[idx].copy(),
        colors=scene.colors[idx].copy(),
        semantic_label=scene.semantic_label[idx].copy(),
        instance_id=scene.instance_id[idx].copy(),
    )


def crop(scene: Scene, center_xy: tuple[float, float], size: float) -> Scene:
    """Axis-aligned xy window (closed interval), full z extent.

    Instances are truncated, never relabeled. A window with zero object
    points raises EmptyCropError.
    """
    cx, cy = center_xy
    half = size / 2.0
    m = ((np.abs(scene.positions[:, 0] - cx) <= half)
         & (np.abs(scene.positions[:, 1] - cy) <= half))
    out = subset(scene, np.flatnonzero(m))
    if not np.any(out.instance_id >= 0):
        raise EmptyCropError(
            f"crop at ({cx:.2f}, {cy:.2f}) size {size} contains no object points")
    return out
