"""Rigid-body geometry helpers.

Quaternions are scalar-first numpy arrays ``[w, x, y, z]`` kept in the
canonical hemisphere ``w >= 0``.  Vectors are plain length-3 float arrays.
Oriented boxes carry their rotation as a 3x3 matrix whose columns are the
box axes expressed in the world frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np


class DegenerateGeometryError(ValueError):
    """Raised when a point set does not span a volume."""


# ------------------------------------------------------------------ #
# Quaternion algebra
# ------------------------------------------------------------------ #
IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_mul(q1: np.ndarray, q2: np.ndarray) -> np.ndarray:
    """Hamilton product ``q1 * q2``."""
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalise and fold into the ``w >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    n = math.sqrt(float(q @ q))
    if not np.isfinite(n) or n < 1e-300:
        raise ValueError(f"cannot normalise quaternion {q!r}")
    q = q / n
    if q[0] < 0.0:
        q = -q
    return q


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate a vector (or an ``(n, 3)`` stack of vectors) by ``q``."""
    return np.asarray(v) @ quat_to_matrix(q).T


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=float)
    angle = math.sqrt(float(rv @ rv))
    if angle < 1e-12:
        # second-order expansion keeps the map smooth through zero
        q = np.array([1.0 - angle * angle / 8.0, *(0.5 * rv)])
        return quat_normalize(q)
    s = math.sin(0.5 * angle) / angle
    return quat_normalize(np.array([math.cos(0.5 * angle), *(s * rv)]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    """Axis-angle vector of ``q`` with the angle in ``[0, pi]``."""
    q = quat_normalize(q)
    vnorm = math.sqrt(q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    if vnorm < 1e-15:
        return np.zeros(3)
    angle = 2.0 * math.atan2(vnorm, q[0])
    return q[1:] * (angle / vnorm)


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalised 4-D Gaussian)."""
    while True:
        q = rng.standard_normal(4)
        n = math.sqrt(float(q @ q))
        if n > 1e-6:
            return quat_normalize(q / n)


def euler_to_quaternion(euler: Sequence[float]) -> np.ndarray:
    """Fixed-axis (extrinsic) XYZ angles to a unit quaternion.

    The rotation applies ``roll`` about world x, then ``pitch`` about world
    y, then ``yaw`` about world z, i.e. ``R = Rz(yaw) Ry(pitch) Rx(roll)``.
    """
    e = np.asarray(euler, dtype=float)
    if e.shape != (3,) or not np.all(np.isfinite(e)):
        raise ValueError(f"euler angles must be 3 finite values, got {euler!r}")
    cr, sr = math.cos(0.5 * e[0]), math.sin(0.5 * e[0])
    cp, sp = math.cos(0.5 * e[1]), math.sin(0.5 * e[1])
    cy, sy = math.cos(0.5 * e[2]), math.sin(0.5 * e[2])
    q = np.array([
        cy * cp * cr + sy * sp * sr,
        cy * cp * sr - sy * sp * cr,
        cy * sp * cr + sy * cp * sr,
        sy * cp * cr - cy * sp * sr,
    ])
    return quat_normalize(q)


def quaternion_to_euler(q: np.ndarray) -> np.ndarray:
    """Inverse of :func:`euler_to_quaternion` (pitch in ``[-pi/2, pi/2]``)."""
    m = quat_to_matrix(quat_normalize(q))
    pitch = math.asin(max(-1.0, min(1.0, -m[2, 0])))
    if abs(m[2, 0]) < 1.0 - 1e-12:
        roll = math.atan2(m[2, 1], m[2, 2])
        yaw = math.atan2(m[1, 0], m[0, 0])
    else:
        # gimbal lock: only roll - yaw (or roll + yaw) is observable
        roll = 0.0
        yaw = math.atan2(-m[0, 1], m[1, 1])
    return np.array([roll, pitch, yaw])


def rotation_vector_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Rotation vector of ``a^-1 * b`` expressed in ``a``'s frame.

    Its norm is the geodesic angle between the two orientations.
    """
    return quat_to_rotvec(quat_mul(quat_conj(a), b))


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    rel = quat_mul(quat_conj(a), b)
    return 2.0 * math.atan2(math.sqrt(rel[1] ** 2 + rel[2] ** 2 + rel[3] ** 2), abs(rel[0]))


# ------------------------------------------------------------------ #
# Poses
# ------------------------------------------------------------------ #
@dataclass
class Pose:
    position: np.ndarray
    orientation: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).reshape(3)
        self.orientation = quat_normalize(self.orientation)

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: ``other`` is expressed in this pose's frame."""
        return Pose(
            self.position + quat_rotate(self.orientation, other.position),
            quat_mul(self.orientation, other.orientation),
        )

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        return quat_rotate(self.orientation, pts) + self.position

    def inverse_transform_points(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts) - self.position) @ quat_to_matrix(self.orientation)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.orientation.copy())


@dataclass
class Twist:
    linear: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).reshape(3)
        self.angular = np.asarray(self.angular, dtype=float).reshape(3)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.linear, self.angular])

    def copy(self) -> "Twist":
        return Twist(self.linear.copy(), self.angular.copy())


# ------------------------------------------------------------------ #
# Convex hull
# ------------------------------------------------------------------ #
@dataclass
class ConvexHull:
    """Closed convex polytope as vertices plus outward half-spaces.

    ``normals[i] . p <= offsets[i]`` for every point ``p`` of the hull.
    ``triangles`` indexes into ``vertices`` and is kept for volume queries.
    """

    vertices: np.ndarray
    normals: np.ndarray
    offsets: np.ndarray
    triangles: np.ndarray

    @property
    def faces(self) -> List[Tuple[np.ndarray, float]]:
        return [(n, float(o)) for n, o in zip(self.normals, self.offsets)]

    @property
    def volume(self) -> float:
        c = self.vertices.mean(axis=0)
        a, b, d = (self.vertices[self.triangles[:, k]] - c for k in range(3))
        return float(np.abs(np.einsum("ij,ij->i", a, np.cross(b, d))).sum() / 6.0)


def _plane(p0, p1, p2, inside):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    n = n / norm
    off = float(n @ p0)
    if n @ inside > off:
        return -n, -off, True
    return n, off, False


def build_convex_hull(points: Sequence[Sequence[float]]) -> ConvexHull:
    """Incremental 3-D convex hull.

    Raises :class:`DegenerateGeometryError` for fewer than four points or a
    set without volume.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 4:
        raise DegenerateGeometryError("need at least 4 points in 3-D")
    if not np.all(np.isfinite(pts)):
        raise DegenerateGeometryError("points must be finite")
    scale = max(float(np.ptp(pts, axis=0).max()), 1e-300)
    eps = 1e-10 * scale

    i0 = int(np.argmin(pts[:, 0]))
    d = np.linalg.norm(pts - pts[i0], axis=1)
    i1 = int(np.argmax(d))
    if d[i1] <= eps:
        raise DegenerateGeometryError("all points coincide")
    u = (pts[i1] - pts[i0]) / d[i1]
    rel = pts - pts[i0]
    d = np.linalg.norm(rel - np.outer(rel @ u, u), axis=1)
    i2 = int(np.argmax(d))
    if d[i2] <= eps:
        raise DegenerateGeometryError("points are collinear")
    n = np.cross(pts[i1] - pts[i0], pts[i2] - pts[i0])
    n /= np.linalg.norm(n)
    d = np.abs(rel @ n)
    i3 = int(np.argmax(d))
    if d[i3] <= eps:
        raise DegenerateGeometryError("points are coplanar")

    interior = pts[[i0, i1, i2, i3]].mean(axis=0)
    # face: [i, j, k] wound so the cross product points outward
    faces: dict[int, list] = {}
    next_id = 0

    def add_face(i, j, k):
        nonlocal next_id
        nrm, off, flipped = _plane(pts[i], pts[j], pts[k], interior)
        tri = (i, k, j) if flipped else (i, j, k)
        faces[next_id] = [tri, nrm, off]
        next_id += 1

    for tri in ((i0, i1, i2), (i0, i1, i3), (i0, i2, i3), (i1, i2, i3)):
        add_face(*tri)

    remaining = [i for i in range(len(pts)) if i not in (i0, i1, i2, i3)]
    # farthest-first insertion keeps slivers rare
    remaining.sort(key=lambda i: -float(np.linalg.norm(pts[i] - interior)))
    for pi in remaining:
        p = pts[pi]
        visible = [fid for fid, (_, nrm, off) in faces.items() if nrm @ p - off > eps]
        if not visible:
            continue
        edge_count: dict[tuple, int] = {}
        directed = []
        for fid in visible:
            a, b, c = faces[fid][0]
            for e in ((a, b), (b, c), (c, a)):
                directed.append(e)
                key = (min(e), max(e))
                edge_count[key] = edge_count.get(key, 0) + 1
        for fid in visible:
            del faces[fid]
        for a, b in directed:
            if edge_count[(min(a, b), max(a, b))] == 1:
                add_face(a, b, pi)

    tris = np.array([f[0] for f in faces.values()], dtype=int)
    used = np.unique(tris)
    remap = -np.ones(len(pts), dtype=int)
    remap[used] = np.arange(len(used))
    tris = remap[tris]

    normals, offsets = [], []
    for _, nrm, off in faces.values():
        for n2, o2 in zip(normals, offsets):
            if np.allclose(n2, nrm, atol=1e-9) and abs(o2 - off) <= 1e-9 * max(1.0, scale):
                break
        else:
            normals.append(nrm)
            offsets.append(off)
    return ConvexHull(pts[used].copy(), np.array(normals), np.array(offsets), tris)


def hull_contains(hull: ConvexHull, p: np.ndarray, margin: float = 0.0) -> bool:
    return bool(np.all(hull.normals @ np.asarray(p, dtype=float) <= hull.offsets + margin))


def hull_contains_many(hull: ConvexHull, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Vectorised :func:`hull_contains` over an ``(n, 3)`` array."""
    return np.all(np.asarray(pts) @ hull.normals.T <= hull.offsets + margin, axis=1)


# ------------------------------------------------------------------ #
# Oriented boxes
# ------------------------------------------------------------------ #
_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
)
_EDGES = np.array([
    (i, j) for i in range(8) for j in range(i + 1, 8)
    if np.sum(_CORNER_SIGNS[i] != _CORNER_SIGNS[j]) == 1
])


@dataclass
class OrientedBox:
    center: np.ndarray
    axes: np.ndarray          # columns are the box axes in world coordinates
    half_extents: np.ndarray

    @classmethod
    def from_pose(cls, pose: Pose, half_extents) -> "OrientedBox":
        return cls(pose.position.copy(), quat_to_matrix(pose.orientation),
                   np.asarray(half_extents, dtype=float))

    def corners(self) -> np.ndarray:
        return self.center + (_CORNER_SIGNS * self.half_extents) @ self.axes.T

    def edges(self) -> Tuple[np.ndarray, np.ndarray]:
        c = self.corners()
        return c[_EDGES[:, 0]], c[_EDGES[:, 1]]

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half_extents))

    def transformed(self, pose: Pose) -> "OrientedBox":
        """This box (given in ``pose``'s local frame) placed in the world."""
        r = quat_to_matrix(pose.orientation)
        return OrientedBox(pose.position + r @ self.center, r @ self.axes, self.half_extents)


def point_box_distance(pts: np.ndarray, box: OrientedBox) -> np.ndarray:
    """Euclidean distance from each point to the solid box (0 inside)."""
    local = (np.atleast_2d(pts) - box.center) @ box.axes
    excess = np.maximum(np.abs(local) - box.half_extents, 0.0)
    return np.linalg.norm(excess, axis=1)


def points_in_box(pts: np.ndarray, box: OrientedBox, tol: float = 0.0) -> np.ndarray:
    local = (np.atleast_2d(pts) - box.center) @ box.axes
    return np.all(np.abs(local) <= box.half_extents + tol, axis=1)


def _segment_distances(p1, q1, p2, q2) -> np.ndarray:
    """Pairwise-broadcast closest distance between segments p1q1 and p2q2."""
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i", d1, d1)
    e = np.einsum("...i,...i", d2, d2)
    f = np.einsum("...i,...i", d2, r)
    c = np.einsum("...i,...i", d1, r)
    b = np.einsum("...i,...i", d1, d2)
    denom = a * e - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(denom > 1e-14 * a * e, np.clip((b * f - c * e) / denom, 0.0, 1.0), 0.0)
        t = (b * s + f) / e
        s = np.where(t < 0.0, np.clip(-c / a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    diff = (p1 + s[..., None] * d1) - (p2 + t[..., None] * d2)
    return np.linalg.norm(diff, axis=-1)


_ROT1 = [1, 2, 0]
_ROT2 = [2, 0, 1]


def _sat_overlaps(a: OrientedBox, b: OrientedBox, early_exit: bool = False
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Overlap of the two boxes' projections on each of the 15 SAT axes.

    With ``early_exit`` only the six face axes are returned when one of them
    already separates the boxes.
    """
    d = b.center - a.center
    fa, fb = a.axes.T, b.axes.T
    faces = np.vstack([fa, fb])
    ra = np.abs(faces @ a.axes) @ a.half_extents
    rb = np.abs(faces @ b.axes) @ b.half_extents
    dist = faces @ d
    overlaps = ra + rb - np.abs(dist)
    if early_exit and np.any(overlaps <= 0.0):
        return overlaps, faces
    cross = (fa[:, None, _ROT1] * fb[None, :, _ROT2] - fa[:, None, _ROT2] * fb[None, :, _ROT1]).reshape(9, 3)
    norms = np.sqrt(np.einsum("ij,ij->i", cross, cross))
    keep = norms > 1e-9
    cross = cross[keep] / norms[keep, None]
    cra = np.abs(cross @ a.axes) @ a.half_extents
    crb = np.abs(cross @ b.axes) @ b.half_extents
    cdist = cross @ d
    axes = np.vstack([faces, cross])
    dist = np.concatenate([dist, cdist])
    overlaps = np.concatenate([overlaps, cra + crb - np.abs(cdist)])
    return overlaps, axes * np.sign(np.where(dist == 0.0, 1.0, dist))[:, None]


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    gap = float(np.linalg.norm(b.center - a.center))
    if gap > a.bounding_radius() + b.bounding_radius():
        return False
    overlaps, _ = _sat_overlaps(a, b, early_exit=True)
    return bool(np.all(overlaps > 0.0))


def closest_distance(a: OrientedBox, b: OrientedBox) -> float:
    """Minimum separation between two solid boxes; 0 when they overlap."""
    if boxes_overlap(a, b):
        return 0.0
    best = min(point_box_distance(a.corners(), b).min(), point_box_distance(b.corners(), a).min())
    pa, qa = a.edges()
    pb, qb = b.edges()
    ee = _segment_distances(pa[:, None], qa[:, None], pb[None, :], qb[None, :])
    return float(min(best, ee.min()))


def penetration(a: OrientedBox, b: OrientedBox) -> Tuple[float, np.ndarray] | None:
    """Minimum translation depth and unit normal (pointing from ``a`` into ``b``).

    Returns ``None`` when the boxes do not overlap.
    """
    gap = float(np.linalg.norm(b.center - a.center))
    if gap > a.bounding_radius() + b.bounding_radius():
        return None
    overlaps, axes = _sat_overlaps(a, b, early_exit=True)
    k = int(np.argmin(overlaps))
    if overlaps[k] <= 0.0:
        return None
    return float(overlaps[k]), axes[k]


# ------------------------------------------------------------------ #
# Gripper shapes and contacts
# ------------------------------------------------------------------ #
@dataclass
class ShapeSet:
    """Collision boxes of a rigid gripper, in the gripper's own frame."""

    boxes: List[OrientedBox]
    palm_index: int = 0

    def __post_init__(self):
        if not self.boxes:
            raise ValueError("shape set needs at least one box")
        if not 0 <= self.palm_index < len(self.boxes):
            raise ValueError("palm index out of range")
        for bx in self.boxes:
            if np.any(np.asarray(bx.half_extents) <= 0.0):
                raise ValueError("box half-extents must be positive")

    @property
    def palm(self) -> OrientedBox:
        return self.boxes[self.palm_index]

    def placed(self, pose: Pose) -> List[OrientedBox]:
        return [bx.transformed(pose) for bx in self.boxes]


@dataclass
class Contact:
    point: np.ndarray
    normal: np.ndarray
    depth: float
    force_magnitude: float

    @property
    def force(self) -> np.ndarray:
        """Force applied to the target body."""
        return self.force_magnitude * self.normal


def _contact_point(a: OrientedBox, b: OrientedBox, normal: np.ndarray) -> np.ndarray:
    ca, cb = a.corners(), b.corners()
    inside = np.vstack([ca[points_in_box(ca, b, 1e-12)], cb[points_in_box(cb, a, 1e-12)]])
    if len(inside):
        return inside.mean(axis=0)
    # edge-edge crossing: midway between the deepest points of each box
    return 0.5 * (ca[np.argmax(ca @ normal)] + cb[np.argmin(cb @ normal)])


def collect_contacts(
    gripper_boxes: Sequence[OrientedBox],
    target: OrientedBox,
    stiffness: float,
    damping: float,
    relative_velocity: np.ndarray,
) -> List[Contact]:
    """Penalty contacts between world-placed gripper boxes and the target.

    ``relative_velocity`` is the gripper's velocity minus the target's.
    The damping term only ever adds force, so any penetrating pair yields a
    strictly positive force.
    """
    if stiffness < 0.0 or damping < 0.0:
        raise ValueError("stiffness and damping must be non-negative")
    rel = np.asarray(relative_velocity, dtype=float)
    out = []
    for bx in gripper_boxes:
        hit = penetration(bx, target)
        if hit is None:
            continue
        depth, normal = hit
        approach = max(0.0, float(rel @ normal))
        force = stiffness * depth + damping * approach
        out.append(Contact(_contact_point(bx, target, normal), normal, depth, force))
    return out
