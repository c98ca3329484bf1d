from __future__ import annotations

"""
Procedural articulated hand: a 21-joint skeleton dressed in capsules.

Responsibilities:
- rest hand construction (five- or four-finger variants, color palettes);
- forward kinematics from per-finger curl / spread and a wrist rotation;
- exact ray-capsule intersection for silhouettes and self-occlusion;
- projected 2D skeletons and the condition keys derived from them;
- voxelization into reference fields.

Joint order is wrist first, then thumb, index, middle, ring and pinky,
four joints per finger with the fingertip last.
"""

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DomainError, ShapeError
from .render import Camera, VoxelField

FINGERS: Tuple[str, ...] = ("thumb", "index", "middle", "ring", "pinky")
NUM_JOINTS = 21
PARENTS: Tuple[int, ...] = (-1,) + tuple(
    p for f in range(5) for p in (0, 1 + 4 * f, 2 + 4 * f, 3 + 4 * f)
)

CURL_LIMITS = (0.0, math.pi / 2.0)
SPREAD_LIMITS = (-math.pi / 6.0, math.pi / 6.0)

# Rest proportions in scene units (palm faces +z, fingers point to +y).
_WRIST = (0.0, -0.95, 0.0)
_FINGER_BASES = {
    "thumb": (-0.28, -0.70, 0.0),
    "index": (-0.27, -0.15, 0.0),
    "middle": (-0.09, -0.10, 0.0),
    "ring": (0.09, -0.13, 0.0),
    "pinky": (0.26, -0.22, 0.0),
}
_FINGER_DIRECTIONS = {
    "thumb": (-0.6, 0.8, 0.0),
    "index": (-0.05, 1.0, 0.0),
    "middle": (0.0, 1.0, 0.0),
    "ring": (0.04, 1.0, 0.0),
    "pinky": (0.1, 1.0, 0.0),
}
_FINGER_LENGTHS = {"thumb": 0.7, "index": 1.0, "middle": 1.1, "ring": 1.0, "pinky": 0.9}
_FINGER_RADII = {"thumb": 0.09, "index": 0.08, "middle": 0.08, "ring": 0.075, "pinky": 0.065}
_PHALANX_FRACTIONS = (0.45, 0.30, 0.25)
_PALM_RADIUS = 0.1

PALETTES: Dict[str, Dict[str, Tuple[float, float, float]]] = {
    "light": {
        "palm": (0.93, 0.78, 0.66),
        "thumb": (0.90, 0.72, 0.60),
        "index": (0.86, 0.66, 0.55),
        "middle": (0.92, 0.75, 0.62),
        "ring": (0.84, 0.64, 0.52),
        "pinky": (0.80, 0.60, 0.50),
    },
    "dark": {
        "palm": (0.42, 0.30, 0.24),
        "thumb": (0.38, 0.27, 0.21),
        "index": (0.35, 0.25, 0.20),
        "middle": (0.40, 0.29, 0.23),
        "ring": (0.33, 0.24, 0.19),
        "pinky": (0.30, 0.22, 0.18),
    },
}


def finger_joints(finger: str) -> Tuple[int, int, int, int]:
    """Joint indices (base, second, third, tip) of a finger."""
    f = FINGERS.index(finger)
    return tuple(1 + 4 * f + k for k in range(4))  # type: ignore[return-value]


def part_of_joint(j: int) -> str:
    return "palm" if j == 0 else FINGERS[(j - 1) // 4]


# -------------------------------------------------------------------
# Data structures
# -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HandSkeleton:
    """21 world-space joints and their parent indices (wrist is the root)."""

    joints: np.ndarray
    parents: Tuple[int, ...] = PARENTS

    def __post_init__(self) -> None:
        joints = np.asarray(self.joints, dtype=np.float64)
        object.__setattr__(self, "joints", joints)
        if joints.shape != (NUM_JOINTS, 3):
            raise ShapeError(f"Expected {NUM_JOINTS}x3 joints, got {joints.shape}")
        if len(self.parents) != NUM_JOINTS or self.parents[0] != -1:
            raise ShapeError("Topology must list one parent per joint with the wrist as root")
        for j, p in enumerate(self.parents[1:], start=1):
            if not (0 <= p < j):
                raise ShapeError(f"Joint {j} has invalid parent {p}")
        if np.any(self.bone_lengths() <= 0.0):
            raise DomainError("Bone lengths must be strictly positive")

    def bone_lengths(self) -> np.ndarray:
        """Length of the bone ending at each joint 1..20."""
        parents = np.asarray(self.parents[1:])
        return np.linalg.norm(self.joints[1:] - self.joints[parents], axis=-1)

    def to_text(self) -> str:
        """21 lines of 'index parent x y z'."""
        lines = [
            f"{j} {p} {x:.17g} {y:.17g} {z:.17g}"
            for j, (p, (x, y, z)) in enumerate(zip(self.parents, self.joints))
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "HandSkeleton":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if len(rows) != NUM_JOINTS:
            raise ShapeError(f"Expected {NUM_JOINTS} skeleton lines, got {len(rows)}")
        rows.sort(key=lambda r: int(r[0]))
        parents = tuple(int(r[1]) for r in rows)
        joints = np.array([[float(v) for v in r[2:5]] for r in rows])
        return cls(joints=joints, parents=parents)


@dataclass(frozen=True)
class PoseParams:
    """Per-finger curl and spread (radians), wrist Euler angles (xyz) and translation."""

    curl: Tuple[float, ...] = (0.0,) * 5
    spread: Tuple[float, ...] = (0.0,) * 5
    wrist_rotation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if len(self.curl) != 5 or len(self.spread) != 5:
            raise ShapeError("curl and spread need one value per finger")
        if len(self.wrist_rotation) != 3 or len(self.translation) != 3:
            raise ShapeError("wrist_rotation and translation need three values")
        for k, c in enumerate(self.curl):
            if not (CURL_LIMITS[0] <= c <= CURL_LIMITS[1]):
                raise DomainError(f"curl[{k}] ({FINGERS[k]}) = {c} outside {CURL_LIMITS}")
        for k, s in enumerate(self.spread):
            if not (SPREAD_LIMITS[0] <= s <= SPREAD_LIMITS[1]):
                raise DomainError(f"spread[{k}] ({FINGERS[k]}) = {s} outside {SPREAD_LIMITS}")


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float
    joints: Tuple[int, int]
    part: str


@dataclass(frozen=True, eq=False)
class CapsuleHand:
    """
    Skeleton plus capsule volumes.

    bone_radii maps a child joint index to the radius of the capsule on
    the bone (parent -> child). palm_capsules are extra (joint_a, joint_b,
    radius) capsules filling the palm. Joints without a bone entry carry
    no volume (this is how the four-finger variant drops its pinky).
    """

    skeleton: HandSkeleton
    bone_radii: Mapping[int, float] = field(default_factory=dict)
    palm_capsules: Tuple[Tuple[int, int, float], ...] = ()
    palette: Mapping[str, Tuple[float, float, float]] = field(
        default_factory=lambda: dict(PALETTES["light"])
    )
    label: str = "five_finger"

    def __post_init__(self) -> None:
        for j, r in self.bone_radii.items():
            if not (1 <= j < NUM_JOINTS):
                raise ShapeError(f"bone_radii key {j} is not a child joint")
            if r <= 0:
                raise DomainError(f"Capsule radius for joint {j} must be positive, got {r}")
        for a, b, r in self.palm_capsules:
            if r <= 0:
                raise DomainError(f"Palm capsule ({a}, {b}) radius must be positive, got {r}")

    def capsules(self) -> List[Capsule]:
        joints = self.skeleton.joints
        out: List[Capsule] = []
        for j in sorted(self.bone_radii):
            p = self.skeleton.parents[j]
            part = "palm" if p == 0 and FINGERS[(j - 1) // 4] != "thumb" else part_of_joint(j)
            out.append(Capsule(joints[p], joints[j], float(self.bone_radii[j]), (p, j), part))
        for a, b, r in self.palm_capsules:
            out.append(Capsule(joints[a], joints[b], float(r), (a, b), "palm"))
        return out

    def with_skeleton(self, skeleton: HandSkeleton) -> "CapsuleHand":
        return CapsuleHand(skeleton, dict(self.bone_radii), self.palm_capsules, dict(self.palette), self.label)


def build_rest_hand(
    label: str = "five_finger",
    missing_fingers: Sequence[str] = (),
    palette: str = "light",
) -> CapsuleHand:
    """Canonical open hand; fingers listed in missing_fingers get no capsules."""
    for name in missing_fingers:
        if name not in FINGERS:
            raise DomainError(f"Unknown finger {name!r}, expected one of {FINGERS}")
    if palette not in PALETTES:
        raise DomainError(f"Unknown palette {palette!r}, expected one of {sorted(PALETTES)}")

    joints = np.zeros((NUM_JOINTS, 3))
    joints[0] = _WRIST
    radii: Dict[int, float] = {}
    for finger in FINGERS:
        base = np.asarray(_FINGER_BASES[finger])
        direction = np.asarray(_FINGER_DIRECTIONS[finger])
        direction = direction / np.linalg.norm(direction)
        idx = finger_joints(finger)
        joints[idx[0]] = base
        offset = 0.0
        for k, frac in enumerate(_PHALANX_FRACTIONS):
            offset += frac * _FINGER_LENGTHS[finger]
            joints[idx[k + 1]] = base + offset * direction
        if finger in missing_fingers:
            continue
        radii[idx[0]] = _PALM_RADIUS
        for j in idx[1:]:
            radii[j] = _FINGER_RADII[finger]

    present = [f for f in ("index", "middle", "ring", "pinky") if f not in missing_fingers]
    palm = tuple(
        (finger_joints(a)[0], finger_joints(b)[0], _PALM_RADIUS) for a, b in zip(present, present[1:])
    )
    return CapsuleHand(
        skeleton=HandSkeleton(joints),
        bone_radii=radii,
        palm_capsules=palm,
        palette=dict(PALETTES[palette]),
        label=label,
    )


# -------------------------------------------------------------------
# Kinematics
# -------------------------------------------------------------------


def _rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def articulate(rest: CapsuleHand, pose: PoseParams) -> CapsuleHand:
    """
    Forward kinematics along the joint tree.

    Each finger gets a local frame at its base (y along the first
    phalanx, z along the palm normal). Spread rotates about local z at
    the base; curl bends every finger joint about local x toward the
    palm. The wrist rotation and translation are applied last.
    """
    pose.validate()
    rest_joints = rest.skeleton.joints
    wrist = rest_joints[0]
    idx_base = rest_joints[finger_joints("index")[0]]
    pinky_base = rest_joints[finger_joints("pinky")[0]]
    normal = np.cross(pinky_base - wrist, idx_base - wrist)
    normal = normal / np.linalg.norm(normal)

    joints = rest_joints.copy()
    for f, finger in enumerate(FINGERS):
        idx = finger_joints(finger)
        base = rest_joints[idx[0]]
        y_axis = rest_joints[idx[1]] - base
        y_axis = y_axis / np.linalg.norm(y_axis)
        z_axis = normal - (normal @ y_axis) * y_axis
        z_axis = z_axis / np.linalg.norm(z_axis)
        x_axis = np.cross(y_axis, z_axis)
        frame = np.stack([x_axis, y_axis, z_axis], axis=1)

        rot = frame @ _rot_z(pose.spread[f])
        bend = _rot_x(pose.curl[f])
        p = base
        for k in range(3):
            seg = rest_joints[idx[k + 1]] - rest_joints[idx[k]]
            local = frame.T @ seg
            rot = rot @ bend
            p = p + rot @ local
            joints[idx[k + 1]] = p

    wrist_rot = Rotation.from_euler("xyz", pose.wrist_rotation).as_matrix()
    joints = wrist + (joints - wrist) @ wrist_rot.T + np.asarray(pose.translation, dtype=np.float64)
    return rest.with_skeleton(HandSkeleton(joints, rest.skeleton.parents))


# -------------------------------------------------------------------
# Ray-capsule geometry
# -------------------------------------------------------------------


def _sphere_entry(o: np.ndarray, d: np.ndarray, c: np.ndarray, r: float) -> np.ndarray:
    oc = o - c
    b = np.einsum("ij,ij->i", d, oc)
    cc = np.einsum("ij,ij->i", oc, oc) - r * r
    h = b * b - cc
    t = -b - np.sqrt(np.maximum(h, 0.0))
    return np.where((h >= 0.0) & (t > 0.0), t, np.inf)


def ray_capsule_entry(
    origins: np.ndarray, dirs: np.ndarray, a: np.ndarray, b: np.ndarray, radius: float
) -> np.ndarray:
    """
    Distance along unit rays to the first entry into a capsule, inf on miss.

    The capsule is the union of a finite cylinder and two end spheres, so
    the entry is the smallest positive entry over the three pieces.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ba = b - a
    baba = float(ba @ ba)
    oa = o - a
    bard = d @ ba
    baoa = oa @ ba
    rdoa = np.einsum("ij,ij->i", d, oa)
    oaoa = np.einsum("ij,ij->i", oa, oa)

    qa = baba - bard * bard
    qb = baba * rdoa - baoa * bard
    qc = baba * oaoa - baoa * baoa - radius * radius * baba
    h = qb * qb - qa * qc
    valid = (qa > 1e-12) & (h >= 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-qb - np.sqrt(np.maximum(h, 0.0))) / np.where(valid, qa, 1.0)
    y = baoa + t * bard
    t_cyl = np.where(valid & (t > 0.0) & (y > 0.0) & (y < baba), t, np.inf)

    return np.minimum(t_cyl, np.minimum(_sphere_entry(o, d, a, radius), _sphere_entry(o, d, b, radius)))


def first_hits(
    hand: CapsuleHand, origins: np.ndarray, dirs: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Entry distance and capsule index of the first capsule on each ray (-1 on miss)."""
    capsules = hand.capsules()
    n = np.asarray(origins).reshape(-1, 3).shape[0]
    if not capsules:
        return np.full(n, np.inf), np.full(n, -1)
    entries = np.stack([ray_capsule_entry(origins, dirs, c.a, c.b, c.radius) for c in capsules])
    idx = np.argmin(entries, axis=0)
    t = entries[idx, np.arange(n)]
    return t, np.where(np.isfinite(t), idx, -1)


def silhouette_mask(hand: CapsuleHand, camera: Camera) -> np.ndarray:
    """Binary mask (H, W) of pixels whose center ray hits any capsule."""
    origins, dirs = camera.pixel_rays()
    t, _ = first_hits(hand, origins, dirs)
    n = camera.image_size
    return np.isfinite(t).reshape(n, n).astype(np.uint8)


# -------------------------------------------------------------------
# Projected skeleton
# -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Keypoints2D:
    """Projected joints in image coordinates: points[:, 0] = x (col), points[:, 1] = y (row)."""

    points: np.ndarray
    visible: np.ndarray
    depth: np.ndarray

    def triples(self) -> List[Tuple[float, float, bool]]:
        return [(float(x), float(y), bool(v)) for (x, y), v in zip(self.points, self.visible)]


def project_keypoints(hand: CapsuleHand, camera: Camera) -> Keypoints2D:
    """
    Perspective projection of the 21 joints with self-occlusion flags.

    A joint is visible when it lies in front of the camera and the first
    capsule its ray enters is one attached to that joint.
    """
    joints = hand.skeleton.joints
    cols, rows, depth = camera.project(joints)
    points = np.stack([cols, rows], axis=-1)

    capsules = hand.capsules()
    rel = joints - camera.position
    dist = np.linalg.norm(rel, axis=-1)
    dirs = rel / dist[:, None]
    origins = np.broadcast_to(camera.position, joints.shape)

    visible = np.zeros(NUM_JOINTS, dtype=bool)
    if capsules:
        entries = np.stack([ray_capsule_entry(origins, dirs, c.a, c.b, c.radius) for c in capsules])
        for j in range(NUM_JOINTS):
            own = np.array([j in c.joints for c in capsules])
            if depth[j] <= 0.0 or not own.any():
                continue
            own_t = entries[own, j].min()
            other_t = entries[~own, j].min() if (~own).any() else np.inf
            visible[j] = bool(np.isfinite(own_t) and other_t >= own_t)
    return Keypoints2D(points=points, visible=visible, depth=depth)


def skeleton_hash(keypoints: Keypoints2D) -> str:
    """Stable identifier of a projected skeleton (view and pose together)."""
    h = hashlib.sha1()
    h.update(np.round(keypoints.points, 6).astype("<f8").tobytes())
    h.update(keypoints.visible.astype(np.uint8).tobytes())
    return h.hexdigest()[:16]


# -------------------------------------------------------------------
# Voxelization
# -------------------------------------------------------------------


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ba = b - a
    denom = float(ba @ ba)
    pa = points - a
    s = np.clip(pa @ ba / denom, 0.0, 1.0) if denom > 0 else np.zeros(points.shape[0])
    return np.linalg.norm(pa - s[:, None] * ba, axis=-1)


def voxelize(
    hand: CapsuleHand,
    resolution: int,
    extent: float,
    density: float = 50.0,
    density_scale: float = 10.0,
) -> VoxelField:
    """
    Occupancy field of the hand: `density` on nodes inside any capsule,
    zero elsewhere. Each node takes the palette color of its nearest
    capsule so interpolation across the surface stays on-palette.
    """
    if resolution < 8:
        raise DomainError(f"resolution must be >= 8, got {resolution}")
    blank = VoxelField.empty(resolution, extent, density_scale)
    nodes = blank.node_positions().reshape(-1, 3)

    capsules = hand.capsules()
    shape = (resolution,) * 3
    if not capsules:
        return VoxelField.from_values(
            np.zeros(shape), np.full(shape + (3,), 0.5), extent, density_scale
        )

    signed = np.stack([_segment_distance(nodes, c.a, c.b) - c.radius for c in capsules])
    nearest = np.argmin(signed, axis=0)
    inside = signed[nearest, np.arange(nodes.shape[0])] <= 0.0

    colors = np.array([hand.palette[c.part] for c in capsules])[nearest]
    sigma = np.where(inside, density, 0.0)
    return VoxelField.from_values(
        sigma.reshape(shape), colors.reshape(shape + (3,)), extent, density_scale
    )
