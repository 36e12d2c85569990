"""SE(3) pose algebra, trajectory metrics, and KITTI pose-file I/O.

Conventions, fixed and round-trip-tested:

* Euler angles are intrinsic Z-Y-X: R = Rz(yaw) @ Ry(pitch) @ Rx(roll),
  stored as (roll, pitch, yaw).  Recovery requires pitch away from +-pi/2.
* A relative pose (phi, v) acts on the left pose as a homogeneous 3x4
  product: R' = R @ R(phi), t' = t + R @ v.
* Path RMSE is the true root-mean-square of per-step relative vectors,
  sqrt(sum ||err||^2 / (3 (N-1))).
* Segment errors follow the 100 m..800 m evaluation recipe: segment starts
  every 10 frames, error pose E = rel(gt)^-1 @ rel(pred), translational
  error as percent of segment length, rotational error in degrees per 100 m.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SEGMENT_LENGTHS_M = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)
SEGMENT_START_STRIDE = 10
FRAME_DT = 0.1  # 10 Hz frames


class GimbalError(ValueError):
    """Orientation too close to the pitch = +-pi/2 degeneracy for Euler recovery."""


class PoseFormatError(ValueError):
    """Malformed KITTI pose text."""


class NoSegmentsError(ValueError):
    """Ground-truth path too short for any evaluation segment."""


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray     # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3, meters

    def validate(self, atol: float = 1e-9):
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=atol):
            raise ValueError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > atol:
            raise ValueError("pose rotation has det != 1")

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class RelPose:
    phi: np.ndarray  # Euler angles (roll, pitch, yaw), radians
    v: np.ndarray    # translation, meters

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.v])

    @staticmethod
    def from_vector(vec) -> "RelPose":
        vec = np.asarray(vec, dtype=np.float64)
        return RelPose(phi=vec[:3].copy(), v=vec[3:6].copy())


@dataclass
class Trajectory:
    poses: list
    timestamps: np.ndarray = field(default=None)

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("trajectory needs at least 2 poses")
        if self.timestamps is None:
            self.timestamps = FRAME_DT * np.arange(len(self.poses))
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps length does not match poses")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)


# -- rotations ---------------------------------------------------------------


def euler_to_rot(phi) -> np.ndarray:
    """R = Rz(yaw) @ Ry(pitch) @ Rx(roll) for phi = (roll, pitch, yaw)."""
    roll, pitch, yaw = np.asarray(phi, dtype=np.float64)
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rot_to_euler(r: np.ndarray, gimbal_margin: float = 1e-6) -> np.ndarray:
    """Inverse of euler_to_rot; raises GimbalError near pitch = +-pi/2."""
    sp = -float(r[2, 0])
    sp = min(1.0, max(-1.0, sp))
    if 1.0 - abs(sp) < gimbal_margin:
        raise GimbalError("pitch within margin of +-pi/2; Euler recovery is degenerate")
    pitch = np.arcsin(sp)
    roll = np.arctan2(r[2, 1], r[2, 2])
    yaw = np.arctan2(r[1, 0], r[0, 0])
    return np.array([roll, pitch, yaw])


def rotation_angle(r: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(min(1.0, max(-1.0, c))))


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Orthogonal projection onto SO(3) via SVD."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] *= -1
        r = u @ vt
    return r


# -- composition ---------------------------------------------------------------


def compose(pose: Pose, rel: RelPose) -> Pose:
    """Apply a relative motion on the right: P' = P * T(rel)."""
    r_rel = euler_to_rot(rel.phi)
    return Pose(rotation=pose.rotation @ r_rel,
                translation=pose.translation + pose.rotation @ rel.v)


def relative(a: Pose, b: Pose) -> RelPose:
    """The motion T with a * T = b, expressed in a's frame."""
    r_rel = a.rotation.T @ b.rotation
    v = a.rotation.T @ (b.translation - a.translation)
    return RelPose(phi=rot_to_euler(r_rel), v=v)


def accumulate(initial: Pose, rels, t0: float = 0.0, dt: float = FRAME_DT) -> Trajectory:
    """Left-fold of compose: N-1 relative motions yield an N-pose trajectory."""
    poses = [initial]
    for rel in rels:
        poses.append(compose(poses[-1], rel))
    ts = t0 + dt * np.arange(len(poses))
    return Trajectory(poses=poses, timestamps=ts)


def rels_to_array(rels) -> np.ndarray:
    return np.stack([r.as_vector() for r in rels])


def array_to_rels(arr) -> list:
    return [RelPose.from_vector(row) for row in np.asarray(arr, dtype=np.float64)]


# -- metrics -------------------------------------------------------------------


def rmse(pred, gt):
    """Path RMSE of per-step relative vectors: (translational m, rotational rad).

    Accepts [M, 6] arrays with columns (phi, v) or sequences of RelPose.
    """
    pred = pred if isinstance(pred, np.ndarray) else rels_to_array(pred)
    gt = gt if isinstance(gt, np.ndarray) else rels_to_array(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"rmse: length mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    m = diff.shape[0]
    trans = float(np.sqrt(np.sum(diff[:, 3:6] ** 2) / (3 * m)))
    rot = float(np.sqrt(np.sum(diff[:, 0:3] ** 2) / (3 * m)))
    return trans, rot


@dataclass(frozen=True)
class SegmentError:
    start_frame: int
    length_m: float
    t_err_pct: float
    r_err_deg_per_100m: float


@dataclass(frozen=True)
class RelErrorResult:
    t_rel_pct: float
    r_rel_deg_per_100m: float
    segments: tuple


def kitti_rel_errors(pred: Trajectory, gt: Trajectory,
                     lengths=SEGMENT_LENGTHS_M,
                     stride: int = SEGMENT_START_STRIDE) -> RelErrorResult:
    """Segment-based relative errors pooled over all (start, length) pairs."""
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(gt)}")
    n = len(gt)
    steps = np.array([np.linalg.norm(gt.poses[i + 1].translation - gt.poses[i].translation)
                      for i in range(n - 1)])
    cumdist = np.concatenate([[0.0], np.cumsum(steps)])

    segments = []
    for start in range(0, n, stride):
        for length in lengths:
            target = cumdist[start] + length
            end = int(np.searchsorted(cumdist, target))
            if end >= n:
                continue
            gt_rel = _pose_between(gt.poses[start], gt.poses[end])
            pred_rel = _pose_between(pred.poses[start], pred.poses[end])
            err_r = gt_rel[0].T @ pred_rel[0]
            err_t = gt_rel[0].T @ (pred_rel[1] - gt_rel[1])
            t_err = float(np.linalg.norm(err_t)) / length * 100.0
            r_err = np.degrees(rotation_angle(err_r)) / length * 100.0
            segments.append(SegmentError(start, length, t_err, r_err))
    if not segments:
        raise NoSegmentsError("ground-truth path shorter than the smallest segment length")
    t_rel = float(np.mean([s.t_err_pct for s in segments]))
    r_rel = float(np.mean([s.r_err_deg_per_100m for s in segments]))
    return RelErrorResult(t_rel, r_rel, tuple(segments))


def _pose_between(a: Pose, b: Pose):
    return a.rotation.T @ b.rotation, a.rotation.T @ (b.translation - a.translation)


def segments_to_csv(segments) -> str:
    lines = ["start_frame,length_m,t_err_pct,r_err_deg_per_100m"]
    for s in segments:
        lines.append(f"{s.start_frame},{s.length_m!r},{s.t_err_pct!r},{s.r_err_deg_per_100m!r}")
    return "\n".join(lines) + "\n"


# -- KITTI pose text -----------------------------------------------------------


def parse_kitti_poses(text: str, ortho_tol: float = 1e-3) -> Trajectory:
    """Each line: 12 floats, the row-major 3x4 [R|t] of one pose.

    Rotations are validated to orthonormality within ortho_tol and then
    snapped to the nearest rotation.
    """
    poses = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 12:
            raise PoseFormatError(f"line {lineno}: expected 12 values, got {len(parts)}")
        try:
            vals = np.array([float(p) for p in parts])
        except ValueError:
            raise PoseFormatError(f"line {lineno}: non-numeric value") from None
        mat = vals.reshape(3, 4)
        r, t = mat[:, :3], mat[:, 3]
        if (np.max(np.abs(r.T @ r - np.eye(3))) > ortho_tol
                or abs(np.linalg.det(r) - 1.0) > ortho_tol):
            raise PoseFormatError(f"line {lineno}: rotation not orthonormal within {ortho_tol}")
        poses.append(Pose(rotation=nearest_rotation(r), translation=t))
    if len(poses) < 2:
        raise PoseFormatError(f"pose file has {len(poses)} poses; need at least 2")
    return Trajectory(poses=poses)


def write_kitti_poses(traj: Trajectory) -> str:
    lines = []
    for pose in traj.poses:
        mat = np.hstack([pose.rotation, pose.translation.reshape(3, 1)])
        lines.append(" ".join(f"{v:.12e}" for v in mat.reshape(-1)))
    return "\n".join(lines) + "\n"
