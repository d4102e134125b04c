# ==============================================================================
# Rigid-transform algebra on SO(3) x R^3 and the error metrics reported by
# the evaluation harness. A transform is a unit quaternion (w, x, y, z) with
# w >= 0 plus a translation; rotations go through scipy's Rotation.
# ==============================================================================

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from app.services import diffcore as dc
from app.services.cloud import PointCloud
from app.services.errors import TransformError

EULER_ORDER = "ZYX"  # intrinsic yaw-pitch-roll
GIMBAL_TOLERANCE_DEG = 1e-6


@dataclass(frozen=True, eq=False)
class RigidTransform:
    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(4)
        t = np.array(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise TransformError(f"non-finite transform q={q} t={t}")
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-9:
            raise TransformError(f"quaternion is not unit length (norm={norm!r})")
        if q[0] < 0:
            q = -q
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @property
    def rotation(self):
        return Rotation.from_quat(np.roll(self.q, -1))

    def as_vector(self):
        """The 7 parameters (qw, qx, qy, qz, tx, ty, tz)."""
        return np.concatenate([self.q, self.t])

    def __repr__(self):
        return f"RigidTransform(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def identity():
    return RigidTransform(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))


def from_quaternion(q, t=(0.0, 0.0, 0.0)):
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q)
    if not np.isfinite(norm) or norm == 0.0:
        raise TransformError(f"cannot normalise quaternion {q}")
    return RigidTransform(q / norm, t)


def from_rotation(rotation, t=(0.0, 0.0, 0.0)):
    return from_quaternion(np.roll(rotation.as_quat(), 1), t)


def from_matrix(R, t=(0.0, 0.0, 0.0)):
    return from_rotation(Rotation.from_matrix(np.asarray(R, dtype=float)), t)


def from_euler(zyx_deg, t=(0.0, 0.0, 0.0)):
    """Intrinsic Z-Y-X angles in degrees (yaw, pitch, roll)."""
    return from_rotation(Rotation.from_euler(EULER_ORDER, np.asarray(zyx_deg, dtype=float), degrees=True), t)


def to_matrix(T):
    return T.rotation.as_matrix()


def to_euler(T):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        return T.rotation.as_euler(EULER_ORDER, degrees=True)


def apply_points(T, points):
    return np.asarray(points, dtype=float) @ to_matrix(T).T + T.t


def apply(T, P):
    """Maps every point p to R p + t, keeping point order and occupancy labels."""
    return PointCloud(apply_points(T, P.points), P.occupancy)


def apply_tensor(q, t, points):
    """Differentiable R(q) p + t for a (4,) quaternion tensor and (3,) translation tensor."""
    points = dc.as_tensor(points)
    R = dc.quat_to_matrix(q)
    return dc.add(dc.matmul(points, dc.transpose(R)), dc.tile_rows(t, points.shape[0]))


def compose(T, U):
    """Applies U first, then T."""
    rotation = T.rotation * U.rotation
    return from_rotation(rotation, to_matrix(T) @ U.t + T.t)


def inverse(T):
    R_inv = to_matrix(T).T
    return from_rotation(T.rotation.inv(), -R_inv @ T.t)


def random_transform(rng, max_rotation_deg=45.0, max_translation=0.5):
    """DCP protocol: per-axis angles in [0, max] degrees, per-axis translation in [-max, max]."""
    angles = rng.uniform(0.0, max_rotation_deg, size=3)
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return from_euler(angles, translation)


# --- error metrics ---

@dataclass(frozen=True)
class RotationErrors:
    mse_euler_deg: float
    rmse_euler_deg: float
    mae_euler_deg: float
    geodesic_deg: float
    gimbal_lock: bool = False


@dataclass(frozen=True)
class TranslationErrors:
    mse: float
    rmse: float
    mae: float


def euler_differences(pred, gt):
    """Per-axis Euler differences in degrees wrapped to [-180, 180)."""
    diff = to_euler(pred) - to_euler(gt)
    return (diff + 180.0) % 360.0 - 180.0


def geodesic_deg(a, b):
    """Angle of R_a R_b^T in degrees, via the relative quaternion for accuracy near zero."""
    relative = a.rotation * b.rotation.inv()
    x, y, z, w = relative.as_quat()
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm([x, y, z]), abs(w))))


def _near_gimbal_lock(T):
    return abs(abs(to_euler(T)[1]) - 90.0) <= GIMBAL_TOLERANCE_DEG


def rotation_errors(pred, gt):
    diff = euler_differences(pred, gt)
    mse = float(np.mean(diff ** 2))
    return RotationErrors(
        mse_euler_deg=mse,
        rmse_euler_deg=float(np.sqrt(mse)),
        mae_euler_deg=float(np.mean(np.abs(diff))),
        geodesic_deg=geodesic_deg(pred, gt),
        gimbal_lock=_near_gimbal_lock(pred) or _near_gimbal_lock(gt),
    )


def translation_errors(pred, gt):
    diff = pred.t - gt.t
    mse = float(np.mean(diff ** 2))
    return TranslationErrors(mse=mse, rmse=float(np.sqrt(mse)), mae=float(np.mean(np.abs(diff))))
