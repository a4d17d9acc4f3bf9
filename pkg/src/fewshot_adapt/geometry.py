"""Pinhole camera, poses, pose error, and PnP + RANSAC registration.

Conventions: a pose stores the camera centre ``c`` in world coordinates and
the world-to-camera rotation ``R``, so a world point ``X`` has camera
coordinates ``R @ (X - c)``.  Pixels are ``(u, v)`` with ``u`` along the
image width.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_PNP_MATCHES = 6


class DegenerateConfigurationError(ValueError):
    """Raised when a DLT system is rank deficient or too small."""


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int

    def __post_init__(self):
        if self.focal_x <= 0 or self.focal_y <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.principal_x < self.width and 0 <= self.principal_y < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.focal_x, 0.0, self.principal_x],
                         [0.0, self.focal_y, self.principal_y],
                         [0.0, 0.0, 1.0]])

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        """Pixels -> normalized image coordinates (z = 1 plane)."""
        pixels = np.asarray(pixels, dtype=float)
        return np.stack([(pixels[..., 0] - self.principal_x) / self.focal_x,
                         (pixels[..., 1] - self.principal_y) / self.focal_y], axis=-1)

    def inside(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=float)
        return ((pixels[..., 0] >= 0) & (pixels[..., 0] < self.width)
                & (pixels[..., 1] >= 0) & (pixels[..., 1] < self.height))


@dataclass(frozen=True)
class Pose:
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.position, dtype=float).reshape(3)
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.linalg.norm(R.T @ R - np.eye(3)) >= 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "position", c)
        object.__setattr__(self, "rotation", R)

    @classmethod
    def from_rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        """Build from the extrinsics ``[R | t]`` with ``t = -R c``."""
        R = orthonormalize(R)
        return cls(-R.T @ np.asarray(t, dtype=float), R)

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.position

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points - self.position) @ self.rotation.T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.rotation, other.rotation))

    __hash__ = None


@dataclass(frozen=True)
class PoseError:
    epsilon_t: float
    epsilon_r: float


@dataclass
class RansacConfig:
    reproj_threshold_px: float = 4.0
    iterations: int = 1000
    inlier_threshold: int = 15
    seed: int = 0
    refine_iterations: int = 2


@dataclass
class RegistrationResult:
    estimated_pose: Pose | None
    inlier_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    accepted: bool = False


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues' formula; ``angle`` in radians."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def exp_so3(w: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    if theta < 1e-12:
        return orthonormalize(np.eye(3) + skew(w))
    return rotation_from_axis_angle(w / theta, theta)


def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``position`` looking at ``target`` with image-down roughly -up."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(position, orthonormalize(np.stack([x, y, z])))


def project_points(points: np.ndarray, pose: Pose, intr: CameraIntrinsics):
    """Vectorized projection.

    Returns ``(pixels, visible)`` where ``visible`` marks points in front of the
    camera whose pixel falls inside the image.  Pixels of invisible points are
    NaN when behind the camera.
    """
    Xc = pose.to_camera(np.atleast_2d(points))
    z = Xc[:, 2]
    front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.focal_x * Xc[:, 0] / z + intr.principal_x
        v = intr.focal_y * Xc[:, 1] / z + intr.principal_y
    pixels = np.stack([u, v], axis=1)
    pixels[~front] = np.nan
    visible = front & intr.inside(np.nan_to_num(pixels, nan=-1.0))
    return pixels, visible


def project(point3d, pose: Pose, intr: CameraIntrinsics) -> np.ndarray | None:
    pixels, visible = project_points(np.asarray(point3d, dtype=float).reshape(1, 3), pose, intr)
    return pixels[0] if visible[0] else None


def backproject(pixel, depth: float, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    xn = intr.normalize(np.asarray(pixel, dtype=float))
    Xc = depth * np.array([xn[0], xn[1], 1.0])
    return pose.rotation.T @ Xc + pose.position


def pose_error(gt: Pose, est: Pose) -> PoseError:
    eps_t = float(np.linalg.norm(gt.position - est.position))
    cos = 0.5 * (np.trace(gt.rotation.T @ est.rotation) - 1.0)
    eps_r = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    return PoseError(eps_t, eps_r)


# --------------------------------------------------------------------------
# PnP


def _dlt_systems(xn: np.ndarray, X: np.ndarray):
    """Batched DLT.

    ``xn``: (..., n, 2) normalized image points, ``X``: (..., n, 3) world points.
    Returns ``(P, ok)`` with ``P`` (..., 3, 4) in world coordinates and ``ok``
    marking non-degenerate systems.
    """
    mean = X.mean(axis=-2, keepdims=True)
    scale = np.sqrt(((X - mean) ** 2).sum(axis=-1).mean(axis=-1))
    scale = np.where(scale > 0, scale, 1.0)[..., None, None]
    Xh = np.concatenate([(X - mean) / scale, np.ones(X.shape[:-1] + (1,))], axis=-1)
    n = X.shape[-2]
    zeros = np.zeros_like(Xh)
    u = xn[..., 0:1]
    v = xn[..., 1:2]
    rows_u = np.concatenate([Xh, zeros, -u * Xh], axis=-1)
    rows_v = np.concatenate([zeros, Xh, -v * Xh], axis=-1)
    A = np.stack([rows_u, rows_v], axis=-2).reshape(X.shape[:-2] + (2 * n, 12))
    _, s, Vt = np.linalg.svd(A)
    # rank(A) must be 11: the second-smallest singular value stays away from 0
    ok = s[..., 10] / s[..., 0] >= 1e-8
    Pn = Vt[..., -1, :].reshape(X.shape[:-2] + (3, 4))
    # undo point normalization: Xn = (X - mean) / scale
    T = np.zeros(X.shape[:-2] + (4, 4))
    T[..., :3, :3] = np.eye(3) / scale
    T[..., :3, 3] = -mean[..., 0, :] / scale[..., 0]
    T[..., 3, 3] = 1.0
    return Pn @ T, ok


def _extrinsics_from_projection(P: np.ndarray):
    """Split (..., 3, 4) projective matrices into (R, t) with det R = +1."""
    M = P[..., :3]
    sign = np.sign(np.linalg.det(M))
    sign = np.where(sign == 0, 1.0, sign)
    P = P * sign[..., None, None]
    U, S, Vt = np.linalg.svd(P[..., :3])
    R = U @ Vt
    scale = S.mean(axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    t = P[..., 3] / scale[..., None]
    return R, t


def reprojection_residuals(R, t, X, pixels, intr: CameraIntrinsics) -> np.ndarray:
    Xc = X @ R.T + t
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.focal_x * Xc[:, 0] / Xc[:, 2] + intr.principal_x
        v = intr.focal_y * Xc[:, 1] / Xc[:, 2] + intr.principal_y
    return np.stack([u, v], axis=1) - pixels


def _cost(R, t, X, pixels, intr):
    r = reprojection_residuals(R, t, X, pixels, intr)
    c = float((r ** 2).sum())
    return c if np.isfinite(c) else np.inf


def refine_pose(R, t, X, pixels, intr: CameraIntrinsics, max_iter: int = 50, history=None):
    """Gauss-Newton on reprojection residuals with step halving.

    Left-multiplicative rotation update ``R <- exp(w) R``.  Only steps that do
    not increase the squared error are accepted.  ``history`` (a list), if
    given, receives the cost after every accepted step.
    """
    cost = _cost(R, t, X, pixels, intr)
    if history is not None:
        history.append(cost)
    fx, fy = intr.focal_x, intr.focal_y
    for _ in range(max_iter):
        RX = X @ R.T
        Xc = RX + t
        z = Xc[:, 2]
        r = reprojection_residuals(R, t, X, pixels, intr).reshape(-1)
        du = np.stack([fx / z, np.zeros_like(z), -fx * Xc[:, 0] / z ** 2], axis=1)
        dv = np.stack([np.zeros_like(z), fy / z, -fy * Xc[:, 1] / z ** 2], axis=1)
        dproj = np.stack([du, dv], axis=1)  # (n, 2, 3)
        # d Xc / d w = -[RX]_x ; d Xc / d t = I
        skews = np.zeros((len(X), 3, 3))
        skews[:, 0, 1], skews[:, 0, 2] = -RX[:, 2], RX[:, 1]
        skews[:, 1, 0], skews[:, 1, 2] = RX[:, 2], -RX[:, 0]
        skews[:, 2, 0], skews[:, 2, 1] = -RX[:, 1], RX[:, 0]
        J = np.concatenate([dproj @ -skews, dproj], axis=2).reshape(-1, 6)
        JtJ = J.T @ J
        g = J.T @ r
        try:
            delta = -np.linalg.solve(JtJ + 1e-12 * np.trace(JtJ) * np.eye(6), g)
        except np.linalg.LinAlgError:
            break
        step = 1.0
        accepted = False
        for _ in range(30):
            R_new = exp_so3(step * delta[:3]) @ R
            t_new = t + step * delta[3:]
            new_cost = _cost(R_new, t_new, X, pixels, intr)
            if new_cost <= cost:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        improvement = cost - new_cost
        R, t, cost = R_new, t_new, new_cost
        if history is not None:
            history.append(cost)
        if improvement <= 1e-14 * max(cost, 1e-30) or np.linalg.norm(step * delta) < 1e-15:
            break
    return orthonormalize(R), t


def solve_pnp(pixels, points3d, intr: CameraIntrinsics, refine: bool = True) -> Pose:
    """DLT initialization followed by Gauss-Newton refinement.

    Raises ``DegenerateConfigurationError`` on fewer than six matches or a
    rank-deficient DLT system.
    """
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    if len(X) < MIN_PNP_MATCHES:
        raise DegenerateConfigurationError(
            f"PnP needs at least {MIN_PNP_MATCHES} matches, got {len(X)}")
    P, ok = _dlt_systems(intr.normalize(pixels), X)
    if not ok:
        raise DegenerateConfigurationError("rank-deficient DLT system")
    R, t = _extrinsics_from_projection(P)
    if refine:
        R, t = refine_pose(R, t, X, pixels, intr)
    return Pose.from_rt(R, t)


# --------------------------------------------------------------------------
# RANSAC


def _inliers(R, t, X, pixels, intr, threshold):
    Xc = X @ R.T + t
    r = reprojection_residuals(R, t, X, pixels, intr)
    err = np.sqrt((r ** 2).sum(axis=1))
    return np.flatnonzero((Xc[:, 2] > 0) & (err <= threshold))


def ransac_register(pixels, points3d, intr: CameraIntrinsics, cfg: RansacConfig | None = None,
                    scores=None) -> RegistrationResult:
    """Fixed-iteration RANSAC over minimal six-match samples.

    ``scores`` (match scores) are accepted for interface completeness; sampling
    is uniform.  The best hypothesis is refit on its inliers and the inlier set
    recomputed ``cfg.refine_iterations`` times.
    """
    cfg = cfg or RansacConfig()
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    n = len(X)
    if n == 0:
        raise ValueError("ransac_register needs at least one candidate")
    failed = RegistrationResult(None, np.zeros(0, dtype=int), False)
    if n < MIN_PNP_MATCHES:
        return failed

    rng = np.random.default_rng(cfg.seed)
    samples = np.argsort(rng.random((cfg.iterations, n)), axis=1)[:, :MIN_PNP_MATCHES]
    xn = intr.normalize(pixels)
    P, ok = _dlt_systems(xn[samples], X[samples])
    if not ok.any():
        return failed
    R, t = _extrinsics_from_projection(P[ok])

    # score all hypotheses at once
    Xc = np.einsum("hij,nj->hni", R, X) + t[:, None, :]
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = intr.focal_x * Xc[..., 0] / z + intr.principal_x - pixels[:, 0]
        dv = intr.focal_y * Xc[..., 1] / z + intr.principal_y - pixels[:, 1]
        inl = (z > 0) & (du ** 2 + dv ** 2 <= cfg.reproj_threshold_px ** 2)
    counts = inl.sum(axis=1)
    best = int(np.argmax(counts))
    inliers = np.flatnonzero(inl[best])
    R_best, t_best = R[best], t[best]

    for _ in range(cfg.refine_iterations):
        if len(inliers) < MIN_PNP_MATCHES:
            break
        Xi, pi = X[inliers], pixels[inliers]
        R0, t0 = R_best, t_best
        P_fit, ok_fit = _dlt_systems(xn[inliers], Xi)
        if ok_fit:
            R1, t1 = _extrinsics_from_projection(P_fit)
            if _cost(R1, t1, Xi, pi, intr) < _cost(R0, t0, Xi, pi, intr):
                R0, t0 = R1, t1
        R_best, t_best = refine_pose(R0, t0, Xi, pi, intr)
        new_inliers = _inliers(R_best, t_best, X, pixels, intr, cfg.reproj_threshold_px)
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers

    pose = Pose.from_rt(R_best, t_best)
    return RegistrationResult(pose, inliers, len(inliers) >= cfg.inlier_threshold)
