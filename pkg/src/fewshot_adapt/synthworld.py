"""Deterministic synthetic scenes: landmarks, camera rings and domain shifts.

Each landmark carries a unit "appearance" vector that plays the role of the
frozen backbone output.  A domain warps appearances by ``normalize(M a + b)``
plus Gaussian noise, with ``M = I + gamma * G`` and ``||G||_F = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at, project_points

MIN_VISIBLE = 30


class SceneGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class Landmark:
    id: int
    position: np.ndarray
    appearance: np.ndarray
    saliency: float


@dataclass
class DomainSpec:
    name: str
    mix_matrix: np.ndarray
    bias: np.ndarray
    noise_sigma: float = 0.0
    score_jitter: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        self.mix_matrix = np.asarray(self.mix_matrix, dtype=float)
        self.bias = np.asarray(self.bias, dtype=float)
        if self.noise_sigma < 0 or self.score_jitter < 0 or self.gamma < 0:
            raise ValueError("noise_sigma, score_jitter and gamma must be non-negative")


@dataclass
class SceneConfig:
    seed: int = 0
    num_landmarks: int = 1000
    d_pre: int = 32
    box_min: tuple = (-10.0, -10.0, -1.5)
    box_max: tuple = (10.0, 10.0, 1.5)
    num_reference: int = 36
    ring_radius: float = 12.0
    ring_height: float = 0.5
    num_queries: int = 98
    query_radius_jitter: float = 1.5
    query_height_jitter: float = 0.5
    query_target_jitter: float = 1.0
    saliency_range: tuple = (0.2, 1.0)
    keypoint_noise_px: float = 0.5
    focal: float = 1000.0
    width: int = 640
    height: int = 480


@dataclass
class Scene:
    landmarks: list
    reference_poses: list
    intr: CameraIntrinsics
    seed: int
    query_poses: list = field(default_factory=list)
    domains: dict = field(default_factory=dict)
    keypoint_noise_px: float = 0.0

    @property
    def positions(self) -> np.ndarray:
        return np.array([lm.position for lm in self.landmarks]).reshape(-1, 3)

    @property
    def appearances(self) -> np.ndarray:
        return np.array([lm.appearance for lm in self.landmarks])

    @property
    def saliencies(self) -> np.ndarray:
        return np.array([lm.saliency for lm in self.landmarks])


@dataclass
class ObservedFeature:
    keypoint: np.ndarray
    pre_descriptor: np.ndarray
    detection_score: float
    landmark_id: int | None = None


@dataclass
class ViewFeatures:
    """Columnar form of a list of ``ObservedFeature`` for one image."""

    keypoints: np.ndarray       # (n, 2)
    pre_descriptors: np.ndarray  # (n, d_pre)
    scores: np.ndarray          # (n,)
    landmark_ids: np.ndarray    # (n,) ground truth, -1 when unknown

    def __len__(self):
        return len(self.scores)

    def features(self) -> list:
        return [ObservedFeature(self.keypoints[i], self.pre_descriptors[i], float(self.scores[i]),
                                int(self.landmark_ids[i]) if self.landmark_ids[i] >= 0 else None)
                for i in range(len(self))]

    @classmethod
    def from_features(cls, features) -> "ViewFeatures":
        features = list(features)
        if not features:
            raise ValueError("empty feature list")
        return cls(np.array([f.keypoint for f in features], dtype=float),
                   np.array([f.pre_descriptor for f in features], dtype=float),
                   np.array([f.detection_score for f in features], dtype=float),
                   np.array([-1 if f.landmark_id is None else f.landmark_id for f in features]))

    def subset(self, idx) -> "ViewFeatures":
        return ViewFeatures(self.keypoints[idx], self.pre_descriptors[idx], self.scores[idx],
                            self.landmark_ids[idx])


def _normalize_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def _ring_pose(angle, radius, height, target):
    c = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
    return look_at(c, target)


def make_intrinsics(cfg: SceneConfig) -> CameraIntrinsics:
    return CameraIntrinsics(cfg.focal, cfg.focal, cfg.width / 2.0, cfg.height / 2.0, cfg.width, cfg.height)


def generate_scene(cfg: SceneConfig) -> Scene:
    """Landmarks uniform in a box, reference cameras on a ring facing the centre.

    Query cameras are drawn around the same ring with radius, height and
    look-at jitter.  Raises ``SceneGenerationError`` naming the first pose that
    sees fewer than 30 landmarks.
    """
    if cfg.seed is None:
        raise ValueError("seed must be set")
    if cfg.num_landmarks < 50:
        raise ValueError("num_landmarks must be at least 50")
    rng = np.random.default_rng(cfg.seed)
    positions = rng.uniform(cfg.box_min, cfg.box_max, size=(cfg.num_landmarks, 3))
    appearances = _normalize_rows(rng.standard_normal((cfg.num_landmarks, cfg.d_pre)))
    lo, hi = cfg.saliency_range
    saliency = rng.uniform(lo, hi, size=cfg.num_landmarks)
    saliency = np.clip(saliency, 1e-6, 1.0)
    landmarks = [Landmark(i, positions[i], appearances[i], float(saliency[i]))
                 for i in range(cfg.num_landmarks)]
    intr = make_intrinsics(cfg)

    center = np.zeros(3)
    angles = 2 * np.pi * np.arange(cfg.num_reference) / cfg.num_reference
    refs = [_ring_pose(a, cfg.ring_radius, cfg.ring_height, center) for a in angles]

    qrng = np.random.default_rng([cfg.seed, 1])
    queries = []
    for _ in range(cfg.num_queries):
        a = qrng.uniform(0, 2 * np.pi)
        r = cfg.ring_radius + qrng.uniform(-cfg.query_radius_jitter, cfg.query_radius_jitter)
        h = cfg.ring_height + qrng.uniform(-cfg.query_height_jitter, cfg.query_height_jitter)
        target = qrng.uniform(-cfg.query_target_jitter, cfg.query_target_jitter, size=3)
        queries.append(_ring_pose(a, r, h, target))

    for kind, poses in (("reference", refs), ("query", queries)):
        for i, pose in enumerate(poses):
            n = int(project_points(positions, pose, intr)[1].sum())
            if n < MIN_VISIBLE:
                raise SceneGenerationError(
                    f"{kind} pose {i} observes {n} landmarks (< {MIN_VISIBLE})")

    return Scene(landmarks, refs, intr, cfg.seed, queries, {}, cfg.keypoint_noise_px)


def make_domain(name: str, gamma: float, d_pre: int, seed: int, bias_scale: float = 0.0,
                noise_sigma: float = 0.0, score_jitter: float = 0.0) -> DomainSpec:
    """Domain with ``M = I + gamma G`` and bias ``gamma * bias_scale * b``.

    ``G`` and the unit bias direction ``b`` depend only on ``seed``, so domains
    built with the same seed differ only in severity.
    """
    rng = np.random.default_rng([seed, 7])
    G = rng.standard_normal((d_pre, d_pre))
    G /= np.linalg.norm(G)
    b = rng.standard_normal(d_pre)
    b /= np.linalg.norm(b)
    return DomainSpec(name, np.eye(d_pre) + gamma * G, gamma * bias_scale * b,
                      noise_sigma, score_jitter, gamma)


def source_domain(d_pre: int, noise_sigma: float = 0.0, score_jitter: float = 0.0) -> DomainSpec:
    return DomainSpec("source", np.eye(d_pre), np.zeros(d_pre), noise_sigma, score_jitter, 0.0)


def shift_appearance(appearances: np.ndarray, domain: DomainSpec) -> np.ndarray:
    """Noise-free warped pre-descriptors ``normalize(M a + b)``."""
    if not domain.bias.any() and np.array_equal(domain.mix_matrix, np.eye(len(domain.mix_matrix))):
        return appearances.copy()   # exact identity; renormalizing would perturb the last bit
    return _normalize_rows(appearances @ domain.mix_matrix.T + domain.bias)


def render_view_arrays(scene: Scene, pose: Pose, domain: DomainSpec, seed: int) -> ViewFeatures:
    positions = scene.positions
    pixels, visible = project_points(positions, pose, scene.intr)
    ids = np.flatnonzero(visible)
    rng = np.random.default_rng([scene.seed, seed])
    app = scene.appearances[ids]
    u = shift_appearance(app, domain)
    if domain.noise_sigma > 0:
        u = u + rng.normal(0.0, domain.noise_sigma, size=u.shape)
    scores = scene.saliencies[ids]
    if domain.score_jitter > 0:
        scores = scores + rng.uniform(-domain.score_jitter, domain.score_jitter, size=len(ids))
    scores = np.clip(scores, 1e-3, 1.0)
    kp = pixels[ids]
    if scene.keypoint_noise_px > 0:
        kp = kp + rng.normal(0.0, scene.keypoint_noise_px, size=kp.shape)
        kp[:, 0] = np.clip(kp[:, 0], 0.0, np.nextafter(scene.intr.width, 0))
        kp[:, 1] = np.clip(kp[:, 1], 0.0, np.nextafter(scene.intr.height, 0))
    return ViewFeatures(kp, u, scores, ids)


def render_view(scene: Scene, pose: Pose, domain: DomainSpec, seed: int) -> list:
    """One ``ObservedFeature`` per visible landmark, ordered by landmark id."""
    return render_view_arrays(scene, pose, domain, seed).features()


def mean_same_landmark_cosine(appearances: np.ndarray, domain: DomainSpec, seed: int = 0) -> float:
    """Average cosine between source appearances and their shifted, noisy versions."""
    rng = np.random.default_rng(seed)
    u = shift_appearance(appearances, domain)
    if domain.noise_sigma > 0:
        u = u + rng.normal(0.0, domain.noise_sigma, size=u.shape)
    cos = (u * appearances).sum(axis=1) / np.linalg.norm(u, axis=1)
    return float(cos.mean())
