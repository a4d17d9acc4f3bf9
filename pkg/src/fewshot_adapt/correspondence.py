"""Training-pair generation against the fixed source point cloud.

A target view is matched to the cloud with the current descriptor head,
registered with PnP + RANSAC, and only kept when at least 15 inliers
survive.  Inliers become positive pairs (optionally filtered by the
ground-truth pose); hard negatives are mined inside the same view outside
a safe radius around each positive.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .feature_model import DescriptorHead, describe
from .geometry import CameraIntrinsics, Pose, RansacConfig, RegistrationResult, project_points, ransac_register
from .synthworld import ViewFeatures
from .vocabulary import VisualVocabulary, assign_source


class PointCloudError(ValueError):
    pass


class EmptyCorrespondenceError(ValueError):
    pass


@dataclass
class MatchConfig:
    ratio: float = 0.9
    mutual: bool = True
    refine_radius_px: float = 3.0
    safe_radius_px: float = 8.0
    ransac: RansacConfig = field(default_factory=RansacConfig)


class PointCloudModel:
    """Landmark positions with frozen source descriptors and detection scores."""

    def __init__(self, points, descriptors, scores, landmark_ids, built_from):
        self._points = _readonly(points)
        self._descriptors = _readonly(descriptors)
        self._scores = _readonly(scores)
        self._landmark_ids = _readonly(np.asarray(landmark_ids, dtype=int))
        self._built_from = tuple(int(v) for v in built_from)

    points = property(lambda self: self._points)
    descriptors = property(lambda self: self._descriptors)
    scores = property(lambda self: self._scores)
    landmark_ids = property(lambda self: self._landmark_ids)
    built_from = property(lambda self: self._built_from)

    def __len__(self):
        return len(self._points)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self._points, self._descriptors, self._scores, self._landmark_ids):
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr(self._built_from).encode())
        return h.hexdigest()


def _readonly(a):
    a = np.array(a, dtype=float if np.asarray(a).dtype.kind == "f" else None)
    a.setflags(write=False)
    return a


def build_point_cloud(scene, source_head: DescriptorHead, reference_views, view_ids=None) -> PointCloudModel:
    """One point per landmark seen in at least two reference views.

    Its descriptor is the re-normalized mean of that landmark's per-view
    source descriptors; its score the mean detection score.
    """
    if not source_head.frozen:
        raise PointCloudError("the point cloud must be built with a frozen source head")
    view_ids = list(range(len(reference_views))) if view_ids is None else list(view_ids)
    n_lm = len(scene.landmarks)
    d = source_head.d
    sums = np.zeros((n_lm, d))
    score_sums = np.zeros(n_lm)
    counts = np.zeros(n_lm, dtype=int)
    for view in reference_views:
        X = describe(source_head, view.pre_descriptors)
        np.add.at(sums, view.landmark_ids, X)
        np.add.at(score_sums, view.landmark_ids, view.scores)
        np.add.at(counts, view.landmark_ids, 1)
    keep = np.flatnonzero(counts >= 2)
    if len(keep) == 0:
        raise PointCloudError("no landmark is visible in two or more reference views")
    desc = sums[keep] / np.linalg.norm(sums[keep], axis=1, keepdims=True)
    return PointCloudModel(scene.positions[keep], desc, score_sums[keep] / counts[keep], keep, view_ids)


# ---------------------------------------------------------------------------
# matching and registration


@dataclass
class MatchCandidates:
    feature_index: np.ndarray
    point_index: np.ndarray
    score: np.ndarray

    def __len__(self):
        return len(self.feature_index)


def match_to_cloud(X: np.ndarray, cloud_desc: np.ndarray, ratio: float = 0.9, mutual: bool = True) -> MatchCandidates:
    """Mutual nearest neighbours in descriptor space with a distance-ratio test."""
    sim = X @ cloud_desc.T
    dist = np.sqrt(np.maximum(2.0 - 2.0 * sim, 0.0))
    rows = np.arange(len(X))
    nn = np.argmin(dist, axis=1)
    ok = np.ones(len(X), dtype=bool)
    if dist.shape[1] >= 2:
        first = dist[rows, nn]
        dist_rest = dist.copy()
        dist_rest[rows, nn] = np.inf
        ok = first < ratio * dist_rest.min(axis=1)
    if mutual:
        back = np.argmin(dist, axis=0)
        ok &= back[nn] == rows
    fi = np.flatnonzero(ok)
    # order by cloud point so RANSAC sees the same list whatever the feature order
    fi = fi[np.argsort(nn[fi], kind="stable")]
    pi = nn[fi]
    return MatchCandidates(fi, pi, sim[fi, pi])


def register_target_view(features: ViewFeatures, cloud: PointCloudModel, head, intr: CameraIntrinsics,
                         cfg: MatchConfig | None = None, descriptors=None):
    """Match a view to the cloud and run RANSAC.

    Returns ``(RegistrationResult, MatchCandidates)``.  Inlier indices index
    into the candidate list.
    """
    cfg = cfg or MatchConfig()
    if len(features) == 0:
        raise ValueError("register_target_view needs at least one feature")
    X = describe(head, features.pre_descriptors) if descriptors is None else descriptors
    cand = match_to_cloud(X, cloud.descriptors, cfg.ratio, cfg.mutual)
    if len(cand) < 6:
        return RegistrationResult(None, np.zeros(0, dtype=int), False), cand
    reg = ransac_register(features.keypoints[cand.feature_index], cloud.points[cand.point_index], intr,
                          cfg.ransac, scores=cand.score)
    return reg, cand


# ---------------------------------------------------------------------------
# training pairs


@dataclass
class CorrespondencePair:
    source_descriptor: np.ndarray
    source_score: float
    point3d: np.ndarray
    target_pre_descriptor: np.ndarray
    target_keypoint: np.ndarray
    target_score: float
    word: int


@dataclass
class Triplet:
    pair: CorrespondencePair
    negative_pre_descriptor: np.ndarray
    negative_keypoint: np.ndarray


@dataclass
class CorrespondenceSet:
    """Columnar pair table for one registered target view.

    ``feature_index`` points into the view's features (positives),
    ``point_index`` into the cloud, ``reprojected`` holds the cloud points
    projected with ``training_pose``, and ``negative_index`` is -1 where no
    negative could be mined.
    """

    view_id: int
    training_pose: Pose
    pose_source: str
    feature_index: np.ndarray
    point_index: np.ndarray
    reprojected: np.ndarray
    words: np.ndarray
    negative_index: np.ndarray = None

    def __post_init__(self):
        if self.pose_source not in ("estimated", "ground_truth"):
            raise ValueError("pose_source must be 'estimated' or 'ground_truth'")
        if self.negative_index is None:
            self.negative_index = np.full(len(self.feature_index), -1, dtype=int)

    def __len__(self):
        return len(self.feature_index)

    @property
    def has_negative(self) -> np.ndarray:
        return self.negative_index >= 0

    def pairs(self, features: ViewFeatures, cloud: PointCloudModel) -> list:
        return [CorrespondencePair(cloud.descriptors[p], float(cloud.scores[p]), cloud.points[p],
                                   features.pre_descriptors[f], features.keypoints[f],
                                   float(features.scores[f]), int(w))
                for f, p, w in zip(self.feature_index, self.point_index, self.words)]

    def triplets(self, features: ViewFeatures, cloud: PointCloudModel) -> list:
        pairs = self.pairs(features, cloud)
        return [Triplet(pairs[i], features.pre_descriptors[n], features.keypoints[n])
                for i, n in enumerate(self.negative_index) if n >= 0]


def extract_pairs(reg: RegistrationResult, candidates: MatchCandidates, features: ViewFeatures,
                  cloud: PointCloudModel, vocab: VisualVocabulary, intr: CameraIntrinsics,
                  gt_pose: Pose | None = None, cfg: MatchConfig | None = None,
                  view_id: int = 0) -> CorrespondenceSet:
    """Positive pairs from RANSAC inliers, filtered by the ground-truth pose when given."""
    cfg = cfg or MatchConfig()
    if not reg.accepted:
        raise ValueError(f"view {view_id} was not accepted at registration")
    fi = candidates.feature_index[reg.inlier_indices]
    pi = candidates.point_index[reg.inlier_indices]
    if gt_pose is not None:
        pose, source = gt_pose, "ground_truth"
    else:
        pose, source = reg.estimated_pose, "estimated"
    proj, visible = project_points(cloud.points[pi], pose, intr)
    keep = visible.copy()
    if gt_pose is not None:
        err = np.linalg.norm(np.nan_to_num(proj) - features.keypoints[fi], axis=1)
        keep &= err <= cfg.refine_radius_px
    if not keep.any():
        raise EmptyCorrespondenceError(f"no correspondence pair survives for view {view_id}")
    fi, pi, proj = fi[keep], pi[keep], proj[keep]
    words = np.atleast_1d(assign_source(vocab, cloud.descriptors[pi]))
    return CorrespondenceSet(view_id, pose, source, fi, pi, proj, words)


def mine_negatives_arrays(xs, pos_keypoints, X_all, keypoints_all, safe_radius_px: float) -> np.ndarray:
    """Index of the most similar feature outside the safe radius, -1 if none."""
    sim = np.atleast_2d(xs) @ X_all.T
    d2 = ((pos_keypoints[:, None, :] - keypoints_all[None, :, :]) ** 2).sum(axis=-1)
    sim = np.where(d2 > safe_radius_px ** 2, sim, -np.inf)
    idx = np.argmax(sim, axis=1)
    idx[~np.isfinite(sim[np.arange(len(idx)), idx])] = -1
    return idx


def mine_hard_negatives(cset: CorrespondenceSet, features: ViewFeatures, head, cloud: PointCloudModel,
                        cfg: MatchConfig | None = None, descriptors=None) -> CorrespondenceSet:
    """Attach the hardest in-view negative for every pair (``-1`` when none is eligible)."""
    cfg = cfg or MatchConfig()
    X = describe(head, features.pre_descriptors) if descriptors is None else descriptors
    neg = mine_negatives_arrays(cloud.descriptors[cset.point_index], features.keypoints[cset.feature_index],
                                X, features.keypoints, cfg.safe_radius_px)
    return replace(cset, negative_index=neg)


def generate_correspondences(view_id: int, features: ViewFeatures, cloud: PointCloudModel, head,
                             vocab: VisualVocabulary, intr: CameraIntrinsics, gt_pose: Pose | None = None,
                             cfg: MatchConfig | None = None) -> CorrespondenceSet | None:
    """Register, extract and mine for one view; ``None`` when the view fails the inlier gate."""
    cfg = cfg or MatchConfig()
    reg, cand = register_target_view(features, cloud, head, intr, cfg)
    if not reg.accepted:
        return None
    cset = extract_pairs(reg, cand, features, cloud, vocab, intr, gt_pose, cfg, view_id)
    return mine_hard_negatives(cset, features, head, cloud, cfg)
