from dataclasses import replace

import numpy as np
import pytest

from fewshot_adapt.correspondence import (CorrespondenceSet, EmptyCorrespondenceError,
                                          MatchConfig, PointCloudError, build_point_cloud, extract_pairs,
                                          generate_correspondences, match_to_cloud, mine_hard_negatives,
                                          mine_negatives_arrays, register_target_view)
from fewshot_adapt.feature_model import describe, init_head
from fewshot_adapt.geometry import RegistrationResult, pose_error
from fewshot_adapt.synthworld import render_view_arrays, source_domain
from fewshot_adapt.vocabulary import assign_source


@pytest.fixture(scope="module")
def clean(source_model):
    """Zero-noise scene copy, clean reference views and the cloud built from them."""
    scene = replace(source_model.scene, keypoint_noise_px=0.0)
    src = source_domain(32)
    refs = [render_view_arrays(scene, p, src, i) for i, p in enumerate(scene.reference_poses)]
    return scene, refs, build_point_cloud(scene, source_model.head, refs)


def test_cloud_contract(clean, source_model):
    scene, refs, cloud = clean
    counts = np.bincount(np.concatenate([v.landmark_ids for v in refs]), minlength=len(scene.landmarks))
    assert len(cloud) == int((counts >= 2).sum())
    assert set(cloud.landmark_ids.tolist()) == set(np.flatnonzero(counts >= 2).tolist())
    # zero noise: every view gives the same descriptor, so the mean is that descriptor
    X = describe(source_model.head, scene.appearances[cloud.landmark_ids])
    np.testing.assert_allclose(cloud.descriptors, X, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(cloud.descriptors, axis=1), 1, atol=1e-9)
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 1.0


def test_cloud_requires_frozen_head_and_overlap(clean):
    scene, refs, _ = clean
    with pytest.raises(PointCloudError):
        build_point_cloud(scene, init_head(16, 32, 0), refs)
    with pytest.raises(PointCloudError):
        build_point_cloud(scene, init_head(16, 32, 0).freeze(), refs[:1])


def test_zero_shift_registration_and_pair_yield(clean, source_model):
    scene, _, cloud = clean
    head, vocab = source_model.head, source_model.vocab
    yields = []
    for q in range(5):
        pose = scene.query_poses[q]
        view = render_view_arrays(scene, pose, source_domain(32), 100 + q)
        reg, cand = register_target_view(view, cloud, head, scene.intr)
        assert reg.accepted
        assert pose_error(pose, reg.estimated_pose).epsilon_t < 0.05
        cset = extract_pairs(reg, cand, view, cloud, vocab, scene.intr, gt_pose=pose)
        visible_multi = np.isin(view.landmark_ids, cloud.landmark_ids).sum()
        yields.append(len(cset) / visible_multi)
    assert min(yields) >= 0.95


def test_shuffled_features_same_pose(clean, source_model):
    scene, _, cloud = clean
    view = render_view_arrays(scene, scene.query_poses[7], source_domain(32, 0.05), 3)
    perm = np.random.default_rng(0).permutation(len(view))
    a, _ = register_target_view(view, cloud, source_model.head, scene.intr)
    b, _ = register_target_view(view.subset(perm), cloud, source_model.head, scene.intr)
    assert a.accepted and a.estimated_pose == b.estimated_pose


def test_fewer_than_six_candidates(clean, source_model):
    scene, _, cloud = clean
    view = render_view_arrays(scene, scene.query_poses[0], source_domain(32), 0).subset(np.arange(5))
    reg, cand = register_target_view(view, cloud, source_model.head, scene.intr)
    assert not reg.accepted and len(cand) <= 5


def test_fourteen_inliers_rejected(clean, source_model):
    scene, _, cloud = clean
    view = render_view_arrays(scene, scene.query_poses[0], source_domain(32), 0)
    keep = np.flatnonzero(np.isin(view.landmark_ids, cloud.landmark_ids))
    for n, ok in ((14, False), (15, True)):
        reg, _ = register_target_view(view.subset(keep[:n]), cloud, source_model.head, scene.intr)
        assert reg.accepted is ok


def test_match_to_cloud_ratio_and_mutual():
    cloud = np.eye(3)
    X = np.array([[1.0, 0.0, 0.0], [0.7071, 0.7071, 0.0], [0.99, 0.141, 0.0]])
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    c = match_to_cloud(X, cloud, ratio=0.9, mutual=True)
    # row 1 is ambiguous (ratio 1); row 2 loses the mutual check to row 0
    assert c.feature_index.tolist() == [0] and c.point_index.tolist() == [0]
    c = match_to_cloud(X, cloud, ratio=0.9, mutual=False)
    assert c.feature_index.tolist() == [0, 2]


def test_refinement_drops_corrupted_inlier(clean, source_model):
    scene, _, cloud = clean
    pose = scene.query_poses[1]
    view = render_view_arrays(scene, pose, source_domain(32), 1)
    reg, cand = register_target_view(view, cloud, source_model.head, scene.intr)
    full = extract_pairs(reg, cand, view, cloud, source_model.vocab, scene.intr, gt_pose=reg.estimated_pose)
    assert len(full) == len(reg.inlier_indices)
    assert full.pose_source == "ground_truth"
    # move one inlier's keypoint 10 px; RANSAC result reused so only refinement can drop it
    victim = cand.feature_index[reg.inlier_indices[0]]
    kp = view.keypoints.copy()
    kp[victim] += [6.0, 8.0]
    moved = replace(view, keypoints=kp)
    refined = extract_pairs(reg, cand, moved, cloud, source_model.vocab, scene.intr, gt_pose=pose,
                            cfg=MatchConfig(refine_radius_px=3.0))
    assert victim not in refined.feature_index
    err = np.linalg.norm(refined.reprojected - moved.keypoints[refined.feature_index], axis=1)
    assert (err <= 3.0).all()
    np.testing.assert_array_equal(refined.words, assign_source(source_model.vocab,
                                                               cloud.descriptors[refined.point_index]))
    est = extract_pairs(reg, cand, view, cloud, source_model.vocab, scene.intr)
    assert est.pose_source == "estimated" and est.training_pose == reg.estimated_pose


def test_empty_and_rejected(clean, source_model):
    scene, _, cloud = clean
    view = render_view_arrays(scene, scene.query_poses[1], source_domain(32), 1)
    reg, cand = register_target_view(view, cloud, source_model.head, scene.intr)
    far = replace(view, keypoints=view.keypoints + 50.0)
    with pytest.raises(EmptyCorrespondenceError, match="view 7"):
        extract_pairs(reg, cand, far, cloud, source_model.vocab, scene.intr, gt_pose=scene.query_poses[1],
                      view_id=7)
    with pytest.raises(ValueError):
        extract_pairs(RegistrationResult(None), cand, view, cloud, source_model.vocab, scene.intr)


class TestNegatives:
    def test_planted_decoy_selected(self):
        rng = np.random.default_rng(0)
        xs = np.array([[1.0, 0.0, 0.0]])
        X = rng.normal(size=(30, 3)) * [0.1, 1, 1]
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        kp = rng.uniform(100, 400, size=(30, 2))
        kp[0] = [200, 200]
        X[5] = [0.99, np.sqrt(1 - 0.99 ** 2), 0.0]
        kp[5] = [250, 200]   # 50 px away
        neg = mine_negatives_arrays(xs, kp[[0]], X, kp, 8.0)
        sims = np.where(np.linalg.norm(kp - kp[0], axis=1) > 8, X @ xs[0], -np.inf)
        assert neg[0] == 5 == int(np.argmax(sims))

    def test_decoy_inside_radius_ignored(self):
        xs = np.array([[1.0, 0.0]])
        X = np.array([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
        kp = np.array([[100.0, 100.0], [102.0, 100.0], [300.0, 100.0]])
        assert mine_negatives_arrays(xs, kp[[0]], X, kp, 8.0)[0] == 2

    def test_exact_radius_is_inside(self):
        kp = np.array([[0.0, 0.0], [8.0, 0.0]])
        assert mine_negatives_arrays(np.array([[1.0, 0.0]]), kp[[0]], np.eye(2), kp, 8.0)[0] == -1

    def test_single_feature_no_triplet(self, clean, source_model):
        scene, _, cloud = clean
        view = render_view_arrays(scene, scene.query_poses[2], source_domain(32), 2)
        cset = CorrespondenceSet(0, scene.query_poses[2], "ground_truth", np.array([0]),
                                 np.array([0]), np.zeros((1, 2)), np.array([0]))
        single = view.subset(np.array([0]))
        out = mine_hard_negatives(cset, single, source_model.head, cloud)
        assert out.negative_index.tolist() == [-1]
        assert out.triplets(single, cloud) == [] and len(out.pairs(single, cloud)) == 1

    def test_generated_triplets_respect_radius(self, clean, source_model):
        scene, _, cloud = clean
        pose = scene.query_poses[4]
        view = render_view_arrays(scene, pose, source_domain(32, 0.05), 4)
        cset = generate_correspondences(4, view, cloud, source_model.head, source_model.vocab, scene.intr, pose)
        assert cset is not None and cset.has_negative.all()
        for t in cset.triplets(view, cloud):
            assert np.linalg.norm(t.negative_keypoint - t.pair.target_keypoint) > 8.0
