# Registering target views against the source point cloud and mining training pairs.
#
# Each training view is matched to the cloud with the frozen source head,
# registered by PnP + RANSAC (15-inlier gate), and its inliers become
# (source descriptor, target feature) pairs with a hard in-view negative.

import numpy as np

from fewshot_adapt.correspondence import extract_pairs, mine_hard_negatives, register_target_view
from fewshot_adapt.geometry import pose_error
from fewshot_adapt.pipeline import ExperimentConfig, build_source_model, query_views, split_indices, target_domain

cfg = ExperimentConfig(seed=1).with_seed(1)
model = build_source_model(cfg)
scene, cloud = model.scene, model.cloud
print(f"point cloud: {len(cloud)} landmarks seen in at least two reference views")

# %% register the training views of one target domain
dom = target_domain(cfg, 0.6)
train_idx, _, _ = split_indices(cfg)
accepted = 0
for i, (features, gt) in zip(train_idx, query_views(scene, dom, train_idx)):
    reg, cand = register_target_view(features, cloud, model.head, scene.intr, cfg.match)
    if not reg.accepted:
        print(f"view {i:3d}: {len(cand):4d} candidates, rejected ({len(reg.inlier_indices)} inliers)")
        continue
    accepted += 1
    err = pose_error(gt, reg.estimated_pose)
    cset = extract_pairs(reg, cand, features, cloud, model.vocab, scene.intr, gt_pose=gt, view_id=int(i))
    cset = mine_hard_negatives(cset, features, model.head, cloud)
    print(f"view {i:3d}: {len(cand):4d} candidates, {len(reg.inlier_indices):3d} inliers, "
          f"eps_t {err.epsilon_t:.3f} m, {len(cset)} pairs, {int(cset.has_negative.sum())} triplets")
print(f"{accepted}/{len(train_idx)} training views pass the inlier gate")

# %% visual words of the pairs
words = np.bincount(cset.words, minlength=cfg.vocab_k)
print("pairs per visual word in the last view:", words)
