# Synthetic world: landmarks, cameras and appearance domains.
#
# A scene is a box of 3D landmarks seen by a ring of reference cameras
# (source domain) and jittered query cameras.  A target domain warps each
# landmark's pre-descriptor u with u' = normalize(M u + b), M = I + gamma G.

from fewshot_adapt.pipeline import ExperimentConfig, build_source_model, target_domain
from fewshot_adapt.synthworld import mean_same_landmark_cosine, render_view_arrays

# %% scene
cfg = ExperimentConfig(seed=0).with_seed(0)
model = build_source_model(cfg)
scene = model.scene
print(f"{len(scene.landmarks)} landmarks, {len(scene.reference_poses)} reference views, "
      f"{len(scene.query_poses)} query views, focal {scene.intr.focal_x:g} px")

view = model.reference_views[0]
print(f"reference view 0: {len(view)} features, keypoints span "
      f"{view.keypoints.min(0).round(1)} .. {view.keypoints.max(0).round(1)}")

# %% how far does a domain move the appearance?
# cosine between a landmark's source and target pre-descriptors, averaged
for gamma in (0.0, 0.3, 0.6, 0.9):
    dom = target_domain(cfg, gamma)
    print(f"gamma {gamma:.1f}: mean same-landmark cosine {mean_same_landmark_cosine(scene.appearances, dom):.3f}")

# %% the pretrained source head matches landmarks across source views
from fewshot_adapt.feature_model import describe, matching_accuracy

a, b = model.reference_views[0], model.reference_views[1]
acc = matching_accuracy(describe(model.head, a.pre_descriptors), a.landmark_ids,
                        describe(model.head, b.pre_descriptors), b.landmark_ids)
print(f"source head nearest-neighbour accuracy between two reference views: {acc:.3f}")

# the same pair of views rendered in the target domain
dom = target_domain(cfg, 0.6)
ta = render_view_arrays(scene, scene.reference_poses[0], dom, 1)
tb = render_view_arrays(scene, scene.reference_poses[1], dom, 2)
acc_t = matching_accuracy(describe(model.head, ta.pre_descriptors), ta.landmark_ids,
                          describe(model.head, tb.pre_descriptors), tb.landmark_ids)
print(f"same head on the target domain (gamma 0.6): {acc_t:.3f}")
print(f"head W: {model.head.W.shape[1]}-d pre-descriptor -> {model.head.W.shape[0]}-d descriptor")
