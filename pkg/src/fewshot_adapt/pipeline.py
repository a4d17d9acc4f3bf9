"""End-to-end experiment: pretrain, build cloud and vocabulary, mine pairs, adapt, evaluate."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .correspondence import MatchConfig, build_point_cloud, generate_correspondences
from .evaluation import LOSS_SETS, RecallThresholds, evaluate, method_name, run_ablation
from .feature_model import PretrainConfig, describe, pretrain_source_head
from .losses import TERMS, SoftMatchConfig
from .synthworld import SceneConfig, generate_scene, make_domain, render_view_arrays, source_domain
from .trainer import TrainConfig, TrainingError, calibrate_weights, train
from .vocabulary import build_vocabulary

log = logging.getLogger(__name__)

REFERENCE_SEED_OFFSET = 1000
HELDOUT_SEED_OFFSET = 5000
QUERY_SEED_OFFSET = 2000


@dataclass
class DomainConfig:
    bias_scale: float = 1.3
    source_noise_sigma: float = 0.03
    target_noise_sigma: float = 0.06
    score_jitter: float = 0.1


@dataclass
class SplitConfig:
    train: int = 20
    val: int = 16
    test: int = 62


@dataclass
class ExperimentConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    gamma_grid: tuple = (0.6,)
    splits: SplitConfig = field(default_factory=SplitConfig)
    vocab_k: int = 16
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    match: MatchConfig = field(default_factory=MatchConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=1e-3))
    use_gt_refinement: bool = True
    thresholds: tuple = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("seed must be set")
        total = self.splits.train + self.splits.val + self.splits.test
        if total > self.scene.num_queries:
            raise ValueError(f"splits need {total} query views, scene has {self.scene.num_queries}")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every seed derived from ``seed``."""
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.scene.seed = seed
        cfg.pretrain.seed = seed
        cfg.train.seed = seed
        cfg.match.ransac.seed = seed
        return cfg


@dataclass
class SourceModel:
    """Everything built once from the source domain; never modified afterwards."""

    scene: object
    source: object
    reference_views: list
    head: object
    cloud: object
    vocab: object


@dataclass
class TargetData:
    gamma: float
    domain: object
    train_views: list
    train_poses: list
    val: list
    test: list
    training: list = field(default_factory=list)
    weights: object = None

    @property
    def acceptance_rate(self):
        return len(self.training) / max(len(self.train_views), 1)


def split_indices(cfg: ExperimentConfig):
    s = cfg.splits
    order = np.random.default_rng([cfg.seed, 11]).permutation(cfg.scene.num_queries)
    return (order[:s.train], order[s.train:s.train + s.val], order[s.train + s.val:s.train + s.val + s.test])


def source_views(cfg: ExperimentConfig, scene):
    """Reference views used for the cloud and pretraining, plus held-out renders of the same poses."""
    dcfg = cfg.domain
    src = source_domain(cfg.scene.d_pre, dcfg.source_noise_sigma, dcfg.score_jitter)
    refs = [render_view_arrays(scene, p, src, REFERENCE_SEED_OFFSET + i)
            for i, p in enumerate(scene.reference_poses)]
    heldout = [render_view_arrays(scene, p, src, HELDOUT_SEED_OFFSET + i)
               for i, p in enumerate(scene.reference_poses)]
    return src, refs, heldout


def build_vocab(cfg: ExperimentConfig, head, refs):
    descs = np.vstack([describe(head, v.pre_descriptors) for v in refs])
    return build_vocabulary(descs, cfg.vocab_k, cfg.seed)


def build_source_model(cfg: ExperimentConfig, scene=None) -> SourceModel:
    scene = scene if scene is not None else generate_scene(cfg.scene)
    src, refs, heldout = source_views(cfg, scene)
    head = pretrain_source_head(refs, cfg.pretrain, val_views=heldout)
    cloud = build_point_cloud(scene, head, refs)
    return SourceModel(scene, src, refs, head, cloud, build_vocab(cfg, head, refs))


def domain_key(gamma: float) -> str:
    return f"target-{gamma:.2f}"


def target_domain(cfg: ExperimentConfig, gamma: float):
    dcfg = cfg.domain
    return make_domain(domain_key(gamma), gamma, cfg.scene.d_pre, cfg.seed, dcfg.bias_scale,
                       dcfg.target_noise_sigma, dcfg.score_jitter)


def query_views(scene, domain, idx):
    """``(features, gt_pose)`` for the query indices ``idx`` rendered in ``domain``."""
    return [(render_view_arrays(scene, scene.query_poses[i], domain, QUERY_SEED_OFFSET + int(i)),
             scene.query_poses[i]) for i in idx]


def mine_training_views(cfg: ExperimentConfig, model: SourceModel, train_views, train_idx):
    """Correspondence sets of the training views that pass the inlier gate, as ``[(cset, features)]``."""
    scene = model.scene
    out = []
    for i, (features, pose) in zip(train_idx, train_views):
        cset = generate_correspondences(int(i), features, model.cloud, model.head, model.vocab, scene.intr,
                                        pose if cfg.use_gt_refinement else None, cfg.match)
        if cset is not None:
            out.append((cset, features))
    return out


def build_target_data(cfg: ExperimentConfig, model: SourceModel, gamma: float, domain=None) -> TargetData:
    scene = model.scene
    domain = domain if domain is not None else target_domain(cfg, gamma)
    tr, va, te = split_indices(cfg)
    train = query_views(scene, domain, tr)
    data = TargetData(gamma, domain, [f for f, _ in train], [p for _, p in train],
                      query_views(scene, domain, va), query_views(scene, domain, te))
    data.training = mine_training_views(cfg, model, train, tr)
    log.info("gamma %.2f: %d/%d training views pass the inlier gate", gamma, len(data.training), len(train))
    if len(data.training) >= 2:
        data.weights = calibrate_weights(data.training, model.head, model.cloud, cfg.train)
    return data


def _validation_score(report):
    return (report.recall[1], float(np.mean(report.recall)))


def arm_config(cfg: ExperimentConfig, intr, terms) -> TrainConfig:
    """Training config of one ablation arm; the SoftMatch diagonal comes from the camera."""
    return replace(cfg.train, terms=tuple(terms), softmatch=SoftMatchConfig(cfg.train.softmatch.beta, intr.diagonal))


def train_arm(cfg: ExperimentConfig, model: SourceModel, data: TargetData, terms, validate=True):
    if data.weights is None:
        raise TrainingError(f"gamma {data.gamma:g}: only {len(data.training)} training view(s) pass the "
                            "inlier gate; calibration needs two")
    tcfg = arm_config(cfg, model.scene.intr, terms)
    thresholds = RecallThresholds(cfg.thresholds)

    def val(head):
        return _validation_score(evaluate(data.val, model.cloud, head, model.scene.intr, thresholds, cfg.match))

    return train(data.training, model.cloud, model.head, data.weights, tcfg,
                 validate=val if (validate and data.val) else None)


def evaluate_head(cfg, model, data, head, label):
    return evaluate(data.test, model.cloud, head, model.scene.intr, RecallThresholds(cfg.thresholds),
                    cfg.match, label=label, gamma=data.gamma)


def run_experiment(cfg: ExperimentConfig, arms=(("corres",), TERMS), model=None):
    """Frozen baseline plus one trained head per entry of ``arms``, for every gamma."""
    model = model or build_source_model(cfg)
    reports = []
    for gamma in cfg.gamma_grid:
        data = build_target_data(cfg, model, gamma)
        rows = run_ablation(lambda terms: train_arm(cfg, model, data, terms).head,
                            lambda head, label: evaluate_head(cfg, model, data, head, label),
                            model.head, arms)
        reports.extend(r for _, r in rows)
    return model, reports

