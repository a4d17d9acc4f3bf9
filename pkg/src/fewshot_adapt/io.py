"""Text file formats for every stage artifact.

All floats are written with ``repr``, which round-trips binary64 exactly,
and every file starts with (or carries) a schema id so old files are
rejected instead of misread.  Writers are deterministic: the same object
always produces the same bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .correspondence import CorrespondenceSet, PointCloudModel
from .evaluation import RecallReport, RecallThresholds
from .feature_model import DescriptorHead
from .geometry import CameraIntrinsics, Pose, PoseError
from .losses import LossWeights
from .synthworld import DomainSpec, Landmark, Scene
from .trainer import AdamState
from .vocabulary import VisualVocabulary

SCENE_SCHEMA = "fewshot-adapt/scene/1"
HEAD_SCHEMA = "fewshot-adapt/head/1"
VOCAB_SCHEMA = "fewshot-adapt/vocabulary/1"
CLOUD_SCHEMA = "fewshot-adapt/cloud/1"
CORRESPONDENCE_SCHEMA = "fewshot-adapt/correspondences/1"
CHECKPOINT_SCHEMA = "fewshot-adapt/checkpoint/1"
WEIGHTS_SCHEMA = "fewshot-adapt/loss-weights/1"
REPORT_SCHEMA = "fewshot-adapt/report/1"


class FormatError(ValueError):
    pass


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump_json(path, obj):
    _atomic_write(path, json.dumps(obj, indent=1) + "\n")


def _load_json(path, schema):
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(obj, dict) or obj.get("schema") != schema:
        raise FormatError(f"{path}: expected schema {schema!r}, found {obj.get('schema') if isinstance(obj, dict) else None!r}")
    return obj


def _floats(a):
    return np.asarray(a, dtype=float).tolist()


def _pose_obj(pose: Pose):
    return {"position": _floats(pose.position), "rotation": _floats(pose.rotation)}


def _pose(obj) -> Pose:
    return Pose(np.array(obj["position"]), np.array(obj["rotation"]))


# ---------------------------------------------------------------------------
# scene


def _domain_obj(dom: DomainSpec):
    return {"name": dom.name, "gamma": dom.gamma, "noise_sigma": dom.noise_sigma,
            "score_jitter": dom.score_jitter, "mix_matrix": _floats(dom.mix_matrix), "bias": _floats(dom.bias)}


def _domain(obj) -> DomainSpec:
    return DomainSpec(obj["name"], np.array(obj["mix_matrix"]), np.array(obj["bias"]), obj["noise_sigma"],
                      obj["score_jitter"], obj["gamma"])


def save_scene(path, scene: Scene, splits=None, extra=None):
    """Scene, optional query splits ``{"train": [...], ...}`` and free-form ``extra`` metadata."""
    i = scene.intr
    obj = {
        "schema": SCENE_SCHEMA,
        "seed": scene.seed,
        "intrinsics": {"focal_x": i.focal_x, "focal_y": i.focal_y, "principal_x": i.principal_x,
                       "principal_y": i.principal_y, "width": i.width, "height": i.height},
        "keypoint_noise_px": scene.keypoint_noise_px,
        "landmarks": [{"id": lm.id, "position": _floats(lm.position), "saliency": float(lm.saliency),
                       "appearance": _floats(lm.appearance)} for lm in scene.landmarks],
        "reference_poses": [_pose_obj(p) for p in scene.reference_poses],
        "query_poses": [_pose_obj(p) for p in scene.query_poses],
        "domains": {k: _domain_obj(d) for k, d in sorted(scene.domains.items())},
        "splits": {k: [int(v) for v in idx] for k, idx in (splits or {}).items()},
        "extra": extra or {},
    }
    _dump_json(path, obj)


def load_scene(path):
    """Returns ``(scene, splits, extra)``."""
    obj = _load_json(path, SCENE_SCHEMA)
    try:
        intr = CameraIntrinsics(**obj["intrinsics"])
        landmarks = [Landmark(lm["id"], np.array(lm["position"]), np.array(lm["appearance"]), lm["saliency"])
                     for lm in obj["landmarks"]]
        scene = Scene(landmarks, [_pose(p) for p in obj["reference_poses"]], intr, obj["seed"],
                      [_pose(p) for p in obj["query_poses"]],
                      {k: _domain(d) for k, d in obj["domains"].items()}, obj["keypoint_noise_px"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed scene file ({exc!r})") from exc
    splits = {k: np.array(v, dtype=int) for k, v in obj.get("splits", {}).items()}
    return scene, splits, obj.get("extra", {})


# ---------------------------------------------------------------------------
# matrices: head and vocabulary


def _matrix_text(schema, header: dict, M) -> str:
    lines = [f"# {schema}"]
    lines += [f"{k} {v}" for k, v in header.items()]
    lines.append("data")
    lines += [" ".join(repr(float(v)) for v in row) for row in np.asarray(M, dtype=float)]
    return "\n".join(lines) + "\n"


def _read_matrix(path, schema):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {schema}":
        raise FormatError(f"{path}: expected schema {schema!r}")
    header, k = {}, 1
    while k < len(lines) and lines[k] != "data":
        key, _, value = lines[k].partition(" ")
        header[key] = value
        k += 1
    if k == len(lines):
        raise FormatError(f"{path}: missing data section")
    try:
        M = np.array([[float(v) for v in row.split()] for row in lines[k + 1:]])
    except ValueError as exc:
        raise FormatError(f"{path}: bad number ({exc})") from exc
    return header, M


def save_head(path, head: DescriptorHead):
    _atomic_write(path, _matrix_text(HEAD_SCHEMA, {"shape": f"{head.d} {head.d_pre}",
                                                   "frozen": int(head.frozen)}, head.W))


def load_head(path) -> DescriptorHead:
    header, W = _read_matrix(path, HEAD_SCHEMA)
    shape = tuple(int(v) for v in header.get("shape", "").split())
    if W.shape != shape:
        raise FormatError(f"{path}: shape header {shape} does not match data {W.shape}")
    return DescriptorHead(W, frozen=bool(int(header.get("frozen", "0"))))


def save_vocabulary(path, vocab: VisualVocabulary):
    _atomic_write(path, _matrix_text(VOCAB_SCHEMA, {"K": vocab.K, "d": vocab.d, "seed": vocab.seed},
                                     vocab.centroids))


def load_vocabulary(path) -> VisualVocabulary:
    header, C = _read_matrix(path, VOCAB_SCHEMA)
    if C.shape != (int(header["K"]), int(header["d"])):
        raise FormatError(f"{path}: header K/d do not match data {C.shape}")
    return VisualVocabulary(C, int(header["seed"]))


# ---------------------------------------------------------------------------
# point cloud, correspondences, weights


def save_cloud(path, cloud: PointCloudModel):
    _dump_json(path, {"schema": CLOUD_SCHEMA, "built_from": list(cloud.built_from),
                      "landmark_ids": cloud.landmark_ids.tolist(), "points": _floats(cloud.points),
                      "scores": _floats(cloud.scores), "descriptors": _floats(cloud.descriptors)})


def load_cloud(path) -> PointCloudModel:
    obj = _load_json(path, CLOUD_SCHEMA)
    return PointCloudModel(np.array(obj["points"]).reshape(-1, 3), np.array(obj["descriptors"]),
                           np.array(obj["scores"]), obj["landmark_ids"], obj["built_from"])


def save_correspondences(path, cset: CorrespondenceSet):
    """One record per view: pose and its provenance, the pair table and the triplet table."""
    pairs = [[int(f), int(p), int(w), float(r[0]), float(r[1])]
             for f, p, w, r in zip(cset.feature_index, cset.point_index, cset.words, cset.reprojected)]
    triplets = [[i, int(n)] for i, n in enumerate(cset.negative_index) if n >= 0]
    _dump_json(path, {"schema": CORRESPONDENCE_SCHEMA, "view_id": int(cset.view_id),
                      "pose_source": cset.pose_source, "training_pose": _pose_obj(cset.training_pose),
                      "pair_columns": ["feature_index", "point_index", "word", "reproj_u", "reproj_v"],
                      "pairs": pairs, "triplet_columns": ["pair_index", "negative_feature_index"],
                      "triplets": triplets})


def load_correspondences(path) -> CorrespondenceSet:
    obj = _load_json(path, CORRESPONDENCE_SCHEMA)
    P = obj["pairs"]
    neg = np.full(len(P), -1, dtype=int)
    for i, n in obj["triplets"]:
        neg[i] = n
    return CorrespondenceSet(obj["view_id"], _pose(obj["training_pose"]), obj["pose_source"],
                             np.array([r[0] for r in P], dtype=int), np.array([r[1] for r in P], dtype=int),
                             np.array([r[3:5] for r in P], dtype=float).reshape(-1, 2),
                             np.array([r[2] for r in P], dtype=int), neg)


def save_weights(path, weights: LossWeights):
    _dump_json(path, {"schema": WEIGHTS_SCHEMA, "lambdas": weights.lambdas,
                      "stats": {k: {"mu": mu, "sigma": s} for k, (mu, s) in weights.stats.items()}})


def load_weights(path) -> LossWeights:
    obj = _load_json(path, WEIGHTS_SCHEMA)
    return LossWeights(dict(obj["lambdas"]), {k: (v["mu"], v["sigma"]) for k, v in obj["stats"].items()})


# ---------------------------------------------------------------------------
# training: checkpoint and logs


def save_checkpoint(path, head: DescriptorHead, adam: AdamState, loss_history=(), extra=None):
    _dump_json(path, {"schema": CHECKPOINT_SCHEMA, "shape": list(head.W.shape), "step": adam.step,
                      "W": _floats(head.W), "adam_m": _floats(adam.m), "adam_v": _floats(adam.v),
                      "loss_history": [float(v) for v in loss_history], "extra": extra or {}})


def load_checkpoint(path):
    """Returns ``(head, adam_state, loss_history, extra)``."""
    obj = _load_json(path, CHECKPOINT_SCHEMA)
    shape = tuple(obj["shape"])
    arrays = [np.array(obj[k], dtype=float).reshape(shape) for k in ("W", "adam_m", "adam_v")]
    return DescriptorHead(arrays[0]), AdamState(arrays[1], arrays[2], int(obj["step"])), obj["loss_history"], obj["extra"]


def append_rows(path, rows, columns):
    """Append dict rows to a CSV log, writing the header when the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        if new:
            writer.writeheader()
        for row in rows:
            writer.writerow({c: (repr(float(row[c])) if isinstance(row[c], (float, np.floating)) else row[c])
                             for c in columns})


def read_rows(path) -> list:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# reports


def _report_obj(r: RecallReport):
    return {"label": r.label, "gamma": r.gamma, "recall": list(r.recall), "acceptance_rate": r.acceptance_rate,
            "thresholds": [list(p) for p in r.thresholds.pairs],
            "errors": [None if e is None else [e.epsilon_t, e.epsilon_r] for e in r.errors]}


def save_reports(path, reports):
    _dump_json(path, {"schema": REPORT_SCHEMA, "reports": [_report_obj(r) for r in reports]})


def load_reports(path) -> list:
    obj = _load_json(path, REPORT_SCHEMA)
    return [RecallReport(tuple(r["recall"]), [None if e is None else PoseError(*e) for e in r["errors"]],
                         r["acceptance_rate"], r["label"], r["gamma"], RecallThresholds(r["thresholds"]))
            for r in obj["reports"]]
