"""Localization recall at pose-error thresholds, and the loss-ablation grid."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .correspondence import MatchConfig, PointCloudModel, register_target_view
from .geometry import CameraIntrinsics, Pose, PoseError, pose_error
from .losses import TERM_LABELS, TERMS

DEFAULT_THRESHOLDS = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))

# loss-set names accepted on the command line, in table order
LOSS_SETS = {
    "corres": ("corres",),
    "corres+vwcoral": ("corres", "vwcoral"),
    "corres+cdsos": ("corres", "cdsos"),
    "corres+softmatch": ("corres", "softmatch"),
    "corres+vwcoral+cdsos": ("corres", "vwcoral", "cdsos"),
    "all": TERMS,
}


def method_name(terms) -> str:
    terms = tuple(t for t in TERMS if t in terms)
    if terms == ("corres",):
        return "Corres (fine-tune)"
    name = " + ".join(TERM_LABELS[t] for t in terms)
    return name + " (ours)" if terms == TERMS else name


@dataclass(frozen=True)
class RecallThresholds:
    pairs: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        pairs = tuple((float(t), float(r)) for t, r in self.pairs)
        if len(pairs) != 3:
            raise ValueError("exactly three thresholds are expected")
        for (t0, r0), (t1, r1) in zip(pairs, pairs[1:]):
            if not (t1 > t0 and r1 > r0):
                raise ValueError("thresholds must increase strictly in both coordinates")
        object.__setattr__(self, "pairs", pairs)


@dataclass
class RecallReport:
    recall: tuple
    errors: list
    acceptance_rate: float
    label: str = ""
    gamma: float = float("nan")
    thresholds: RecallThresholds = field(default_factory=RecallThresholds)

    @property
    def fine(self):
        return self.recall[0]

    @property
    def mid(self):
        return self.recall[1]

    @property
    def coarse(self):
        return self.recall[2]


def recall_from_errors(errors, thresholds: RecallThresholds | None = None) -> tuple:
    """Fraction of queries within each threshold; ``None`` errors count as failures."""
    thresholds = thresholds or RecallThresholds()
    if not errors:
        raise ValueError("no queries to score")
    out = []
    for tau_t, tau_r in thresholds.pairs:
        ok = sum(1 for e in errors if e is not None and e.epsilon_t <= tau_t and e.epsilon_r <= tau_r)
        out.append(ok / len(errors))
    return tuple(out)


def localize_query(features, cloud: PointCloudModel, head, intr: CameraIntrinsics,
                   cfg: MatchConfig | None = None) -> Pose | None:
    if len(features) == 0:
        return None
    reg, _ = register_target_view(features, cloud, head, intr, cfg)
    return reg.estimated_pose if reg.accepted else None


def evaluate(queries, cloud: PointCloudModel, head, intr: CameraIntrinsics,
             thresholds: RecallThresholds | None = None, cfg: MatchConfig | None = None,
             label: str = "", gamma: float = float("nan")) -> RecallReport:
    """Localize every ``(features, gt_pose)`` query and report recall."""
    thresholds = thresholds or RecallThresholds()
    errors: list[PoseError | None] = []
    for features, gt in queries:
        est = localize_query(features, cloud, head, intr, cfg)
        errors.append(None if est is None else pose_error(gt, est))
    accepted = sum(e is not None for e in errors) / len(errors)
    return RecallReport(recall_from_errors(errors, thresholds), errors, accepted, label, gamma, thresholds)


def run_ablation(train_arm, evaluate_head, frozen_head, grid=None):
    """Train one head per loss combination and evaluate all of them.

    ``train_arm(terms)`` returns a trained head (from a shared initialization
    and seed); ``evaluate_head(head, label)`` returns a ``RecallReport``.  The
    frozen head is always evaluated first.  Returns ``[(name, report), ...]``.
    """
    grid = list(LOSS_SETS.values()) if grid is None else [tuple(g) for g in grid]
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = [("frozen", evaluate_head(frozen_head, "frozen"))]
    for terms in grid:
        name = method_name(terms)
        rows.append((name, evaluate_head(train_arm(terms), name)))
    return rows


# ---------------------------------------------------------------------------
# report formatting

CSV_COLUMNS = ("method", "gamma", "recall@fine", "recall@mid", "recall@coarse", "acceptance_rate")


def report_rows(reports) -> list:
    return [{"method": r.label, "gamma": f"{r.gamma:.2f}", "recall@fine": f"{r.recall[0]:.4f}",
             "recall@mid": f"{r.recall[1]:.4f}", "recall@coarse": f"{r.recall[2]:.4f}",
             "acceptance_rate": f"{r.acceptance_rate:.4f}"} for r in reports]


def format_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(reports))
    return buf.getvalue()


def format_table(reports, thresholds: RecallThresholds | None = None) -> str:
    thresholds = thresholds or RecallThresholds()
    head = " / ".join(f"{t:g}m,{r:g}deg" for t, r in thresholds.pairs)
    width = max([len("method")] + [len(r.label) for r in reports])
    lines = [f"{'method':<{width}}  gamma  recall ({head})  accepted",
             "-" * (width + 2 + 7 + 8 + len(head) + 12)]
    for r in reports:
        rec = " / ".join(f"{100 * v:5.1f}" for v in r.recall)
        lines.append(f"{r.label:<{width}}  {r.gamma:5.2f}  {rec:<{len(head) + 8}}  {100 * r.acceptance_rate:5.1f}%")
    lines.append("")
    lines.append("Unregistered queries count as failures at every threshold.")
    return "\n".join(lines) + "\n"


def mean_recall(reports) -> np.ndarray:
    return np.mean([r.recall for r in reports], axis=0)
