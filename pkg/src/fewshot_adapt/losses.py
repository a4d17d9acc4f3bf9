"""Adaptation objective: correspondence, VW-CORAL, CD-SOS and SoftMatch terms.

Every term returns its value together with gradients with respect to the
target-side descriptors it touches.  Source descriptors come from the frozen
point cloud, so their gradients are only reported where source pretraining
needs them (the correspondence loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TERMS = ("corres", "vwcoral", "cdsos", "softmatch")

TERM_LABELS = {
    "corres": "Corres",
    "vwcoral": "VW-CORAL",
    "cdsos": "CD-SOS",
    "softmatch": "SoftMatch",
}


class LossError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass
class CorrespondenceLoss:
    value: float
    weights: np.ndarray
    active: np.ndarray
    grad_source: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray


@dataclass
class GroupedLoss:
    """Per-word loss over positive pairs; ``grad_target`` is aligned with the pairs."""

    value: float
    grad_target: np.ndarray
    words_used: list = field(default_factory=list)
    no_valid_words: bool = False


@dataclass
class SoftMatchLoss:
    value: float
    predicted: np.ndarray
    per_match: np.ndarray
    grad_candidates: np.ndarray


@dataclass
class SoftMatchConfig:
    beta: float = 10.0
    diagonal: float = 800.0

    def __post_init__(self):
        if self.beta <= 0 or self.diagonal <= 0:
            raise ValueError("beta and diagonal must be positive")


# ---------------------------------------------------------------------------
# correspondence (detection-score-weighted triplet margin ranking)


def correspondence_loss(xs, ss, xp, sp, xn, margin: float = 1.0, hinge: str = "standard"):
    """Score-weighted triplet ranking loss over squared Euclidean distances.

    ``hinge="standard"`` penalizes ``d_pos^2 - d_neg^2 + m``; ``"as_printed"``
    uses the reversed order ``d_neg^2 - d_pos^2 + m``.
    """
    xs, xp, xn = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (xs, xp, xn))
    ss = np.atleast_1d(np.asarray(ss, dtype=float))
    sp = np.atleast_1d(np.asarray(sp, dtype=float))
    if len(xs) == 0:
        raise LossError("correspondence loss needs at least one triplet")
    if margin <= 0:
        raise LossError("margin must be positive")
    raw = ss * sp
    total = raw.sum()
    if not total > 0:
        raise LossError("total detection-score weight is zero")
    w = raw / total
    dp = ((xs - xp) ** 2).sum(axis=1)
    dn = ((xs - xn) ** 2).sum(axis=1)
    if hinge == "standard":
        h = dp - dn + margin
        sign = 1.0
    elif hinge == "as_printed":
        h = dn - dp + margin
        sign = -1.0
    else:
        raise ValueError(f"unknown hinge direction {hinge!r}")
    active = h > 0
    value = float((w * np.maximum(h, 0.0)).sum())
    c = (w * active * sign)[:, None]
    g_pos = c * 2.0 * (xp - xs)
    g_neg = -c * 2.0 * (xn - xs)
    g_src = c * 2.0 * (xn - xp)
    return CorrespondenceLoss(value, w, active, g_src, g_pos, g_neg)


# ---------------------------------------------------------------------------
# per-visual-word CORAL


def covariance(X: np.ndarray) -> np.ndarray:
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / (len(X) - 1)


def _valid_words(words, min_count):
    ids, counts = np.unique(words, return_counts=True)
    return [int(k) for k, c in zip(ids, counts) if c >= min_count]


def vw_coral_loss(xs, xt, words, d: int | None = None, min_count: int = 2) -> GroupedLoss:
    """``mean_k ||C_k^S - C_k^T||_F^2 / (4 d^2)`` over words with enough pairs."""
    xs = np.asarray(xs, dtype=float)
    xt = np.asarray(xt, dtype=float)
    words = np.asarray(words)
    d = xs.shape[1] if d is None else d
    grad = np.zeros_like(xt)
    used = _valid_words(words, max(min_count, 2))
    if not used:
        return GroupedLoss(0.0, grad, [], True)
    total = 0.0
    scale = 1.0 / (4.0 * d * d * len(used))
    for k in used:
        idx = np.flatnonzero(words == k)
        n = len(idx)
        diff = covariance(xs[idx]) - covariance(xt[idx])
        total += float((diff ** 2).sum())
        # dL/dC_T = -2 diff ; dC_T/dX gives 2/(n-1) Xc @ sym(.)
        Xc = xt[idx] - xt[idx].mean(axis=0)
        grad[idx] = scale * (-4.0 / (n - 1)) * (Xc @ diff)
    return GroupedLoss(total * scale, grad, used, False)


def coral_loss(xs, xt, d: int | None = None) -> float:
    """Ungrouped CORAL on all pairs."""
    xs = np.asarray(xs, dtype=float)
    d = xs.shape[1] if d is None else d
    diff = covariance(xs) - covariance(np.asarray(xt, dtype=float))
    return float((diff ** 2).sum() / (4.0 * d * d))


# ---------------------------------------------------------------------------
# cross-domain second-order similarity


def _pairwise(X):
    diff = X[:, None, :] - X[None, :, :]
    return diff, np.sqrt((diff ** 2).sum(axis=-1))


def cd_sos_loss(xs, xt, words, min_count: int = 2) -> GroupedLoss:
    """``mean_k sqrt(sum_{i != j} (|xs_i - xs_j| - |xt_i - xt_j|)^2) / N_k``."""
    xs = np.asarray(xs, dtype=float)
    xt = np.asarray(xt, dtype=float)
    words = np.asarray(words)
    grad = np.zeros_like(xt)
    used = _valid_words(words, max(min_count, 2))
    if not used:
        return GroupedLoss(0.0, grad, [], True)
    total = 0.0
    for k in used:
        idx = np.flatnonzero(words == k)
        n = len(idx)
        _, DS = _pairwise(xs[idx])
        diffT, DT = _pairwise(xt[idx])
        R = DS - DT
        S = float(np.sqrt((R ** 2).sum()))
        total += S / n
        if S == 0.0:
            continue
        # dL/dDT_ij = -R_ij / (n S); both (i, j) and (j, i) move x_i
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(DT > 0, -R / (n * S * DT), 0.0)
        grad[idx] = 2.0 * (coef[:, :, None] * diffT).sum(axis=1)
    K = len(used)
    return GroupedLoss(total / K, grad / K, used, False)


# ---------------------------------------------------------------------------
# soft-argmax matching


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_argmax_match(xs, xt, keypoints, beta: float = 10.0):
    """Expected keypoint under ``softmax(beta <xs, xt_j>)``.

    Works for a single source descriptor (returns a 2-vector) or a stack.
    Returns ``(p_hat, alpha)``.
    """
    xs = np.asarray(xs, dtype=float)
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    P = np.atleast_2d(np.asarray(keypoints, dtype=float))
    if len(xt) == 0:
        raise LossError("soft-argmax needs at least one candidate")
    alpha = softmax_rows(beta * (np.atleast_2d(xs) @ xt.T))
    p_hat = alpha @ P
    if xs.ndim == 1:
        return p_hat[0], alpha[0]
    return p_hat, alpha


def softmatch_loss(xs, xt, keypoints, targets, cfg: SoftMatchConfig | None = None) -> SoftMatchLoss:
    """``mean_i |p_hat_i - p_i+| / l`` where ``p_hat_i`` soft-matches ``xs_i`` into the view.

    ``xt``/``keypoints`` hold every detected feature of the target view;
    gradients are returned for all of them.
    """
    cfg = cfg or SoftMatchConfig()
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    xt = np.atleast_2d(np.asarray(xt, dtype=float))
    P = np.atleast_2d(np.asarray(keypoints, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = len(xs)
    if n == 0:
        raise LossError("softmatch loss needs at least one match")
    p_hat, alpha = soft_argmax_match(xs, xt, P, cfg.beta)
    diff = p_hat - targets
    dist = np.sqrt((diff ** 2).sum(axis=1))
    per_match = dist / cfg.diagonal
    with np.errstate(divide="ignore", invalid="ignore"):
        g_phat = np.where(dist[:, None] > 0, diff / (dist[:, None] * n * cfg.diagonal), 0.0)
    # d p_hat_i / d logit_ij = alpha_ij (P_j - p_hat_i)
    g_logit = alpha * (g_phat @ P.T - (g_phat * p_hat).sum(axis=1, keepdims=True))
    grad_xt = cfg.beta * (g_logit.T @ xs)
    return SoftMatchLoss(float(per_match.mean()), p_hat, per_match, grad_xt)


# ---------------------------------------------------------------------------
# weights and combination


@dataclass
class LossWeights:
    lambdas: dict
    stats: dict = field(default_factory=dict)

    def __getitem__(self, term):
        return self.lambdas.get(term, 0.0)

    def masked(self, terms) -> "LossWeights":
        """Zero every term not in ``terms``."""
        return LossWeights({t: (self.lambdas.get(t, 0.0) if t in terms else 0.0) for t in TERMS},
                           dict(self.stats))

    @property
    def lambda_corres(self):
        return self["corres"]

    @property
    def lambda_vwcoral(self):
        return self["vwcoral"]

    @property
    def lambda_cdsos(self):
        return self["cdsos"]

    @property
    def lambda_softmatch(self):
        return self["softmatch"]


def calibrate_from_values(per_view: dict, overrides: dict | None = None) -> LossWeights:
    """``lambda_i = 1 / (4 (mu_i + 3 sigma_i))`` from per-view term values.

    ``sigma`` is the population standard deviation.  ``overrides`` maps a term
    to a fixed weight and is required for any term whose statistics vanish.
    """
    overrides = overrides or {}
    lambdas, stats = {}, {}
    for term, values in per_view.items():
        values = np.asarray(values, dtype=float)
        mu = float(values.mean())
        sigma = float(values.std())
        stats[term] = (mu, sigma)
        if term in overrides:
            lambdas[term] = float(overrides[term])
            continue
        denom = 4.0 * (mu + 3.0 * sigma)
        if denom == 0.0:
            raise CalibrationError(
                f"loss term {term!r} is identically zero on the training set; "
                "set an explicit weight override")
        lambdas[term] = 1.0 / denom
    return LossWeights(lambdas, stats)


@dataclass
class LossValue:
    value: float
    per_term_breakdown: dict
    weighted: dict = field(default_factory=dict)


def total_loss(term_values: dict, weights: LossWeights) -> LossValue:
    """Weighted sum of raw term values."""
    weighted = {t: weights[t] * float(v) for t, v in term_values.items()}
    return LossValue(float(sum(weighted.values())), dict(term_values), weighted)
