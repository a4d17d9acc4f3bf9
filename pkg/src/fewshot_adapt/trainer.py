"""Adam optimization of the target descriptor head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondenceSet, PointCloudModel, mine_negatives_arrays
from .feature_model import DescriptorHead, describe, describe_backward
from .losses import (TERMS, LossWeights, SoftMatchConfig, calibrate_from_values, cd_sos_loss,
                     correspondence_loss, softmatch_loss, total_loss, vw_coral_loss)
from .synthworld import ViewFeatures


class NonFiniteGradientError(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 10
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    terms: tuple = TERMS
    margin: float = 1.0
    hinge: str = "standard"
    min_count: int = 2
    safe_radius_px: float = 8.0
    softmatch: SoftMatchConfig = field(default_factory=SoftMatchConfig)
    patience: int = 10
    remine: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        unknown = set(self.terms) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        self.terms = tuple(t for t in TERMS if t in self.terms)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, W):
        return cls(np.zeros_like(W), np.zeros_like(W), 0)


def adam_update(state: AdamState, W, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> np.ndarray:
    """One bias-corrected Adam step; mutates ``state`` and returns new weights."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {state.m.shape}")
    if not np.isfinite(grad).all():
        bad = int((~np.isfinite(grad)).sum())
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries at step {state.step + 1}")
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grad
    state.v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    return W - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainState:
    head: DescriptorHead
    adam: AdamState
    step: int = 0
    loss_history: list = field(default_factory=list)


def adam_step(state: TrainState, gradient, cfg: TrainConfig) -> TrainState:
    W = adam_update(state.adam, state.head.W, gradient, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    state.head.set_weights(W)
    state.step += 1
    return state


# ---------------------------------------------------------------------------
# per-view objective


@dataclass
class ViewTerms:
    values: dict
    grad_descriptors: dict
    num_triplets: int = 0


def view_terms(W, cset: CorrespondenceSet, features: ViewFeatures, cloud: PointCloudModel,
               cfg: TrainConfig, terms=None) -> ViewTerms:
    """Raw loss terms of one view and their gradients w.r.t. the view's descriptors.

    Negatives are re-mined with ``W`` when ``cfg.remine`` is set.  Gradients
    are (n_features, d) arrays; chain them with ``describe_backward``.
    """
    terms = cfg.terms if terms is None else terms
    U = features.pre_descriptors
    X = describe(W, U)
    kp = features.keypoints
    pos = cset.feature_index
    xs = cloud.descriptors[cset.point_index]
    values, grads = {}, {}
    n_trip = 0
    if "corres" in terms:
        if cfg.remine:
            neg = mine_negatives_arrays(xs, kp[pos], X, kp, cfg.safe_radius_px)
        else:
            neg = cset.negative_index
        has = neg >= 0
        g = np.zeros_like(X)
        value = 0.0
        if has.any():
            res = correspondence_loss(xs[has], cloud.scores[cset.point_index[has]], X[pos[has]],
                                      features.scores[pos[has]], X[neg[has]], cfg.margin, cfg.hinge)
            np.add.at(g, pos[has], res.grad_positive)
            np.add.at(g, neg[has], res.grad_negative)
            value = res.value
            n_trip = int(has.sum())
        values["corres"], grads["corres"] = value, g
    for name, fn in (("vwcoral", vw_coral_loss), ("cdsos", cd_sos_loss)):
        if name in terms:
            kwargs = {"min_count": cfg.min_count}
            res = fn(xs, X[pos], cset.words, **kwargs)
            g = np.zeros_like(X)
            np.add.at(g, pos, res.grad_target)
            values[name], grads[name] = res.value, g
    if "softmatch" in terms:
        res = softmatch_loss(xs, X, kp, cset.reprojected, cfg.softmatch)
        values["softmatch"], grads["softmatch"] = res.value, res.grad_candidates
    return ViewTerms(values, grads, n_trip)


def view_term_gradient(W, cset, features, cloud, cfg, term) -> tuple:
    """``(value, dL/dW)`` of a single raw term for one view."""
    vt = view_terms(W, cset, features, cloud, cfg, terms=(term,))
    return vt.values[term], describe_backward(W, features.pre_descriptors, vt.grad_descriptors[term])


def calibrate_weights(training, head, cloud, cfg: TrainConfig, overrides=None) -> LossWeights:
    """Per-view term statistics with the initial head, then ``1/(4(mu + 3 sigma))``."""
    if len(training) < 2:
        raise TrainingError("calibration needs at least two training views")
    per_view = {t: [] for t in TERMS}
    for cset, features in training:
        vt = view_terms(head.W, cset, features, cloud, cfg, terms=TERMS)
        for t in TERMS:
            per_view[t].append(vt.values[t])
    return calibrate_from_values(per_view, overrides)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    head: DescriptorHead
    state: TrainState
    step_log: list
    epoch_log: list
    best_epoch: int
    validation: list


def batch_gradient(W, batch, cloud, weights: LossWeights, cfg: TrainConfig):
    """Mean over views of the weighted objective and its gradient."""
    dW = np.zeros_like(W)
    sums = {t: 0.0 for t in cfg.terms}
    for cset, features in batch:
        vt = view_terms(W, cset, features, cloud, cfg)
        gX = sum(weights[t] * vt.grad_descriptors[t] for t in cfg.terms)
        dW += describe_backward(W, features.pre_descriptors, gX)
        for t in cfg.terms:
            sums[t] += vt.values[t]
    n = len(batch)
    raw = {t: v / n for t, v in sums.items()}
    return total_loss(raw, weights), dW / n


def train(training, cloud: PointCloudModel, init: DescriptorHead, weights: LossWeights,
          cfg: TrainConfig, validate=None) -> TrainResult:
    """Adapt a trainable copy of ``init`` on ``training`` = [(CorrespondenceSet, ViewFeatures)].

    ``validate``, if given, maps a head to a comparable score (higher is
    better); the best-scoring head is returned and training stops after
    ``cfg.patience`` epochs without improvement.  Without it the final head is
    returned.
    """
    if not training:
        raise TrainingError("no accepted training views")
    weights = weights.masked(cfg.terms)
    head = init.trainable_copy()
    state = TrainState(head, AdamState.zeros_like(head.W))
    rng = np.random.default_rng(cfg.seed)
    step_log, epoch_log, val_log = [], [], []
    best_W, best_score, best_epoch, stale = head.W.copy(), None, 0, 0
    if validate is not None:
        best_score = validate(head)
        val_log.append((0, best_score))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(training))
        epoch_raw = {t: 0.0 for t in cfg.terms}
        n_batches = 0
        for s in range(0, len(order), cfg.batch_size):
            batch = [training[i] for i in order[s:s + cfg.batch_size]]
            loss, dW = batch_gradient(head.W, batch, cloud, weights, cfg)
            try:
                adam_step(state, dW, cfg)
            except FloatingPointError as exc:
                raise TrainingError(f"epoch {epoch}, step {state.step + 1}: {exc}") from exc
            row = {"epoch": epoch, "step": state.step}
            row.update({t: loss.per_term_breakdown[t] for t in cfg.terms})
            row["total"] = loss.value
            row["grad_norm"] = float(np.linalg.norm(dW))
            step_log.append(row)
            for t in cfg.terms:
                epoch_raw[t] += loss.per_term_breakdown[t]
            n_batches += 1
        epoch_loss = total_loss({t: v / n_batches for t, v in epoch_raw.items()}, weights)
        for t in cfg.terms:
            epoch_log.append({"epoch": epoch, "term": t, "raw": epoch_loss.per_term_breakdown[t],
                              "weighted": epoch_loss.weighted[t]})
        epoch_log.append({"epoch": epoch, "term": "total", "raw": epoch_loss.value,
                          "weighted": epoch_loss.value})
        state.loss_history.append(epoch_loss.value)

        if validate is not None:
            score = validate(head)
            val_log.append((epoch, score))
            if score > best_score:
                best_W, best_score, best_epoch, stale = head.W.copy(), score, epoch, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    final = DescriptorHead(best_W if validate is not None else head.W.copy())
    return TrainResult(final, state, step_log, epoch_log, best_epoch if validate is not None else cfg.epochs,
                       val_log)


def epoch_total(epoch_log, epoch) -> float:
    return next(r["raw"] for r in epoch_log if r["epoch"] == epoch and r["term"] == "total")

