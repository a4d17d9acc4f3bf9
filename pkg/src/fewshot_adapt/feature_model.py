"""Trainable descriptor head: ``x = normalize(relu(W u))``.

The pre-descriptor ``u`` stands in for the frozen backbone output; only
``W`` is optimized.  Everything here works on single vectors and on row
stacks alike.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

MIN_ACTIVATION_NORM = 1e-12


class DegenerateDescriptorError(ValueError):
    pass


class FrozenHeadError(RuntimeError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message, accuracy):
        super().__init__(message)
        self.accuracy = accuracy


class DescriptorHead:
    """Weights ``W`` of shape (d, d_pre).  A frozen head refuses updates."""

    def __init__(self, weights, frozen: bool = False):
        W = np.array(weights, dtype=float)
        if W.ndim != 2 or W.shape[0] > W.shape[1]:
            raise ValueError(f"weights must be (d, d_pre) with d <= d_pre, got {W.shape}")
        if not np.isfinite(W).all():
            raise ValueError("weights must be finite")
        W.setflags(write=not frozen)
        self._W = W
        self._frozen = frozen

    @property
    def W(self) -> np.ndarray:
        return self._W

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def d(self) -> int:
        return self._W.shape[0]

    @property
    def d_pre(self) -> int:
        return self._W.shape[1]

    def set_weights(self, W):
        if self._frozen:
            raise FrozenHeadError("cannot update a frozen descriptor head")
        W = np.asarray(W, dtype=float)
        if W.shape != self._W.shape or not np.isfinite(W).all():
            raise ValueError("replacement weights must be finite with matching shape")
        self._W = W.copy()

    def freeze(self) -> "DescriptorHead":
        return DescriptorHead(self._W, frozen=True)

    def trainable_copy(self) -> "DescriptorHead":
        return DescriptorHead(self._W.copy(), frozen=False)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self._W.shape).encode())
        h.update(np.ascontiguousarray(self._W).tobytes())
        return h.hexdigest()

    def describe(self, u):
        return describe(self, u)

    def __repr__(self):
        return f"DescriptorHead(d={self.d}, d_pre={self.d_pre}, frozen={self._frozen})"


def init_head(d: int, d_pre: int, seed: int) -> DescriptorHead:
    rng = np.random.default_rng(seed)
    return DescriptorHead(rng.standard_normal((d, d_pre)) / np.sqrt(d_pre))


def _forward(W, U):
    z = U @ W.T
    r = np.maximum(z, 0.0)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm <= MIN_ACTIVATION_NORM):
        raise DegenerateDescriptorError("all-zero activation after relu")
    return z, r, norm


def describe(head, u) -> np.ndarray:
    """Unit-norm descriptor(s) for pre-descriptor(s) ``u``."""
    W = head.W if isinstance(head, DescriptorHead) else np.asarray(head, dtype=float)
    _, r, norm = _forward(W, np.asarray(u, dtype=float))
    return r / norm


def describe_backward(head, u, upstream) -> np.ndarray:
    """``dL/dW`` given ``dL/dx``; sums over rows when ``u`` is a stack.

    Chain: x = r/|r| contributes (I - x x^T)/|r|, and r = relu(z) gates by z > 0.
    """
    W = head.W if isinstance(head, DescriptorHead) else np.asarray(head, dtype=float)
    U = np.atleast_2d(np.asarray(u, dtype=float))
    G = np.atleast_2d(np.asarray(upstream, dtype=float))
    z, r, norm = _forward(W, U)
    x = r / norm
    dr = (G - x * (G * x).sum(axis=1, keepdims=True)) / norm
    dz = dr * (z > 0)
    return dz.T @ U


# ---------------------------------------------------------------------------
# source pretraining


@dataclass
class PretrainConfig:
    d: int = 16
    epochs: int = 200
    learning_rate: float = 1e-2
    margin: float = 1.0
    safe_radius_px: float = 8.0
    view_gap: int = 1
    patience: int = 15
    min_improvement: float = 1e-3
    min_accuracy: float = 0.95
    seed: int = 0


def matching_accuracy(X_a: np.ndarray, ids_a, X_b: np.ndarray, ids_b) -> float:
    """Fraction of shared landmarks in view a whose nearest neighbour in b is correct."""
    ids_a = np.asarray(ids_a)
    ids_b = np.asarray(ids_b)
    shared = np.isin(ids_a, ids_b)
    if not shared.any():
        return 0.0
    sim = X_a[shared] @ X_b.T
    nn = np.argmax(sim, axis=1)
    return float(np.mean(ids_b[nn] == ids_a[shared]))


def pretrain_source_head(views, cfg: PretrainConfig | None = None, val_views=None) -> DescriptorHead:
    """Train a head on source-view pairs with the correspondence loss only.

    ``views`` is a list of ``ViewFeatures`` from the source domain (ground-truth
    landmark ids define positives).  View ``i`` is paired with view
    ``i + cfg.view_gap``.  Training stops once the matching accuracy on
    ``val_views`` (defaults to ``views``) has not improved by
    ``cfg.min_improvement`` for ``cfg.patience`` epochs; the best head is
    returned frozen.  Raises ``NonConvergenceError`` if the epoch budget runs
    out first or the final accuracy stays below ``cfg.min_accuracy``.
    """
    from .correspondence import mine_negatives_arrays
    from .losses import correspondence_loss
    from .trainer import AdamState, adam_update

    cfg = cfg or PretrainConfig()
    val_views = views if val_views is None else val_views
    d_pre = views[0].pre_descriptors.shape[1]
    head = init_head(cfg.d, d_pre, cfg.seed)
    state = AdamState.zeros_like(head.W)

    def pairs_of(vs):
        out = []
        for i in range(len(vs)):
            a, b = vs[i], vs[(i + cfg.view_gap) % len(vs)]
            ia = np.flatnonzero(np.isin(a.landmark_ids, b.landmark_ids))
            ib = np.searchsorted(b.landmark_ids, a.landmark_ids[ia])
            out.append((a, b, ia, ib))
        return out

    train_pairs = pairs_of(views)
    val_pairs = pairs_of(val_views)

    def accuracy(W):
        accs = [matching_accuracy(describe(W, a.pre_descriptors), a.landmark_ids,
                                  describe(W, b.pre_descriptors), b.landmark_ids)
                for a, b, _, _ in val_pairs]
        return float(np.mean(accs))

    best_acc = accuracy(head.W)
    best_W = head.W.copy()
    stale = 0
    order_rng = np.random.default_rng([cfg.seed, 3])
    for _ in range(cfg.epochs):
        for k in order_rng.permutation(len(train_pairs)):
            a, b, ia, ib = train_pairs[k]
            W = head.W
            Xa = describe(W, a.pre_descriptors)
            Xb = describe(W, b.pre_descriptors)
            neg = mine_negatives_arrays(Xa[ia], b.keypoints[ib], Xb, b.keypoints, cfg.safe_radius_px)
            keep = neg >= 0
            if not keep.any():
                continue
            ia_k, ib_k, neg_k = ia[keep], ib[keep], neg[keep]
            res = correspondence_loss(Xa[ia_k], a.scores[ia_k], Xb[ib_k], b.scores[ib_k], Xb[neg_k],
                                      margin=cfg.margin)
            gXa = np.zeros_like(Xa)
            gXb = np.zeros_like(Xb)
            np.add.at(gXa, ia_k, res.grad_source)
            np.add.at(gXb, ib_k, res.grad_positive)
            np.add.at(gXb, neg_k, res.grad_negative)
            grad = describe_backward(W, a.pre_descriptors, gXa) + describe_backward(W, b.pre_descriptors, gXb)
            head.set_weights(adam_update(state, W, grad, cfg.learning_rate))
        acc = accuracy(head.W)
        if acc > best_acc + cfg.min_improvement:
            best_acc, best_W, stale = acc, head.W.copy(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    else:
        raise NonConvergenceError(
            f"source pretraining did not plateau within {cfg.epochs} epochs "
            f"(accuracy {best_acc:.3f})", best_acc)
    if best_acc < cfg.min_accuracy:
        raise NonConvergenceError(
            f"source matching accuracy {best_acc:.3f} below {cfg.min_accuracy}", best_acc)
    return DescriptorHead(best_W, frozen=True)
