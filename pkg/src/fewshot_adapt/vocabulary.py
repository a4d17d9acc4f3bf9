"""K-means visual vocabulary and the two word-assignment rules.

Source descriptors take their nearest centroid.  A target descriptor never
looks at the centroids itself: it inherits the word of the source
descriptor it corresponds to.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_K = 16
LARGE_K = 64   # operating point for real imagery; too many words for desk-scale data
_CHUNK = 4096


class VocabularyError(ValueError):
    pass


@dataclass
class VisualVocabulary:
    centroids: np.ndarray
    seed: int = 0
    objective_history: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=float)
        if self.centroids.ndim != 2 or self.K < 2:
            raise VocabularyError("a vocabulary needs at least two centroids")
        if len(np.unique(self.centroids, axis=0)) != self.K:
            raise VocabularyError("centroids must be distinct")

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]

    def __eq__(self, other):
        if not isinstance(other, VisualVocabulary):
            return NotImplemented
        return self.seed == other.seed and np.array_equal(self.centroids, other.centroids)


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Exact squared distances by direct differencing, chunked over rows."""
    out = np.empty((len(X), len(C)))
    for s in range(0, len(X), _CHUNK):
        diff = X[s:s + _CHUNK, None, :] - C[None, :, :]
        out[s:s + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [int(rng.integers(len(X)))]
    d2 = _sq_dists(X, X[centers[0]][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            raise VocabularyError("fewer distinct descriptors than requested words")
        idx = int(rng.choice(len(X), p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return X[centers].copy()


def build_vocabulary(descriptors, K: int = DEFAULT_K, seed: int = 0, max_iter: int = 100,
                     max_samples: int = 50_000) -> VisualVocabulary:
    """k-means++ seeding then Lloyd iterations to an assignment fixpoint.

    Requires at least ``10 * K`` descriptors.  Inputs beyond ``max_samples``
    are subsampled with the same seed.  Empty clusters are re-seeded at the
    point farthest from its current centroid.
    """
    X = np.asarray(descriptors, dtype=float)
    if K < 2:
        raise VocabularyError("K must be at least 2")
    if len(X) < 10 * K:
        raise VocabularyError(f"need at least {10 * K} descriptors for K={K}, got {len(X)}")
    rng = np.random.default_rng(seed)
    if len(X) > max_samples:
        X = X[np.sort(rng.choice(len(X), max_samples, replace=False))]

    C = _kmeans_pp(X, K, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        D = _sq_dists(X, C)
        new_labels = np.argmin(D, axis=1)
        history.append(float(D[np.arange(len(X)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=K)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            resid = ((X - C[labels]) ** 2).sum(axis=1)
            for k in np.flatnonzero(~nonempty):
                far = int(np.argmax(resid))
                C[k] = X[far]
                resid[far] = -1.0
            labels = None  # force another assignment pass
    return VisualVocabulary(C, seed, history)


def assign_source(vocab: VisualVocabulary, x) -> np.ndarray | int:
    """Nearest centroid by Euclidean distance; ties go to the lowest word id."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != vocab.d:
        raise ValueError(f"descriptor dimension {x.shape[-1]} != vocabulary dimension {vocab.d}")
    words = np.argmin(_sq_dists(np.atleast_2d(x), vocab.centroids), axis=1)
    return int(words[0]) if x.ndim == 1 else words


def assign_target_by_correspondence(pair, vocab: VisualVocabulary):
    """Word of a (source, target) pair: decided by the source member alone."""
    source, _target = pair
    return assign_source(vocab, source)
