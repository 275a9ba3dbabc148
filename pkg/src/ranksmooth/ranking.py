"""Exact retrieval mathematics: relevance scores, ranks, AP, mAP, Recall@K.

These are the non-differentiable ground-truth quantities; everything else
in the package is measured against them. All functions are pure and all
reductions run in fixed index order so repeated calls are bit-identical.

Ties are broken by ascending original index (a proper ranking), and every
batch-level evaluation removes the query from its own retrieval set.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import normalize_rows

__all__ = [
    "ScoredSet",
    "DifferenceMatrix",
    "EmbeddingBatch",
    "DegenerateLabelsError",
    "DegenerateQueryError",
    "cosine_scores",
    "rank_in_set",
    "exact_ap",
    "mean_ap",
    "recall_at_k",
]

_UNIT_NORM_TOL = 1e-9


class DegenerateLabelsError(ValueError):
    """A scored set has no positive labels, so AP is undefined."""


class DegenerateQueryError(ValueError):
    """A batch contains a class with a single instance; its query has an
    empty positive set."""

    def __init__(self, class_id):
        self.class_id = class_id
        super().__init__(f"class {class_id} has a single instance; its query has no positives")


@dataclass(frozen=True)
class ScoredSet:
    """Relevance scores paired with binary positivity labels for one query.

    scores : (m,) float array, higher = more relevant (typically cosine
        similarities in [-1, 1], but any real scores are accepted).
    labels : (m,) bool array, True marks members of the positive set.
    """

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=bool)
        if scores.ndim != 1 or labels.ndim != 1:
            raise ValueError("scores and labels must be 1-D")
        if scores.shape[0] != labels.shape[0]:
            raise ValueError(f"length mismatch: {scores.shape[0]} scores, {labels.shape[0]} labels")
        if scores.shape[0] < 1:
            raise ValueError("scored set must contain at least one instance")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.scores.shape[0]

    @property
    def num_positive(self):
        return int(np.count_nonzero(self.labels))

    @property
    def num_negative(self):
        return len(self) - self.num_positive


@dataclass(frozen=True)
class DifferenceMatrix:
    """Pairwise score differences: values[i, j] = scores[j] - scores[i].

    Antisymmetric with an exactly zero diagonal; ranks are one plus the
    count of positive entries per row.
    """

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError("difference matrix must be square")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_scores(cls, scores):
        s = np.asarray(scores, dtype=np.float64)
        if s.ndim != 1:
            raise ValueError("scores must be 1-D")
        return cls(s[None, :] - s[:, None])

    @property
    def size(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class EmbeddingBatch:
    """L2-normalized embedding rows with integer class labels.

    Queries and retrieval set in one: batch evaluation uses each row in
    turn as the query against all the others.
    """

    vectors: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        class_ids = np.asarray(self.class_ids, dtype=np.int64)
        if vectors.ndim != 2:
            raise ValueError("vectors must be a 2-D matrix")
        if class_ids.ndim != 1 or class_ids.shape[0] != vectors.shape[0]:
            raise ValueError("class_ids must have one entry per embedding row")
        norms = np.linalg.norm(vectors, axis=1)
        off = np.abs(norms - 1.0)
        if off.size and off.max() > _UNIT_NORM_TOL:
            row = int(np.argmax(off))
            raise ValueError(f"row {row} has norm {norms[row]:.12f}, expected 1 within {_UNIT_NORM_TOL}")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "class_ids", class_ids)

    @classmethod
    def from_raw(cls, vectors, class_ids):
        """Build a batch from unnormalized rows, normalizing each one."""
        unit, _ = normalize_rows(vectors)
        return cls(unit, class_ids)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]


def cosine_scores(query_row, batch):
    """Relevance scores of every batch row against one query row.

    Rows are unit vectors, so the dot product is the cosine similarity.
    The self entry is included; callers mask it out as needed.
    """
    m = len(batch)
    if not 0 <= query_row < m:
        raise IndexError(f"query row {query_row} out of range for batch of {m}")
    return batch.vectors @ batch.vectors[query_row]


def _outranked_by(scores):
    """Boolean matrix: entry [i, j] is True when j ranks above i.

    Descending score order; ties go to the lower original index, which
    makes every ranking proper.
    """
    idx = np.arange(scores.shape[0])
    return (scores[None, :] > scores[:, None]) | (
        (scores[None, :] == scores[:, None]) & (idx[None, :] < idx[:, None])
    )


def rank_in_set(i, subset_mask, scored):
    """1-based rank of instance i within the subset, under descending score.

    Counts one plus the members of the subset (other than i itself) with a
    strictly higher score, with index-order tie-breaking. i itself need
    not belong to the subset.
    """
    scores = scored.scores
    m = scores.shape[0]
    if not 0 <= i < m:
        raise IndexError(f"instance {i} out of range for set of {m}")
    mask = np.asarray(subset_mask, dtype=bool)
    if mask.shape != (m,):
        raise ValueError("subset mask length must match the scored set")
    above = (scores > scores[i]) | ((scores == scores[i]) & (np.arange(m) < i))
    above[i] = False
    return int(1 + np.count_nonzero(above & mask))


def exact_ap(scored):
    """Exact average precision of one scored set.

    Mean over positives of (rank within positives) / (rank within all),
    which equals the mean precision at each hit in the induced ranking.
    Always in (0, 1], and 1 exactly when every positive outranks every
    negative.
    """
    labels = scored.labels
    if not labels.any():
        raise DegenerateLabelsError("cannot compute AP with no positive labels")
    above = _outranked_by(scored.scores)
    rank_all = 1 + above.sum(axis=1)
    rank_pos = 1 + (above & labels[None, :]).sum(axis=1)
    return float(np.mean(rank_pos[labels] / rank_all[labels]))


def _check_class_counts(batch, allow_degenerate, context):
    ids, counts = np.unique(batch.class_ids, return_counts=True)
    singles = ids[counts < 2]
    if singles.size == 0:
        return None
    if not allow_degenerate:
        raise DegenerateQueryError(int(singles[0]))
    warnings.warn(
        f"{context}: skipping {singles.size} singleton class(es), e.g. class {int(singles[0])}",
        stacklevel=3,
    )
    return set(int(c) for c in singles)


def mean_ap(batch, allow_degenerate=False):
    """Mean AP over the batch, each instance used in turn as the query.

    The query is removed from its own retrieval set. Classes with a single
    instance are an error unless allow_degenerate is set, in which case
    their queries are skipped with a warning.
    """
    skip = _check_class_counts(batch, allow_degenerate, "mean_ap")
    m = len(batch)
    sims = batch.vectors @ batch.vectors.T
    ap_values = []
    for k in range(m):
        if skip is not None and int(batch.class_ids[k]) in skip:
            continue
        keep = np.arange(m) != k
        scored = ScoredSet(sims[k, keep], batch.class_ids[keep] == batch.class_ids[k])
        ap_values.append(exact_ap(scored))
    if not ap_values:
        raise DegenerateQueryError(int(batch.class_ids[0]) if m else -1)
    return float(np.mean(ap_values))


def recall_at_k(batch, ks, allow_degenerate=False):
    """Fraction of queries with at least one positive in their top k.

    Retrieval is by descending score with index tie-breaking, self
    excluded. Every k must be smaller than the batch size.
    """
    m = len(batch)
    ks = [int(k) for k in ks]
    for k in ks:
        if k < 1 or k >= m:
            raise ValueError(f"k={k} must satisfy 1 <= k < batch size {m}")
    skip = _check_class_counts(batch, allow_degenerate, "recall_at_k")
    sims = batch.vectors @ batch.vectors.T
    hits = {k: 0 for k in ks}
    queries = 0
    for q in range(m):
        if skip is not None and int(batch.class_ids[q]) in skip:
            continue
        queries += 1
        keep = np.nonzero(np.arange(m) != q)[0]
        scores = sims[q, keep]
        order = keep[np.lexsort((keep, -scores))]
        positive = batch.class_ids[order] == batch.class_ids[q]
        for k in ks:
            if positive[:k].any():
                hits[k] += 1
    if queries == 0:
        raise DegenerateQueryError(int(batch.class_ids[0]) if m else -1)
    return {k: hits[k] / queries for k in ks}
