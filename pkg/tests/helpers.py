"""Shared test oracles and batch builders.

The oracles here are deliberately independent of the library's own
computation paths: AP via an explicit sorted precision-at-hit walk, and
gradients via central finite differences on the public loss surface.
"""

import numpy as np

from ranksmooth.ranking import EmbeddingBatch


def precision_at_hit_ap(scores, labels):
    """Brute-force AP oracle: walk the ranking, average precision at hits.

    Descending score, ties broken by ascending index (same convention the
    library documents).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions))


def central_difference(fn, x, step=1e-6):
    """Central finite-difference gradient of scalar fn at array x."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        up = x.copy()
        up.flat[i] += step
        down = x.copy()
        down.flat[i] -= step
        grad.flat[i] = (fn(up) - fn(down)) / (2.0 * step)
    return grad


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def unit_rows(rng, m, d):
    x = rng.normal(size=(m, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_batch(rng, num_classes, per_class, d):
    """Random unit embeddings with class-balanced labels."""
    m = num_classes * per_class
    return EmbeddingBatch(unit_rows(rng, m, d), np.repeat(np.arange(num_classes), per_class))


def gapped_scores(rng, m, min_gap):
    """Random scores whose pairwise gaps are all at least min_gap."""
    steps = min_gap + rng.uniform(0.0, min_gap, size=m)
    scores = np.cumsum(steps)
    rng.shuffle(scores)
    return scores


def nondegenerate_labelings(m):
    """Every boolean labeling of m items except all-false and all-true."""
    for bits in range(1, 2**m - 1):
        yield np.array([(bits >> i) & 1 == 1 for i in range(m)])
