"""Distance-based surrogate losses for head-to-head comparisons.

Triplet and pairwise contrastive losses in cosine-similarity form, sharing
the smoothed-AP loss's gradient plumbing, plus the violating-pair
diagnostic: the (negative, positive) index pairs whose order a perfect
ranking would have to fix. AP reaches 1 exactly when there are none.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import normalize_rows, similarity_backward
from .ranking import DegenerateQueryError
from .smoothap import LossOutput

__all__ = ["TripletConfig", "triplet_loss", "contrastive_loss", "violating_terms"]

MINING_MODES = ("all-valid", "random-per-anchor")


@dataclass(frozen=True)
class TripletConfig:
    """Hinge margin and triple-selection mode for the triplet loss."""

    margin: float = 0.1
    mining: str = "all-valid"

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        if self.mining not in MINING_MODES:
            raise ValueError(f"mining must be one of {MINING_MODES}, got {self.mining!r}")


def _anchor_masks(class_ids, allow_degenerate, context):
    same = class_ids[None, :] == class_ids[:, None]
    np.fill_diagonal(same, False)
    has_pos = same.any(axis=1)
    has_neg = (~same).sum(axis=1) > 1  # beyond the self entry
    usable = has_pos & has_neg
    if not usable.all():
        bad = int(np.nonzero(~usable)[0][0])
        if not allow_degenerate:
            raise DegenerateQueryError(int(class_ids[bad]))
        warnings.warn(f"{context}: skipping {int((~usable).sum())} anchor(s)", stacklevel=3)
    if not usable.any():
        raise DegenerateQueryError(int(class_ids[0]))
    return same, usable


def triplet_loss(batch, cfg, rng=None, allow_degenerate=False):
    """Margin hinge loss over (anchor, positive, negative) triples.

    Scores are cosine similarities to the anchor; each triple contributes
    max(s_neg - s_pos + margin, 0). Under all-valid mining the mean runs
    over every valid triple in the batch; random-per-anchor draws one
    positive and one negative per anchor from rng.
    """
    if cfg.mining == "random-per-anchor" and rng is None:
        raise ValueError("random-per-anchor mining requires an rng")
    unit, norms = normalize_rows(batch.vectors)
    m = len(batch)
    sims = unit @ unit.T
    same, usable = _anchor_masks(batch.class_ids, allow_degenerate, "triplet_loss")
    others = ~np.eye(m, dtype=bool)
    score_grad = np.zeros((m, m))
    total = 0.0
    count = 0

    if cfg.mining == "all-valid":
        # First pass counts triples so gradients can be scaled in one go.
        anchors = np.nonzero(usable)[0]
        pos_lists = [np.nonzero(same[a])[0] for a in anchors]
        neg_lists = [np.nonzero(~same[a] & others[a])[0] for a in anchors]
        count = sum(len(p) * len(n) for p, n in zip(pos_lists, neg_lists))
        for a, pos, neg in zip(anchors, pos_lists, neg_lists):
            hinge = sims[a, neg][None, :] - sims[a, pos][:, None] + cfg.margin
            active = hinge > 0
            total += hinge[active].sum()
            score_grad[a, pos] -= active.sum(axis=1)
            score_grad[a, neg] += active.sum(axis=0)
        total /= count
        score_grad /= count
    else:
        for a in np.nonzero(usable)[0]:
            pos = np.nonzero(same[a])[0]
            neg = np.nonzero(~same[a] & others[a])[0]
            p = int(rng.choice(pos))
            n = int(rng.choice(neg))
            hinge = sims[a, n] - sims[a, p] + cfg.margin
            count += 1
            if hinge > 0:
                total += hinge
                score_grad[a, p] -= 1.0
                score_grad[a, n] += 1.0
        total /= count
        score_grad /= count

    embedding_grad = similarity_backward(unit, norms, score_grad)
    return LossOutput(loss=float(total), score_grad=score_grad, embedding_grad=embedding_grad)


def contrastive_loss(batch, margin=0.5, allow_degenerate=False):
    """Pairwise contrastive loss in cosine form.

    Mean over positive pairs of (1 - s) plus mean over negative pairs of
    max(s - margin, 0), each pair counted once (i < j).
    """
    if margin < 0:
        raise ValueError(f"margin must be nonnegative, got {margin}")
    unit, norms = normalize_rows(batch.vectors)
    m = len(batch)
    _anchor_masks(batch.class_ids, allow_degenerate, "contrastive_loss")
    sims = unit @ unit.T
    iu, ju = np.triu_indices(m, k=1)
    pos = batch.class_ids[iu] == batch.class_ids[ju]
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateQueryError(int(batch.class_ids[0]))

    pair_sims = sims[iu, ju]
    neg_hinge = np.maximum(pair_sims[~pos] - margin, 0.0)
    loss = float(np.mean(1.0 - pair_sims[pos]) + np.mean(neg_hinge))

    score_grad = np.zeros((m, m))
    score_grad[iu[pos], ju[pos]] = -1.0 / n_pos
    neg_i, neg_j = iu[~pos], ju[~pos]
    active = pair_sims[~pos] > margin
    score_grad[neg_i[active], neg_j[active]] = 1.0 / n_neg

    embedding_grad = similarity_backward(unit, norms, score_grad)
    return LossOutput(loss=loss, score_grad=score_grad, embedding_grad=embedding_grad)


def violating_terms(scored):
    """All (negative index, positive index) pairs where the negative
    strictly outscores the positive, sorted. Empty exactly when every
    positive outranks every negative (tie-free scores)."""
    labels = scored.labels
    s = scored.scores
    neg_idx = np.nonzero(~labels)[0]
    pos_idx = np.nonzero(labels)[0]
    worse = s[neg_idx][:, None] > s[pos_idx][None, :]
    ni, pj = np.nonzero(worse)
    return sorted((int(neg_idx[a]), int(pos_idx[b])) for a, b in zip(ni, pj))
