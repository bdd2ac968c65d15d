"""PK batch sampling and the three-term training objective.

Each exit is optimized with a batch-hard triplet loss on its continuous
embedding, a negative-log-likelihood term on classifier logits over the soft
hash feature, and a ranking regularizer tying the continuous and hash Gram
structure together over each anchor's top-5 in-batch neighbors. All selection
(hardest mining, top-5) breaks ties toward the lowest index so oracle tests
can reproduce it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor
from .encoder import ExitOutput
from .errors import DimensionError, LabelError, SamplingError


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights and the triplet margin."""

    lambda_triplet: float = 0.35
    lambda_classifier: float = 1.0
    lambda_ranking: float = 100.0
    margin: float = 0.2
    ranking_k: int = 5
    ranking_normalize: bool = True

    def __post_init__(self):
        if min(self.lambda_triplet, self.lambda_classifier, self.lambda_ranking) < 0:
            raise ValueError("loss weights must be non-negative")


class PKBatchSampler:
    """Yields index batches of P distinct identities x K samples each.

    Identities are shuffled every epoch; leftover identities that do not fill
    a P-group are dropped for that epoch. Identities with fewer than K samples
    are sampled with replacement.
    """

    def __init__(self, labels: np.ndarray, p: int, k: int, rng: np.random.Generator):
        self.labels = np.asarray(labels)
        self.p = int(p)
        self.k = int(k)
        self.rng = rng
        self.ids = np.unique(self.labels)
        if self.p < 2 or self.k < 2:
            raise SamplingError("PK sampling needs P >= 2 and K >= 2")
        if self.ids.size < self.p:
            raise SamplingError(
                f"dataset has {self.ids.size} identities, PK batch needs {self.p}"
            )
        self._by_id = {i: np.flatnonzero(self.labels == i) for i in self.ids}

    def epoch_batches(self) -> Iterator[np.ndarray]:
        order = self.rng.permutation(self.ids)
        for start in range(0, order.size - self.p + 1, self.p):
            group = order[start : start + self.p]
            picks = []
            for ident in group:
                pool = self._by_id[ident]
                replace = pool.size < self.k
                picks.append(self.rng.choice(pool, size=self.k, replace=replace))
            yield np.concatenate(picks)


def pairwise_euclidean(feats: Tensor) -> Tensor:
    """N x N matrix of Euclidean distances between rows (differentiable)."""
    n, d = feats.shape
    diff = feats.reshape(n, 1, d) - feats.reshape(1, n, d)
    return diff.square().sum(axis=2).sqrt()


def _check_pk(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if ids.size < 2:
        raise SamplingError("batch holds a single identity; no negatives exist")
    if counts.min() < 2:
        lonely = ids[counts < 2]
        raise SamplingError(f"identities {lonely.tolist()} have no positive in batch")


def triplet_batch_hard(feats: Tensor, labels: np.ndarray, margin: float = 0.2) -> Tensor:
    """Mean over anchors of max(d(hardest positive) - d(hardest negative) + margin, 0).

    Hardest positive is the furthest same-identity row (anchor excluded),
    hardest negative the closest different-identity row; distances are
    Euclidean on the unnormalized features.
    """
    feats = as_tensor(feats)
    labels = np.asarray(labels)
    n = feats.shape[0]
    if labels.shape != (n,):
        raise DimensionError("labels not aligned with feature rows")
    _check_pk(labels)

    dist = pairwise_euclidean(feats)
    d = dist.data
    same = labels[:, None] == labels[None, :]
    eye = np.eye(n, dtype=bool)

    pos_d = np.where(same & ~eye, d, -np.inf)
    neg_d = np.where(~same, d, np.inf)
    hardest_pos = pos_d.argmax(axis=1)  # first max wins ties
    hardest_neg = neg_d.argmin(axis=1)  # first min wins ties

    anchors = np.arange(n)
    gap = dist.take_pairs(anchors, hardest_pos) - dist.take_pairs(anchors, hardest_neg)
    return (gap + margin).relu().mean()


def classifier_nll(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true identity."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError("labels not aligned with logit rows")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels outside [0, {c}) present")

    shift = logits - logits.data.max(axis=1, keepdims=True)  # stabilizer, constant
    log_norm = shift.exp().sum(axis=1).log()
    picked = shift.take_pairs(np.arange(n), labels)
    return (log_norm - picked).mean()


def _clamped_row_norms(feats: Tensor, floor: float = 1e-12) -> Tensor:
    norms = feats.square().sum(axis=1, keepdims=True).sqrt()
    # max(norm, floor) keeps zero rows from dividing by zero
    return (norms - floor).relu() + floor


def top_neighbors(feats: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-anchor k nearest other rows by Euclidean distance.

    Returns (rows, cols) index arrays, anchor-major with neighbors in rank
    order; ties resolve to the lowest index.
    """
    n = feats.shape[0]
    diff = feats[:, None, :] - feats[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(d, np.inf)
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    return rows, order.reshape(-1)


def ranking_regularizer(
    feat_ori: Tensor,
    feat_hash: Tensor,
    k: int = 5,
    normalize: bool = True,
) -> Tensor:
    """Squared Gram-entry gap between continuous and hash features over each
    anchor's top-k continuous neighbors.

    With `normalize` (default) both feature sets are row-L2-normalized and
    rescaled by sqrt(D) before the inner products, and the products divide by
    D, making the two Gram matrices scale-free and comparable.
    """
    feat_ori = as_tensor(feat_ori)
    feat_hash = as_tensor(feat_hash)
    n, d = feat_ori.shape
    if feat_hash.shape != (n, d):
        raise DimensionError(
            f"feature shapes differ: {feat_ori.shape} vs {feat_hash.shape}"
        )
    if n < k + 1:
        raise SamplingError(f"top-{k} selection needs at least {k + 1} rows, got {n}")

    rows, cols = top_neighbors(feat_ori.data, k)
    scale = float(np.sqrt(d))
    if normalize:
        o = feat_ori / _clamped_row_norms(feat_ori) * scale
        h = feat_hash / _clamped_row_norms(feat_hash) * scale
    else:
        o, h = feat_ori, feat_hash
    gram_gap = (o @ o.T) / float(d) - (h @ h.T) / float(d)
    return gram_gap.take_pairs(rows, cols).square().mean()


def combined_loss(
    exits: Sequence[ExitOutput],
    labels: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> tuple[Tensor, dict[int, dict[str, float]]]:
    """Weighted three-term objective summed over all exits.

    Returns the scalar loss tensor and a per-exit breakdown of the unweighted
    term values for logging.
    """
    total: Tensor | None = None
    breakdown: dict[int, dict[str, float]] = {}
    for out in exits:
        if out.hash_feature is None or out.logits is None:
            raise DimensionError(
                f"exit {out.stage} lacks train-mode outputs (hash feature / logits)"
            )
        t = triplet_batch_hard(out.embedding, labels, margin=weights.margin)
        c = classifier_nll(out.logits, labels)
        r = ranking_regularizer(
            out.embedding,
            out.hash_feature,
            k=weights.ranking_k,
            normalize=weights.ranking_normalize,
        )
        term = (
            weights.lambda_triplet * t
            + weights.lambda_classifier * c
            + weights.lambda_ranking * r
        )
        total = term if total is None else total + term
        breakdown[out.stage] = {
            "triplet": float(t.data),
            "classifier": float(c.data),
            "ranking": float(r.data),
        }
    if total is None:
        raise DimensionError("combined_loss needs at least one exit")
    return total, breakdown
