"""Training losses: adaptive threshold classification, relation-matrix noise,
and a stop-gradient siamese alignment loss over two noised refinement runs.

The threshold loss scores each pair with two softmax competitions: every
positive relation against the threshold class, and the threshold class
against all negatives. A pair with no positives contributes only the second
term. Decisions therefore stay consistent with training: a relation is
predicted exactly when its logit beats the threshold logit.

For the alignment loss the refinement stack runs twice on independently
noised relation matrices, once with the inputs slot-swapped, and the two
top-layer outputs are pulled together per cell through a predictor head with
a stop-gradient on the opposite branch.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from . import tensor as tk
from .base_module import THRESHOLD
from .documents import Document
from .params import ParameterSet
from .tensor import Tensor

log = logging.getLogger(__name__)

_MASK = 1e30  # additive log-domain mask; exp(-1e30 - max) underflows to exactly 0


def gold_positive_sets(
    doc: Document, cells: Sequence[tuple[int, int]], rel_to_id: dict[str, int]
) -> list[set[int]]:
    """Positive class ids per pair cell, aligned with the cell order."""
    by_pair: dict[tuple[int, int], set[int]] = {}
    for fact in doc.gold_facts:
        if fact.relation not in rel_to_id:
            raise KeyError(f"doc {doc.doc_id!r}: unknown relation {fact.relation!r}")
        by_pair.setdefault((fact.head, fact.tail), set()).add(rel_to_id[fact.relation])
    return [by_pair.get(cell, set()) for cell in cells]


def adaptive_threshold_loss(
    logits: Tensor, positives: Sequence[set[int]], reduction: str = "mean"
) -> Tensor:
    """Threshold-separated classification loss over one batch of pairs.

    logits: (P, num_relations + 1) raw scores, threshold class at index 0.
    positives: per-pair sets of positive class ids (1-based relation ids).
    """
    p, c = logits.shape
    if len(positives) != p:
        raise ValueError(f"{len(positives)} label sets for {p} pairs")
    pos_mask = np.zeros((p, c))
    for i, pos in enumerate(positives):
        for r in pos:
            if not (1 <= r < c):
                raise ValueError(f"positive class {r} outside 1..{c - 1}")
            pos_mask[i, r] = 1.0

    sel_pos = pos_mask.copy()
    sel_pos[:, THRESHOLD] = 1.0
    sel_neg = 1.0 - pos_mask
    sel_neg[:, THRESHOLD] = 1.0

    lse_pos = tk.logsumexp(logits + Tensor((sel_pos - 1.0) * _MASK), axis=1)
    lse_neg = tk.logsumexp(logits + Tensor((sel_neg - 1.0) * _MASK), axis=1)
    counts = Tensor(pos_mask.sum(axis=1))
    positive_logit_sum = (logits * Tensor(pos_mask)).sum(axis=1)
    threshold_logit = tk.column(logits, THRESHOLD)

    per_pair = counts * lse_pos - positive_logit_sum + lse_neg - threshold_logit
    if reduction == "mean":
        return per_pair.mean()
    if reduction == "sum":
        return per_pair.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


def sample_noise_rate(rng: np.random.Generator, low: float = 0.0, high: float = 0.4) -> float:
    return float(rng.uniform(low, high))


def inject_noise(ids: np.ndarray, rate: float, rng: np.random.Generator, num_ids: int) -> np.ndarray:
    """Replace floor(rate * P) cells' relation ids, chosen uniformly without
    replacement, each with a uniformly drawn different id from 0..num_ids-1."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate {rate} outside [0, 1]")
    ids = np.array(ids, dtype=np.int64)
    count = int(np.floor(rate * len(ids) + 1e-9))
    if count == 0:
        return ids
    chosen = rng.choice(len(ids), size=count, replace=False)
    # (id + u) mod num_ids with u in 1..num_ids-1 is uniform over the other ids
    offsets = rng.integers(1, num_ids, size=count)
    ids[chosen] = (ids[chosen] + offsets) % num_ids
    return ids


class ContrastiveHead:
    """Two-layer predictor over top-layer pair representations; in and out
    widths match so outputs stay cosine-comparable with raw representations."""

    def __init__(self, width: int, params: ParameterSet):
        hidden = 2 * width
        self.w1 = params.weight("predictor.w1", "inference", (width, hidden))
        self.b1 = params.zeros("predictor.b1", "inference", (hidden,))
        self.w2 = params.weight("predictor.w2", "inference", (hidden, width))
        self.b2 = params.zeros("predictor.b2", "inference", (width,))

    def apply(self, m: Tensor) -> Tensor:
        return tk.tanh(m @ self.w1 + self.b1) @ self.w2 + self.b2


def siamese_alignment_loss(m_first: Tensor, m_second: Tensor, head) -> Tensor:
    """2 - cos(head(m_second), sg(m_first)) - cos(head(m_first), sg(m_second)),
    cosines averaged over cells. Zero-norm cells are reported and skipped."""
    pred_first = head.apply(m_first)
    pred_second = head.apply(m_second)
    target_first = tk.stop_gradient(m_first)
    target_second = tk.stop_gradient(m_second)

    norms = np.stack(
        [np.linalg.norm(t.data, axis=-1) for t in (pred_first, pred_second, target_first, target_second)]
    )
    valid = np.all(norms > 0.0, axis=0)
    if not valid.all():
        bad = np.flatnonzero(~valid)
        log.warning("skipping %d zero-norm cells in alignment loss: %s", bad.size, bad.tolist())
        if not valid.any():
            raise ValueError("every cell has a zero-norm vector; alignment loss undefined")
        keep = np.flatnonzero(valid)
        pred_first, pred_second = tk.take(pred_first, keep), tk.take(pred_second, keep)
        target_first, target_second = tk.take(target_first, keep), tk.take(target_second, keep)

    align = tk.cosine(pred_second, target_first).mean() + tk.cosine(pred_first, target_second).mean()
    return 2.0 - align


def stage2_forward(
    inference,
    rel_emb: Tensor,
    features: Tensor,
    relation_ids: np.ndarray,
    n: int,
    head,
    rng: np.random.Generator,
    with_contrastive: bool = True,
    noise_low: float = 0.0,
    noise_high: float = 0.4,
) -> tuple[Tensor, Tensor | None, list[float]]:
    """One-pass correction training forward.

    Draws a noise rate, corrupts the predicted relation ids, and refines
    (features, noised relations) once to produce the corrected logits. With
    the contrastive branch on, a second independently noised run goes through
    the same stack slot-swapped and the two top representations are aligned.
    Returns (refined_logits, alignment_loss_or_None, noise_rates_used).
    """
    num_ids = rel_emb.shape[0] - 1  # noise draws exclude the reserved mask row
    rates = [sample_noise_rate(rng, noise_low, noise_high)]
    ids_main = inject_noise(relation_ids, rates[0], rng, num_ids)
    refined_logits, m_main, _ = inference.run_stack(features, tk.take(rel_emb, ids_main), n)
    if not with_contrastive:
        return refined_logits, None, rates
    rates.append(sample_noise_rate(rng, noise_low, noise_high))
    ids_swap = inject_noise(relation_ids, rates[1], rng, num_ids)
    _, m_swap, _ = inference.run_stack(tk.take(rel_emb, ids_swap), features, n)
    return refined_logits, siamese_alignment_loss(m_main, m_swap, head), rates


def contrastive_loss(
    inference,
    rel_emb: Tensor,
    features: Tensor,
    relation_ids: np.ndarray,
    n: int,
    head,
    rng: np.random.Generator,
    noise_low: float = 0.0,
    noise_high: float = 0.4,
) -> Tensor:
    """Alignment loss alone (both noised branches, slot-swapped second run)."""
    _, loss, _ = stage2_forward(
        inference, rel_emb, features, relation_ids, n, head, rng,
        with_contrastive=True, noise_low=noise_low, noise_high=noise_high,
    )
    return loss


def stage2_objective(
    base_loss: Tensor | None,
    refined_loss: Tensor | None,
    contrastive: Tensor | None,
    contrastive_weight: float = 1.0,
) -> Tensor:
    """Sum of the enabled loss components with the given alignment weight."""
    if contrastive_weight < 0:
        raise ValueError("contrastive weight must be >= 0")
    terms = [t for t in (base_loss, refined_loss) if t is not None]
    if contrastive is not None and contrastive_weight != 0.0:
        terms.append(contrastive * contrastive_weight)
    if not terms:
        raise ValueError("stage-2 objective has no enabled terms")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
