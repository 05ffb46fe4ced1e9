"""Preliminary per-pair relation prediction and the pair matrices it feeds.

Each ordered pair (subject, object) gets a feature vector built from the two
entity embeddings and their shared local context, then a linear classifier
scores all relations plus a learned threshold class. A pair's decided
relation set is every relation whose logit beats the threshold logit; the
empty set means no relation.

Pair matrices are stored compactly: only the N*N - N off-diagonal cells, in
row-major order. Diagonal cells hold nothing predictable by contract (they
are excluded from attention regions, losses and metrics alike); dense views
place the reserved no-relation encoding there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tk
from .encoder import EncodedDocument, entity_panel, local_context_batch
from .params import ParameterSet
from .tensor import Tensor

# classifier class layout: index 0 is the threshold pseudo-relation, real
# relations occupy 1..num_relations. The same ids index the relation
# embedding table, where 0 doubles as the no-relation encoding and the last
# row (num_relations + 1) is reserved for masking/noise experiments.
THRESHOLD = 0
NO_RELATION = 0


def pair_cells(n: int) -> list[tuple[int, int]]:
    """Off-diagonal cells of an n x n pair grid, row-major."""
    return [(s, o) for s in range(n) for o in range(n) if s != o]


@dataclass
class BaseConfig:
    dim: int = 64
    rel_dim: int = 64
    num_relations: int = 8


class BaseModule:
    def __init__(self, cfg: BaseConfig, params: ParameterSet):
        d, dr, nr = cfg.dim, cfg.rel_dim, cfg.num_relations
        self.cfg = cfg
        self.w_subj = params.weight("base.w_subj", "base", (2 * d, d))
        self.w_obj = params.weight("base.w_obj", "base", (2 * d, d))
        self.fnn_w1 = params.weight("base.fnn_w1", "base", (2 * d, 2 * d))
        self.fnn_b1 = params.zeros("base.fnn_b1", "base", (2 * d,))
        self.fnn_w2 = params.weight("base.fnn_w2", "base", (2 * d, d))
        self.fnn_b2 = params.zeros("base.fnn_b2", "base", (d,))
        self.w_rel = params.weight("base.w_rel", "base", (d, nr + 1))
        self.b_rel = params.zeros("base.b_rel", "base", (nr + 1,))
        self.rel_emb = params.weight("base.rel_emb", "base", (nr + 2, dr), fan_in=dr)

    @property
    def num_classes(self) -> int:
        return self.cfg.num_relations + 1

    def pair_feature(self, h_s: Tensor, h_o: Tensor, context: Tensor) -> Tensor:
        """Feature vector of one ordered pair (both inputs of width d)."""
        d = self.cfg.dim
        return self._pair_features(
            h_s.reshape(1, d), h_o.reshape(1, d), context.reshape(1, d)
        ).reshape(d)

    def _pair_features(self, h_s: Tensor, h_o: Tensor, context: Tensor) -> Tensor:
        z_s = tk.tanh(tk.concat([h_s, context], axis=1) @ self.w_subj)
        z_o = tk.tanh(tk.concat([h_o, context], axis=1) @ self.w_obj)
        z = tk.concat([z_s, z_o], axis=1)
        return tk.tanh(z @ self.fnn_w1 + self.fnn_b1) @ self.fnn_w2 + self.fnn_b2

    def pair_logits(self, features: Tensor) -> Tensor:
        """Raw relation logits (threshold class included). Sigmoid is a view
        only; decisions and the threshold loss work on raw logits."""
        if features.ndim == 1:
            return (features.reshape(1, -1) @ self.w_rel + self.b_rel).reshape(self.num_classes)
        return features @ self.w_rel + self.b_rel

    def build_pair_matrices(self, enc: EncodedDocument) -> "PairMatrices":
        n = enc.doc.num_entities
        if n < 2:
            raise ValueError(f"doc {enc.doc.doc_id!r}: need at least 2 entities, got {n}")
        cells = pair_cells(n)
        s_idx = np.array([s for s, _ in cells], dtype=np.int64)
        o_idx = np.array([o for _, o in cells], dtype=np.int64)

        embs, atts = entity_panel(enc)
        h_s = tk.take(embs, s_idx)
        h_o = tk.take(embs, o_idx)
        context = local_context_batch(enc, atts, s_idx, o_idx)

        features = self._pair_features(h_s, h_o, context)
        logits = self.pair_logits(features)
        relation_ids = np.argmax(logits.data, axis=1)
        relations = tk.take(self.rel_emb, relation_ids)
        return PairMatrices(
            n=n,
            cells=cells,
            features=features,
            relations=relations,
            logits=logits,
            relation_ids=relation_ids,
        )


@dataclass
class PairMatrices:
    """Compact per-pair state for one document at some refinement iteration."""

    n: int
    cells: list[tuple[int, int]]
    features: Tensor  # (P, d)
    relations: Tensor  # (P, rel_dim), embedded argmax predictions
    logits: Tensor  # (P, num_relations + 1)
    relation_ids: np.ndarray  # (P,), argmax class per cell (0 = no relation)
    iteration: int = 0

    @property
    def num_pairs(self) -> int:
        return len(self.cells)

    def cell_index(self) -> dict[tuple[int, int], int]:
        return {cell: i for i, cell in enumerate(self.cells)}

    def dense_features(self) -> np.ndarray:
        d = self.features.shape[1]
        out = np.zeros((self.n, self.n, d))
        for i, (s, o) in enumerate(self.cells):
            out[s, o] = self.features.data[i]
        return out

    def dense_relations(self, rel_emb: Tensor) -> np.ndarray:
        dr = self.relations.shape[1]
        out = np.tile(rel_emb.data[NO_RELATION], (self.n, self.n, 1)).reshape(self.n, self.n, dr)
        for i, (s, o) in enumerate(self.cells):
            out[s, o] = self.relations.data[i]
        return out


def probabilities(logits: Tensor) -> Tensor:
    """Sigmoid view of raw logits."""
    return tk.sigmoid(logits)


def decide_relations(logits: np.ndarray) -> set[int]:
    """Relations whose logit beats the threshold logit; empty set = none."""
    logits = np.asarray(logits)
    th = logits[THRESHOLD]
    return {r for r in range(1, len(logits)) if logits[r] > th}


def decide_all(logits: np.ndarray) -> list[set[int]]:
    return [decide_relations(row) for row in np.asarray(logits)]
