"""Iterative refinement of pair predictions via overlap-restricted attention.

For a target pair (s, o) the only informative neighbours are the pairs that
share an entity with it: row s, column s, row o and column o of the pair
grid. Each of the four attention heads owns one of those regions, in that
order. A gated fusion sub-layer blends the feature-level and relation-level
attention outputs, and residual feed-forward + layer-norm updates produce
the next layer's matrices. After the configured number of layers a shared
single-layer classifier rescores every pair; at test time the whole stack is
applied iteratively, re-embedding the argmax predictions between rounds
while the feature matrix resets to its initial value.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as tk
from .base_module import BaseModule, PairMatrices, pair_cells
from .params import ParameterSet
from .tensor import Tensor

NUM_HEADS = 4  # one per overlap region: row s, col s, row o, col o


@lru_cache(maxsize=64)
def region_indices(n: int, full_attention: bool = False) -> np.ndarray:
    """Memory-cell indices per head and target cell: (4, P, region_size).

    Diagonal cells do not exist in the compact layout, so every region holds
    exactly n - 1 cells (or all P cells under full attention).
    """
    if n < 2:
        raise ValueError("pair grid needs at least 2 entities")
    cells = pair_cells(n)
    index = {cell: i for i, cell in enumerate(cells)}
    p = len(cells)
    if full_attention:
        all_cells = np.tile(np.arange(p, dtype=np.int64), (p, 1))
        return np.stack([all_cells] * NUM_HEADS)

    def row(e):
        return [index[(e, j)] for j in range(n) if j != e]

    def col(e):
        return [index[(j, e)] for j in range(n) if j != e]

    out = np.zeros((NUM_HEADS, p, n - 1), dtype=np.int64)
    for i, (s, o) in enumerate(cells):
        out[0, i] = row(s)
        out[1, i] = col(s)
        out[2, i] = row(o)
        out[3, i] = col(o)
    out.setflags(write=False)
    return out


class CrossPairAttention:
    """Four full-width attention heads, each scoped to one overlap region."""

    def __init__(self, name: str, query_dim: int, memory_dim: int, params: ParameterSet):
        self.query_dim = query_dim
        self.memory_dim = memory_dim
        self.w_q, self.w_k, self.w_v = [], [], []
        for h in range(NUM_HEADS):
            self.w_q.append(params.weight(f"{name}.head{h}.wq", "inference", (query_dim, query_dim)))
            self.w_k.append(params.weight(f"{name}.head{h}.wk", "inference", (memory_dim, query_dim)))
            self.w_v.append(params.weight(f"{name}.head{h}.wv", "inference", (memory_dim, query_dim)))
        self.w_out = params.weight(f"{name}.wo", "inference", (NUM_HEADS * query_dim, query_dim))

    def forward(
        self, query: Tensor, memory: Tensor, regions: np.ndarray, return_weights: bool = False
    ):
        p = query.shape[0]
        dk = self.query_dim
        scale = 1.0 / np.sqrt(dk)
        # all four heads in one batch: stack projections to (4, ., dk) and
        # gather each head's region rows from the flattened per-head keys
        q = tk.matmul(query, tk.stack(self.w_q, axis=0))  # (4, P, dk)
        k = tk.matmul(memory, tk.stack(self.w_k, axis=0))
        v = tk.matmul(memory, tk.stack(self.w_v, axis=0))
        flat_idx = regions + (np.arange(NUM_HEADS) * p)[:, None, None]
        k_region = tk.take(k.reshape(NUM_HEADS * p, dk), flat_idx)  # (4, P, m, dk)
        v_region = tk.take(v.reshape(NUM_HEADS * p, dk), flat_idx)
        scores = tk.matmul(
            q.reshape(NUM_HEADS, p, 1, dk), k_region.transpose((0, 1, 3, 2))
        ) * scale
        attn = tk.softmax(scores, axis=-1)  # (4, P, 1, m)
        ctx = tk.matmul(attn, v_region)  # (4, P, 1, dk)
        merged = ctx.reshape(NUM_HEADS, p, dk).transpose((1, 0, 2)).reshape(p, NUM_HEADS * dk)
        out = merged @ self.w_out
        if return_weights:
            return out, [attn.data[h, :, 0, :] for h in range(NUM_HEADS)]
        return out


def fuse(f_hat: Tensor, r_hat: Tensor, w_gate: Tensor, b_gate: Tensor) -> Tensor:
    """Gated blend of the two attention outputs (same shape required)."""
    if f_hat.shape != r_hat.shape:
        raise ValueError(f"fusion shape mismatch: {f_hat.shape} vs {r_hat.shape}")
    gate = tk.sigmoid(tk.concat([f_hat, r_hat], axis=-1) @ w_gate + b_gate)
    return gate * f_hat + (1.0 - gate) * r_hat


class InferenceLayer:
    def __init__(self, name: str, dim: int, rel_dim: int, params: ParameterSet):
        mem = dim + rel_dim
        self.feature_attn = CrossPairAttention(f"{name}.feat", dim, mem, params)
        self.relation_attn = CrossPairAttention(f"{name}.rel", rel_dim, mem, params)
        self.w_gate = params.weight(f"{name}.w_gate", "inference", (dim + rel_dim, dim))
        self.b_gate = params.zeros(f"{name}.b_gate", "inference", (dim,))
        self.f_fnn_w1 = params.weight(f"{name}.f_fnn_w1", "inference", (dim, 2 * dim))
        self.f_fnn_b1 = params.zeros(f"{name}.f_fnn_b1", "inference", (2 * dim,))
        self.f_fnn_w2 = params.weight(f"{name}.f_fnn_w2", "inference", (2 * dim, dim))
        self.f_fnn_b2 = params.zeros(f"{name}.f_fnn_b2", "inference", (dim,))
        self.r_fnn_w1 = params.weight(f"{name}.r_fnn_w1", "inference", (rel_dim, 2 * rel_dim))
        self.r_fnn_b1 = params.zeros(f"{name}.r_fnn_b1", "inference", (2 * rel_dim,))
        self.r_fnn_w2 = params.weight(f"{name}.r_fnn_w2", "inference", (2 * rel_dim, rel_dim))
        self.r_fnn_b2 = params.zeros(f"{name}.r_fnn_b2", "inference", (rel_dim,))
        self.ln_f_g = params.ones(f"{name}.ln_f_g", "inference", (dim,))
        self.ln_f_b = params.zeros(f"{name}.ln_f_b", "inference", (dim,))
        self.ln_r_g = params.ones(f"{name}.ln_r_g", "inference", (rel_dim,))
        self.ln_r_b = params.zeros(f"{name}.ln_r_b", "inference", (rel_dim,))

    def forward(
        self, features: Tensor, relations: Tensor, regions: np.ndarray, no_fusion: bool = False
    ) -> tuple[Tensor, Tensor]:
        memory = tk.concat([features, relations], axis=1)
        f_hat = self.feature_attn.forward(features, memory, regions)
        r_hat = self.relation_attn.forward(relations, memory, regions)
        if no_fusion:
            to_f, to_r = f_hat, r_hat
        else:
            to_f = to_r = fuse(f_hat, r_hat, self.w_gate, self.b_gate)
        f_mid = tk.tanh(to_f @ self.f_fnn_w1 + self.f_fnn_b1) @ self.f_fnn_w2 + self.f_fnn_b2
        r_mid = tk.tanh(to_r @ self.r_fnn_w1 + self.r_fnn_b1) @ self.r_fnn_w2 + self.r_fnn_b2
        f_next = tk.layer_norm(features + f_mid, self.ln_f_g, self.ln_f_b)
        r_next = tk.layer_norm(relations + r_mid, self.ln_r_g, self.ln_r_b)
        return f_next, r_next


@dataclass
class InferenceConfig:
    dim: int = 64
    rel_dim: int = 64
    num_relations: int = 8
    num_layers: int = 2  # stacked refinement layers per pass
    iterations: int = 3  # test-time refinement rounds (K)
    full_attention: bool = False
    no_fusion: bool = False
    carry_features: bool = False


class InferenceModule:
    def __init__(self, cfg: InferenceConfig, params: ParameterSet):
        if cfg.dim != cfg.rel_dim:
            raise ValueError("gated fusion requires equal feature and relation widths")
        self.cfg = cfg
        self.layers = [
            InferenceLayer(f"inference.layer{i}", cfg.dim, cfg.rel_dim, params)
            for i in range(cfg.num_layers)
        ]
        width = cfg.dim + cfg.rel_dim
        self.w_cls = params.weight("inference.w_cls", "inference", (width, cfg.num_relations + 1))
        self.b_cls = params.zeros("inference.b_cls", "inference", (cfg.num_relations + 1,))

    def run_stack(
        self, slot_f: Tensor, slot_r: Tensor, n: int
    ) -> tuple[Tensor, Tensor, Tensor]:
        """One pass through all layers plus the classifier.

        Returns (logits, top_concat, top_slot_f). The two input slots may be
        swapped by the caller; the concatenation order stays slot_f, slot_r.
        """
        regions = region_indices(n, self.cfg.full_attention)
        for layer in self.layers:
            slot_f, slot_r = layer.forward(slot_f, slot_r, regions, self.cfg.no_fusion)
        top = tk.concat([slot_f, slot_r], axis=1)
        logits = top @ self.w_cls + self.b_cls
        return logits, top, slot_f

    def refine_once(
        self, features: Tensor, relations: Tensor, n: int
    ) -> tuple[Tensor, Tensor]:
        """Refined logits plus the top-layer concatenated representation."""
        logits, top, _ = self.run_stack(features, relations, n)
        return logits, top

    def iterate(
        self, base: BaseModule, pm: PairMatrices, k_iterations: int
    ) -> list[np.ndarray]:
        """Refinement trajectory [P(0), ..., P(K)] of per-pair logit arrays.

        P(0) is the preliminary prediction; each round re-embeds the argmax
        of the previous round's logits. With k_iterations == 0 the base
        predictions pass through unchanged.
        """
        if k_iterations < 0:
            raise ValueError("iteration count must be >= 0")
        trajectory = [np.array(pm.logits.data)]
        features = pm.features
        relations = pm.relations
        for _ in range(k_iterations):
            logits, _, top_f = self.run_stack(features, relations, pm.n)
            trajectory.append(np.array(logits.data))
            ids = np.argmax(logits.data, axis=1)
            relations = tk.take(base.rel_emb, ids)
            if self.cfg.carry_features:
                features = top_f
        return trajectory
