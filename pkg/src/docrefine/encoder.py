"""Small trainable contextual encoder and the entity-level views on top of it.

Mentions are bracketed by a reserved ``*`` token before encoding; an entity's
vector is the elementwise log-sum-exp of its mentions' start-marker rows, and
its attention profile is the head-averaged final-layer attention at those
rows. The local context of a pair is the document embedding matrix weighted
by the normalized product of the two profiles.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as tk
from .documents import Document, Entity
from .params import ParameterSet
from .tensor import Tensor

PAD, UNK, MARKER = 0, 1, 2
MARKER_TOKEN = "*"
_RESERVED = ("<pad>", "<unk>", MARKER_TOKEN)

CONTEXT_EPS = 1e-12


class Vocab:
    """Corpus token -> id map with reserved pad/unk/marker entries."""

    def __init__(self, tokens: Iterable[str]):
        self._ids = {tok: i for i, tok in enumerate(_RESERVED)}
        for tok in sorted(set(tokens) - set(_RESERVED)):
            self._ids[tok] = len(self._ids)

    @classmethod
    def from_documents(cls, docs: Iterable[Document]) -> "Vocab":
        return cls(tok for doc in docs for tok in doc.tokens)

    @property
    def size(self) -> int:
        return len(self._ids)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self._ids.get(tok, UNK) for tok in tokens], dtype=np.int64)

    def tokens(self) -> list[str]:
        return list(self._ids)


def mark_mentions(
    doc: Document,
) -> tuple[list[str], dict[tuple[int, int], int], list[int]]:
    """Insert a marker before and after every mention span.

    Returns the marked token list, a map from (entity_index, mention_index)
    to the start marker's post-insertion position, and each marked token's
    sentence index (markers take their mention's sentence). Mentions are
    processed in start order; markers at a shared boundary close inner spans
    before opening new ones, so non-crossing mentions nest properly.
    """
    n = len(doc.tokens)
    token_sentence = np.zeros(n, dtype=np.int64)
    for si, (s, e) in enumerate(doc.sentence_spans):
        token_sentence[s:e] = si

    events = []
    ordinal = 0
    for ent in doc.entities:
        for mi, m in enumerate(ent.mentions):
            if not (0 <= m.start < m.end <= n):
                raise ValueError(
                    f"doc {doc.doc_id!r}: mention span [{m.start},{m.end}) out of range"
                )
            events.append(((m.start, 1, -m.end, ordinal), True, (ent.index, mi), m.sentence_index))
            events.append(((m.end, 0, -m.start, -ordinal), False, (ent.index, mi), m.sentence_index))
            ordinal += 1
    events.sort(key=lambda e: e[0])

    marked: list[str] = []
    segments: list[int] = []
    positions: dict[tuple[int, int], int] = {}
    ei = 0
    for pos in range(n + 1):
        while ei < len(events) and events[ei][0][0] == pos:
            _, is_start, key, sentence = events[ei]
            if is_start:
                positions[key] = len(marked)
            marked.append(MARKER_TOKEN)
            segments.append(sentence)
            ei += 1
        if pos < n:
            marked.append(doc.tokens[pos])
            segments.append(int(token_sentence[pos]))
    return marked, positions, segments


def strip_markers(tokens: Iterable[str]) -> list[str]:
    return [t for t in tokens if t != MARKER_TOKEN]


@dataclass
class EncoderConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    ffn_hidden: int = 128
    max_len: int = 256
    max_sentences: int = 64


class TokenEncoder:
    """Self-attention encoder exposing per-token embeddings and the final
    layer's attention tensor."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, params: ParameterSet):
        if cfg.dim % cfg.heads:
            raise ValueError("encoder dim must divide evenly across heads")
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.head_dim = cfg.dim // cfg.heads
        d, hid = cfg.dim, cfg.ffn_hidden
        self.tok_emb = params.weight("encoder.tok_emb", "encoder", (vocab_size, d), fan_in=d)
        self.pos_emb = params.weight("encoder.pos_emb", "encoder", (cfg.max_len, d), fan_in=d)
        self.seg_emb = params.weight("encoder.seg_emb", "encoder", (cfg.max_sentences, d), fan_in=d)
        self.layers = []
        for i in range(cfg.layers):
            pre = f"encoder.layer{i}"
            self.layers.append(
                {
                    "wq": params.weight(f"{pre}.wq", "encoder", (d, d)),
                    "wk": params.weight(f"{pre}.wk", "encoder", (d, d)),
                    "wv": params.weight(f"{pre}.wv", "encoder", (d, d)),
                    "wo": params.weight(f"{pre}.wo", "encoder", (d, d)),
                    "bq": params.zeros(f"{pre}.bq", "encoder", (d,)),
                    "bk": params.zeros(f"{pre}.bk", "encoder", (d,)),
                    "bv": params.zeros(f"{pre}.bv", "encoder", (d,)),
                    "bo": params.zeros(f"{pre}.bo", "encoder", (d,)),
                    "ln1_g": params.ones(f"{pre}.ln1_g", "encoder", (d,)),
                    "ln1_b": params.zeros(f"{pre}.ln1_b", "encoder", (d,)),
                    "fw1": params.weight(f"{pre}.fw1", "encoder", (d, hid)),
                    "fb1": params.zeros(f"{pre}.fb1", "encoder", (hid,)),
                    "fw2": params.weight(f"{pre}.fw2", "encoder", (hid, d)),
                    "fb2": params.zeros(f"{pre}.fb2", "encoder", (d,)),
                    "ln2_g": params.ones(f"{pre}.ln2_g", "encoder", (d,)),
                    "ln2_b": params.zeros(f"{pre}.ln2_b", "encoder", (d,)),
                }
            )

    def forward(self, ids: np.ndarray, segments: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        ids = np.asarray(ids, dtype=np.int64)
        length = len(ids)
        if ids.size and ids.max() >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} overflows vocabulary of {self.vocab_size}")
        if length > self.cfg.max_len:
            raise ValueError(f"sequence of {length} tokens exceeds max_len {self.cfg.max_len}")
        if segments is None:
            segments = np.zeros(length, dtype=np.int64)
        segments = np.asarray(segments, dtype=np.int64)
        if segments.shape != (length,):
            raise ValueError("segments must align with the token sequence")
        if segments.size and segments.max() >= self.cfg.max_sentences:
            raise ValueError(
                f"sentence index {int(segments.max())} exceeds max_sentences {self.cfg.max_sentences}"
            )
        heads, hd, d = self.cfg.heads, self.head_dim, self.cfg.dim
        scale = 1.0 / np.sqrt(hd)

        h = (
            tk.take(self.tok_emb, ids)
            + tk.take(self.pos_emb, np.arange(length))
            + tk.take(self.seg_emb, segments)
        )
        attn = None
        for layer in self.layers:
            def split(x):
                return x.reshape(length, heads, hd).transpose((1, 0, 2))

            q = split(h @ layer["wq"] + layer["bq"])
            k = split(h @ layer["wk"] + layer["bk"])
            v = split(h @ layer["wv"] + layer["bv"])
            scores = tk.matmul(q, k.transpose((0, 2, 1))) * scale
            attn = tk.softmax(scores, axis=-1)
            ctx = tk.matmul(attn, v).transpose((1, 0, 2)).reshape(length, d)
            h = tk.layer_norm(h + ctx @ layer["wo"] + layer["bo"], layer["ln1_g"], layer["ln1_b"])
            f = tk.tanh(h @ layer["fw1"] + layer["fb1"]) @ layer["fw2"] + layer["fb2"]
            h = tk.layer_norm(h + f, layer["ln2_g"], layer["ln2_b"])
        return h, attn


@dataclass
class EncodedDocument:
    doc: Document
    embeddings: Tensor  # (L', d)
    attention: Tensor  # (heads, L', L'), final layer
    attention_avg: Tensor = field(init=False)  # (L', L'), head-averaged
    marker_positions: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        self.attention_avg = self.attention.mean(axis=0)

    @property
    def length(self) -> int:
        return self.embeddings.shape[0]


def encode_document(encoder: TokenEncoder, vocab: Vocab, doc: Document) -> EncodedDocument:
    marked, positions, segments = mark_mentions(doc)
    ids = vocab.encode(marked)
    h, attn = encoder.forward(ids, np.asarray(segments))
    return EncodedDocument(doc, h, attn, marker_positions=positions)


def _marker_indices(enc: EncodedDocument, entity: Entity) -> np.ndarray:
    if not entity.mentions:
        raise ValueError(f"entity {entity.index} has no mentions to pool")
    return np.array(
        [enc.marker_positions[(entity.index, mi)] for mi in range(len(entity.mentions))],
        dtype=np.int64,
    )


def entity_embedding(enc: EncodedDocument, entity: Entity) -> Tensor:
    """Elementwise log-sum-exp over the entity's start-marker embeddings."""
    rows = tk.take(enc.embeddings, _marker_indices(enc, entity))
    return tk.logsumexp(rows, axis=0)


def entity_attention(enc: EncodedDocument, entity: Entity) -> Tensor:
    """Mean of the entity's start-marker attention rows, renormalized to sum 1."""
    rows = tk.take(enc.attention_avg, _marker_indices(enc, entity))
    pooled = rows.mean(axis=0)
    return pooled / pooled.sum()


def entity_panel(enc: EncodedDocument) -> tuple[Tensor, Tensor]:
    """Stacked entity embeddings (N, d) and attention profiles (N, L')."""
    embs = tk.stack([entity_embedding(enc, e) for e in enc.doc.entities], axis=0)
    atts = tk.stack([entity_attention(enc, e) for e in enc.doc.entities], axis=0)
    return embs, atts


def local_context(enc: EncodedDocument, e_s: Entity, e_o: Entity) -> Tensor:
    """Document embeddings weighted by the renormalized product of the two
    entities' attention profiles; uniform weights when the profiles have no
    shared support."""
    a_s = entity_attention(enc, e_s)
    a_o = entity_attention(enc, e_o)
    prod = a_s * a_o
    denom = prod.sum()
    if float(denom.data) < CONTEXT_EPS:
        weights = Tensor(np.full(enc.length, 1.0 / enc.length))
    else:
        weights = prod / denom
    return tk.matmul(weights.reshape(1, enc.length), enc.embeddings).reshape(enc.embeddings.shape[1])


def local_context_batch(
    enc: EncodedDocument, att_panel: Tensor, s_idx: np.ndarray, o_idx: np.ndarray
) -> Tensor:
    """local_context for many ordered pairs at once: returns (P, d)."""
    a_s = tk.take(att_panel, s_idx)
    a_o = tk.take(att_panel, o_idx)
    prod = a_s * a_o
    denom = prod.sum(axis=1, keepdims=True)
    degenerate = denom.data[:, 0] < CONTEXT_EPS
    if degenerate.any():
        keep = Tensor((~degenerate).astype(float)[:, None])
        fall = degenerate.astype(float)[:, None]
        uniform = np.full((len(s_idx), enc.length), 1.0 / enc.length)
        weights = (prod / (denom + Tensor(fall))) * keep + Tensor(uniform * fall)
    else:
        weights = prod / denom
    p, length = weights.shape
    ctx = tk.matmul(weights.reshape(p, 1, length), enc.embeddings)
    return ctx.reshape(p, enc.embeddings.shape[1])
