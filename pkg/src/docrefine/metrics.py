"""Micro F1 plus the filtered variants used for document-level relation sets.

All scores run over (doc_id, head, tail, relation) tuples. The ignored-train
variant drops every predicted-and-gold fact whose (head name, tail name,
relation) triple already occurs in the training labels; intra and inter
slices partition facts by whether any sentence mentions both entities; the
inference slice keeps only facts participating in a two-hop pattern
(h,r1,o), (o,r2,t), (h,r3,t) fully present in the gold labels, with
predictions filtered by their (head, tail) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .documents import Document

Prediction = tuple[str, int, int, str]
NameTriple = tuple[str, str, str]


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    ign_f1: float
    intra_f1: float
    inter_f1: float
    infer_f1: float
    conclusion_f1: float
    counts: dict[str, tuple[int, int, int]] = field(default_factory=dict)  # slice -> tp, fp, fn
    infer_scope_size: int = 0
    conclusion_scope_size: int = 0

    def to_flat_dict(self) -> dict[str, float]:
        out = {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "ign_f1": self.ign_f1,
            "intra_f1": self.intra_f1,
            "inter_f1": self.inter_f1,
            "infer_f1": self.infer_f1,
            "conclusion_f1": self.conclusion_f1,
            "infer_scope_size": float(self.infer_scope_size),
            "conclusion_scope_size": float(self.conclusion_scope_size),
        }
        for name, (tp, fp, fn) in sorted(self.counts.items()):
            out[f"{name}_tp"] = float(tp)
            out[f"{name}_fp"] = float(fp)
            out[f"{name}_fn"] = float(fn)
        return out


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _set_counts(pred: set, gold: set) -> tuple[int, int, int]:
    tp = len(pred & gold)
    return tp, len(pred) - tp, len(gold) - tp


def train_fact_names(train_docs: Iterable[Document]) -> frozenset[NameTriple]:
    """Name triples of every training-split gold fact."""
    out = set()
    for doc in train_docs:
        for f in doc.gold_facts:
            out.add((doc.entities[f.head].name, doc.entities[f.tail].name, f.relation))
    return frozenset(out)


def two_hop_scope(doc: Document) -> tuple[set[tuple[int, int, str]], set[tuple[int, int, str]]]:
    """(all pattern facts, conclusion-slot facts) for one document's gold set."""
    gold = doc.gold_tuples()
    by_head: dict[int, list[tuple[int, str]]] = {}
    for h, t, r in gold:
        by_head.setdefault(h, []).append((t, r))
    pattern: set[tuple[int, int, str]] = set()
    conclusions: set[tuple[int, int, str]] = set()
    for h, o, r1 in gold:
        for t, r2 in by_head.get(o, ()):
            if t == h:
                continue
            closing = [(t2, r3) for t2, r3 in by_head.get(h, ()) if t2 == t]
            for _, r3 in closing:
                pattern.add((h, o, r1))
                pattern.add((o, t, r2))
                pattern.add((h, t, r3))
                conclusions.add((h, t, r3))
    return pattern, conclusions


def infer_f1(
    predictions: Iterable[Prediction],
    documents: Sequence[Document],
    conclusions_only: bool = False,
) -> tuple[float, int]:
    """F1 restricted to two-hop pattern facts; returns (f1, gold scope size).

    A zero scope (no pattern in gold) reports 0.0 with scope size 0.
    """
    docs = {d.doc_id: d for d in documents}
    gold_scope: set[Prediction] = set()
    scope_pairs: set[tuple[str, int, int]] = set()
    for doc in documents:
        pattern, conclusions = two_hop_scope(doc)
        chosen = conclusions if conclusions_only else pattern
        for h, t, r in chosen:
            gold_scope.add((doc.doc_id, h, t, r))
            scope_pairs.add((doc.doc_id, h, t))
    pred_scope = {
        p for p in set(predictions)
        if p[0] in docs and (p[0], p[1], p[2]) in scope_pairs
    }
    if not gold_scope:
        return 0.0, 0
    _, _, f1 = prf(*_set_counts(pred_scope, gold_scope))
    return f1, len(gold_scope)


def f1_scores(
    predictions: Iterable[Prediction],
    documents: Sequence[Document],
    train_facts: frozenset[NameTriple] = frozenset(),
    known_relations: Iterable[str] | None = None,
) -> MetricReport:
    docs = {d.doc_id: d for d in documents}
    known_relations = (
        set(known_relations)
        if known_relations is not None
        else {f.relation for d in documents for f in d.gold_facts}
    )

    pred_set = set()
    for p in predictions:
        doc_id, h, t, r = p
        if doc_id not in docs:
            raise ValueError(f"prediction for unknown document {doc_id!r}")
        doc = docs[doc_id]
        if not (0 <= h < doc.num_entities and 0 <= t < doc.num_entities):
            raise ValueError(f"prediction {p} references a missing entity")
        if known_relations and r not in known_relations:
            raise ValueError(f"prediction {p} uses unknown relation id {r!r}")
        pred_set.add(p)

    gold_set = {(d.doc_id, f.head, f.tail, f.relation) for d in documents for f in d.gold_facts}

    def names(p: Prediction) -> NameTriple:
        doc = docs[p[0]]
        return (doc.entities[p[1]].name, doc.entities[p[2]].name, p[3])

    counts: dict[str, tuple[int, int, int]] = {}
    counts["overall"] = _set_counts(pred_set, gold_set)
    precision, recall, f1 = prf(*counts["overall"])

    pred_kept = {p for p in pred_set if names(p) not in train_facts}
    gold_kept = {g for g in gold_set if names(g) not in train_facts}
    counts["ign"] = _set_counts(pred_kept, gold_kept)
    _, _, ign_f1 = prf(*counts["ign"])

    def is_intra(p: Prediction) -> bool:
        return docs[p[0]].entities_share_sentence(p[1], p[2])

    pred_intra = {p for p in pred_set if is_intra(p)}
    gold_intra = {g for g in gold_set if is_intra(g)}
    counts["intra"] = _set_counts(pred_intra, gold_intra)
    counts["inter"] = _set_counts(pred_set - pred_intra, gold_set - gold_intra)
    _, _, intra_f1 = prf(*counts["intra"])
    _, _, inter_f1 = prf(*counts["inter"])

    infer, infer_size = infer_f1(pred_set, documents)
    conclusion, conclusion_size = infer_f1(pred_set, documents, conclusions_only=True)

    return MetricReport(
        precision=precision,
        recall=recall,
        f1=f1,
        ign_f1=ign_f1,
        intra_f1=intra_f1,
        inter_f1=inter_f1,
        infer_f1=infer,
        conclusion_f1=conclusion,
        counts=counts,
        infer_scope_size=infer_size,
        conclusion_scope_size=conclusion_size,
    )


def write_flat_report(report: MetricReport, path) -> None:
    with open(path, "w") as fh:
        for key, value in report.to_flat_dict().items():
            fh.write(f"{key}={value!r}\n")
