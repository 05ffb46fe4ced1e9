"""Reading and writing the DocRED-convention JSON formats.

Input documents: a JSON array of records with fields
  title:      string
  sents:      list of sentences, each a list of token strings
  vertexSet:  list of entities, each a list of mentions
              {name, sent_id, pos: [start, end), type}
  labels:     list of {h, t, r, evidence} (may be absent or empty)

Submissions: a JSON array of {title, h_idx, t_idx, r}.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

from .documents import Document, Entity, Mention, RelationFact

Prediction = tuple[str, int, int, str]


def _sentence_offsets(sents: list[list[str]]) -> list[tuple[int, int]]:
    spans = []
    pos = 0
    for sent in sents:
        spans.append((pos, pos + len(sent)))
        pos += len(sent)
    return spans


def document_from_record(rec: dict) -> Document:
    title = rec.get("title")
    if not isinstance(title, str) or not title:
        raise ValueError("document record missing a 'title' string")
    sents = rec.get("sents")
    if not isinstance(sents, list) or not all(isinstance(s, list) for s in sents):
        raise ValueError(f"doc {title!r}: 'sents' must be a list of token lists")
    spans = _sentence_offsets(sents)
    tokens = [tok for sent in sents for tok in sent]

    vertex_set = rec.get("vertexSet")
    if not isinstance(vertex_set, list):
        raise ValueError(f"doc {title!r}: 'vertexSet' must be a list")
    entities = []
    for i, cluster in enumerate(vertex_set):
        if not isinstance(cluster, list) or not cluster:
            raise ValueError(f"doc {title!r}: vertexSet[{i}] must be a nonempty mention list")
        mentions = []
        for m in cluster:
            try:
                sent_id = int(m["sent_id"])
                lo, hi = int(m["pos"][0]), int(m["pos"][1])
            except (KeyError, TypeError, IndexError) as exc:
                raise ValueError(f"doc {title!r}: vertexSet[{i}] has a malformed mention") from exc
            if not (0 <= sent_id < len(sents)):
                raise ValueError(f"doc {title!r}: vertexSet[{i}] sent_id {sent_id} out of range")
            if not (0 <= lo < hi <= len(sents[sent_id])):
                raise ValueError(
                    f"doc {title!r}: vertexSet[{i}] pos [{lo},{hi}) outside sentence {sent_id}"
                )
            base = spans[sent_id][0]
            mentions.append(Mention(base + lo, base + hi, sent_id))
        entities.append(
            Entity(
                index=i,
                mentions=mentions,
                name=str(cluster[0].get("name", f"entity_{i}")),
                type_tag=str(cluster[0].get("type", "")),
            )
        )

    facts = []
    for j, lab in enumerate(rec.get("labels", []) or []):
        try:
            h, t, r = int(lab["h"]), int(lab["t"]), str(lab["r"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"doc {title!r}: labels[{j}] is malformed") from exc
        evidence = frozenset(int(e) for e in lab.get("evidence", []))
        for e in evidence:
            if not (0 <= e < len(sents)):
                raise ValueError(f"doc {title!r}: labels[{j}] evidence {e} out of range")
        facts.append(RelationFact(h, t, r, evidence))

    doc = Document(title, tokens, spans, entities, facts)
    doc.validate()
    return doc


def document_to_record(doc: Document) -> dict:
    sents = [doc.tokens[s:e] for s, e in doc.sentence_spans]
    vertex_set = []
    for ent in doc.entities:
        cluster = []
        for m in ent.mentions:
            base = doc.sentence_spans[m.sentence_index][0]
            cluster.append(
                {
                    "name": ent.name,
                    "sent_id": m.sentence_index,
                    "pos": [m.start - base, m.end - base],
                    "type": ent.type_tag,
                }
            )
        vertex_set.append(cluster)
    labels = [
        {"h": f.head, "t": f.tail, "r": f.relation, "evidence": sorted(f.evidence)}
        for f in doc.gold_facts
    ]
    return {"title": doc.doc_id, "sents": sents, "vertexSet": vertex_set, "labels": labels}


def load_docred(path: str | Path) -> list[Document]:
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ValueError(f"{path}: expected a JSON array of documents")
    return [document_from_record(rec) for rec in records]


def save_docred(docs: Iterable[Document], path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump([document_to_record(d) for d in docs], fh)


def export_submission(predictions: Iterable[Prediction], path: str | Path) -> None:
    """Deduplicated, deterministically ordered {title, h_idx, t_idx, r} records."""
    unique = sorted(set(predictions))
    records = [{"title": t, "h_idx": h, "t_idx": o, "r": r} for t, h, o, r in unique]
    with open(path, "w") as fh:
        json.dump(records, fh)


def load_submission(path: str | Path) -> set[Prediction]:
    with open(path) as fh:
        records = json.load(fh)
    out = set()
    for rec in records:
        try:
            out.add((str(rec["title"]), int(rec["h_idx"]), int(rec["t_idx"]), str(rec["r"])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed submission record {rec!r}") from exc
    return out
