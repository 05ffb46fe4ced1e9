"""Document data model: tokens, sentences, entity mentions, gold facts."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Mention:
    start: int  # global token offset, inclusive
    end: int  # exclusive
    sentence_index: int


@dataclass
class Entity:
    index: int
    mentions: list[Mention]
    name: str = ""
    type_tag: str = ""


@dataclass(frozen=True)
class RelationFact:
    head: int
    tail: int
    relation: str
    evidence: frozenset[int] = frozenset()


@dataclass
class Document:
    doc_id: str
    tokens: list[str]
    sentence_spans: list[tuple[int, int]]
    entities: list[Entity]
    gold_facts: list[RelationFact] = field(default_factory=list)

    def validate(self) -> None:
        n_tok = len(self.tokens)
        for s, e in self.sentence_spans:
            if not (0 <= s < e <= n_tok):
                raise ValueError(f"doc {self.doc_id!r}: sentence span [{s},{e}) out of range")
        for ent in self.entities:
            if not ent.mentions:
                raise ValueError(f"doc {self.doc_id!r}: entity {ent.index} has no mentions")
            for m in ent.mentions:
                if m.start >= m.end:
                    raise ValueError(
                        f"doc {self.doc_id!r}: entity {ent.index} mention span "
                        f"[{m.start},{m.end}) is empty"
                    )
                span = self.sentence_spans[m.sentence_index]
                if not (span[0] <= m.start and m.end <= span[1]):
                    raise ValueError(
                        f"doc {self.doc_id!r}: entity {ent.index} mention "
                        f"[{m.start},{m.end}) not inside sentence {m.sentence_index}"
                    )
        n_ent = len(self.entities)
        for fact in self.gold_facts:
            if fact.head == fact.tail:
                raise ValueError(f"doc {self.doc_id!r}: fact relates an entity to itself")
            if not (0 <= fact.head < n_ent and 0 <= fact.tail < n_ent):
                raise ValueError(
                    f"doc {self.doc_id!r}: fact ({fact.head},{fact.tail},{fact.relation}) "
                    f"references a missing entity"
                )

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    def entities_share_sentence(self, a: int, b: int) -> bool:
        """True iff some sentence contains a mention of both entities."""
        sents_a = {m.sentence_index for m in self.entities[a].mentions}
        sents_b = {m.sentence_index for m in self.entities[b].mentions}
        return bool(sents_a & sents_b)

    def gold_tuples(self) -> set[tuple[int, int, str]]:
        return {(f.head, f.tail, f.relation) for f in self.gold_facts}
