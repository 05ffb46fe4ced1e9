"""Synthetic compositional corpus: surfaced premise facts, hidden conclusions.

Every document plants chains a -> b -> c whose two premise facts are
expressed by unambiguous keyword patterns (mention, keyword, mention) inside
single sentences. The chain's conclusion fact is added to the gold labels
but never given any surface signal, so it is recoverable only through the
composition rule. Gold labels are closed under the rules, which keeps the
generator sound: every conclusion's premises are present in the same
document.

Three measures keep the conclusions genuinely out of reach of surface-level
shortcuts. Each entity gets two alias tokens drawn fresh per document from a
shared pool (the same surface token names different entities in different
documents), and the bridge entity's two premise mentions always use
different aliases: token identity therefore carries no cluster information,
and chaining across sentences requires the entity clusters themselves. Both
chains in a document use the same rule, so crossed endpoints form false
bridges that only pair-level reasoning can reject. And lone premise decoys
(a premise keyword pattern whose chain never completes) break the fallback
cue "some premise keyword near each endpoint".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .documents import Document, Entity, Mention, RelationFact

_ENTITY_POOL = [
    "arlo", "bree", "cato", "dawn", "enzo", "faye", "gus",
    "hana", "ivo", "jude", "kira", "liam", "mona", "nils",
]
_FILLER_POOL = ["the", "a", "of", "and", "near", "was", "then", "it"]


@dataclass(frozen=True)
class CompositionRule:
    premise_a: str
    premise_b: str
    conclusion: str


@dataclass
class SynthConfig:
    num_train: int = 400
    num_dev: int = 100
    num_test: int = 100
    entities_per_doc: int = 6
    relation_vocab_size: int = 8
    composition_rules: list[CompositionRule] = field(
        default_factory=lambda: [
            CompositionRule("R1", "R2", "R3"),
            CompositionRule("R4", "R5", "R6"),
        ]
    )
    chains_per_doc: int = 2
    decoy_premises: int = 2  # lone premise facts whose chain never completes
    target_inferable_fraction: float = 0.2
    surface_noise: float = 0.1  # chance of a dangling keyword distractor sentence
    seed: int = 0

    def relations(self) -> list[str]:
        return [f"R{i + 1}" for i in range(self.relation_vocab_size)]

    def conclusion_relations(self) -> set[str]:
        return {rule.conclusion for rule in self.composition_rules}

    def surfaced_relations(self) -> list[str]:
        """Relations allowed to appear with direct surface patterns."""
        return [r for r in self.relations() if r not in self.conclusion_relations()]

    def free_relations(self) -> list[str]:
        """Surfaced relations not used as a rule premise: safe padding facts
        that can never complete a composition chain."""
        premises = {r for rule in self.composition_rules for r in (rule.premise_a, rule.premise_b)}
        return [r for r in self.surfaced_relations() if r not in premises]

    def validate(self) -> None:
        rels = set(self.relations())
        for rule in self.composition_rules:
            for r in (rule.premise_a, rule.premise_b, rule.conclusion):
                if r not in rels:
                    raise ValueError(f"rule relation {r!r} outside the vocabulary")
        if not 0 < self.target_inferable_fraction < 0.34:
            # each conclusion requires two surfaced premises, capping the ratio
            raise ValueError("target inferable fraction must lie in (0, 0.34)")
        if self.entities_per_doc < 3:
            raise ValueError("need at least 3 entities per document to build chains")
        if 2 * self.entities_per_doc > len(_ENTITY_POOL):
            raise ValueError(
                f"entities_per_doc {self.entities_per_doc} needs "
                f"{2 * self.entities_per_doc} alias tokens; pool has {len(_ENTITY_POOL)}"
            )
        if self.chains_per_doc < 1:
            raise ValueError("need at least one chain per document")
        if 3 * self.chains_per_doc > self.entities_per_doc:
            raise ValueError("entity-disjoint chains need 3 entities each")


def keyword_token(relation: str) -> str:
    return f"kw_{relation}"


def close_under_rules(
    facts: set[tuple[int, str, int]], rules: list[CompositionRule]
) -> set[tuple[int, str, int]]:
    """Smallest superset of facts closed under the composition rules."""
    closed = set(facts)
    changed = True
    while changed:
        changed = False
        by_head: dict[int, list[tuple[str, int]]] = {}
        for h, r, t in closed:
            by_head.setdefault(h, []).append((r, t))
        for rule in rules:
            new = set()
            for h, r, t in closed:
                if r != rule.premise_a:
                    continue
                for r2, t2 in by_head.get(t, ()):
                    if r2 == rule.premise_b and t2 != h:
                        cand = (h, rule.conclusion, t2)
                        if cand not in closed:
                            new.add(cand)
            if new:
                closed |= new
                changed = True
    return closed


def _build_document(doc_id: str, cfg: SynthConfig, rng: np.random.Generator) -> Document:
    n = cfg.entities_per_doc
    # two alias tokens per entity, assigned fresh for this document: the same
    # surface token names different entities elsewhere in the corpus
    alias_pool = list(rng.choice(_ENTITY_POOL, size=2 * n, replace=False))
    aliases = [(alias_pool[2 * e], alias_pool[2 * e + 1]) for e in range(n)]
    surfaced_rels = cfg.surfaced_relations()

    sentences: list[list[str]] = []
    mentions: list[tuple[int, int, int, int]] = []  # (entity, sentence, start, end)
    surfaced: list[tuple[int, str, int, int]] = []  # (head, relation, tail, sentence)

    def mention_token(entity: int, variant: int | None) -> str:
        v = int(rng.integers(2)) if variant is None else variant
        return aliases[entity][v]

    def add_fact_sentence(
        head: int, relation: str, tail: int,
        head_variant: int | None = None, tail_variant: int | None = None,
    ) -> None:
        sent: list[str] = []
        for _ in range(int(rng.integers(0, 3))):
            sent.append(str(rng.choice(_FILLER_POOL)))
        h_start = len(sent)
        sent.append(mention_token(head, head_variant))
        sent.append(keyword_token(relation))
        t_start = len(sent)
        sent.append(mention_token(tail, tail_variant))
        if rng.random() < 0.5:
            sent.append(str(rng.choice(_FILLER_POOL)))
        idx = len(sentences)
        sentences.append(sent)
        mentions.append((head, idx, h_start, h_start + 1))
        mentions.append((tail, idx, t_start, t_start + 1))
        surfaced.append((head, relation, tail, idx))

    # one rule per document and entity-disjoint chains: crossed endpoints
    # form bridges that never close, so only entity-cluster reasoning tells
    # real conclusions from crossed ones
    rule = cfg.composition_rules[int(rng.integers(len(cfg.composition_rules)))]
    chain_entities = rng.permutation(n)
    bridges = set()
    for i in range(cfg.chains_per_doc):
        a, b, c = (int(x) for x in chain_entities[3 * i:3 * i + 3])
        bridges.add(b)
        # the bridge entity surfaces under its two different aliases
        first = int(rng.integers(2))
        add_fact_sentence(a, rule.premise_a, b, tail_variant=first)
        add_fact_sentence(b, rule.premise_b, c, head_variant=1 - first)

    for i in range(cfg.decoy_premises):
        relation = rule.premise_a if i % 2 == 0 else rule.premise_b
        for _ in range(20):
            head, tail = (int(x) for x in rng.choice(n, size=2, replace=False))
            # a decoy must stay a dead end: its open endpoint may not touch a
            # bridge, or the chain would complete after all
            linking = tail if relation == rule.premise_a else head
            if linking in bridges:
                continue
            if any((head, relation, tail) == (h, r, t) for h, r, t, _ in surfaced):
                continue
            add_fact_sentence(head, relation, tail)
            break

    # pad with direct facts until conclusions are the target share of gold;
    # padding relations never appear in a rule premise, so the conclusion
    # count is already final here
    planted = {(h, r, t) for h, r, t, _ in surfaced}
    num_conclusions = len(close_under_rules(planted, cfg.composition_rules) - planted)
    f = cfg.target_inferable_fraction
    want_extras = max(0.0, num_conclusions * (1.0 / f - 1.0) - len(planted))
    num_extras = int(want_extras) + (1 if rng.random() < want_extras % 1.0 else 0)
    padding_rels = cfg.free_relations() or surfaced_rels
    for _ in range(num_extras):
        head, tail = (int(x) for x in rng.choice(n, size=2, replace=False))
        relation = str(rng.choice(padding_rels))
        if any((head, relation, tail) == (h, r, t) for h, r, t, _ in surfaced):
            continue
        add_fact_sentence(head, relation, tail)

    # every entity needs a mention; group leftovers a few per sentence
    seen = {e for e, *_ in mentions}
    leftover = [e for e in range(n) if e not in seen]
    rng.shuffle(leftover)
    while leftover:
        group, leftover = leftover[:3], leftover[3:]
        sent: list[str] = []
        idx = len(sentences)
        for e in group:
            sent.append(str(rng.choice(_FILLER_POOL)))
            mentions.append((e, idx, len(sent), len(sent) + 1))
            sent.append(mention_token(e, None))
        sentences.append(sent)

    for _ in range(int(rng.integers(0, 2))):
        sentences.append([str(t) for t in rng.choice(_FILLER_POOL, size=int(rng.integers(4, 8)))])

    if rng.random() < cfg.surface_noise:
        # dangling keyword with no adjacent mentions: pattern stays incomplete
        sentences.append(
            [str(rng.choice(_FILLER_POOL)), keyword_token(str(rng.choice(surfaced_rels))),
             str(rng.choice(_FILLER_POOL))]
        )

    # shuffle sentence order; sentence order[i] moves to slot i
    order = [int(x) for x in rng.permutation(len(sentences))]
    new_index = {old: new for new, old in enumerate(order)}
    sentences = [sentences[old] for old in order]
    mentions = [(e, new_index[s], a, b) for e, s, a, b in mentions]
    surfaced = [(h, r, t, new_index[s]) for h, r, t, s in surfaced]

    spans = []
    pos = 0
    for sent in sentences:
        spans.append((pos, pos + len(sent)))
        pos += len(sent)
    tokens = [tok for sent in sentences for tok in sent]

    entities = []
    for e in range(n):
        ment = [
            Mention(spans[s][0] + a, spans[s][0] + b, s)
            for _, s, a, b in sorted(m for m in mentions if m[0] == e)
        ]
        entities.append(Entity(e, ment, name=aliases[e][0], type_tag="ENT"))

    surfaced_set = {(h, r, t) for h, r, t, _ in surfaced}
    closed = close_under_rules(surfaced_set, cfg.composition_rules)
    evidence = {(h, r, t): frozenset([s]) for h, r, t, s in surfaced}
    facts = [
        RelationFact(h, t, r, evidence.get((h, r, t), frozenset()))
        for h, r, t in sorted(closed)
    ]
    doc = Document(doc_id, tokens, spans, entities, facts)
    doc.validate()
    return doc


def _clean_document(doc_id: str, cfg: SynthConfig, rng: np.random.Generator) -> Document:
    """Build a document whose conclusion slots contain no surfaced fact.

    Surfaced facts landing in the conclusion slot of an accidental two-hop
    pattern would be trivially recoverable from their own sentence, diluting
    the inference slice; rejection keeps that slice purely rule-derived.
    """
    from .metrics import two_hop_scope

    doc = None
    for _ in range(60):
        doc = _build_document(doc_id, cfg, rng)
        _, conclusions = two_hop_scope(doc)
        surfaced = {(f.head, f.tail, f.relation) for f in doc.gold_facts if f.evidence}
        if not conclusions & surfaced:
            return doc
    return doc


def generate_synthetic(cfg: SynthConfig) -> tuple[list[Document], list[Document], list[Document]]:
    """Deterministic train/dev/test splits drawn from one seeded stream."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    splits = []
    for split, count in (("train", cfg.num_train), ("dev", cfg.num_dev), ("test", cfg.num_test)):
        splits.append([_clean_document(f"{split}_{i:04d}", cfg, rng) for i in range(count)])
    return tuple(splits)


def inferable_facts(doc: Document, cfg: SynthConfig) -> set[tuple[int, int, str]]:
    """Gold facts carrying a rule-conclusion relation (never surfaced)."""
    conclusions = cfg.conclusion_relations()
    return {(f.head, f.tail, f.relation) for f in doc.gold_facts if f.relation in conclusions}
