"""Two-stage training, evaluation with refinement rounds, and reporting.

Stage 1 trains the encoder and the preliminary classifier alone with the
adaptive threshold loss. Stage 2 trains everything: the refinement stack
learns to correct noise-corrupted preliminary predictions in a single pass
(refinement is only iterated at prediction time), the base groups move at a
deliberately small learning rate (or not at all when frozen), and the
alignment loss on two noised, slot-swapped runs keeps the stack from leaning
on the feature matrix alone. Both stages keep the checkpoint that scored the
best dev micro-F1.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .docred import load_docred
from .documents import Document
from .losses import (
    adaptive_threshold_loss,
    gold_positive_sets,
    stage2_forward,
    stage2_objective,
)
from .metrics import MetricReport, f1_scores, train_fact_names
from .model import ModelConfig, Prediction, RelationExtractor
from .optim import AdamW, warmup_linear_lr
from .encoder import Vocab
from .tensor import Tape


@dataclass
class Corpus:
    train: list[Document]
    dev: list[Document]
    test: list[Document]

    def __post_init__(self):
        self.relations = sorted({f.relation for d in self.train for f in d.gold_facts})
        self.train_facts = train_fact_names(self.train)

    @classmethod
    def load(cls, directory) -> "Corpus":
        directory = Path(directory)
        return cls(
            train=load_docred(directory / "train.json"),
            dev=load_docred(directory / "dev.json"),
            test=load_docred(directory / "test.json"),
        )

    def split(self, name: str) -> list[Document]:
        if name not in ("train", "dev", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class TrainPlan:
    stage: int
    seed: int
    epochs: int = 30
    batch_size: int = 8
    encoder_lr: float = 5e-5  # stage 1
    classifier_lr: float = 1e-4  # stage 1
    base_lr: float = 1e-5  # stage 2, encoder + base groups
    inference_lr: float = 1e-4  # stage 2
    warmup_frac: float = 0.06
    weight_decay: float = 0.01
    contrastive_weight: float = 1.0
    noise_low: float = 0.0
    noise_high: float = 0.4
    eval_iterations: int = 3  # refinement rounds for dev selection (stage 2)
    freeze_base: bool = False
    no_contrastive: bool = False
    use_base_loss: bool = True
    use_refined_loss: bool = True

    def validate(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.stage == 2 and not self.freeze_base and not self.base_lr < self.inference_lr:
            raise ValueError("stage 2 keeps the base module slow: base_lr < inference_lr")
        if not (0.0 <= self.noise_low <= self.noise_high <= 1.0):
            raise ValueError("noise bounds must satisfy 0 <= low <= high <= 1")


@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)  # per optimizer step
    dev_f1: list[float] = field(default_factory=list)  # per epoch
    noise_rates: list[float] = field(default_factory=list)
    best_dev_f1: float = -1.0
    best_epoch: int = -1
    seconds: float = 0.0


def build_model(corpus: Corpus, seed: int, cfg: ModelConfig | None = None) -> RelationExtractor:
    cfg = cfg or ModelConfig()
    vocab = Vocab.from_documents(corpus.train)
    return RelationExtractor(cfg, vocab, corpus.relations, seed=seed)


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(count)
    for lo in range(0, count, batch_size):
        yield order[lo:lo + batch_size]


def _keep_best(model, history, epoch, dev_f1, best_state):
    history.dev_f1.append(dev_f1)
    if dev_f1 > history.best_dev_f1:
        history.best_dev_f1 = dev_f1
        history.best_epoch = epoch
        return model.params.state_dict()
    return best_state


def train_stage1(model: RelationExtractor, plan: TrainPlan, corpus: Corpus,
                 quiet: bool = True) -> TrainHistory:
    plan.validate()
    if plan.stage != 1:
        raise ValueError("stage-1 trainer got a stage-2 plan")
    if not corpus.train:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(plan.seed)
    trainable = [p for p in model.params if p.group in ("encoder", "base")]
    opt = AdamW(trainable, weight_decay=plan.weight_decay)
    steps_per_epoch = math.ceil(len(corpus.train) / plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch

    history = TrainHistory()
    best_state = None
    started = time.monotonic()
    step = 0
    for epoch in range(plan.epochs):
        for batch in _batches(len(corpus.train), plan.batch_size, rng):
            step += 1
            with Tape() as tape:
                loss = None
                pairs = 0
                for i in batch:
                    doc = corpus.train[i]
                    _, pm = model.base_forward(doc)
                    positives = gold_positive_sets(doc, pm.cells, model.rel_to_id)
                    term = adaptive_threshold_loss(pm.logits, positives, reduction="sum")
                    loss = term if loss is None else loss + term
                    pairs += pm.num_pairs
                loss = loss * (1.0 / pairs)
            grads = tape.backward(loss)
            scale = warmup_linear_lr(step, total_steps, 1.0, plan.warmup_frac)
            opt.step(grads, {"encoder": plan.encoder_lr * scale,
                             "base": plan.classifier_lr * scale})
            history.losses.append(float(loss.data))
        dev_f1 = evaluate(model, corpus.dev, 0, corpus.train_facts).f1
        best_state = _keep_best(model, history, epoch, dev_f1, best_state)
        if not quiet:
            print(f"stage1 epoch {epoch}: loss={history.losses[-1]:.4f} dev_f1={dev_f1:.4f}")
    if best_state is not None:
        model.params.load_state_dict(best_state)
    history.seconds = time.monotonic() - started
    return history


def train_stage2(model: RelationExtractor, plan: TrainPlan, corpus: Corpus,
                 quiet: bool = True) -> TrainHistory:
    plan.validate()
    if plan.stage != 2:
        raise ValueError("stage-2 trainer got a stage-1 plan")
    if not corpus.train:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(plan.seed)
    opt = AdamW(list(model.params), weight_decay=plan.weight_decay)
    steps_per_epoch = math.ceil(len(corpus.train) / plan.batch_size)
    total_steps = plan.epochs * steps_per_epoch
    base_lr = 0.0 if plan.freeze_base else plan.base_lr

    history = TrainHistory()
    best_state = None
    started = time.monotonic()
    step = 0
    for epoch in range(plan.epochs):
        for batch in _batches(len(corpus.train), plan.batch_size, rng):
            step += 1
            with Tape() as tape:
                base_sum = None
                refined_sum = None
                align_sum = None
                pairs = 0
                for i in batch:
                    doc = corpus.train[i]
                    _, pm = model.base_forward(doc)
                    positives = gold_positive_sets(doc, pm.cells, model.rel_to_id)
                    refined_logits, align, rates = stage2_forward(
                        model.inference,
                        model.base.rel_emb,
                        pm.features,
                        pm.relation_ids,
                        pm.n,
                        model.predictor,
                        rng,
                        with_contrastive=not plan.no_contrastive,
                        noise_low=plan.noise_low,
                        noise_high=plan.noise_high,
                    )
                    history.noise_rates.extend(rates)
                    pairs += pm.num_pairs
                    if plan.use_base_loss:
                        term = adaptive_threshold_loss(pm.logits, positives, reduction="sum")
                        base_sum = term if base_sum is None else base_sum + term
                    if plan.use_refined_loss:
                        term = adaptive_threshold_loss(refined_logits, positives, reduction="sum")
                        refined_sum = term if refined_sum is None else refined_sum + term
                    if align is not None:
                        align_sum = align if align_sum is None else align_sum + align
                loss = stage2_objective(
                    base_sum * (1.0 / pairs) if base_sum is not None else None,
                    refined_sum * (1.0 / pairs) if refined_sum is not None else None,
                    align_sum * (1.0 / len(batch)) if align_sum is not None else None,
                    plan.contrastive_weight,
                )
            grads = tape.backward(loss)
            scale = warmup_linear_lr(step, total_steps, 1.0, plan.warmup_frac)
            opt.step(grads, {"encoder": base_lr * scale,
                             "base": base_lr * scale,
                             "inference": plan.inference_lr * scale})
            history.losses.append(float(loss.data))
        dev_f1 = evaluate(model, corpus.dev, plan.eval_iterations, corpus.train_facts).f1
        best_state = _keep_best(model, history, epoch, dev_f1, best_state)
        if not quiet:
            print(f"stage2 epoch {epoch}: loss={history.losses[-1]:.4f} dev_f1={dev_f1:.4f}")
    if best_state is not None:
        model.params.load_state_dict(best_state)
    history.seconds = time.monotonic() - started
    return history


def predict(model: RelationExtractor, docs: list[Document],
            k_iterations: int | None = None) -> list[Prediction]:
    if k_iterations is not None and k_iterations < 0:
        raise ValueError("iteration count must be >= 0")
    out: set[Prediction] = set()
    for doc in docs:
        out |= model.predict_document(doc, k_iterations)
    return sorted(out)


def evaluate(model: RelationExtractor, docs: list[Document], k_iterations: int | None,
             train_facts=frozenset()) -> MetricReport:
    return f1_scores(predict(model, docs, k_iterations), docs, train_facts,
                     known_relations=model.relations)


def iteration_report(model: RelationExtractor, docs: list[Document], k_iterations: int,
                     train_facts=frozenset()) -> list[MetricReport]:
    """One metric report per refinement round k = 0..K."""
    per_round: list[set[Prediction]] = [set() for _ in range(k_iterations + 1)]
    for doc in docs:
        for k, preds in enumerate(model.prediction_trajectory(doc, k_iterations)):
            per_round[k] |= preds
    return [
        f1_scores(sorted(preds), docs, train_facts, known_relations=model.relations)
        for preds in per_round
    ]
