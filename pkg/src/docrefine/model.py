"""Full model: encoder + preliminary classifier + refinement stack + predictor.

One object owns the parameter registry (grouped encoder/base/inference), the
token vocabulary and the relation id mapping, and provides document-level
prediction with a configurable number of refinement rounds. Checkpoints
round-trip bitwise: reloading reproduces forward outputs exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .base_module import BaseConfig, BaseModule, PairMatrices, decide_all
from .documents import Document
from .encoder import EncodedDocument, EncoderConfig, TokenEncoder, Vocab, encode_document
from .inference import InferenceConfig, InferenceModule
from .losses import ContrastiveHead
from .params import ParameterSet

Prediction = tuple[str, int, int, str]


@dataclass
class ModelConfig:
    dim: int = 64
    rel_dim: int = 64
    encoder_layers: int = 2
    encoder_heads: int = 4
    encoder_ffn_hidden: int = 128
    max_len: int = 256
    inference_layers: int = 2  # refinement layers per pass
    iterations: int = 3  # refinement rounds at prediction time
    full_attention: bool = False
    no_fusion: bool = False
    carry_features: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class RelationExtractor:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, relations: list[str], seed: int):
        self.cfg = cfg
        self.vocab = vocab
        self.relations = list(relations)
        self.rel_to_id = {r: i + 1 for i, r in enumerate(self.relations)}
        self.seed = seed
        self.params = ParameterSet(np.random.default_rng(seed))
        self.encoder = TokenEncoder(
            vocab.size,
            EncoderConfig(
                dim=cfg.dim,
                layers=cfg.encoder_layers,
                heads=cfg.encoder_heads,
                ffn_hidden=cfg.encoder_ffn_hidden,
                max_len=cfg.max_len,
            ),
            self.params,
        )
        self.base = BaseModule(
            BaseConfig(dim=cfg.dim, rel_dim=cfg.rel_dim, num_relations=len(self.relations)),
            self.params,
        )
        self.inference = InferenceModule(
            InferenceConfig(
                dim=cfg.dim,
                rel_dim=cfg.rel_dim,
                num_relations=len(self.relations),
                num_layers=cfg.inference_layers,
                iterations=cfg.iterations,
                full_attention=cfg.full_attention,
                no_fusion=cfg.no_fusion,
                carry_features=cfg.carry_features,
            ),
            self.params,
        )
        self.predictor = ContrastiveHead(cfg.dim + cfg.rel_dim, self.params)

    # ------------------------------------------------------------------
    # forward passes

    def encode(self, doc: Document) -> EncodedDocument:
        return encode_document(self.encoder, self.vocab, doc)

    def base_forward(self, doc: Document) -> tuple[EncodedDocument, PairMatrices]:
        enc = self.encode(doc)
        return enc, self.base.build_pair_matrices(enc)

    def relation_name(self, class_id: int) -> str:
        return self.relations[class_id - 1]

    def _decisions_to_predictions(
        self, doc: Document, pm: PairMatrices, logits: np.ndarray
    ) -> set[Prediction]:
        out = set()
        for cell, decided in zip(pm.cells, decide_all(logits)):
            for r in decided:
                out.add((doc.doc_id, cell[0], cell[1], self.relation_name(r)))
        return out

    def predict_document(self, doc: Document, k_iterations: int | None = None) -> set[Prediction]:
        trajectory = self.prediction_trajectory(doc, k_iterations)
        return trajectory[-1]

    def prediction_trajectory(
        self, doc: Document, k_iterations: int | None = None
    ) -> list[set[Prediction]]:
        """Predicted fact sets after 0..K refinement rounds."""
        k = self.cfg.iterations if k_iterations is None else k_iterations
        _, pm = self.base_forward(doc)
        logit_rounds = self.inference.iterate(self.base, pm, k)
        return [self._decisions_to_predictions(doc, pm, logits) for logits in logit_rounds]

    # ------------------------------------------------------------------
    # persistence

    def _meta(self) -> dict:
        return {
            "config": self.cfg.to_dict(),
            "vocab_tokens": self.vocab.tokens(),
            "relations": self.relations,
            "seed": self.seed,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self._meta(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path, step: int = 0, rng_state: dict | None = None) -> None:
        meta = self._meta()
        meta["step"] = step
        meta["rng_state"] = rng_state
        meta["config_hash"] = self.config_hash()
        arrays = {f"param/{name}": value for name, value in self.params.state_dict().items()}
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["RelationExtractor", dict]:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            state = {
                name[len("param/"):]: data[name]
                for name in data.files
                if name.startswith("param/")
            }
        model = cls(
            ModelConfig.from_dict(meta["config"]),
            Vocab(meta["vocab_tokens"]),
            meta["relations"],
            seed=meta["seed"],
        )
        model.params.load_state_dict(state)
        if model.config_hash() != meta["config_hash"]:
            raise ValueError(f"checkpoint {path} does not match its recorded configuration")
        return model, meta
