"""Dataset-level training entry points and ranker wrappers for the learned models."""

from __future__ import annotations

import numpy as np

from ddx.knowledge_base import KnowledgeBase
from ddx.ml.convnet import ConvNetConfig, ConvNetModel, convnet_logits, convnet_train
from ddx.ml.logreg import LRModel, lr_logits, lr_train
from ddx.ml.optim import TrainConfig, softmax
from ddx.ml.vocab import Encoder, Vocabulary, build_vocabulary
from ddx.ranking import RankedDifferential, rank_order
from ddx.simulator import Dataset, case_rng, corrupt_case, prevalent_pool


def fit_lr(train: Dataset, val: Dataset | None, kb: KnowledgeBase, lam: float = 0.01,
           config: TrainConfig | None = None, vocab: Vocabulary | None = None) -> tuple[LRModel, Vocabulary]:
    vocab = vocab or build_vocabulary(kb)
    enc = Encoder(vocab, kb)
    tr = (enc.bags(train.cases), enc.labels(train.cases))
    va = (enc.bags(val.cases), enc.labels(val.cases)) if val is not None else None
    model = lr_train(tr, va, lam=lam, config=config, n_classes=len(enc.disease_ids), disease_ids=enc.disease_ids)
    return model, vocab


def noisy_epoch_inputs(train: Dataset, kb: KnowledgeBase, enc: Encoder, config: TrainConfig):
    """Per-epoch id sequences with ``config.noise_augment`` prevalent findings injected into every case."""
    pool = prevalent_pool(kb, config.pool_size)
    cases = train.cases

    def inputs(epoch: int) -> np.ndarray:
        noisy = [
            corrupt_case(c, "prevalent_add", config.noise_augment, pool,
                         case_rng(config.seed * 100_003 + epoch, i), kb)
            for i, c in enumerate(cases)
        ]
        return enc.sequences(noisy)

    return inputs


def fit_convnet(train: Dataset, val: Dataset | None, kb: KnowledgeBase, config: TrainConfig,
                model_config: ConvNetConfig | None = None,
                vocab: Vocabulary | None = None) -> tuple[ConvNetModel, Vocabulary]:
    model_config = model_config or ConvNetConfig()
    vocab = vocab or build_vocabulary(kb)
    enc = Encoder(vocab, kb, seq_len=model_config.seq_len)
    tr = (enc.sequences(train.cases), enc.labels(train.cases))
    va = (enc.sequences(val.cases), enc.labels(val.cases)) if val is not None else None
    epoch_inputs = noisy_epoch_inputs(train, kb, enc, config) if config.noise_augment > 0 else None
    model = convnet_train(tr, va, config, model_config, vocab.size, len(enc.disease_ids),
                          disease_ids=enc.disease_ids, epoch_inputs=epoch_inputs)
    return model, vocab


class _LearnedRanker:
    name = "learned"

    def __init__(self, model, vocab: Vocabulary, kb: KnowledgeBase, name: str | None = None):
        self.model = model
        self.vocab = vocab
        self.kb = kb
        if name:
            self.name = name
        self.disease_ids = np.array(model.disease_ids, dtype=np.int64)

    def logits(self, cases) -> np.ndarray:
        raise NotImplementedError

    def rank(self, case) -> RankedDifferential:
        z = self.logits([case])[0]
        p = softmax(z)
        order = rank_order(self.disease_ids, z)
        return RankedDifferential(tuple(int(d) for d in self.disease_ids[order]), tuple(p[order].tolist()))

    def rank_many(self, cases, chunk: int = 2048) -> np.ndarray:
        cases = list(cases)
        out = np.empty((len(cases), len(self.disease_ids)), dtype=np.int64)
        for s in range(0, len(cases), chunk):
            out[s:s + chunk] = self.disease_ids[rank_order(self.disease_ids, self.logits(cases[s:s + chunk]))]
        return out


class LRRanker(_LearnedRanker):
    name = "lr"

    def logits(self, cases) -> np.ndarray:
        enc = Encoder(self.vocab, self.kb, self.model.disease_ids)
        return lr_logits(self.model, enc.bags(cases))


class ConvNetRanker(_LearnedRanker):
    name = "convnet"

    def logits(self, cases) -> np.ndarray:
        enc = Encoder(self.vocab, self.kb, self.model.disease_ids, seq_len=self.model.config.seq_len)
        return convnet_logits(self.model, enc.sequences(cases))
