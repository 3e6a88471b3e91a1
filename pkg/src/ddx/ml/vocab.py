"""Unigram vocabulary over finding names and fixed-length case encoding."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ddx.errors import DataError
from ddx.knowledge_base import KnowledgeBase
from ddx.simulator import Case, Dataset

PAD = 0
SEQ_LEN = 200


@dataclass(frozen=True)
class Vocabulary:
    """Tokens in lexicographic order; token ``tokens[i]`` has id ``i + 1`` and id 0 is padding."""

    tokens: tuple[str, ...]

    @cached_property
    def token_to_id(self) -> dict[str, int]:
        return {t: i + 1 for i, t in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        """Number of ids including padding."""
        return len(self.tokens) + 1

    def __len__(self):
        return len(self.tokens)


def build_vocabulary(kb: KnowledgeBase) -> Vocabulary:
    tokens = {tok for f in kb.findings for tok in f.name.split()}
    if not tokens:
        raise DataError("knowledge base has no finding tokens", code="empty_vocabulary")
    return Vocabulary(tuple(sorted(tokens)))


@dataclass(frozen=True)
class EncodedCase:
    token_ids: np.ndarray
    label: int


class Encoder:
    """Maps cases to token-id sequences and binary bags. Tokens unknown to the vocabulary are dropped."""

    def __init__(self, vocab: Vocabulary, kb: KnowledgeBase, disease_ids=None, seq_len: int = SEQ_LEN):
        self.vocab = vocab
        self.kb = kb
        self.seq_len = seq_len
        self.disease_ids = tuple(disease_ids if disease_ids is not None else kb.disease_ids)
        self.label_index = {d: i for i, d in enumerate(self.disease_ids)}
        t2i = vocab.token_to_id
        self.finding_tokens = {
            f.id: tuple(t2i[t] for t in f.name.split() if t in t2i) for f in kb.findings
        }

    def token_set(self, findings) -> list[int]:
        ids = set()
        for f in findings:
            ids.update(self.finding_tokens[f])
        return sorted(ids)

    def label(self, case: Case) -> int:
        try:
            return self.label_index[case.disease_id]
        except KeyError:
            raise DataError(f"disease {case.disease_id} is not among the model's classes") from None

    def sequence(self, findings) -> np.ndarray:
        toks = self.token_set(findings)[: self.seq_len]
        out = np.zeros(self.seq_len, dtype=np.int64)
        out[: len(toks)] = toks
        return out

    def encode(self, case: Case) -> EncodedCase:
        return EncodedCase(self.sequence(case.findings_present), self.label(case))

    def sequences(self, cases) -> np.ndarray:
        out = np.zeros((len(cases), self.seq_len), dtype=np.int64)
        for r, c in enumerate(cases):
            toks = self.token_set(c.findings_present)[: self.seq_len]
            out[r, : len(toks)] = toks
        return out

    def bags(self, cases, dtype=np.float32) -> np.ndarray:
        """Binary bag over the vocabulary (column j is token id j + 1); never truncated."""
        out = np.zeros((len(cases), len(self.vocab)), dtype=dtype)
        for r, c in enumerate(cases):
            toks = self.token_set(c.findings_present)
            if toks:
                out[r, np.asarray(toks) - 1] = 1
        return out

    def labels(self, cases) -> np.ndarray:
        return np.array([self.label(c) for c in cases], dtype=np.int64)


def encode_case(vocab: Vocabulary, case: Case, kb: KnowledgeBase, seq_len: int = SEQ_LEN) -> EncodedCase:
    return Encoder(vocab, kb, seq_len=seq_len).encode(case)


def encode_dataset(vocab: Vocabulary, ds: Dataset, kb: KnowledgeBase, seq_len: int = SEQ_LEN):
    enc = Encoder(vocab, kb, seq_len=seq_len)
    return enc.sequences(ds.cases), enc.labels(ds.cases)
