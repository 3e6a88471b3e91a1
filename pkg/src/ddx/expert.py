"""Internist-1/QMR style differential diagnosis scoring with an auditable breakdown."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ddx.errors import DomainError
from ddx.knowledge_base import KnowledgeBase, es_points, freq_points, import_points
from ddx.ranking import RankedDifferential, rank_order
from ddx.simulator import Case

HISTORY_BONUS_PER_FREQUENCY = 20


@dataclass(frozen=True)
class ExpertScore:
    disease_id: int
    positive: int
    negative_absent: int
    penalty_unexplained: int
    history_bonus: int

    @property
    def total(self) -> int:
        return self.positive + self.negative_absent + self.penalty_unexplained + self.history_bonus

    def to_json(self) -> dict:
        return {
            "disease": self.disease_id,
            "positive": self.positive,
            "negative_absent": self.negative_absent,
            "penalty_unexplained": self.penalty_unexplained,
            "history_bonus": self.history_bonus,
            "total": self.total,
        }


def score_disease(kb: KnowledgeBase, findings_present, history_of, disease_id: int,
                  bonus_per_frequency: int = HISTORY_BONUS_PER_FREQUENCY) -> ExpertScore:
    """Four-component score of one disease for one presentation."""
    profile = kb.profile(disease_id)
    present = set(findings_present)
    unknown = [f for f in present if f not in kb.finding_by_id]
    if unknown:
        raise DomainError(f"unknown finding ids {sorted(unknown)[:5]}")
    positive = sum(es_points(lk.evoking_strength) for f, lk in profile.items() if f in present)
    negative = -sum(freq_points(lk.frequency) for f, lk in profile.items() if f not in present)
    penalty = -sum(import_points(kb.finding_by_id[f].importance) for f in present if f not in profile)
    bonus = 0
    if disease_id in set(history_of):
        hfreq = kb.disease_by_id[disease_id].history_link_frequency
        bonus = bonus_per_frequency * (hfreq if hfreq is not None else 1)
    return ExpertScore(disease_id, positive, negative, penalty, bonus)


def rank_expert(kb: KnowledgeBase, case: Case) -> RankedDifferential:
    return ExpertRanker(kb).rank(case)


class ExpertRanker:
    """Vectorised form of :func:`score_disease` over all diseases (exact int64 arithmetic)."""

    name = "expert"

    def __init__(self, kb: KnowledgeBase, bonus_per_frequency: int = HISTORY_BONUS_PER_FREQUENCY):
        self.kb = kb
        self.bonus_per_frequency = bonus_per_frequency
        self.disease_ids = np.array(kb.disease_ids, dtype=np.int64)

    @cached_property
    def _tables(self):
        kb = self.kb
        f_index = {f: j for j, f in enumerate(kb.finding_ids)}
        d_index = {d: i for i, d in enumerate(kb.disease_ids)}
        K, F = len(d_index), len(f_index)
        es = np.zeros((K, F), dtype=np.int64)
        fq = np.zeros((K, F), dtype=np.int64)
        member = np.zeros((K, F), dtype=np.int64)
        for lk in kb.links:
            i, j = d_index[lk.disease_id], f_index[lk.finding_id]
            es[i, j] = es_points(lk.evoking_strength)
            fq[i, j] = freq_points(lk.frequency)
            member[i, j] = 1
        imp = np.array([import_points(kb.finding_by_id[f].importance) for f in kb.finding_ids], dtype=np.int64)
        hist = np.array([
            self.bonus_per_frequency * (kb.disease_by_id[d].history_link_frequency or 1) for d in kb.disease_ids
        ], dtype=np.int64)
        return f_index, d_index, es, fq, member, imp, hist

    def _presence(self, cases) -> tuple[np.ndarray, np.ndarray]:
        f_index, d_index = self._tables[0], self._tables[1]
        X = np.zeros((len(cases), len(f_index)), dtype=np.int64)
        H = np.zeros((len(cases), len(d_index)), dtype=np.int64)
        for r, c in enumerate(cases):
            try:
                X[r, [f_index[f] for f in c.findings_present]] = 1
                H[r, [d_index[d] for d in c.history_of]] = 1
            except KeyError as exc:
                raise DomainError(f"case {c.id} references unknown id {exc.args[0]}") from None
        return X, H

    def breakdown(self, cases) -> np.ndarray:
        """(n_cases, K, 4) array of positive, negative_absent, penalty_unexplained, history_bonus."""
        _, _, es, fq, member, imp, hist = self._tables
        X, H = self._presence(cases)
        positive = X @ es.T
        negative = -(fq.sum(axis=1)[None, :] - X @ fq.T)
        penalty = -((X * imp) @ (1 - member).T)
        bonus = H * hist[None, :]
        return np.stack([positive, negative, penalty, bonus], axis=-1)

    def scores(self, cases) -> np.ndarray:
        return self.breakdown(cases).sum(axis=-1)

    def rank_many(self, cases, chunk: int = 2048) -> np.ndarray:
        """(n_cases, K) disease ids in ranked order."""
        cases = list(cases)
        out = np.empty((len(cases), len(self.disease_ids)), dtype=np.int64)
        for s in range(0, len(cases), chunk):
            out[s:s + chunk] = self.disease_ids[rank_order(self.disease_ids, self.scores(cases[s:s + chunk]))]
        return out

    def rank(self, case: Case) -> RankedDifferential:
        total = self.scores([case])[0]
        order = rank_order(self.disease_ids, total)
        return RankedDifferential(tuple(int(d) for d in self.disease_ids[order]), tuple(int(s) for s in total[order]))
