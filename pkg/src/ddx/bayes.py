"""Class-conditional finding model and exact single-disease posterior ranking."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ddx.errors import DataError, DomainError
from ddx.knowledge_base import KnowledgeBase, freq_points
from ddx.ranking import RankedDifferential, rank_order
from ddx.simulator import Case, Dataset

MODES = ("positive_only", "full_binary")


@dataclass(frozen=True, eq=False)
class CondProbTable:
    """p(f|d) for profile findings (dense K x F, off-profile entries hold the leak) and the prior."""

    disease_ids: tuple[int, ...]
    finding_ids: tuple[int, ...]
    p_present: np.ndarray  # (K, F)
    in_profile: np.ndarray  # (K, F) bool
    prior: np.ndarray  # (K,)
    leak: float
    mode: str = "positive_only"
    floor: float = 0.005
    ceiling: float = 0.995

    @property
    def finding_index(self) -> dict[int, int]:
        return {f: j for j, f in enumerate(self.finding_ids)}

    def to_json(self) -> dict:
        rows = []
        for i, d in enumerate(self.disease_ids):
            cols = np.flatnonzero(self.in_profile[i])
            rows.append({
                "disease": d,
                "prior": float(self.prior[i]),
                "p": {str(self.finding_ids[j]): float(self.p_present[i, j]) for j in cols},
            })
        return {"format": "ddx-bayes", "version": 1, "mode": self.mode, "leak": self.leak,
                "floor": self.floor, "ceiling": self.ceiling, "findings": list(self.finding_ids), "rows": rows}


def build_nb_model(kb: KnowledgeBase, prior_source: str = "uniform", mode: str = "positive_only",
                   train: Dataset | None = None, floor: float = 0.005, ceiling: float = 0.995,
                   scale: float = 30.0) -> CondProbTable:
    """p(f|d) = clamp(freq_points / scale, floor, ceiling); off-profile findings get the leak (= floor)."""
    if mode not in MODES:
        raise DomainError(f"mode must be one of {MODES}")
    if not 0.0 < floor <= ceiling < 1.0:
        raise DomainError("need 0 < floor <= ceiling < 1")
    d_ids, f_ids = kb.disease_ids, kb.finding_ids
    d_index = {d: i for i, d in enumerate(d_ids)}
    f_index = {f: j for j, f in enumerate(f_ids)}
    p = np.full((len(d_ids), len(f_ids)), floor)
    member = np.zeros_like(p, dtype=bool)
    for lk in kb.links:
        i, j = d_index[lk.disease_id], f_index[lk.finding_id]
        p[i, j] = min(max(freq_points(lk.frequency) / scale, floor), ceiling)
        member[i, j] = True
    if prior_source == "uniform":
        prior = np.full(len(d_ids), 1.0 / len(d_ids))
    elif prior_source == "empirical":
        if train is None or not train.cases:
            raise DataError("empirical prior needs a non-empty training set")
        counts = np.zeros(len(d_ids))
        for c in train.cases:
            counts[d_index[c.disease_id]] += 1
        # unseen diseases keep a floor share so the posterior stays defined
        counts = np.maximum(counts, 0.5)
        prior = counts / counts.sum()
    else:
        raise DomainError("prior_source must be 'uniform' or 'empirical'")
    return CondProbTable(tuple(d_ids), tuple(f_ids), p, member, prior, floor, mode, floor, ceiling)


def _log_scores(model: CondProbTable, X: np.ndarray) -> np.ndarray:
    log_p = np.log(model.p_present)
    scores = np.log(model.prior)[None, :] + X @ log_p.T
    if model.mode == "full_binary":
        log_q = np.where(model.in_profile, np.log1p(-model.p_present), 0.0)
        scores += log_q.sum(axis=1)[None, :] - X @ log_q.T
    return scores


def _presence(model: CondProbTable, finding_sets) -> np.ndarray:
    idx = model.finding_index
    X = np.zeros((len(finding_sets), len(model.finding_ids)))
    for r, fs in enumerate(finding_sets):
        try:
            X[r, [idx[f] for f in fs]] = 1.0
        except KeyError as exc:
            raise DomainError(f"unknown finding id {exc.args[0]}") from None
    return X


def log_scores(model: CondProbTable, findings_present) -> np.ndarray:
    return _log_scores(model, _presence(model, [findings_present]))[0]


def posterior(model: CondProbTable, findings_present, finding_universe=None) -> np.ndarray:
    """Normalized posterior over ``model.disease_ids``, computed in log space."""
    if finding_universe is not None:
        stray = set(findings_present) - set(finding_universe)
        if stray:
            raise DomainError(f"findings {sorted(stray)[:5]} are outside the finding universe")
    s = log_scores(model, findings_present)
    return np.exp(s - logsumexp(s))


def rank_bayes(model: CondProbTable, case: Case) -> RankedDifferential:
    return BayesRanker(model).rank(case)


class BayesRanker:
    name = "bayes"

    def __init__(self, model: CondProbTable):
        self.model = model
        self.disease_ids = np.array(model.disease_ids, dtype=np.int64)

    def rank(self, case: Case) -> RankedDifferential:
        s = log_scores(self.model, case.findings_present)
        post = np.exp(s - logsumexp(s))
        # order on log-scores: posteriors may underflow to equal zeros
        order = rank_order(self.disease_ids, s)
        return RankedDifferential(tuple(int(d) for d in self.disease_ids[order]), tuple(post[order].tolist()))

    def rank_many(self, cases, chunk: int = 2048) -> np.ndarray:
        cases = list(cases)
        out = np.empty((len(cases), len(self.disease_ids)), dtype=np.int64)
        for s in range(0, len(cases), chunk):
            X = _presence(self.model, [c.findings_present for c in cases[s:s + chunk]])
            out[s:s + chunk] = self.disease_ids[rank_order(self.disease_ids, _log_scores(self.model, X))]
        return out


def save_nb_model(model: CondProbTable, path) -> None:
    Path(path).write_text(json.dumps(model.to_json(), indent=1) + "\n", encoding="utf-8")
