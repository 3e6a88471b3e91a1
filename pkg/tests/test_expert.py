from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddx.errors import DomainError
from ddx.expert import ExpertRanker, rank_expert, score_disease
from ddx.knowledge_base import DiseaseDef, FindingDef, KbGenConfig, KnowledgeBase, Link, generate_synthetic_kb
from ddx.simulator import Case, simulate_dataset

from helpers import hand_kb, random_tiny_kb

ES = {1: 1, 2: 10, 3: 20, 4: 40, 5: 80}
FREQ = {1: 1, 2: 4, 3: 7, 4: 15, 5: 30}


def oracle_total(kb, present, history, d):
    """Literal restatement of the four-component rule, one disease at a time."""
    prof = {lk.finding_id: lk for lk in kb.links if lk.disease_id == d}
    imp = {f.id: f.importance for f in kb.findings}
    total = 0
    for f in present:
        total += ES[prof[f].evoking_strength] if f in prof else -FREQ[imp[f]]
    for f, lk in prof.items():
        if f not in present:
            total -= FREQ[lk.frequency]
    if d in history:
        hf = next(x.history_link_frequency for x in kb.diseases if x.id == d)
        total += 20 * (hf or 1)
    return total


def test_hand_example_breakdown():
    s = score_disease(hand_kb(), {1, 3}, set(), 1)
    assert (s.positive, s.negative_absent, s.penalty_unexplained, s.history_bonus) == (20, -4, -7, 0)
    assert s.total == 9


def test_hand_example_with_history():
    s = score_disease(hand_kb(3), {1, 3}, {1}, 1)
    assert s.history_bonus == 60 and s.total == 69


def test_history_defaults_to_frequency_one():
    assert score_disease(hand_kb(None), {1, 3}, {1}, 1).history_bonus == 20


def test_perfect_match():
    s = score_disease(hand_kb(), {1, 2}, set(), 1)
    assert s.total == 20 + 80 and s.negative_absent == 0 and s.penalty_unexplained == 0


def test_unknown_ids():
    with pytest.raises(DomainError):
        score_disease(hand_kb(), {99}, set(), 1)
    with pytest.raises(DomainError):
        score_disease(hand_kb(), {1}, set(), 42)


def test_dominant_disease_first():
    r = rank_expert(hand_kb(), Case(0, 1, frozenset({1, 2})))
    assert r.disease_ids[0] == 1


def test_tie_goes_to_lower_id():
    kb = hand_kb()
    kb = replace(kb, links=(Link(1, 1, 3, 4), Link(2, 1, 3, 4)))
    r = rank_expert(kb, Case(0, 1, frozenset({1})))
    assert r.disease_ids == (1, 2) and r.scores[0] == r.scores[1]


def test_low_weight_addition_keeps_argmax():
    kb = hand_kb()
    kb = replace(kb, findings=kb.findings + (FindingDef(4, "cough dry", "symptom", 1),))
    base = Case(0, 1, frozenset({1, 3}))
    # D1: 9, D2: 10 - 4 = 6; adding f4 costs both exactly one point
    assert rank_expert(kb, base).scores == (9, 6)
    noisy = rank_expert(kb, replace(base, findings_present=frozenset({1, 3, 4})))
    assert noisy.disease_ids[0] == 1 and noisy.scores == (8, 5)


def test_breakdown_json():
    d = score_disease(hand_kb(), {1, 3}, {1}, 1).to_json()
    assert d == {"disease": 1, "positive": 20, "negative_absent": -4, "penalty_unexplained": -7,
                 "history_bonus": 60, "total": 69}


def _cases_for(kb, rng, n=20):
    fids = kb.finding_ids
    out = []
    for i in range(n):
        size = int(rng.integers(1, len(fids) + 1))
        present = frozenset(int(f) for f in rng.choice(fids, size=size, replace=False))
        hist = frozenset(d for d in kb.disease_ids if rng.random() < 0.2)
        out.append(Case(i, kb.disease_ids[0], present, hist))
    return out


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_vectorised_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    kb = random_tiny_kb(rng)
    ranker = ExpertRanker(kb)
    cases = _cases_for(kb, rng)
    got = ranker.scores(cases)
    bd = ranker.breakdown(cases)
    for r, c in enumerate(cases):
        for i, d in enumerate(kb.disease_ids):
            assert got[r, i] == oracle_total(kb, c.findings_present, c.history_of, d)
            s = score_disease(kb, c.findings_present, c.history_of, d)
            assert tuple(bd[r, i]) == (s.positive, s.negative_absent, s.penalty_unexplained, s.history_bonus)


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_removing_offprofile_finding_adds_import_points(seed):
    rng = np.random.default_rng(seed)
    kb = random_tiny_kb(rng)
    imp = {f.id: f.importance for f in kb.findings}
    present = frozenset(kb.finding_ids)
    for f in kb.finding_ids:
        for d in kb.disease_ids:
            if f in kb.profile(d):
                continue
            before = score_disease(kb, present, (), d).total
            after = score_disease(kb, present - {f}, (), d).total
            assert after - before == FREQ[imp[f]]


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1))
def test_exclusive_finding_never_lowers_rank(seed):
    rng = np.random.default_rng(seed)
    kb = random_tiny_kb(rng, n_findings=8)
    owners = {}
    for lk in kb.links:
        owners.setdefault(lk.finding_id, set()).add(lk.disease_id)
    unique = [(f, next(iter(ds))) for f, ds in owners.items() if len(ds) == 1]
    if not unique:
        return
    f, d = unique[0]
    base = frozenset(x for x in kb.finding_ids if x != f and rng.random() < 0.5) or frozenset({kb.finding_ids[0]})
    if f in base:
        return
    before = rank_expert(kb, Case(0, d, base)).position(d)
    after = rank_expert(kb, Case(0, d, base | {f})).position(d)
    assert after <= before


def test_ranking_is_pure():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=20), 3)
    cases = simulate_dataset(kb, 50, 1).cases
    r = ExpertRanker(kb)
    assert np.array_equal(r.rank_many(cases), r.rank_many(cases))
    for c in cases[:5]:
        rd = r.rank(c)
        assert sorted(rd.disease_ids) == list(kb.disease_ids)
        pairs = list(zip(rd.scores, rd.disease_ids))
        assert all(a[0] > b[0] or (a[0] == b[0] and a[1] < b[1]) for a, b in zip(pairs, pairs[1:]))
        assert rd == rank_expert(kb, c)


def test_chunking_does_not_matter():
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=15), 4)
    cases = simulate_dataset(kb, 101, 2).cases
    r = ExpertRanker(kb)
    assert np.array_equal(r.rank_many(cases, chunk=7), r.rank_many(cases))


def test_case_with_unknown_finding():
    with pytest.raises(DomainError):
        ExpertRanker(hand_kb()).scores([Case(0, 1, frozenset({77}))])


def test_demographics_score_like_other_findings():
    kb = KnowledgeBase((FindingDef(0, "age adult", "demographic", 2), FindingDef(1, "cough", "symptom", 2)),
                       (DiseaseDef(0, "x"), DiseaseDef(1, "y")), (Link(0, 0, 2, 3), Link(1, 1, 2, 3)))
    s = score_disease(kb, {0}, (), 1)
    assert s.penalty_unexplained == -4 and s.negative_absent == -7
