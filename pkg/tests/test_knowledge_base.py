import json
from dataclasses import replace

import pytest
from hypothesis import given, strategies as st

from ddx.errors import ConfigError, DomainError, KbInvalidError, ParseError
from ddx.knowledge_base import (CoOccurrencePair, DiseaseDef, ExclusionGroup, FindingDef, KbGenConfig,
                                KnowledgeBase, Link, es_points, extend_kb, freq_points, generate_synthetic_kb,
                                import_points, kb_from_dict, kb_to_dict, kb_to_json, load_kb, save_kb, validate_kb)

from helpers import hand_kb


# --- point tables -------------------------------------------------------------

def test_es_points_table():
    assert [es_points(s) for s in range(1, 6)] == [1, 10, 20, 40, 80]


def test_freq_points_table():
    assert [freq_points(s) for s in range(1, 6)] == [1, 4, 7, 15, 30]
    assert import_points is freq_points


@pytest.mark.parametrize("fn,score", [(es_points, 0), (freq_points, 6), (es_points, -1), (freq_points, 2.5)])
def test_points_out_of_range(fn, score):
    with pytest.raises(DomainError) as exc:
        fn(score)
    assert exc.value.code == "out_of_range"


def test_point_tables_strictly_increasing():
    for fn in (es_points, freq_points):
        vals = [fn(s) for s in range(1, 6)]
        assert all(a < b for a, b in zip(vals, vals[1:]))


# --- validation ---------------------------------------------------------------

def _minimal():
    return KnowledgeBase((FindingDef(0, "cough", "symptom", 1),), (DiseaseDef(0, "flu"),), (Link(0, 0, 1, 1),))


def codes(kb):
    return {v.code for v in validate_kb(kb)}


def test_minimal_kb_is_valid():
    assert validate_kb(_minimal()) == []


def test_dangling_link():
    kb = _minimal()
    kb = replace(kb, links=kb.links + (Link(0, 99, 1, 1),))
    assert "dangling_link" in codes(kb)


def test_duplicate_link():
    kb = _minimal()
    kb = replace(kb, links=kb.links + (Link(0, 0, 2, 2),))
    assert "duplicate_link" in codes(kb)


@pytest.mark.parametrize("mutate,code", [
    (lambda kb: replace(kb, findings=kb.findings + (FindingDef(0, "other", "sign", 1),)), "duplicate_finding_id"),
    (lambda kb: replace(kb, findings=kb.findings + (FindingDef(1, "cough", "sign", 1),)), "duplicate_finding_name"),
    (lambda kb: replace(kb, findings=(FindingDef(0, "Cough!", "symptom", 1),)), "bad_finding_name"),
    (lambda kb: replace(kb, findings=(FindingDef(0, "cough", "smell", 1),)), "bad_finding_type"),
    (lambda kb: replace(kb, findings=(FindingDef(0, "cough", "symptom", 7),)), "score_range"),
    (lambda kb: replace(kb, links=(Link(0, 0, 9, 1),)), "score_range"),
    (lambda kb: replace(kb, diseases=kb.diseases + (DiseaseDef(0, "cold"),)), "duplicate_disease_id"),
    (lambda kb: replace(kb, diseases=kb.diseases + (DiseaseDef(1, "cold", ("flu",)),)), "duplicate_disease_name"),
    (lambda kb: replace(kb, exclusions=(ExclusionGroup(frozenset({0})),)), "exclusion_size"),
    (lambda kb: replace(kb, exclusions=(ExclusionGroup(frozenset({0, 5})),)), "dangling_exclusion"),
    (lambda kb: replace(kb, cooccurrences=(CoOccurrencePair(0, 0, 0.5),)), "cooccurrence_self"),
    (lambda kb: replace(kb, predisposing=frozenset({(0, 3)})), "predisposing_without_link"),
])
def test_violation_codes(mutate, code):
    assert code in codes(mutate(_minimal()))


def test_cooccurrence_rules():
    kb = _minimal()
    kb = replace(kb, findings=kb.findings + (FindingDef(1, "chills", "symptom", 1),))
    assert "cooccurrence_strength" in codes(replace(kb, cooccurrences=(CoOccurrencePair(0, 1, 0.0),)))
    dup = (CoOccurrencePair(0, 1, 0.5), CoOccurrencePair(1, 0, 0.4))
    assert "duplicate_cooccurrence" in codes(replace(kb, cooccurrences=dup))
    assert "dangling_cooccurrence" in codes(replace(kb, cooccurrences=(CoOccurrencePair(0, 7, 0.5),)))


def test_validation_collects_every_violation():
    kb = replace(_minimal(), links=(Link(0, 99, 9, 1), Link(0, 99, 1, 1)))
    assert {"dangling_link", "duplicate_link", "score_range"} <= codes(kb)


# --- derived lookups ----------------------------------------------------------

def test_profiles_and_partners():
    kb = hand_kb()
    assert set(kb.profile(1)) == {1, 2}
    assert kb.profile(1)[1].evoking_strength == 3
    with pytest.raises(DomainError):
        kb.profile(42)
    kb2 = replace(kb, exclusions=(ExclusionGroup(frozenset({1, 2, 3})),),
                  cooccurrences=(CoOccurrencePair(1, 3, 0.4), CoOccurrencePair(1, 2, 0.9)))
    assert kb2.exclusion_partners[1] == frozenset({2, 3})
    assert [p for p, _ in kb2.cooccurrence_partners[1]] == [2, 3]


# --- generator ----------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_kb():
    return generate_synthetic_kb(KbGenConfig(), 5)


def test_generated_desk_kb_is_valid(desk_kb):
    assert validate_kb(desk_kb) == []
    counts = {t: len(desk_kb.findings_of_type(t)) for t in KbGenConfig().finding_counts}
    assert counts == KbGenConfig().finding_counts
    assert len(desk_kb.diseases) == 50


def test_generated_profiles_have_at_least_three_links(desk_kb):
    assert min(len(desk_kb.profile(d)) for d in desk_kb.disease_ids) >= 3


def test_large_preset_counts():
    kb = generate_synthetic_kb(KbGenConfig.sim250(), 7)
    got = {t: len(kb.findings_of_type(t)) for t in ("history", "symptom", "sign", "lab")}
    assert got == {"history": 481, "symptom": 211, "sign": 961, "lab": 1691}
    assert len(kb.diseases) == 250
    assert validate_kb(kb) == []


def test_generator_is_byte_deterministic():
    cfg = KbGenConfig(n_diseases=12)
    assert kb_to_json(generate_synthetic_kb(cfg, 3)) == kb_to_json(generate_synthetic_kb(cfg, 3))
    assert kb_to_json(generate_synthetic_kb(cfg, 3)) != kb_to_json(generate_synthetic_kb(cfg, 4))


@pytest.mark.parametrize("kw", [{"n_diseases": 0}, {"n_diseases": 2000}])
def test_infeasible_config(kw):
    with pytest.raises(ConfigError) as exc:
        generate_synthetic_kb(KbGenConfig(**kw), 0)
    assert exc.value.code == "infeasible_config"


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        KbGenConfig.from_dict({"n_diseases": 3, "colour": "red"})


def test_config_dict_round_trip():
    cfg = KbGenConfig.sim630()
    assert KbGenConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@given(st.integers(0, 2**31 - 1), st.integers(3, 20))
def test_generated_kbs_always_validate(seed, n):
    kb = generate_synthetic_kb(KbGenConfig(n_diseases=n), seed)
    assert validate_kb(kb) == []


# --- serialization ------------------------------------------------------------

def test_round_trip(tmp_path, desk_kb):
    p = tmp_path / "kb.json"
    save_kb(desk_kb, p)
    back = load_kb(p)
    assert kb_to_dict(back) == kb_to_dict(desk_kb)
    assert back.fingerprint == desk_kb.fingerprint


def test_serialized_arrays_sorted(desk_kb):
    d = kb_to_dict(desk_kb)
    assert d["kb_version"] == 1
    assert [f["id"] for f in d["findings"]] == sorted(f["id"] for f in d["findings"])
    assert [(lk["disease"], lk["finding"]) for lk in d["links"]] == sorted((lk["disease"], lk["finding"])
                                                                            for lk in d["links"])


def test_truncated_file(tmp_path):
    p = tmp_path / "kb.json"
    p.write_text(kb_to_json(hand_kb())[:-40])
    with pytest.raises(ParseError) as exc:
        load_kb(p)
    assert exc.value.code == "parse" and "line" in str(exc.value)


def test_missing_field_names_location():
    d = kb_to_dict(hand_kb())
    del d["links"][1]["frequency"]
    with pytest.raises(ParseError, match=r"links\[1\]"):
        kb_from_dict(d)


def test_invalid_score_on_load(tmp_path):
    d = kb_to_dict(hand_kb())
    d["links"][0]["evoking_strength"] = 9
    p = tmp_path / "kb.json"
    p.write_text(json.dumps(d))
    with pytest.raises(KbInvalidError) as exc:
        load_kb(p)
    assert exc.value.code == "kb_invalid"
    assert any(v.code == "score_range" for v in exc.value.violations)


def test_extend_kb_leaves_original():
    kb = hand_kb()
    fp = kb.fingerprint
    ext = extend_kb(kb, diseases=[DiseaseDef(9, "gamma disease")])
    assert kb.fingerprint == fp and len(kb.diseases) == 2
    assert ext.fingerprint != fp and 9 in ext.disease_by_id


def test_fingerprint_ignores_input_order():
    kb = hand_kb()
    shuffled = replace(kb, links=tuple(reversed(kb.links)), findings=tuple(reversed(kb.findings)))
    assert shuffled.fingerprint == kb.fingerprint
