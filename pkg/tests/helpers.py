"""Small hand-built knowledge bases shared by the unit tests."""

from __future__ import annotations

import numpy as np

from ddx.knowledge_base import DiseaseDef, ExclusionGroup, FindingDef, KnowledgeBase, Link


def hand_kb(history_frequency: int | None = 3) -> KnowledgeBase:
    """D1 profile {f1: ES 3 / freq 4, f2: ES 5 / freq 2}; f3 (import 3) sits in no profile of D1."""
    findings = (
        FindingDef(1, "chest pain", "symptom", 2),
        FindingDef(2, "fever high", "sign", 1),
        FindingDef(3, "rash diffuse", "sign", 3),
    )
    diseases = (DiseaseDef(1, "alpha disease", ("alpha syndrome",), history_frequency),
                DiseaseDef(2, "beta disease"))
    links = (Link(1, 1, 3, 4), Link(1, 2, 5, 2), Link(2, 3, 2, 3))
    return KnowledgeBase(findings, diseases, links)


def random_tiny_kb(rng: np.random.Generator, n_diseases: int = 4, n_findings: int = 6,
                   exclusion: bool = False) -> KnowledgeBase:
    """Random valid KB: every disease links to 1..n_findings findings with random scores."""
    findings = tuple(FindingDef(j, f"finding n{j}", "symptom", int(rng.integers(1, 6))) for j in range(n_findings))
    diseases = tuple(DiseaseDef(i, f"disease n{i}", (), int(rng.integers(1, 6)) if rng.random() < 0.5 else None)
                     for i in range(n_diseases))
    links = []
    for i in range(n_diseases):
        size = int(rng.integers(1, n_findings + 1))
        for j in sorted(rng.choice(n_findings, size=size, replace=False).tolist()):
            links.append(Link(i, j, int(rng.integers(1, 6)), int(rng.integers(1, 6))))
    excl = (ExclusionGroup(frozenset({0, 1})),) if exclusion and n_findings >= 2 else ()
    return KnowledgeBase(findings, diseases, tuple(links), excl)
