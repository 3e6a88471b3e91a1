"""External labeled cases: loading, name reconciliation against a KB, and merging with simulated data.

Also hosts a synthetic stand-in for an external record source, with optional label noise.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ddx.errors import DataError, DomainError, ParseError
from ddx.knowledge_base import (_DISEASE_SUFFIXES, DiseaseDef, FindingDef, KnowledgeBase, Link, _pseudo_words,
                                extend_kb)
from ddx.simulator import Case, Dataset, case_rng, simulate_case

log = logging.getLogger(__name__)

NEW_FINDING_POLICIES = ("reject", "create")


@dataclass(frozen=True)
class ExternalCase:
    finding_names: tuple[str, ...]
    disease_name: str
    source: str = "external"

    def __post_init__(self):
        if not self.finding_names:
            raise DomainError("an external case needs at least one finding")
        if not self.disease_name or not self.disease_name.strip():
            raise DomainError("an external case needs a disease name")

    def to_json(self) -> dict:
        return {"findings": list(self.finding_names), "disease": self.disease_name, "source": self.source}


def normalize_name(name: str) -> str:
    """Lowercase, with every run of non-alphanumerics collapsed to one space."""
    return re.sub(r"[^a-z0-9]+", " ", name.lower()).strip()


def _parse_line(obj) -> ExternalCase:
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    for key in ("findings", "disease"):
        if key not in obj:
            raise ValueError(f"missing '{key}'")
    findings = obj["findings"]
    if not isinstance(findings, list) or not all(isinstance(f, str) for f in findings):
        raise ValueError("'findings' must be a list of strings")
    if not isinstance(obj["disease"], str):
        raise ValueError("'disease' must be a string")
    return ExternalCase(tuple(findings), obj["disease"], str(obj.get("source", "external")))


def parse_external_lines(lines, strict: bool = False, where: str = "<input>"):
    """Returns ``(cases, problems)``; problems are ``(line number, message)`` pairs."""
    cases, problems = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            cases.append(_parse_line(json.loads(line)))
        except (json.JSONDecodeError, ValueError, DomainError) as exc:
            if strict:
                raise ParseError(f"{where}:{lineno}: {exc}") from None
            problems.append((lineno, str(exc)))
    return cases, problems


def load_external_cases(path, strict: bool = False) -> list[ExternalCase]:
    """Parse a JSONL file of external cases. Lenient mode skips bad lines and logs each one."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}", code="missing_artifact") from None
    cases, problems = parse_external_lines(text.splitlines(), strict, str(path))
    for lineno, msg in problems:
        log.warning("%s:%d: skipped (%s)", path, lineno, msg)
    if not cases:
        log.warning("%s: no external cases", path)
    return cases


def save_external_cases(cases: Sequence[ExternalCase], path) -> None:
    Path(path).write_text("".join(json.dumps(c.to_json()) + "\n" for c in cases), encoding="utf-8")


@dataclass
class Reconciled:
    kb: KnowledgeBase  # extended copy
    cases: list[Case]
    new_disease_ids: list[int]
    new_finding_ids: list[int] = field(default_factory=list)


def reconcile(external: Sequence[ExternalCase], kb: KnowledgeBase, new_finding_policy: str = "reject",
              new_finding_type: str = "sign") -> Reconciled:
    """Map external names onto KB ids, appending unknown diseases (and, if allowed, findings) to a KB copy.

    Diseases match case-insensitively on name or alias; findings match their KB name exactly.
    """
    if new_finding_policy not in NEW_FINDING_POLICIES:
        raise DomainError(f"new_finding_policy must be one of {NEW_FINDING_POLICIES}")
    by_name: dict[str, int] = {}
    for d in kb.diseases:
        for n in (d.name, *d.aliases):
            by_name.setdefault(normalize_name(n), d.id)
    finding_id = {f.name: f.id for f in kb.findings}

    unknown = sorted({n for c in external for n in c.finding_names if n not in finding_id})
    new_findings: list[FindingDef] = []
    if unknown:
        if new_finding_policy == "reject":
            shown = ", ".join(repr(n) for n in unknown[:20])
            raise DataError(f"{len(unknown)} unknown finding names: {shown}", code="unknown_findings")
        taken = {f.name for f in kb.findings}
        next_f = max(kb.finding_ids, default=-1) + 1
        for n in unknown:
            norm = normalize_name(n)
            if not norm or norm in taken:
                raise DataError(f"finding name {n!r} cannot be added (empty or clashes after normalization)",
                                code="unknown_findings")
            taken.add(norm)
            new_findings.append(FindingDef(next_f, norm, new_finding_type, 1))
            finding_id[n] = next_f
            next_f += 1

    new_diseases: list[DiseaseDef] = []
    next_d = max(kb.disease_ids, default=-1) + 1
    cases = []
    for i, ec in enumerate(external):
        key = normalize_name(ec.disease_name)
        if not key:
            raise DataError(f"external case {i}: disease name {ec.disease_name!r} is empty after normalization")
        if key not in by_name:
            new_diseases.append(DiseaseDef(next_d, key))
            by_name[key] = next_d
            next_d += 1
        cases.append(Case(i, by_name[key], frozenset(finding_id[n] for n in ec.finding_names)))
    ext = extend_kb(kb, findings=new_findings, diseases=new_diseases)
    return Reconciled(ext, cases, [d.id for d in new_diseases], [f.id for f in new_findings])


def merge_with_holdout(sim_train: Dataset, external: Sequence[Case], holdout_fraction: float = 0.1, seed: int = 0,
                       kb: KnowledgeBase | None = None) -> tuple[Dataset, Dataset]:
    """Hold out round(fraction * n) (at least one) cases per external disease; the rest joins the simulated train.

    External cases are renumbered after the largest simulated id. Pass the extended ``kb`` to stamp
    its fingerprint on both outputs.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise DomainError("holdout_fraction must lie in [0, 1)")
    by_d: dict[int, list[Case]] = {}
    for c in external:
        by_d.setdefault(c.disease_id, []).append(c)
    thin = sorted(d for d, cs in by_d.items() if len(cs) < 2)
    if thin:
        raise DataError(f"external diseases {thin} have fewer than 2 cases", code="insufficient_external")
    if holdout_fraction == 0.0:
        log.warning("holdout_fraction is 0: every external case goes to train; the external test set is empty")
    next_id = max((c.id for c in sim_train.cases), default=-1) + 1
    rng = np.random.default_rng(seed)
    train_add, test = [], []
    counts = {}
    for d in sorted(by_d):
        cs = by_d[d]
        n_test = 0 if holdout_fraction == 0.0 else max(1, int(math.floor(holdout_fraction * len(cs) + 0.5)))
        held = set(rng.permutation(len(cs))[:n_test].tolist())
        for j, c in enumerate(cs):
            renum = Case(next_id, c.disease_id, c.findings_present, c.history_of)
            next_id += 1
            (test if j in held else train_add).append(renum)
        counts[str(d)] = {"train": len(cs) - n_test, "test": n_test}
    fp = kb.fingerprint if kb is not None else sim_train.kb_fingerprint
    merge = {"holdout_fraction": holdout_fraction, "seed": int(seed), "per_disease": counts,
             "sim_train": len(sim_train), "external_train": len(train_add), "external_test": len(test)}
    combined = Dataset(fp, sim_train.cases + tuple(train_add), {**sim_train.provenance, "merge": merge})
    ext_test = Dataset(fp, tuple(test), {"kind": "external", "merge": merge})
    return combined, ext_test


# ---------------------------------------------------------------------------
# synthetic external source


@dataclass(frozen=True)
class ExternalSourceConfig:
    """Stand-in for an outside record source.

    ``n_new`` diseases absent from the KB get fresh profiles; ``n_alias`` existing diseases are
    reported under one of their KB aliases (or a recased name). With probability ``label_noise``
    a case carries the name of a different source disease.
    """

    n_new: int = 2
    n_alias: int = 0
    cases_per_disease: int = 200
    label_noise: float = 0.0
    links_per_disease: tuple[int, int] = (10, 16)
    unused_fraction: float = 0.5  # share of a new profile drawn from findings no KB disease links to
    types: tuple[str, ...] = ("demographic", "history", "symptom", "sign")
    source: str = "ehr"

    def __post_init__(self):
        if self.n_new < 0 or self.n_alias < 0 or self.n_new + self.n_alias < 1:
            raise DomainError("the source needs at least one disease")
        if self.cases_per_disease < 2:
            raise DomainError("cases_per_disease must be >= 2")
        if not 0.0 <= self.label_noise <= 1.0:
            raise DomainError("label_noise must lie in [0, 1]")
        lo, hi = self.links_per_disease
        if lo < 1 or hi < lo:
            raise DomainError("links_per_disease must satisfy 1 <= lo <= hi")


def _source_kb(kb: KnowledgeBase, cfg: ExternalSourceConfig, rng: np.random.Generator):
    """KB copy with the new diseases and their links; returns it with the (id, external name) list."""
    taken = {w for d in kb.diseases for n in (d.name, *d.aliases) for w in n.split()}
    known = {normalize_name(n) for d in kb.diseases for n in (d.name, *d.aliases)}
    linked = {lk.finding_id for lk in kb.links}
    usable = [f for f in kb.findings if f.ftype in cfg.types and f.ftype != "demographic"]
    unused = [f.id for f in usable if f.id not in linked]
    used = [f.id for f in usable if f.id in linked]
    demo = kb.findings_of_type("demographic") if "demographic" in cfg.types else []
    freq_w = np.array([0.10, 0.20, 0.30, 0.25, 0.15])

    diseases, links, named = [], [], []
    next_d = max(kb.disease_ids, default=-1) + 1
    for word in _pseudo_words(rng, cfg.n_new, taken):
        name = f"{word} {_DISEASE_SUFFIXES[rng.integers(len(_DISEASE_SUFFIXES))]}"
        if name in known:
            continue
        did = next_d
        next_d += 1
        diseases.append(DiseaseDef(did, name))
        n = int(rng.integers(cfg.links_per_disease[0], cfg.links_per_disease[1] + 1))
        n_un = min(len(unused), int(round(cfg.unused_fraction * n)))
        picks = [unused.pop(int(rng.integers(len(unused)))) for _ in range(n_un)]
        rest = [f for f in used if f not in picks]
        picks += [rest[i] for i in rng.choice(len(rest), size=min(len(rest), n - n_un), replace=False)]
        if demo:
            picks.append(demo[int(rng.integers(len(demo)))])
        for f in picks:
            links.append(Link(did, f, int(rng.integers(1, 6)), int(rng.choice(np.arange(1, 6), p=freq_w))))
        named.append((did, name))
    for d in rng.choice(len(kb.diseases), size=min(cfg.n_alias, len(kb.diseases)), replace=False):
        dd = kb.diseases[int(d)]
        named.append((dd.id, dd.aliases[0] if dd.aliases else dd.name.upper()))
    return extend_kb(kb, diseases=diseases, links=links), named


def generate_external_cases(kb: KnowledgeBase, config: ExternalSourceConfig | None = None,
                            seed: int = 0) -> list[ExternalCase]:
    """Deterministic in (kb, config, seed). Findings are reported by KB name, limited to ``config.types``."""
    cfg = config or ExternalSourceConfig()
    rng = np.random.default_rng(seed)
    src, named = _source_kb(kb, cfg, rng)
    keep = {f.id for f in src.findings if f.ftype in cfg.types}
    fname = {f.id: f.name for f in src.findings}
    out = []
    idx = 0
    for j, (did, name) in enumerate(named):
        made = 0
        while made < cfg.cases_per_disease:
            case = simulate_case(src, did, case_rng(seed, idx), case_id=idx)
            idx += 1
            findings = sorted(case.findings_present & keep)
            if not findings:
                continue
            label = name
            if cfg.label_noise and len(named) > 1 and rng.random() < cfg.label_noise:
                other = int(rng.integers(len(named) - 1))
                label = named[other + (other >= j)][1]
            out.append(ExternalCase(tuple(fname[f] for f in findings), label, cfg.source))
            made += 1
    return out
