"""Disease/finding knowledge base: types, point tables, validation, I/O and a seeded generator."""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from ddx.errors import ConfigError, DomainError, KbInvalidError, ParseError

FINDING_TYPES = ("demographic", "history", "symptom", "sign", "lab")
KB_VERSION = 1

_ES_POINTS = {1: 1, 2: 10, 3: 20, 4: 40, 5: 80}
_FREQ_POINTS = {1: 1, 2: 4, 3: 7, 4: 15, 5: 30}
_NAME_RE = re.compile(r"^[a-z0-9]+( [a-z0-9]+)*$")


def _check_score(score) -> int:
    if isinstance(score, bool) or not isinstance(score, (int, np.integer)) or not 1 <= score <= 5:
        raise DomainError(f"score must be an integer in [1, 5], got {score!r}")
    return int(score)


def es_points(score: int) -> int:
    """Evoking strength 1..5 -> 1, 10, 20, 40, 80 points."""
    return _ES_POINTS[_check_score(score)]


def freq_points(score: int) -> int:
    """Frequency (and import) 1..5 -> 1, 4, 7, 15, 30 points."""
    return _FREQ_POINTS[_check_score(score)]


import_points = freq_points


@dataclass(frozen=True)
class FindingDef:
    id: int
    name: str
    ftype: str
    importance: int  # the "import" score; serialized under that key


@dataclass(frozen=True)
class DiseaseDef:
    id: int
    name: str
    aliases: tuple[str, ...] = ()
    history_link_frequency: int | None = None


@dataclass(frozen=True)
class Link:
    disease_id: int
    finding_id: int
    evoking_strength: int
    frequency: int


@dataclass(frozen=True)
class ExclusionGroup:
    finding_ids: frozenset[int]


@dataclass(frozen=True)
class CoOccurrencePair:
    finding_a: int
    finding_b: int
    strength: float


@dataclass(frozen=True)
class KnowledgeBase:
    findings: tuple[FindingDef, ...]
    diseases: tuple[DiseaseDef, ...]
    links: tuple[Link, ...]
    exclusions: tuple[ExclusionGroup, ...] = ()
    cooccurrences: tuple[CoOccurrencePair, ...] = ()
    predisposing: frozenset[tuple[int, int]] = frozenset()

    # Derived lookups. Safe on a frozen dataclass: cached_property writes to __dict__ directly.

    @cached_property
    def finding_by_id(self) -> dict[int, FindingDef]:
        return {f.id: f for f in self.findings}

    @cached_property
    def disease_by_id(self) -> dict[int, DiseaseDef]:
        return {d.id: d for d in self.diseases}

    @cached_property
    def finding_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.finding_by_id))

    @cached_property
    def disease_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.disease_by_id))

    @cached_property
    def profiles(self) -> dict[int, dict[int, Link]]:
        out: dict[int, dict[int, Link]] = {d.id: {} for d in self.diseases}
        for link in self.links:
            out.setdefault(link.disease_id, {})[link.finding_id] = link
        return out

    def profile(self, disease_id: int) -> dict[int, Link]:
        try:
            return self.profiles[disease_id]
        except KeyError:
            raise DomainError(f"unknown disease id {disease_id}") from None

    @cached_property
    def exclusion_partners(self) -> dict[int, frozenset[int]]:
        partners: dict[int, set[int]] = {}
        for group in self.exclusions:
            for f in group.finding_ids:
                partners.setdefault(f, set()).update(group.finding_ids - {f})
        return {f: frozenset(p) for f, p in partners.items()}

    @cached_property
    def cooccurrence_partners(self) -> dict[int, tuple[tuple[int, float], ...]]:
        """finding -> ((partner, strength), ...) sorted by strength desc, then partner id."""
        partners: dict[int, list[tuple[int, float]]] = {}
        for pair in self.cooccurrences:
            partners.setdefault(pair.finding_a, []).append((pair.finding_b, pair.strength))
            partners.setdefault(pair.finding_b, []).append((pair.finding_a, pair.strength))
        return {f: tuple(sorted(p, key=lambda t: (-t[1], t[0]))) for f, p in partners.items()}

    def findings_of_type(self, *types: str) -> list[int]:
        wanted = set(types)
        return [f.id for f in self.findings if f.ftype in wanted]

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256(kb_to_json(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str


def validate_kb(kb: KnowledgeBase) -> list[Violation]:
    """Return every referential, uniqueness and range violation; empty list means valid."""
    out: list[Violation] = []

    def bad(code, detail):
        out.append(Violation(code, detail))

    def in_range(v):
        return isinstance(v, int) and not isinstance(v, bool) and 1 <= v <= 5

    fids: set[int] = set()
    fnames: set[str] = set()
    for f in kb.findings:
        if f.id in fids:
            bad("duplicate_finding_id", f"finding id {f.id}")
        fids.add(f.id)
        if f.name in fnames:
            bad("duplicate_finding_name", repr(f.name))
        fnames.add(f.name)
        if not isinstance(f.name, str) or not _NAME_RE.match(f.name):
            bad("bad_finding_name", f"finding {f.id}: {f.name!r}")
        if f.ftype not in FINDING_TYPES:
            bad("bad_finding_type", f"finding {f.id}: {f.ftype!r}")
        if not in_range(f.importance):
            bad("score_range", f"finding {f.id} import={f.importance!r}")

    dids: set[int] = set()
    dnames: set[str] = set()
    for d in kb.diseases:
        if d.id in dids:
            bad("duplicate_disease_id", f"disease id {d.id}")
        dids.add(d.id)
        for nm in (d.name, *d.aliases):
            key = nm.strip().lower() if isinstance(nm, str) else nm
            if not key:
                bad("bad_disease_name", f"disease {d.id}: {nm!r}")
            elif key in dnames:
                bad("duplicate_disease_name", f"disease {d.id}: {nm!r}")
            dnames.add(key)
        if d.history_link_frequency is not None and not in_range(d.history_link_frequency):
            bad("score_range", f"disease {d.id} history_link_frequency={d.history_link_frequency!r}")

    pairs: set[tuple[int, int]] = set()
    for link in kb.links:
        key = (link.disease_id, link.finding_id)
        if link.disease_id not in dids or link.finding_id not in fids:
            bad("dangling_link", f"link {key}")
        if key in pairs:
            bad("duplicate_link", f"link {key}")
        pairs.add(key)
        if not in_range(link.evoking_strength):
            bad("score_range", f"link {key} evoking_strength={link.evoking_strength!r}")
        if not in_range(link.frequency):
            bad("score_range", f"link {key} frequency={link.frequency!r}")

    for group in kb.exclusions:
        ids = sorted(group.finding_ids)
        if len(ids) < 2:
            bad("exclusion_size", f"group {ids}")
        missing = [f for f in ids if f not in fids]
        if missing:
            bad("dangling_exclusion", f"group {ids} unknown {missing}")

    seen_pairs: set[frozenset[int]] = set()
    for pair in kb.cooccurrences:
        key = frozenset((pair.finding_a, pair.finding_b))
        if pair.finding_a == pair.finding_b:
            bad("cooccurrence_self", f"pair ({pair.finding_a}, {pair.finding_b})")
        if pair.finding_a not in fids or pair.finding_b not in fids:
            bad("dangling_cooccurrence", f"pair ({pair.finding_a}, {pair.finding_b})")
        if key in seen_pairs:
            bad("duplicate_cooccurrence", f"pair ({pair.finding_a}, {pair.finding_b})")
        seen_pairs.add(key)
        if not (isinstance(pair.strength, (int, float)) and 0.0 < pair.strength <= 1.0):
            bad("cooccurrence_strength", f"pair ({pair.finding_a}, {pair.finding_b}) strength={pair.strength!r}")

    for key in sorted(kb.predisposing):
        if tuple(key) not in pairs:
            bad("predisposing_without_link", f"flag {tuple(key)}")
    return out


# ---------------------------------------------------------------------------
# serialization


def kb_to_dict(kb: KnowledgeBase) -> dict:
    return {
        "kb_version": KB_VERSION,
        "findings": [
            {"id": f.id, "name": f.name, "ftype": f.ftype, "import": f.importance}
            for f in sorted(kb.findings, key=lambda f: f.id)
        ],
        "diseases": [
            {
                "id": d.id,
                "name": d.name,
                "aliases": list(d.aliases),
                "history_link_frequency": d.history_link_frequency,
            }
            for d in sorted(kb.diseases, key=lambda d: d.id)
        ],
        "links": [
            {
                "disease": lk.disease_id,
                "finding": lk.finding_id,
                "evoking_strength": lk.evoking_strength,
                "frequency": lk.frequency,
            }
            for lk in sorted(kb.links, key=lambda lk: (lk.disease_id, lk.finding_id))
        ],
        "exclusions": sorted([sorted(g.finding_ids) for g in kb.exclusions]),
        "cooccurrences": [
            {"a": p.finding_a, "b": p.finding_b, "strength": p.strength}
            for p in sorted(kb.cooccurrences, key=lambda p: (min(p.finding_a, p.finding_b), max(p.finding_a, p.finding_b)))
        ],
        "predisposing": [list(p) for p in sorted(kb.predisposing)],
    }


def kb_to_json(kb: KnowledgeBase) -> str:
    return json.dumps(kb_to_dict(kb), indent=1) + "\n"


def _field(obj, key, where):
    try:
        return obj[key]
    except (KeyError, TypeError, IndexError):
        raise ParseError(f"{where}: missing field {key!r}") from None


def kb_from_dict(data: dict) -> KnowledgeBase:
    """Build a KnowledgeBase from its JSON form without validating it."""
    if not isinstance(data, dict):
        raise ParseError("top level: expected an object")
    version = data.get("kb_version")
    if version != KB_VERSION:
        raise ParseError(f"top level: unsupported kb_version {version!r}")
    try:
        findings = tuple(
            FindingDef(
                id=_field(f, "id", f"findings[{i}]"),
                name=_field(f, "name", f"findings[{i}]"),
                ftype=_field(f, "ftype", f"findings[{i}]"),
                importance=_field(f, "import", f"findings[{i}]"),
            )
            for i, f in enumerate(_field(data, "findings", "top level"))
        )
        diseases = tuple(
            DiseaseDef(
                id=_field(d, "id", f"diseases[{i}]"),
                name=_field(d, "name", f"diseases[{i}]"),
                aliases=tuple(d.get("aliases", ())),
                history_link_frequency=d.get("history_link_frequency"),
            )
            for i, d in enumerate(_field(data, "diseases", "top level"))
        )
        links = tuple(
            Link(
                disease_id=_field(lk, "disease", f"links[{i}]"),
                finding_id=_field(lk, "finding", f"links[{i}]"),
                evoking_strength=_field(lk, "evoking_strength", f"links[{i}]"),
                frequency=_field(lk, "frequency", f"links[{i}]"),
            )
            for i, lk in enumerate(_field(data, "links", "top level"))
        )
        exclusions = tuple(ExclusionGroup(frozenset(g)) for g in data.get("exclusions", ()))
        cooc = tuple(
            CoOccurrencePair(
                _field(p, "a", f"cooccurrences[{i}]"),
                _field(p, "b", f"cooccurrences[{i}]"),
                _field(p, "strength", f"cooccurrences[{i}]"),
            )
            for i, p in enumerate(data.get("cooccurrences", ()))
        )
        predisposing = frozenset(tuple(p) for p in data.get("predisposing", ()))
    except TypeError as exc:
        raise ParseError(f"malformed knowledge base structure: {exc}") from None
    return KnowledgeBase(findings, diseases, links, exclusions, cooc, predisposing)


def save_kb(kb: KnowledgeBase, path) -> None:
    Path(path).write_text(kb_to_json(kb), encoding="utf-8")


def load_kb(path) -> KnowledgeBase:
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    kb = kb_from_dict(data)
    violations = validate_kb(kb)
    if violations:
        raise KbInvalidError(violations)
    return kb


# ---------------------------------------------------------------------------
# seeded synthetic generator

_QUALIFIERS = (
    "present", "absent", "acute", "chronic", "mild", "severe", "elevated", "decreased",
    "left", "right", "bilateral", "recent", "intermittent", "positive", "negative",
    "increased", "low", "high", "diffuse", "focal", "moderate", "episodic",
)
_DISEASE_SUFFIXES = ("syndrome", "disease", "acute", "chronic", "infection", "disorder", "fever", "deficiency")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class KbGenConfig:
    """Knobs for :func:`generate_synthetic_kb`. Distribution defaults are inventions, not KB facts.

    ``links_per_type`` maps a finding type to the (min, max) number of links per disease;
    ``distinctiveness`` is the per-type fraction of those links drawn from findings exclusive
    to the disease. Score weight tuples are probabilities over scores 1..5.
    """

    n_diseases: int = 50
    finding_counts: dict = field(
        default_factory=lambda: {"demographic": 6, "history": 160, "symptom": 150, "sign": 300, "lab": 300}
    )
    links_per_type: dict = field(
        default_factory=lambda: {
            "demographic": (1, 2), "history": (2, 4), "symptom": (2, 5), "sign": (4, 8), "lab": (3, 6),
        }
    )
    distinctiveness: dict = field(
        default_factory=lambda: {"demographic": 0.0, "history": 0.5, "symptom": 0.4, "sign": 0.5, "lab": 0.5}
    )
    shared_fraction: float = 0.25
    shared_zipf: float = 1.0
    es_exclusive: tuple = (0.05, 0.10, 0.25, 0.35, 0.25)
    es_shared: tuple = (0.50, 0.30, 0.15, 0.05, 0.00)
    freq_exclusive: tuple = (0.10, 0.20, 0.30, 0.25, 0.15)
    freq_shared: tuple = (0.10, 0.25, 0.30, 0.25, 0.10)
    import_exclusive: tuple = (0.10, 0.20, 0.30, 0.25, 0.15)
    import_shared: tuple = (0.40, 0.35, 0.20, 0.05, 0.00)
    n_exclusion_groups: int = 10
    exclusion_size: tuple = (2, 3)
    n_cooccurrence_pairs: int = 40
    cooccurrence_strength: tuple = (0.3, 0.9)
    max_predisposing: int = 2
    history_frequency_prob: float = 0.5
    alias_fraction: float = 0.2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["links_per_type"] = {k: list(v) for k, v in self.links_per_type.items()}
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "KbGenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown kb-gen config keys: {sorted(unknown)}", code="usage")
        kw = dict(data)
        for key in ("es_exclusive", "es_shared", "freq_exclusive", "freq_shared",
                    "import_exclusive", "import_shared", "exclusion_size", "cooccurrence_strength"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "links_per_type" in kw:
            kw["links_per_type"] = {k: tuple(v) for k, v in kw["links_per_type"].items()}
        return cls(**kw)

    @classmethod
    def sim250(cls) -> "KbGenConfig":
        """Finding universe sized like the 250-disease reduced KB (481/211/961/1691)."""
        return cls(
            n_diseases=250,
            finding_counts={"demographic": 0, "history": 481, "symptom": 211, "sign": 961, "lab": 1691},
            links_per_type={"demographic": (0, 0), "history": (1, 4), "symptom": (2, 5), "sign": (3, 8), "lab": (2, 8)},
            distinctiveness={"demographic": 0.0, "history": 0.3, "symptom": 0.0, "sign": 0.4, "lab": 0.5},
            shared_fraction=0.2,
            n_exclusion_groups=60,
            n_cooccurrence_pairs=300,
        )

    @classmethod
    def sim630(cls) -> "KbGenConfig":
        """Finding universe sized like the full 630-disease KB (528/222/1141/3664)."""
        return cls(
            n_diseases=630,
            finding_counts={"demographic": 0, "history": 528, "symptom": 222, "sign": 1141, "lab": 3664},
            links_per_type={"demographic": (0, 0), "history": (1, 4), "symptom": (2, 5), "sign": (3, 8), "lab": (2, 8)},
            distinctiveness={"demographic": 0.0, "history": 0.0, "symptom": 0.0, "sign": 0.1, "lab": 0.5},
            shared_fraction=0.2,
            n_exclusion_groups=150,
            n_cooccurrence_pairs=800,
        )


def _weights(w, what) -> np.ndarray:
    arr = np.asarray(w, dtype=float)
    if arr.shape != (5,) or np.any(arr < 0) or arr.sum() <= 0:
        raise ConfigError(f"{what}: need five non-negative weights with positive sum")
    return arr / arr.sum()


def _check_config(cfg: KbGenConfig) -> dict[str, dict]:
    """Validate feasibility up front (worst case), so errors never depend on the seed."""
    if cfg.n_diseases < 1:
        raise ConfigError("n_diseases must be >= 1")
    plan = {}
    min_total = 0
    for t in FINDING_TYPES:
        count = int(cfg.finding_counts.get(t, 0))
        lo, hi = cfg.links_per_type.get(t, (0, 0))
        d = float(cfg.distinctiveness.get(t, 0.0))
        if count < 0 or lo < 0 or hi < lo:
            raise ConfigError(f"{t}: bad counts/range ({count}, {lo}, {hi})")
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"{t}: distinctiveness must lie in [0, 1]")
        if t == "demographic":
            d = 0.0
        n_shared_pool = count if d == 0.0 else max(_round_half_up(cfg.shared_fraction * count), 0)
        max_excl = _round_half_up(d * hi)
        max_shared = max(n - _round_half_up(d * n) for n in range(lo, hi + 1)) if hi > 0 else 0
        if hi > count:
            raise ConfigError(f"{t}: profile size {hi} exceeds finding pool {count}")
        if max_shared > n_shared_pool:
            raise ConfigError(f"{t}: up to {max_shared} shared links but shared pool has {n_shared_pool}")
        if cfg.n_diseases * max_excl > count - n_shared_pool:
            raise ConfigError(
                f"{t}: exclusive demand {cfg.n_diseases * max_excl} exceeds exclusive pool {count - n_shared_pool}"
            )
        min_total += lo
        plan[t] = {"count": count, "range": (lo, hi), "d": d, "n_shared_pool": n_shared_pool}
    if min_total < 3:
        raise ConfigError("each disease needs at least 3 links; raise links_per_type minima")
    lo_s, hi_s = cfg.exclusion_size
    if lo_s < 2 or hi_s < lo_s:
        raise ConfigError("exclusion_size must satisfy 2 <= min <= max")
    lo_c, hi_c = cfg.cooccurrence_strength
    if not 0.0 < lo_c <= hi_c <= 1.0:
        raise ConfigError("cooccurrence_strength must lie in (0, 1]")
    return plan


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < n:
        n_syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n_syl))
        if w not in taken and w not in _QUALIFIERS and w not in _DISEASE_SUFFIXES:
            taken.add(w)
            out.append(w)
    return out


def _demographic_names(n: int, rng, taken) -> tuple[list[str], list[list[int]]]:
    names, groups = [], []
    if n >= 2:
        names += ["sex female", "sex male"]
        groups.append([0, 1])
    ages = ["age 0 to 17", "age 18 to 39", "age 40 to 64", "age 65 plus"]
    k = min(len(ages), n - len(names))
    if k >= 2:
        groups.append(list(range(len(names), len(names) + k)))
    names += ages[:k]
    extra = n - len(names)
    names += [f"demographic {w}" for w in _pseudo_words(rng, extra, taken)]
    return names, groups


def generate_synthetic_kb(config: KbGenConfig, seed: int) -> KnowledgeBase:
    """Pure function of (config, seed); output always passes :func:`validate_kb`."""
    plan = _check_config(config)
    w_es_x, w_es_s = _weights(config.es_exclusive, "es_exclusive"), _weights(config.es_shared, "es_shared")
    w_fq_x, w_fq_s = _weights(config.freq_exclusive, "freq_exclusive"), _weights(config.freq_shared, "freq_shared")
    w_im_x, w_im_s = _weights(config.import_exclusive, "import_exclusive"), _weights(config.import_shared, "import_shared")
    rng = np.random.default_rng(seed)
    scores = np.arange(1, 6)
    taken_words: set[str] = set()

    # findings: ids assigned in type order
    findings: list[FindingDef] = []
    exclusion_groups: list[list[int]] = []
    shared_pool: dict[str, list[int]] = {}
    exclusive_pool: dict[str, list[int]] = {}
    n_total = sum(p["count"] for p in plan.values())
    n_heads = max(1, _round_half_up(0.6 * n_total))
    heads = _pseudo_words(rng, n_heads, taken_words)
    used_names: set[str] = set()
    for t in FINDING_TYPES:
        count = plan[t]["count"]
        first = len(findings)
        if t == "demographic":
            names, groups = _demographic_names(count, rng, taken_words)
            exclusion_groups += [[first + i for i in g] for g in groups]
        else:
            names = []
            while len(names) < count:
                parts = [heads[rng.integers(n_heads)], _QUALIFIERS[rng.integers(len(_QUALIFIERS))]]
                if rng.random() < 0.3:
                    parts.append(_QUALIFIERS[rng.integers(len(_QUALIFIERS))])
                name = " ".join(parts)
                if name not in used_names:
                    names.append(name)
                    used_names.add(name)
        ids = list(range(first, first + count))
        order = [ids[i] for i in rng.permutation(count)] if count else []
        n_sp = plan[t]["n_shared_pool"]
        shared_pool[t] = order[:n_sp]
        exclusive_pool[t] = order[n_sp:]
        shared_set = set(shared_pool[t])
        for fid, name in zip(ids, names):
            w = w_im_s if fid in shared_set else w_im_x
            findings.append(FindingDef(fid, name, t, int(rng.choice(scores, p=w))))

    # diseases
    diseases: list[DiseaseDef] = []
    disease_words = _pseudo_words(rng, config.n_diseases, taken_words)
    for did, word in enumerate(disease_words):
        suffix = _DISEASE_SUFFIXES[rng.integers(len(_DISEASE_SUFFIXES))]
        aliases = (f"{suffix} {word}",) if rng.random() < config.alias_fraction else ()
        hfreq = int(rng.integers(1, 6)) if rng.random() < config.history_frequency_prob else None
        diseases.append(DiseaseDef(did, f"{word} {suffix}", aliases, hfreq))

    # profiles
    links: list[Link] = []
    predisposing: set[tuple[int, int]] = set()
    excl_cursor = {t: 0 for t in FINDING_TYPES}
    profiles: dict[int, list[int]] = {}
    for d in diseases:
        prof: list[int] = []
        for t in FINDING_TYPES:
            lo, hi = plan[t]["range"]
            if hi == 0:
                continue
            n = int(rng.integers(lo, hi + 1))
            n_ex = _round_half_up(plan[t]["d"] * n)
            n_sh = n - n_ex
            ex = exclusive_pool[t][excl_cursor[t]: excl_cursor[t] + n_ex]
            excl_cursor[t] += n_ex
            pool = shared_pool[t]
            sh: list[int] = []
            if n_sh:
                w = 1.0 / np.arange(1, len(pool) + 1) ** config.shared_zipf
                picks = rng.choice(len(pool), size=n_sh, replace=False, p=w / w.sum())
                sh = [pool[i] for i in picks]
            for fid in ex:
                links.append(Link(d.id, fid, int(rng.choice(scores, p=w_es_x)), int(rng.choice(scores, p=w_fq_x))))
            for fid in sh:
                links.append(Link(d.id, fid, int(rng.choice(scores, p=w_es_s)), int(rng.choice(scores, p=w_fq_s))))
            prof += ex + sh
            if t == "history" and config.max_predisposing > 0:
                hist = sorted(ex + sh)
                k = min(len(hist), int(rng.integers(0, config.max_predisposing + 1)))
                for fid in rng.choice(hist, size=k, replace=False) if k else ():
                    predisposing.add((d.id, int(fid)))
        profiles[d.id] = sorted(prof)

    # exclusion groups: within a profile so they bind during simulation
    grouped = {f for g in exclusion_groups for f in g}
    lo_s, hi_s = config.exclusion_size
    attempts = 0
    n_made = 0
    while n_made < config.n_exclusion_groups and attempts < 50 * max(1, config.n_exclusion_groups):
        attempts += 1
        prof = [f for f in profiles[int(rng.integers(config.n_diseases))]
                if f not in grouped and findings[f].ftype != "demographic"]
        size = int(rng.integers(lo_s, hi_s + 1))
        if len(prof) < size:
            continue
        g = sorted(int(x) for x in rng.choice(prof, size=size, replace=False))
        grouped.update(g)
        exclusion_groups.append(g)
        n_made += 1

    partners: dict[int, set[int]] = {}
    for g in exclusion_groups:
        for f in g:
            partners.setdefault(f, set()).update(set(g) - {f})

    cooc: dict[tuple[int, int], float] = {}
    attempts = 0
    lo_c, hi_c = config.cooccurrence_strength
    while len(cooc) < config.n_cooccurrence_pairs and attempts < 50 * max(1, config.n_cooccurrence_pairs):
        attempts += 1
        if rng.random() < 0.8:
            prof = profiles[int(rng.integers(config.n_diseases))]
            if len(prof) < 2:
                continue
            a, b = (int(x) for x in rng.choice(prof, size=2, replace=False))
        else:
            a, b = (int(x) for x in rng.integers(0, len(findings), size=2))
        if a == b or b in partners.get(a, ()):
            continue
        key = (min(a, b), max(a, b))
        if key in cooc:
            continue
        cooc[key] = round(float(rng.uniform(lo_c, hi_c)), 3)

    return KnowledgeBase(
        findings=tuple(findings),
        diseases=tuple(diseases),
        links=tuple(sorted(links, key=lambda lk: (lk.disease_id, lk.finding_id))),
        exclusions=tuple(ExclusionGroup(frozenset(g)) for g in sorted(exclusion_groups)),
        cooccurrences=tuple(CoOccurrencePair(a, b, s) for (a, b), s in sorted(cooc.items())),
        predisposing=frozenset(predisposing),
    )


def extend_kb(kb: KnowledgeBase, *, findings: Iterable[FindingDef] = (), diseases: Iterable[DiseaseDef] = (),
              links: Iterable[Link] = ()) -> KnowledgeBase:
    """Copy of ``kb`` with extra records appended (the original is untouched)."""
    return replace(
        kb,
        findings=kb.findings + tuple(findings),
        diseases=kb.diseases + tuple(diseases),
        links=kb.links + tuple(links),
    )
