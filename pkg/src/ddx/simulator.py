"""Case simulation from a knowledge base, dataset splits, rebalancing, projections and noise."""

from __future__ import annotations

import hashlib
import json
import math
import random
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ddx.errors import DataError, DomainError, FingerprintMismatch, ParseError
from ddx.knowledge_base import FINDING_TYPES, KnowledgeBase, freq_points

DEFAULT_P_INCL = {1: 0.05, 2: 0.20, 3: 0.50, 4: 0.80, 5: 0.95}
NOISE_MODES = ("prevalent_add", "random_remove")


@dataclass(frozen=True)
class Case:
    id: int
    disease_id: int
    findings_present: frozenset[int]
    history_of: frozenset[int] = frozenset()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "disease": self.disease_id,
            "findings": sorted(self.findings_present),
            "history": sorted(self.history_of),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Case":
        return cls(int(obj["id"]), int(obj["disease"]), frozenset(obj["findings"]), frozenset(obj.get("history", ())))


@dataclass
class Dataset:
    kb_fingerprint: str | None
    cases: tuple[Case, ...]
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.cases)

    def labels(self) -> np.ndarray:
        return np.array([c.disease_id for c in self.cases], dtype=np.int64)

    def content_hash(self) -> str:
        h = hashlib.sha256(dataset_to_jsonl(self).encode())
        h.update(json.dumps(self.provenance, sort_keys=True, default=str).encode())
        return h.hexdigest()

    def derive(self, cases: Iterable[Case], **provenance) -> "Dataset":
        prov = dict(self.provenance)
        prov.update(provenance)
        return Dataset(self.kb_fingerprint, tuple(cases), prov)


@dataclass
class SimConfig:
    """Inclusion probability per frequency score, and the chance a case records its own disease as history."""

    p_incl: dict = field(default_factory=lambda: dict(DEFAULT_P_INCL))
    history_prob: float = 0.1

    def __post_init__(self):
        self.p_incl = {int(k): float(v) for k, v in self.p_incl.items()}
        if sorted(self.p_incl) != [1, 2, 3, 4, 5] or not all(0.0 <= v <= 1.0 for v in self.p_incl.values()):
            raise DomainError("p_incl must map every frequency score 1..5 to a probability")
        if not 0.0 <= self.history_prob <= 1.0:
            raise DomainError("history_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"p_incl": {str(k): v for k, v in sorted(self.p_incl.items())}, "history_prob": self.history_prob}


def case_rng(seed: int, index: int) -> random.Random:
    """Independent stream for case ``index``; depends only on (seed, index)."""
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2, dtype=np.uint64)
    return random.Random((int(state[0]) << 64) | int(state[1]))


def _simulate(kb: KnowledgeBase, disease_id, rng: random.Random, cfg: SimConfig, case_id: int = 0):
    if disease_id is None:
        ids = kb.disease_ids
        disease_id = ids[rng.randrange(len(ids))]
    profile = kb.profile(disease_id)
    if not profile:
        raise DataError(f"disease {disease_id} has an empty profile", code="empty_profile")
    history = frozenset((disease_id,)) if rng.random() < cfg.history_prob else frozenset()

    ftype = kb.finding_by_id
    ordered = sorted(profile.values(), key=lambda lk: (-lk.frequency, lk.finding_id))
    demo = [lk.finding_id for lk in ordered if ftype[lk.finding_id].ftype == "demographic"]
    pred = [lk.finding_id for lk in ordered
            if (disease_id, lk.finding_id) in kb.predisposing and ftype[lk.finding_id].ftype != "demographic"]
    early = set(demo) | set(pred)
    rest = [lk.finding_id for lk in ordered if lk.finding_id not in early]

    excl = kb.exclusion_partners
    cooc = kb.cooccurrence_partners
    p_incl = cfg.p_incl
    included: list[int] = []
    decided: set[int] = set()
    blocked: set[int] = set()
    front: deque[tuple[int, float]] = deque()
    promoted: set[int] = set()

    def include(f):
        included.append(f)
        blocked.update(excl.get(f, ()))
        fresh = [(p, s) for p, s in cooc.get(f, ()) if p not in decided and p not in blocked and p not in promoted]
        # strongest partner ends up first in line
        for p, s in reversed(fresh):
            front.appendleft((p, s))
            promoted.add(p)

    def consider(f, p):
        decided.add(f)
        if f not in blocked and rng.random() < p:
            include(f)

    for f in demo:
        consider(f, p_incl[profile[f].frequency])
    for f in pred:
        consider(f, p_incl[profile[f].frequency])
    queue = deque(rest)
    while front or queue:
        if front:
            f, strength = front.popleft()
            if f in decided:
                continue
            link = profile.get(f)
            consider(f, max(p_incl[link.frequency] if link else 0.0, strength))
        else:
            f = queue.popleft()
            if f in decided:
                continue
            consider(f, p_incl[profile[f].frequency])

    forced = False
    if not included:
        top = next(lk.finding_id for lk in ordered if lk.finding_id not in blocked)
        included.append(top)
        forced = True
    return Case(case_id, disease_id, frozenset(included), history), forced


def simulate_case(kb: KnowledgeBase, disease_id: int | None = None, rng: random.Random | None = None,
                  config: SimConfig | None = None, case_id: int = 0) -> Case:
    """Sample one labeled case: demographics, predisposing factors, then the rest of the profile
    in decreasing frequency, honouring exclusions and promoting co-occurring findings."""
    case, _ = _simulate(kb, disease_id, rng if rng is not None else random.Random(0), config or SimConfig(), case_id)
    return case


def _simulate_range(kb, start, stop, seed, cfg):
    cases, forced = [], []
    for i in range(start, stop):
        case, was_forced = _simulate(kb, None, case_rng(seed, i), cfg, i)
        cases.append(case)
        if was_forced:
            forced.append(i)
    return cases, forced


def simulate_dataset(kb: KnowledgeBase, n_cases: int, seed: int, config: SimConfig | None = None,
                     workers: int = 1) -> Dataset:
    if n_cases < 1:
        raise DataError("n_cases must be >= 1", code="empty_request")
    cfg = config or SimConfig()
    workers = max(1, int(workers))
    if workers == 1 or n_cases < 2 * workers:
        cases, forced = _simulate_range(kb, 0, n_cases, seed, cfg)
    else:
        bounds = np.linspace(0, n_cases, workers * 4 + 1).astype(int)
        chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        cases, forced = [], []
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_simulate_range, kb, a, b, seed, cfg) for a, b in chunks]
            for fut in futures:
                c, f = fut.result()
                cases += c
                forced += f
    cfg_dict = cfg.to_dict()
    prov = {
        "kind": "simulated",
        "seed": int(seed),
        "n_cases": int(n_cases),
        "sim_config": cfg_dict,
        "config_hash": hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest()[:16],
        "kb_fingerprint": kb.fingerprint,
        "forced_cases": forced,
        "noise": None,
    }
    return Dataset(kb.fingerprint, tuple(cases), prov)


# ---------------------------------------------------------------------------
# dataset files: JSONL + sidecar .meta.json


def dataset_to_jsonl(ds: Dataset) -> str:
    return "".join(json.dumps(c.to_json(), separators=(",", ":")) + "\n" for c in ds.cases)


def meta_path(path) -> Path:
    return Path(path).with_suffix(".meta.json")


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.write_text(dataset_to_jsonl(ds), encoding="utf-8")
    meta = {"kb_fingerprint": ds.kb_fingerprint, "provenance": ds.provenance}
    meta_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def load_dataset(path) -> Dataset:
    path = Path(path)
    cases = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                cases.append(Case.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"{path}:{lineno}: bad case record ({exc})") from None
    fingerprint, prov = None, {}
    if meta_path(path).exists():
        meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
        fingerprint, prov = meta.get("kb_fingerprint"), meta.get("provenance", {})
    return Dataset(fingerprint, tuple(cases), prov)


def check_fingerprint(ds: Dataset, kb: KnowledgeBase) -> None:
    if ds.kb_fingerprint is not None and ds.kb_fingerprint != kb.fingerprint:
        raise FingerprintMismatch(
            f"dataset was built from KB {ds.kb_fingerprint[:12]} but KB {kb.fingerprint[:12]} was supplied"
        )


def validate_case(case: Case, kb: KnowledgeBase) -> None:
    if not case.findings_present:
        raise DataError(f"case {case.id} has no findings")
    unknown = [f for f in case.findings_present if f not in kb.finding_by_id]
    if unknown or case.disease_id not in kb.disease_by_id or any(d not in kb.disease_by_id for d in case.history_of):
        raise DomainError(f"case {case.id} references ids outside the knowledge base")


# ---------------------------------------------------------------------------
# splits and rebalancing


def _quotas(counts: dict[int, int], frac: float) -> dict[int, int]:
    """Largest-remainder apportionment of round(N * frac) over diseases."""
    total = sum(counts.values())
    target = int(math.floor(total * frac + 0.5))
    exact = {d: n * frac for d, n in counts.items()}
    base = {d: int(math.floor(q)) for d, q in exact.items()}
    left = target - sum(base.values())
    for d in sorted(counts, key=lambda d: (-(exact[d] - base[d]), d))[:max(left, 0)]:
        base[d] += 1
    return base


def split_dataset(ds: Dataset, ratios: Sequence[float] = (8, 1, 1), min_test_per_disease: int = 0,
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Per-disease train/validation/test split. Exact replicas (same disease and findings) are kept
    together, so no test case has a copy in train."""
    r = np.asarray(ratios, dtype=float)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise DomainError("ratios must be three non-negative numbers")
    r_train, r_val, r_test = r / r.sum()
    by_d: dict[int, list[int]] = {}
    for i, c in enumerate(ds.cases):
        by_d.setdefault(c.disease_id, []).append(i)
    counts = {d: len(ix) for d, ix in by_d.items()}
    short = [d for d, n in counts.items() if n < min_test_per_disease]
    if short:
        raise DataError(f"diseases {sorted(short)[:10]} have fewer than {min_test_per_disease} cases",
                        code="insufficient_cases")
    q_test = _quotas(counts, r_test)
    q_val = _quotas(counts, r_val)
    rng = np.random.default_rng(seed)
    assign = np.zeros(len(ds.cases), dtype=np.int8)  # 0 train, 1 val, 2 test
    for d in sorted(by_d):
        groups: dict[frozenset, list[int]] = {}
        for i in by_d[d]:
            groups.setdefault(ds.cases[i].findings_present, []).append(i)
        glist = list(groups.values())
        t_target = max(q_test[d], min_test_per_disease)
        v_target = min(q_val[d], counts[d] - t_target)
        n_t = n_v = 0
        for gi in rng.permutation(len(glist)):
            g = glist[gi]
            if n_t + len(g) <= t_target:
                assign[g] = 2
                n_t += len(g)
            elif n_v + len(g) <= v_target:
                assign[g] = 1
                n_v += len(g)
        if n_t < min_test_per_disease:
            raise DataError(f"disease {d}: only {n_t} replica-free test cases (floor {min_test_per_disease})",
                            code="insufficient_cases")
    if not np.any(assign == 2):
        raise DataError("test set is empty after replica removal", code="insufficient_cases")
    parts = []
    for code, name in ((0, "train"), (1, "validation"), (2, "test")):
        cases = [c for c, a in zip(ds.cases, assign) if a == code]
        parts.append(ds.derive(cases, split={"part": name, "ratios": [float(x) for x in r],
                                             "min_test_per_disease": int(min_test_per_disease), "seed": int(seed)}))
    return tuple(parts)


def resample_balance(train: Dataset, seed: int) -> Dataset:
    """Oversample with replacement until every disease has the max per-disease count."""
    if not train.cases:
        raise DataError("cannot rebalance an empty training set")
    rng = np.random.default_rng(seed)
    by_d: dict[int, list[int]] = {}
    for i, c in enumerate(train.cases):
        by_d.setdefault(c.disease_id, []).append(i)
    top = max(len(v) for v in by_d.values())
    next_id = max(c.id for c in train.cases) + 1
    extra = []
    for d in sorted(by_d):
        need = top - len(by_d[d])
        if need:
            for i in rng.choice(by_d[d], size=need, replace=True):
                src = train.cases[int(i)]
                extra.append(Case(next_id, src.disease_id, src.findings_present, src.history_of))
                next_id += 1
    return train.derive(train.cases + tuple(extra), rebalanced={"seed": int(seed), "added": len(extra)})


# ---------------------------------------------------------------------------
# projections and noise


def project_finding_types(ds: Dataset, types: Iterable[str], kb: KnowledgeBase) -> Dataset:
    keep_types = set(types)
    if not keep_types:
        raise DomainError("types must be non-empty")
    bad = keep_types - set(FINDING_TYPES)
    if bad:
        raise DomainError(f"unknown finding types {sorted(bad)}")
    keep = {f.id for f in kb.findings if f.ftype in keep_types}
    out, dropped = [], 0
    for c in ds.cases:
        kept = c.findings_present & keep
        if kept:
            out.append(c if kept == c.findings_present else Case(c.id, c.disease_id, frozenset(kept), c.history_of))
        else:
            dropped += 1
    return ds.derive(out, projection={"types": sorted(keep_types), "dropped": dropped})


def prevalent_pool(kb: KnowledgeBase, pool_size: int) -> list[int]:
    """Findings ranked by (#linked diseases x mean frequency points), i.e. summed frequency points."""
    if pool_size < 1:
        raise DomainError("pool size must be >= 1")
    if pool_size > len(kb.findings):
        raise DataError(f"pool size {pool_size} exceeds {len(kb.findings)} findings", code="pool_too_large")
    score = {f.id: 0 for f in kb.findings}
    for lk in kb.links:
        score[lk.finding_id] += freq_points(lk.frequency)
    return sorted(score, key=lambda f: (-score[f], f))[:pool_size]


@dataclass(frozen=True)
class NoiseSpec:
    mode: str
    fraction: float
    k_range: tuple[int, int] = (1, 5)

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise DomainError(f"noise mode must be one of {NOISE_MODES}")
        if not 0.0 <= self.fraction <= 1.0:
            raise DomainError("noise fraction must lie in [0, 1]")
        lo, hi = self.k_range
        if lo < 1 or hi < lo:
            raise DomainError("k_range must satisfy 1 <= lo <= hi")


def corrupt_case(case: Case, mode: str, k: int, pool: Sequence[int], rng: random.Random,
                 kb: KnowledgeBase | None = None) -> Case:
    """Add up to ``k`` pool findings (respecting exclusions) or remove ``k`` at random (keeping one)."""
    present = set(case.findings_present)
    if mode == "prevalent_add":
        if not pool:
            raise DomainError("prevalent_add needs a non-empty pool")
        partners = kb.exclusion_partners if kb is not None else {}
        blocked = set()
        for f in present:
            blocked.update(partners.get(f, ()))
        for _ in range(k):
            avail = [f for f in pool if f not in present and f not in blocked]
            if not avail:
                break
            f = avail[rng.randrange(len(avail))]
            present.add(f)
            blocked.update(partners.get(f, ()))
    elif mode == "random_remove":
        n_rm = min(k, len(present) - 1)
        if n_rm > 0:
            present -= set(rng.sample(sorted(present), n_rm))
    else:
        raise DomainError(f"unknown noise mode {mode!r}")
    if present == case.findings_present:
        return case
    return Case(case.id, case.disease_id, frozenset(present), case.history_of)


def make_noisy_dataset(ds: Dataset, spec: NoiseSpec, pool: Sequence[int], seed: int,
                       kb: KnowledgeBase | None = None) -> Dataset:
    """Corrupt exactly floor(fraction * n) cases, with k spread evenly over ``spec.k_range``."""
    n = len(ds.cases)
    n_bad = int(math.floor(spec.fraction * n + 1e-9))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=n_bad, replace=False) if n_bad else np.array([], dtype=int)
    lo, hi = spec.k_range
    ks = np.array([lo + j % (hi - lo + 1) for j in range(n_bad)], dtype=int)
    ks = ks[rng.permutation(n_bad)]
    cases = list(ds.cases)
    k_of = {}
    for pos, k in zip(chosen.tolist(), ks.tolist()):
        cases[pos] = corrupt_case(cases[pos], spec.mode, k, pool, case_rng(seed, pos), kb)
        k_of[ds.cases[pos].id] = k
    noise = {**asdict(spec), "seed": int(seed), "pool_size": len(pool),
             "corrupted": {str(i): k for i, k in sorted(k_of.items())}}
    return ds.derive(cases, noise=noise)
