"""Top-k metrics, experiment plans, ablation tables, noise sweeps and report files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ddx import __version__
from ddx.errors import ConfigError, DataError, DomainError
from ddx.knowledge_base import FINDING_TYPES, KbGenConfig, KnowledgeBase, generate_synthetic_kb, load_kb
from ddx.simulator import (NOISE_MODES, Dataset, NoiseSpec, check_fingerprint, load_dataset, make_noisy_dataset,
                           prevalent_pool, project_finding_types, resample_balance, simulate_dataset, split_dataset)

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("ranker", "dataset", "mode", "fraction", "k", "accuracy", "n", "seed", "plan_hash")
RANKER_NAMES = ("expert", "bayes", "lr", "convnet", "convnet_noise")
DEFAULT_FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
ABLATION_TYPES = ("history", "symptom", "sign", "lab")


def topk_hits(rankings, labels, k: int) -> np.ndarray:
    """Boolean per case: does the label sit among the first ``k`` entries of its ranking?"""
    R = np.asarray(rankings)
    y = np.asarray(labels)
    if R.ndim != 2 or R.shape[0] != y.shape[0]:
        raise DomainError("need exactly one ranking per label")
    if k < 1:
        raise DomainError("k must be >= 1")
    if k > R.shape[1]:
        raise DomainError(f"k={k} exceeds ranking length {R.shape[1]}")
    return (R[:, :k] == y[:, None]).any(axis=1)


def topk_accuracy(rankings, labels, k: int) -> float:
    hits = topk_hits(rankings, labels, k)
    return int(hits.sum()) / len(hits) if len(hits) else 0.0


@dataclass
class EvalResult:
    ranker: str
    dataset: str
    n: int
    hits: dict[int, int]  # k -> number of cases with the label in the top k
    mode: str = "clean"
    fraction: float = 0.0
    seed: int | None = None
    plan_hash: str = ""
    per_disease: dict[int, dict[int, int]] = field(default_factory=dict)  # disease -> {0: n, k: hits}
    skipped: bool = False

    def accuracy(self, k: int) -> float:
        if self.n == 0:
            return 0.0
        return self.hits[k] / self.n

    @property
    def top1(self) -> float:
        return self.accuracy(1)

    @property
    def top3(self) -> float:
        return self.accuracy(3)

    def rows(self, ks: Sequence[int] | None = None) -> list[dict]:
        out = []
        for k in ks or sorted(self.hits) or [1]:
            acc = None if self.skipped else self.accuracy(k)
            out.append({"ranker": self.ranker, "dataset": self.dataset, "mode": self.mode,
                        "fraction": self.fraction, "k": k, "accuracy": acc, "n": self.n,
                        "seed": self.seed, "plan_hash": self.plan_hash})
        return out


def evaluate(ranker, cases, *, ks: Sequence[int] = (1, 3), dataset: str = "test", mode: str = "clean",
             fraction: float = 0.0, seed: int | None = None, plan_hash: str = "",
             name: str | None = None) -> EvalResult:
    """Rank every case once and count top-k hits, overall and per disease."""
    cases = list(cases)
    rname = name or getattr(ranker, "name", type(ranker).__name__)
    if not cases:
        return EvalResult(rname, dataset, 0, {}, mode, fraction, seed, plan_hash, skipped=True)
    R = ranker.rank_many(cases)
    y = np.array([c.disease_id for c in cases], dtype=np.int64)
    ks = [k for k in ks if k <= R.shape[1]]
    per_k = {k: topk_hits(R, y, k) for k in ks}
    per_disease: dict[int, dict[int, int]] = {}
    for d in np.unique(y).tolist():
        m = y == d
        per_disease[d] = {0: int(m.sum()), **{k: int(h[m].sum()) for k, h in per_k.items()}}
    return EvalResult(rname, dataset, len(cases), {k: int(h.sum()) for k, h in per_k.items()}, mode,
                      float(fraction), seed, plan_hash, per_disease)


# ---------------------------------------------------------------------------
# experiment plans


def _strict(section: str, data: dict, allowed: Iterable[str]) -> dict:
    extra = set(data) - set(allowed)
    if extra:
        raise ConfigError(f"unknown keys in {section}: {sorted(extra)}", code="usage")
    return data


@dataclass
class ExperimentPlan:
    """A JSON-described experiment. Relative paths resolve against ``base_dir``."""

    kb: dict
    dataset: dict
    rankers: list[str]
    training: dict = field(default_factory=dict)
    noise: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)
    output: dict = field(default_factory=dict)
    seed: int = 0
    base_dir: Path = field(default=Path("."), compare=False)

    _DATASET_KEYS = ("path", "n_cases", "seed", "types", "ratios", "min_test_per_disease", "rebalance")
    _TRAINING_KEYS = ("lr", "lam", "convnet", "architecture", "noise_augment", "bayes_mode")
    _NOISE_KEYS = ("modes", "fractions", "pool_size", "seed")
    _OUTPUT_KEYS = ("path", "format", "plot_data")

    def __post_init__(self):
        _strict("kb", self.kb, ("path", "generate"))
        if ("path" in self.kb) == ("generate" in self.kb):
            raise ConfigError("kb needs exactly one of 'path' or 'generate'", code="usage")
        if "generate" in self.kb:
            _strict("kb.generate", self.kb["generate"], ("preset", "config", "seed"))
        _strict("dataset", self.dataset, self._DATASET_KEYS)
        _strict("training", self.training, self._TRAINING_KEYS)
        _strict("noise", self.noise, self._NOISE_KEYS)
        _strict("output", self.output, self._OUTPUT_KEYS)
        bad = [r for r in self.rankers if r not in RANKER_NAMES]
        if bad or not self.rankers:
            raise ConfigError(f"rankers must be a non-empty subset of {RANKER_NAMES}; got {bad}", code="usage")
        for m in self.noise.get("modes", NOISE_MODES):
            if m not in NOISE_MODES:
                raise ConfigError(f"unknown noise mode {m!r}", code="usage")
        for sub in self.ablation:
            if sub != "all" and (not sub or set(sub) - set(ABLATION_TYPES)):
                raise ConfigError(f"ablation subsets draw from {ABLATION_TYPES} (or 'all'); got {sub!r}", code="usage")

    @classmethod
    def from_dict(cls, data: dict, base_dir=".") -> "ExperimentPlan":
        _strict("plan", data, [f.name for f in fields(cls) if f.name != "base_dir"])
        for key in ("kb", "dataset", "rankers"):
            if key not in data:
                raise ConfigError(f"plan is missing '{key}'", code="usage")
        return cls(**{k: v for k, v in data.items()}, base_dir=Path(base_dir))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "base_dir"}

    @property
    def plan_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def fractions(self) -> list[float]:
        return [float(x) for x in self.noise.get("fractions", DEFAULT_FRACTIONS)]

    @property
    def modes(self) -> list[str]:
        return list(self.noise.get("modes", NOISE_MODES))


def load_plan(path) -> ExperimentPlan:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"plan file {path} not found", code="missing_artifact") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}", code="usage") from None
    return ExperimentPlan.from_dict(data, base_dir=path.parent)


def worker_count() -> int:
    """Worker cap from DDX_THREADS (speed only; outputs never depend on it)."""
    try:
        return max(1, int(os.environ.get("DDX_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class ExperimentContext:
    plan: ExperimentPlan
    kb: KnowledgeBase
    train: Dataset
    val: Dataset
    test: Dataset
    _rankers: dict = field(default_factory=dict)

    def ranker(self, name: str):
        if name not in self._rankers:
            self._rankers[name] = build_ranker(name, self)
        return self._rankers[name]


def _plan_kb(plan: ExperimentPlan) -> KnowledgeBase:
    if "path" in plan.kb:
        path = plan.resolve(plan.kb["path"])
        if not path.exists():
            raise DataError(f"KB file {path} not found", code="missing_artifact")
        return load_kb(path)
    gen = plan.kb["generate"]
    preset = gen.get("preset", "desk")
    presets = {"desk": KbGenConfig, "sim250": KbGenConfig.sim250, "sim630": KbGenConfig.sim630}
    if preset not in presets:
        raise ConfigError(f"unknown KB preset {preset!r}", code="usage")
    cfg = KbGenConfig.from_dict({**presets[preset]().to_dict(), **gen.get("config", {})})
    return generate_synthetic_kb(cfg, int(gen.get("seed", plan.seed)))


def prepare(plan: ExperimentPlan) -> ExperimentContext:
    """Resolve the KB and dataset and split it; raises on KB/dataset fingerprint mismatch before any training."""
    kb = _plan_kb(plan)
    spec = plan.dataset
    seed = int(spec.get("seed", plan.seed))
    if spec.get("path"):
        path = plan.resolve(spec["path"])
        if not path.exists():
            raise DataError(f"dataset file {path} not found", code="missing_artifact")
        ds = load_dataset(path)
        check_fingerprint(ds, kb)
    else:
        ds = simulate_dataset(kb, int(spec.get("n_cases", 20_000)), seed, workers=worker_count())
    types = spec.get("types")
    if types:
        ds = project_finding_types(ds, types, kb)
    train, val, test = split_dataset(ds, spec.get("ratios", (8, 1, 1)), int(spec.get("min_test_per_disease", 0)), seed)
    if spec.get("rebalance", True):
        train = resample_balance(train, seed)
    return ExperimentContext(plan, kb, train, val, test)


def build_ranker(name: str, ctx: ExperimentContext):
    """Construct (training where needed) the named ranker from the plan's training section."""
    from ddx.bayes import BayesRanker, build_nb_model
    from ddx.expert import ExpertRanker
    from ddx.ml.convnet import ConvNetConfig
    from ddx.ml.optim import TrainConfig
    from ddx.ml.rankers import ConvNetRanker, LRRanker, fit_convnet, fit_lr

    tr = ctx.plan.training
    seed = ctx.plan.seed
    if name == "expert":
        return ExpertRanker(ctx.kb)
    if name == "bayes":
        return BayesRanker(build_nb_model(ctx.kb, mode=tr.get("bayes_mode", "positive_only")))
    if name == "lr":
        cfg = TrainConfig.from_dict({"batch_size": 64, "learning_rate": 0.5, "seed": seed, **tr.get("lr", {})})
        model, vocab = fit_lr(ctx.train, ctx.val, ctx.kb, lam=float(tr.get("lam", 0.01)), config=cfg)
        return LRRanker(model, vocab, ctx.kb)
    if name in ("convnet", "convnet_noise"):
        arch = tr.get("architecture", "desk")
        if isinstance(arch, str):
            presets = {"desk": ConvNetConfig.desk, "full": ConvNetConfig.full, "tiny": ConvNetConfig.tiny}
            if arch not in presets:
                raise ConfigError(f"unknown architecture {arch!r}", code="usage")
            mcfg = presets[arch]()
        else:
            mcfg = ConvNetConfig(**{**arch, "filters": tuple(arch.get("filters", ConvNetConfig().filters))})
        base = {"batch_size": 64, "learning_rate": 0.01, "seed": seed, **tr.get("convnet", {})}
        base["noise_augment"] = int(tr.get("noise_augment", 2)) if name == "convnet_noise" else 0
        cfg = TrainConfig.from_dict(base)
        model, vocab = fit_convnet(ctx.train, ctx.val, ctx.kb, cfg, mcfg)
        return ConvNetRanker(model, vocab, ctx.kb, name=name)
    raise ConfigError(f"unknown ranker {name!r}", code="usage")


def _cell_seed(base: int, *parts: int) -> int:
    return int(np.random.SeedSequence([int(base), *parts]).generate_state(1)[0])


def run_noise_sweep(plan: ExperimentPlan, ctx: ExperimentContext | None = None) -> list[EvalResult]:
    """Every (mode, fraction, ranker) cell on its own corrupted copy of the test split."""
    ctx = ctx or prepare(plan)
    pool = prevalent_pool(ctx.kb, int(plan.noise.get("pool_size", 50)))
    nseed = int(plan.noise.get("seed", plan.seed))
    h = plan.plan_hash
    out = []
    for mi, mode in enumerate(plan.modes):
        for fi, frac in enumerate(plan.fractions):
            noisy = make_noisy_dataset(ctx.test, NoiseSpec(mode, frac), pool, _cell_seed(nseed, mi, fi), ctx.kb)
            for name in plan.rankers:
                out.append(evaluate(ctx.ranker(name), noisy.cases, dataset="test", mode=mode, fraction=frac,
                                    seed=plan.seed, plan_hash=h, name=name))
    return out


def run_ablation(plan: ExperimentPlan, type_subsets=None, ctx: ExperimentContext | None = None) -> list[EvalResult]:
    """Evaluate on test projections to each observation subset; models stay trained on the full types.

    Demographic findings are always kept, as they are observed in every configuration.
    """
    ctx = ctx or prepare(plan)
    subsets = type_subsets if type_subsets is not None else (plan.ablation or ["all"])
    h = plan.plan_hash
    out = []
    for sub in subsets:
        if sub == "all":
            ds, label = ctx.test, "test[all]"
        else:
            bad = set(sub) - set(ABLATION_TYPES)
            if bad:
                raise DomainError(f"ablation subsets draw from {ABLATION_TYPES}; got {sorted(bad)}")
            ds = project_finding_types(ctx.test, ["demographic", *sub], ctx.kb)
            label = "test[" + "+".join(t for t in FINDING_TYPES if t in sub) + "]"
        for name in plan.rankers:
            if not ds.cases:
                log.warning("ablation %s: projected test set is empty; row skipped", label)
            out.append(evaluate(ctx.ranker(name), ds.cases, dataset=label, seed=plan.seed, plan_hash=h, name=name))
    return out


def run_plan(plan: ExperimentPlan) -> list[EvalResult]:
    """Noise sweep (whose fraction-0 cells are the clean evaluation), then any ablation rows."""
    ctx = prepare(plan)
    results = run_noise_sweep(plan, ctx)
    if plan.ablation:
        results += run_ablation(plan, plan.ablation, ctx)
    return results


# ---------------------------------------------------------------------------
# reports


def report_rows(results: Sequence[EvalResult], ks: Sequence[int] = (1, 3)) -> list[dict]:
    rows = []
    for r in results:
        rows += r.rows([k for k in ks if r.skipped or k in r.hits])
    return rows


def render_report(results: Sequence[EvalResult], fmt: str = "csv", ks: Sequence[int] = (1, 3)) -> str:
    if not results:
        raise DataError("no results to report", code="empty_report")
    rows = report_rows(results, ks)
    if fmt == "json":
        return json.dumps(rows, indent=1) + "\n"
    if fmt != "csv":
        raise DomainError(f"unknown report format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow(["" if row[c] is None else repr(row[c]) if isinstance(row[c], float) else row[c]
                    for c in REPORT_COLUMNS])
    return buf.getvalue()


def write_report(results: Sequence[EvalResult], path, fmt: str = "csv", ks: Sequence[int] = (1, 3)) -> Path:
    """One row per (result, k), columns in :data:`REPORT_COLUMNS` order. Byte-stable for equal inputs."""
    text = render_report(results, fmt, ks)
    path = Path(path)
    path.write_text(text, encoding="utf-8")
    return path


def plot_data(results: Sequence[EvalResult], k: int = 1) -> list[tuple[float, float, str]]:
    """(fraction, accuracy, ranker+mode) triples for the noise-sweep rows."""
    return [(r.fraction, r.accuracy(k), f"{r.ranker}+{r.mode}")
            for r in results if r.mode in NOISE_MODES and not r.skipped and k in r.hits]


def write_plot_data(results: Sequence[EvalResult], path, k: int = 1) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x", "y", "series"))
    for x, y, s in plot_data(results, k):
        w.writerow((repr(x), repr(y), s))
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def report_provenance(plan: ExperimentPlan, ctx: ExperimentContext | None = None) -> dict:
    prov = {"tool": "ddx", "version": __version__, "plan_hash": plan.plan_hash, "plan": plan.to_dict(),
            "seed": plan.seed}
    if ctx is not None:
        prov["kb_fingerprint"] = ctx.kb.fingerprint
        prov["dataset"] = {"train": len(ctx.train), "validation": len(ctx.val), "test": len(ctx.test)}
    return prov
