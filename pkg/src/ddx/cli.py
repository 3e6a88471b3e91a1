"""Command-line entry point: ``ddx <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` (a JSON object of that subcommand's parameters);
flags given on the command line override file values key by key. Exit status: 0 success,
1 domain or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from ddx import __version__
from ddx.errors import DdxError
from ddx.expert import score_disease
from ddx.knowledge_base import KbGenConfig, generate_synthetic_kb, load_kb, save_kb
from ddx.simulator import (NOISE_MODES, Dataset, NoiseSpec, SimConfig, check_fingerprint, load_dataset,
                           make_noisy_dataset, meta_path, prevalent_pool, project_finding_types, resample_balance,
                           save_dataset, simulate_dataset, split_dataset)

log = logging.getLogger("ddx")

KB_PRESETS = {"desk": KbGenConfig, "sim250": KbGenConfig.sim250, "sim630": KbGenConfig.sim630}
METHODS = ("expert", "bayes", "lr", "convnet")

# parameter name -> default, per subcommand. Config-file keys must come from these tables.
PARAMS: dict[str, dict] = {
    "kb-gen": {"preset": "desk", "seed": 0, "output": None, **KbGenConfig().to_dict()},
    "simulate": {"kb": None, "n_cases": 20_000, "seed": 0, "workers": None, "types": None, "output": None,
                 "p_incl": None, "history_prob": 0.1},
    "noise": {"kb": None, "cases": None, "mode": "prevalent_add", "fraction": 0.5, "pool_size": 50, "seed": 0,
              "k_range": [1, 5], "output": None},
    "split": {"kb": None, "cases": None, "ratios": [8, 1, 1], "min_test_per_disease": 0, "seed": 0,
              "rebalance": False, "output": None},
    "train": {"kb": None, "train": None, "val": None, "model": "lr", "seed": 0, "lam": 0.01, "batch_size": None,
              "learning_rate": None, "momentum": 0.9, "epochs": 10, "noise_augment": 0, "pool_size": 50,
              "architecture": "desk", "output": None},
    "rank": {"kb": None, "cases": None, "method": "expert", "model": None, "topk": 3, "bayes_mode": "positive_only",
             "output": None},
    "evaluate": {"kb": None, "cases": None, "method": "expert", "model": None, "topk": [1, 3],
                 "bayes_mode": "positive_only", "format": "csv", "output": None},
    "sweep": {"plan": None, "format": None, "output": None, "emit_plot_data": None},
    "ingest": {"kb": None, "external": None, "policy": "reject", "strict": False, "sim_train": None,
               "holdout_fraction": 0.1, "seed": 0, "out_kb": None, "out_train": None, "out_test": None},
    "run": {"plan": None, "emit_plot_data": None},
}
REQUIRED = {
    "kb-gen": ("output",), "simulate": ("kb", "output"), "noise": ("kb", "cases", "output"),
    "split": ("cases", "output"), "train": ("kb", "train", "output"), "rank": ("kb", "cases"),
    "evaluate": ("kb", "cases"), "sweep": ("plan", "output"), "ingest": ("kb", "external", "out_kb"),
    "run": ("plan",),
}


class UsageError(DdxError):
    def __init__(self, message: str):
        super().__init__(message, code="usage")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = _Parser(prog="ddx", description="Differential-diagnosis toolkit.")
    p.add_argument("--version", action="version", version=f"ddx {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        sp = sub.add_parser(name, help=help_, argument_default=S)
        sp.add_argument("--config", help="JSON file of parameters for this subcommand")
        return sp

    sp = cmd("kb-gen", "generate a synthetic knowledge base")
    sp.add_argument("--preset", choices=sorted(KB_PRESETS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-diseases", dest="n_diseases", type=int)
    sp.add_argument("-o", "--output")

    sp = cmd("simulate", "simulate labeled cases from a KB")
    sp.add_argument("--kb")
    sp.add_argument("--n", "--n-cases", dest="n_cases", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--types", nargs="+")
    sp.add_argument("--history-prob", dest="history_prob", type=float)
    sp.add_argument("-o", "--output")

    sp = cmd("noise", "corrupt a fraction of cases")
    sp.add_argument("--kb")
    sp.add_argument("--cases")
    sp.add_argument("--mode", choices=NOISE_MODES)
    sp.add_argument("--fraction", type=float)
    sp.add_argument("--pool-size", dest="pool_size", type=int)
    sp.add_argument("--k-range", dest="k_range", type=int, nargs=2)
    sp.add_argument("--seed", type=int)
    sp.add_argument("-o", "--output")

    sp = cmd("split", "per-disease train/validation/test split")
    sp.add_argument("--kb")
    sp.add_argument("--cases")
    sp.add_argument("--ratios", type=float, nargs=3)
    sp.add_argument("--min-test", dest="min_test_per_disease", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--rebalance", action="store_true")
    sp.add_argument("-o", "--output", help="output prefix; writes PREFIX.{train,validation,test}.jsonl")

    sp = cmd("train", "train a learned ranker")
    sp.add_argument("--kb")
    sp.add_argument("--train")
    sp.add_argument("--val")
    sp.add_argument("--model", choices=["lr", "convnet"])
    sp.add_argument("--seed", type=int)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--lr", "--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--momentum", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--noise-augment", dest="noise_augment", type=int)
    sp.add_argument("--pool-size", dest="pool_size", type=int)
    sp.add_argument("--architecture", choices=["desk", "full", "tiny"])
    sp.add_argument("-o", "--output")

    for name, help_ in (("rank", "rank diseases for each case"), ("evaluate", "top-k accuracy on labeled cases")):
        sp = cmd(name, help_)
        sp.add_argument("--kb")
        sp.add_argument("--cases")
        sp.add_argument("--method", choices=METHODS)
        sp.add_argument("--model")
        sp.add_argument("--bayes-mode", dest="bayes_mode", choices=["positive_only", "full_binary"])
        if name == "rank":
            sp.add_argument("--topk", type=int)
        else:
            sp.add_argument("--topk", type=int, nargs="+")
            sp.add_argument("--format", choices=["csv", "json"])
        sp.add_argument("-o", "--output")

    sp = cmd("sweep", "noise sweep from an experiment plan")
    sp.add_argument("--plan")
    sp.add_argument("--format", choices=["csv", "json"])
    sp.add_argument("--emit-plot-data", dest="emit_plot_data")
    sp.add_argument("-o", "--output")

    sp = cmd("ingest", "reconcile external cases with a KB and merge them")
    sp.add_argument("--kb")
    sp.add_argument("--external")
    sp.add_argument("--policy", choices=["reject", "create"])
    sp.add_argument("--strict", action="store_true")
    sp.add_argument("--sim-train", dest="sim_train")
    sp.add_argument("--holdout", dest="holdout_fraction", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-kb", dest="out_kb")
    sp.add_argument("--out-train", dest="out_train")
    sp.add_argument("--out-test", dest="out_test")

    sp = cmd("run", "execute a full experiment plan")
    sp.add_argument("plan", nargs="?")
    sp.add_argument("--emit-plot-data", dest="emit_plot_data")
    return p


def effective_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the --config file, then explicit flags."""
    table = PARAMS[command]
    cfg = dict(table)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "log_level", "config")}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config {args.config}: expected a JSON object")
        unknown = sorted(set(data) - set(table))
        if unknown:
            raise UsageError(f"config {args.config}: unknown keys {unknown}")
        cfg.update(data)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{command}: missing required parameter(s) {missing}")
    return cfg


def _provenance(command: str, cfg: dict) -> dict:
    canon = json.dumps(cfg, sort_keys=True, default=str)
    return {"tool": "ddx", "version": __version__, "command": command, "config": cfg,
            "config_hash": hashlib.sha256(canon.encode()).hexdigest()[:16]}


def _write_meta(path, prov: dict) -> None:
    meta_path(path).write_text(json.dumps(prov, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _save(ds: Dataset, path, command, cfg) -> None:
    save_dataset(ds.derive(ds.cases, cli=_provenance(command, cfg)), path)


def _load_checked(path, kb) -> Dataset:
    ds = load_dataset(path)
    if kb is not None:
        check_fingerprint(ds, kb)
    return ds


def _workers(value) -> int:
    from ddx.evaluation import worker_count
    return int(value) if value else worker_count()


# ---------------------------------------------------------------------------
# subcommands


def cmd_kb_gen(cfg: dict) -> int:
    if cfg["preset"] not in KB_PRESETS:
        raise UsageError(f"unknown preset {cfg['preset']!r}")
    base = KB_PRESETS[cfg["preset"]]().to_dict()
    default = KbGenConfig().to_dict()
    # keys still at the desk default defer to the preset; anything changed by file or flag wins
    gen = {k: (cfg[k] if cfg[k] != default[k] else base[k]) for k in default}
    kb = generate_synthetic_kb(KbGenConfig.from_dict(gen), int(cfg["seed"]))
    save_kb(kb, cfg["output"])
    _write_meta(cfg["output"], {**_provenance("kb-gen", cfg), "kb_fingerprint": kb.fingerprint})
    return 0


def cmd_simulate(cfg: dict) -> int:
    kb = load_kb(cfg["kb"])
    sim = SimConfig(cfg["p_incl"] or SimConfig().p_incl, float(cfg["history_prob"]))
    ds = simulate_dataset(kb, int(cfg["n_cases"]), int(cfg["seed"]), sim, workers=_workers(cfg["workers"]))
    if cfg["types"]:
        ds = project_finding_types(ds, cfg["types"], kb)
    _save(ds, cfg["output"], "simulate", cfg)
    return 0


def cmd_noise(cfg: dict) -> int:
    kb = load_kb(cfg["kb"])
    ds = _load_checked(cfg["cases"], kb)
    pool = prevalent_pool(kb, int(cfg["pool_size"]))
    spec = NoiseSpec(cfg["mode"], float(cfg["fraction"]), tuple(cfg["k_range"]))
    _save(make_noisy_dataset(ds, spec, pool, int(cfg["seed"]), kb), cfg["output"], "noise", cfg)
    return 0


def cmd_split(cfg: dict) -> int:
    kb = load_kb(cfg["kb"]) if cfg["kb"] else None
    ds = _load_checked(cfg["cases"], kb)
    parts = split_dataset(ds, cfg["ratios"], int(cfg["min_test_per_disease"]), int(cfg["seed"]))
    if cfg["rebalance"]:
        parts = (resample_balance(parts[0], int(cfg["seed"])),) + parts[1:]
    for name, part in zip(("train", "validation", "test"), parts):
        _save(part, f"{cfg['output']}.{name}.jsonl", "split", cfg)
    return 0


def cmd_train(cfg: dict) -> int:
    from ddx.ml.convnet import ConvNetConfig
    from ddx.ml.io import save_model
    from ddx.ml.optim import TrainConfig
    from ddx.ml.rankers import fit_convnet, fit_lr

    kb = load_kb(cfg["kb"])
    train = _load_checked(cfg["train"], kb)
    val = _load_checked(cfg["val"], kb) if cfg["val"] else None
    is_lr = cfg["model"] == "lr"
    tc = TrainConfig(
        batch_size=int(cfg["batch_size"] or 64),
        learning_rate=float(cfg["learning_rate"] or (0.5 if is_lr else 0.01)),
        momentum=float(cfg["momentum"]), epochs=int(cfg["epochs"]), seed=int(cfg["seed"]),
        noise_augment=int(cfg["noise_augment"]), pool_size=int(cfg["pool_size"]),
    )
    if is_lr:
        model, vocab = fit_lr(train, val, kb, lam=float(cfg["lam"]), config=tc)
    else:
        arch = {"desk": ConvNetConfig.desk, "full": ConvNetConfig.full, "tiny": ConvNetConfig.tiny}
        if cfg["architecture"] not in arch:
            raise UsageError(f"unknown architecture {cfg['architecture']!r}")
        model, vocab = fit_convnet(train, val, kb, tc, arch[cfg["architecture"]]())
    model.meta["provenance"] = {**_provenance("train", cfg), "kb_fingerprint": kb.fingerprint}
    save_model(model, vocab, cfg["output"])
    return 0


def _ranker(cfg: dict, kb):
    from ddx.bayes import BayesRanker, build_nb_model
    from ddx.expert import ExpertRanker

    method = cfg["method"]
    if method == "expert":
        return ExpertRanker(kb)
    if method == "bayes":
        return BayesRanker(build_nb_model(kb, mode=cfg["bayes_mode"]))
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}")
    from ddx.ml.convnet import ConvNetModel
    from ddx.ml.io import load_model
    from ddx.ml.rankers import ConvNetRanker, LRRanker

    if not cfg["model"]:
        raise UsageError(f"method {method} needs --model")
    model, vocab = load_model(cfg["model"])
    is_conv = isinstance(model, ConvNetModel)
    if is_conv != (method == "convnet"):
        raise UsageError(f"model file holds a {'convnet' if is_conv else 'lr'} model, not {method}")
    return (ConvNetRanker if is_conv else LRRanker)(model, vocab, kb)


def cmd_rank(cfg: dict) -> int:
    kb = load_kb(cfg["kb"])
    ds = _load_checked(cfg["cases"], kb)
    ranker = _ranker(cfg, kb)
    k = int(cfg["topk"])
    lines = []
    for c in ds.cases:
        entries = []
        for d, s in ranker.rank(c).top(k):
            entry = {"disease": d, "name": kb.disease_by_id[d].name, "score": s}
            if cfg["method"] == "expert":
                entry["breakdown"] = score_disease(kb, c.findings_present, c.history_of, d).to_json()
            entries.append(entry)
        lines.append(json.dumps({"id": c.id, "ranking": entries}))
    text = "".join(line + "\n" for line in lines)
    if cfg["output"]:
        Path(cfg["output"]).write_text(text, encoding="utf-8")
        _write_meta(cfg["output"], _provenance("rank", cfg))
    else:
        sys.stdout.write(text)
    return 0


def cmd_evaluate(cfg: dict) -> int:
    from ddx.evaluation import evaluate, render_report, write_report

    kb = load_kb(cfg["kb"])
    ds = _load_checked(cfg["cases"], kb)
    ks = cfg["topk"] if isinstance(cfg["topk"], list) else [cfg["topk"]]
    prov = _provenance("evaluate", cfg)
    res = evaluate(_ranker(cfg, kb), ds.cases, ks=ks, dataset=Path(cfg["cases"]).name,
                   mode="clean", plan_hash=prov["config_hash"], name=cfg["method"])
    if cfg["output"]:
        write_report([res], cfg["output"], cfg["format"], ks)
        _write_meta(cfg["output"], prov)
    else:
        sys.stdout.write(render_report([res], cfg["format"], ks))
    return 0


def _plan_outputs(plan, results, ctx, output, fmt, plot) -> None:
    from ddx.evaluation import report_provenance, write_plot_data, write_report

    write_report(results, output, fmt)
    _write_meta(output, report_provenance(plan, ctx))
    if plot:
        write_plot_data(results, plot)


def cmd_sweep(cfg: dict) -> int:
    from ddx.evaluation import load_plan, prepare, run_noise_sweep

    plan = load_plan(cfg["plan"])
    ctx = prepare(plan)
    results = run_noise_sweep(plan, ctx)
    fmt = cfg["format"] or plan.output.get("format", "csv")
    _plan_outputs(plan, results, ctx, cfg["output"], fmt, cfg["emit_plot_data"])
    return 0


def cmd_ingest(cfg: dict) -> int:
    from ddx.ingest import load_external_cases, merge_with_holdout, reconcile

    kb = load_kb(cfg["kb"])
    external = load_external_cases(cfg["external"], strict=bool(cfg["strict"]))
    rec = reconcile(external, kb, cfg["policy"])
    save_kb(rec.kb, cfg["out_kb"])
    prov = _provenance("ingest", cfg)
    _write_meta(cfg["out_kb"], {**prov, "kb_fingerprint": rec.kb.fingerprint, "base_kb": kb.fingerprint,
                                "new_disease_ids": rec.new_disease_ids, "new_finding_ids": rec.new_finding_ids})
    if cfg["sim_train"]:
        if not (cfg["out_train"] and cfg["out_test"]):
            raise UsageError("ingest with --sim-train needs --out-train and --out-test")
        sim = _load_checked(cfg["sim_train"], kb)
        combined, test = merge_with_holdout(sim, rec.cases, float(cfg["holdout_fraction"]), int(cfg["seed"]), rec.kb)
        _save(combined, cfg["out_train"], "ingest", cfg)
        _save(test, cfg["out_test"], "ingest", cfg)
    elif cfg["out_train"]:
        _save(Dataset(rec.kb.fingerprint, tuple(rec.cases), {"kind": "external"}), cfg["out_train"], "ingest", cfg)
    return 0


def pipeline_run(plan_path, emit_plot_data=None) -> Path:
    """Dataset, then training, then evaluation for one plan; returns the report path."""
    from ddx.evaluation import load_plan, prepare, run_ablation, run_noise_sweep

    plan = load_plan(plan_path)
    if not plan.output.get("path"):
        raise UsageError("plan.output.path is required for run")
    ctx = prepare(plan)  # fingerprint mismatches abort here, before any training
    results = run_noise_sweep(plan, ctx)
    if plan.ablation:
        results += run_ablation(plan, plan.ablation, ctx)
    out = plan.resolve(plan.output["path"])
    plot = emit_plot_data or plan.output.get("plot_data")
    _plan_outputs(plan, results, ctx, out, plan.output.get("format", "csv"), plan.resolve(plot) if plot else None)
    return out


def cmd_run(cfg: dict) -> int:
    pipeline_run(cfg["plan"], cfg["emit_plot_data"])
    return 0


HANDLERS = {
    "kb-gen": cmd_kb_gen, "simulate": cmd_simulate, "noise": cmd_noise, "split": cmd_split, "train": cmd_train,
    "rank": cmd_rank, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "ingest": cmd_ingest, "run": cmd_run,
}


def _fail(code: str, message: str, status: int) -> int:
    print(f"ddx: error [{code}]: {message}", file=sys.stderr)
    return status


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail("usage", str(exc), 2)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args.command, args)
        return HANDLERS[args.command](cfg)
    except DdxError as exc:
        code = exc.code or "error"
        return _fail(code, str(exc), 2 if code == "usage" else 1)
    except BrokenPipeError:  # e.g. piped into head
        sys.stderr.close()
        return 0
    except FileNotFoundError as exc:
        return _fail("missing_artifact", f"{exc.filename}: not found", 1)
    except OSError as exc:
        return _fail("io", f"{exc.filename}: {exc.strerror}", 1)


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
