"""Command-line driver for the synchrony pipeline.

One subcommand per pipeline stage: validate | synthgen | heatmap | syncr2 |
controls | partition | sweep | decode | stats.  Flags override a JSON config
file (flat keys naming RunConfig fields); unset values fall back to defaults
that match the reference analysis (lam 0.1, 8:2 interaction-disjoint split,
6500-row budget, seeds 0,1,2, top-1 clamped variant).

Every invocation prints human-readable "# " summary lines followed by a JSON
document {config, corpus_hash, result, meta} with sorted keys; the same
document is written to --out/<subcommand>.json when --out is given.  All
wall-clock information lives under "meta", so reruns with identical inputs
are byte-identical outside that field.  corpus_hash covers every file under
the corpus root (for stats, the scores CSV instead).

Exit codes: 0 success, 2 config or validation error, 3 data error,
4 numeric failure.  Worker count comes from --threads, then the
SYNCR2_THREADS environment variable, then the CPU count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

from . import repstore, synthlab
from .decoding import ALIGNMENTS, VOCABS, report_to_dict, run_decode
from .errors import ConfigError, DataError, NumericError
from .pairsets import SplitPlan
from .stats import (
    correlate_by_family,
    family_results_to_dict,
    family_results_to_rows,
    load_score_table,
)
from .synchrony import (
    PARTITION_SOURCES,
    ScoreVariant,
    compute_heatmap,
    controls_to_rows,
    evaluate_partitioned,
    heatmap_to_csv,
    heatmap_to_dict,
    partition_to_rows,
    run_controls,
    sample_size_sweep,
    score_corpus,
    score_to_dict,
    write_long_csv,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@dataclass(frozen=True)
class RunConfig:
    corpus: str | None = None
    pair: str | None = None
    lam: float = 0.1
    split_policy: str = "interaction_disjoint"
    train_fraction: float = 0.8
    sample_budget: int = 6500
    seeds: tuple[int, ...] = (0, 1, 2)
    top_k: int = 1
    clamp: bool = True
    lags: tuple[int, ...] = (1, 2, 3, 4)
    threads: int = 0  # 0 = resolve from env / cpu count
    out: str | None = None
    allow_short: bool = False

    def plan(self, seed: int | None = None) -> SplitPlan:
        return SplitPlan(policy=self.split_policy,
                         train_fraction=self.train_fraction,
                         seed=self.seeds[0] if seed is None else seed,
                         sample_budget=self.sample_budget)

    def variant(self) -> ScoreVariant:
        return ScoreVariant(k=self.top_k, clamp_negatives=self.clamp)

    def resolved_threads(self) -> int:
        if self.threads > 0:
            return self.threads
        env = os.environ.get("SYNCR2_THREADS", "")
        if env.strip():
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"SYNCR2_THREADS must be an integer, got {env!r}")
            if n < 1:
                raise ConfigError(f"SYNCR2_THREADS must be >= 1, got {n}")
            return n
        return os.cpu_count() or 1


def _parse_int_list(value, flag: str) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = [v for v in str(value).split(",") if v.strip()]
    try:
        out = tuple(int(v) for v in items)
    except (TypeError, ValueError):
        raise ConfigError(f"{flag} expects comma-separated integers, got {value!r}")
    if not out:
        raise ConfigError(f"{flag} must not be empty")
    return out


def _parse_multipliers(value) -> dict[str, float]:
    if isinstance(value, dict):
        return {str(k): float(v) for k, v in value.items()}
    out = {}
    for item in str(value).split(","):
        if not item.strip():
            continue
        if "=" not in item:
            raise ConfigError(
                f"relationship multipliers look like name=value, got {item!r}")
        name, _, mult = item.partition("=")
        try:
            out[name.strip()] = float(mult)
        except ValueError:
            raise ConfigError(f"bad multiplier value in {item!r}")
    if not out:
        raise ConfigError("no relationship multipliers given")
    return out


_LIST_FIELDS = {"seeds", "lags"}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then config-file keys, then explicit flags."""
    names = {f.name for f in fields(RunConfig)}
    merged: dict = {}
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            raw = json.loads(Path(config_path).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}")
        except ValueError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config {config_path} must be a JSON object")
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        merged.update(raw)
    for name in names:
        flag_value = getattr(args, name, None)
        if flag_value is not None:
            merged[name] = flag_value
    for key in _LIST_FIELDS & set(merged):
        merged[key] = _parse_int_list(merged[key], key)
    cfg = RunConfig(**merged)
    try:
        cfg.plan().validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    if cfg.lam < 0:
        raise ConfigError(f"lam must be >= 0, got {cfg.lam}")
    if cfg.top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {cfg.top_k}")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "corpus": cfg.corpus,
        "pair": cfg.pair,
        "lam": cfg.lam,
        "split_policy": cfg.split_policy,
        "train_fraction": cfg.train_fraction,
        "sample_budget": cfg.sample_budget,
        "seeds": list(cfg.seeds),
        "top_k": cfg.top_k,
        "clamp": cfg.clamp,
        "lags": list(cfg.lags),
        "threads": cfg.threads,
        "out": cfg.out,
        "allow_short": cfg.allow_short,
    }


def hash_tree(root: str | Path) -> str:
    """sha256 over relative paths and contents of every file under root."""
    root = Path(root)
    h = hashlib.sha256()
    if root.is_file():
        h.update(root.name.encode())
        h.update(b"\0")
        h.update(root.read_bytes())
        return h.hexdigest()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(path.read_bytes())
    return h.hexdigest()


def _load_corpus(cfg: RunConfig):
    if not cfg.corpus:
        raise ConfigError("--corpus is required for this subcommand")
    corpus = repstore.load_corpus(cfg.corpus)
    if cfg.pair:
        if ":" not in cfg.pair:
            raise ConfigError(f"--pair looks like modelA:modelB, got {cfg.pair!r}")
        model_a, _, model_b = cfg.pair.partition(":")
        corpus = corpus.filter_pair(model_a, model_b)
    return corpus


def _emit(command: str, cfg: RunConfig, result, hash_source, summary: list[str]) -> None:
    doc = {
        "config": config_to_dict(cfg),
        "corpus_hash": hash_tree(hash_source) if hash_source else None,
        "result": result,
        "meta": {"generated_at": datetime.now(timezone.utc).isoformat()},
    }
    text = json.dumps(doc, sort_keys=True, indent=2)
    for line in summary:
        print(f"# {line}")
    print(text)
    if cfg.out:
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{command}.json").write_text(text + "\n", "utf-8")


def _fmt_score(d: dict) -> str:
    sym = d.get("symmetric")
    err = d.get("stderr")
    return f"{sym:.4f} +/- {err:.4f}" if sym is not None else "n/a"


def cmd_validate(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if not cfg.corpus:
        raise ConfigError("--corpus is required")
    report = repstore.validate_corpus(cfg.corpus, deep=not args.shallow)
    result = {
        "ok": report.ok,
        "errors": list(report.errors),
        "warnings": list(report.warnings),
        "n_interactions": report.n_interactions,
        "n_traces": report.n_traces,
    }
    status = "OK" if report.ok else f"FAILED ({len(report.errors)} error(s))"
    summary = [f"validate {cfg.corpus}: {status}, "
               f"{report.n_interactions} interaction(s), {report.n_traces} trace(s)"]
    summary += [f"error: {e}" for e in report.errors[:10]]
    _emit("validate", cfg, result, cfg.corpus, summary)
    return EXIT_OK if report.ok else EXIT_CONFIG


def cmd_synthgen(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    spec_kwargs: dict = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}")
        except ValueError as exc:
            raise ConfigError(f"spec {args.spec} is not valid JSON: {exc}")
        spec_kwargs.update(raw)
    for key in ("n_interactions", "turns", "layers_a", "layers_b", "dim",
                "signal", "noise", "markov_order", "passive_attenuation"):
        value = getattr(args, key)
        if value is not None:
            spec_kwargs[key] = value
    if args.gen_seed is not None:
        spec_kwargs["seed"] = args.gen_seed
    if args.relationships is not None:
        spec_kwargs["relationship_multipliers"] = _parse_multipliers(args.relationships)
    if "relationship_multipliers" in spec_kwargs:
        spec_kwargs["relationship_multipliers"] = _parse_multipliers(
            spec_kwargs["relationship_multipliers"])
    try:
        spec = synthlab.CouplingSpec(**spec_kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad coupling spec: {exc}")
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    corpus = synthlab.generate(spec, args.out_corpus)
    result = {
        "root": str(args.out_corpus),
        "n_interactions": len(corpus),
        "turns": spec.turns,
        "layers_a": spec.layers_a,
        "layers_b": spec.layers_b,
        "dim": spec.dim,
        "signal": spec.signal,
        "seed": spec.seed,
    }
    summary = [f"generated {len(corpus)} interaction(s) at {args.out_corpus} "
               f"(signal={spec.signal}, seed={spec.seed})"]
    _emit("synthgen", cfg, result, args.out_corpus, summary)
    return EXIT_OK


def cmd_heatmap(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    seed = cfg.seeds[0] if args.split_seed is None else args.split_seed
    hm = compute_heatmap(corpus, args.direction, condition=args.condition,
                         lag=args.lag, plan=cfg.plan(seed), lam=cfg.lam,
                         allow_short=cfg.allow_short,
                         threads=cfg.resolved_threads())
    if args.csv:
        heatmap_to_csv(hm, args.csv)
    result = heatmap_to_dict(hm)
    best = max(max(row) for row in result["grid"])
    summary = [f"heatmap {args.direction} {args.condition} lag={args.lag}: "
               f"{len(result['grid'])}x{len(result['grid'][0])} cells, "
               f"best={best:.4f}"]
    _emit("heatmap", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_syncr2(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    score = score_corpus(corpus, condition=args.condition, lag=args.lag,
                         plan=cfg.plan(), lam=cfg.lam, seeds=cfg.seeds,
                         variant=cfg.variant(), allow_short=cfg.allow_short,
                         threads=cfg.resolved_threads())
    result = score_to_dict(score)
    summary = [f"SyncR2 ({args.condition}, lag={args.lag}, "
               f"{len(cfg.seeds)} seed(s)): {_fmt_score(result)}"]
    _emit("syncr2", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_controls(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    report = run_controls(corpus, lags=cfg.lags, plan=cfg.plan(), lam=cfg.lam,
                          seeds=cfg.seeds, variant=cfg.variant(),
                          allow_short=cfg.allow_short,
                          threads=cfg.resolved_threads())
    result = {
        "experimental": score_to_dict(report.experimental),
        "passive": score_to_dict(report.passive) if report.passive else None,
        "lag_scores": {str(k): score_to_dict(s)
                       for k, s in sorted(report.lag_scores.items())},
        "warnings": list(report.warnings),
    }
    if args.csv:
        write_long_csv(args.csv, controls_to_rows(report))
    summary = [f"experimental: {_fmt_score(result['experimental'])}"]
    if result["passive"]:
        summary.append(f"passive: {_fmt_score(result['passive'])}")
    for k, s in result["lag_scores"].items():
        summary.append(f"lag {k}: {_fmt_score(s)}")
    summary += [f"warning: {w}" for w in report.warnings]
    _emit("controls", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_partition(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    sources = tuple(s for s in args.sources.split(",") if s) if args.sources \
        else PARTITION_SOURCES
    scores = evaluate_partitioned(corpus, plan=cfg.plan(), lam=cfg.lam,
                                  subsample_seeds=cfg.seeds,
                                  variant=cfg.variant(),
                                  scenario_sources=sources,
                                  allow_short=cfg.allow_short,
                                  threads=cfg.resolved_threads())
    result = {rel: score_to_dict(s) for rel, s in sorted(scores.items())}
    if args.csv:
        write_long_csv(args.csv, partition_to_rows(scores))
    summary = [f"{rel}: {_fmt_score(d)}" for rel, d in sorted(result.items())]
    _emit("partition", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    budgets = _parse_int_list(args.budgets, "--budgets")
    scores = sample_size_sweep(corpus, budgets, plan=cfg.plan(), lam=cfg.lam,
                               seeds=cfg.seeds, variant=cfg.variant(),
                               threads=cfg.resolved_threads())
    result = {str(b): score_to_dict(s) for b, s in sorted(scores.items())}
    summary = [f"budget {b}: {_fmt_score(d)}" for b, d in sorted(
        result.items(), key=lambda kv: int(kv[0]))]
    _emit("sweep", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    corpus = _load_corpus(cfg)
    kinds = sorted(VOCABS) if args.kind == "all" else [args.kind]
    alignments = list(ALIGNMENTS) if args.alignment == "all" else [args.alignment]
    reports = []
    for kind in kinds:
        for alignment in alignments:
            reports.append(run_decode(corpus, kind, alignment, role=args.role,
                                      layer=args.layer, lam=cfg.lam,
                                      plan=cfg.plan(), seeds=cfg.seeds))
    result = [report_to_dict(r) for r in reports]
    summary = [f"{r.kind}/{r.alignment}: KL={r.kl:.4f} baseline={r.baseline:.4f} "
               f"({r.n_rows} rows)" for r in reports]
    _emit("decode", cfg, result, cfg.corpus, summary)
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    table = load_score_table(args.scores)
    if args.sync_json:
        try:
            raw = json.loads(Path(args.sync_json).read_text("utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read {args.sync_json}: {exc}")
        except ValueError as exc:
            raise ConfigError(f"{args.sync_json} is not valid JSON: {exc}")
        mapping = raw.get("pairs", raw)
        if not isinstance(mapping, dict) or not mapping:
            raise ConfigError(f"{args.sync_json} must map pair ids to scores")
        scores = {str(k): float(v) for k, v in mapping.items()}
    else:
        column = args.sync_column or "syncr2"
        if column not in table.columns:
            raise ConfigError(
                f"scores file has no {column!r} column; pass --sync-json or "
                f"--sync-column (have {sorted(table.columns)})")
        scores = {pid: float(v)
                  for pid, v in zip(table.pair_ids, table.column(column))}
    covariates = tuple(c for c in args.covariates.split(",") if c) \
        if args.covariates else ()
    metrics = tuple(m for m in args.metrics.split(",") if m) \
        if args.metrics else None
    results = correlate_by_family(scores, table, covariates=covariates,
                                  metrics=metrics, min_pairs=args.min_pairs,
                                  permutations=args.permutations)
    result = family_results_to_dict(results)
    if args.csv:
        write_long_csv(args.csv, family_results_to_rows(results))
    summary = []
    for fc in results:
        line = (f"{fc.family}/{fc.metric}: r={fc.pearson.r:.3f} "
                f"p={fc.pearson.p_two_sided:.4f} n={fc.pearson.n}")
        if fc.partial is not None:
            line += (f" | partial r={fc.partial.r:.3f} "
                     f"p={fc.partial.p_two_sided:.4f}")
        summary.append(line)
    _emit("stats", cfg, result, args.scores, summary)
    return EXIT_OK


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file; flags override it")
    sub.add_argument("--corpus", help="corpus root directory")
    sub.add_argument("--pair", help="restrict to one model pair, modelA:modelB")
    sub.add_argument("--lam", type=float, help="ridge strength (default 0.1)")
    sub.add_argument("--split-policy", dest="split_policy",
                     choices=("interaction_disjoint", "persona_disjoint"))
    sub.add_argument("--train-fraction", dest="train_fraction", type=float)
    sub.add_argument("--budget", dest="sample_budget", type=int,
                     help="training sample budget (default 6500)")
    sub.add_argument("--seeds", help="comma-separated split seeds (default 0,1,2)")
    sub.add_argument("--k", dest="top_k", type=int,
                     help="top-k cells per source layer (default 1)")
    sub.add_argument("--no-clamp", dest="clamp", action="store_const", const=False,
                     help="keep negative cell scores when aggregating")
    sub.add_argument("--lags", help="comma-separated control lags (default 1,2,3,4)")
    sub.add_argument("--threads", type=int,
                     help="worker threads (default: SYNCR2_THREADS or cpu count)")
    sub.add_argument("--out", help="directory for the JSON output document")
    sub.add_argument("--allow-short", dest="allow_short", action="store_const",
                     const=True, help="accept corpora smaller than the budget")
    sub.set_defaults(config=None, corpus=None, pair=None, lam=None,
                     split_policy=None, train_fraction=None, sample_budget=None,
                     seeds=None, top_k=None, clamp=None, lags=None, threads=None,
                     out=None, allow_short=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncr2",
        description="Measure representational synchrony between paired agents.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="check a corpus and its manifest")
    _add_common(p)
    p.add_argument("--shallow", action="store_true",
                   help="skip reading trace payloads")
    p.set_defaults(func=cmd_validate)

    p = subs.add_parser("synthgen", help="generate a synthetic coupled corpus")
    _add_common(p)
    p.add_argument("--out-corpus", required=True, help="directory to write")
    p.add_argument("--spec", help="JSON file of coupling parameters")
    p.add_argument("--interactions", dest="n_interactions", type=int)
    p.add_argument("--turns", type=int)
    p.add_argument("--layers-a", dest="layers_a", type=int)
    p.add_argument("--layers-b", dest="layers_b", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--signal", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--markov-order", dest="markov_order", type=int)
    p.add_argument("--passive-attenuation", dest="passive_attenuation", type=float)
    p.add_argument("--gen-seed", dest="gen_seed", type=int)
    p.add_argument("--relationships",
                   help="signal multipliers, e.g. friend=1.0,strangers=0.5")
    p.set_defaults(func=cmd_synthgen)

    p = subs.add_parser("heatmap", help="layer-pair R^2 grid for one direction")
    _add_common(p)
    p.add_argument("--direction", required=True, choices=("A_to_B", "B_to_A"))
    p.add_argument("--condition", default="experimental",
                   choices=("experimental", "lag_k", "passive"))
    p.add_argument("--lag", type=int, default=0)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--csv", help="also write the grid as CSV")
    p.set_defaults(func=cmd_heatmap)

    p = subs.add_parser("syncr2", help="symmetric synchrony score over seeds")
    _add_common(p)
    p.add_argument("--condition", default="experimental",
                   choices=("experimental", "lag_k", "passive"))
    p.add_argument("--lag", type=int, default=0)
    p.set_defaults(func=cmd_syncr2)

    p = subs.add_parser("controls", help="experimental vs passive and lagged scores")
    _add_common(p)
    p.add_argument("--csv", help="also write per-seed rows as CSV")
    p.set_defaults(func=cmd_controls)

    p = subs.add_parser("partition", help="per-relationship synchrony")
    _add_common(p)
    p.add_argument("--sources", help="scenario sources to keep, comma-separated")
    p.add_argument("--csv", help="also write per-relationship rows as CSV")
    p.set_defaults(func=cmd_partition)

    p = subs.add_parser("sweep", help="synchrony at several sample budgets")
    _add_common(p)
    p.add_argument("--budgets", required=True,
                   help="comma-separated budgets, e.g. 1000,2000,6500")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("decode", help="emotion/action distribution readout")
    _add_common(p)
    p.add_argument("--kind", default="all", choices=("emotion", "action", "all"))
    p.add_argument("--alignment", default="all",
                   choices=ALIGNMENTS + ("all",))
    p.add_argument("--role", default="A", choices=("A", "B"))
    p.add_argument("--layer", type=int, default=-1)
    p.set_defaults(func=cmd_decode)

    p = subs.add_parser("stats", help="correlate synchrony with external scores")
    _add_common(p)
    p.add_argument("--scores", required=True, help="score table CSV")
    p.add_argument("--covariates", help="covariate columns, comma-separated")
    p.add_argument("--metrics", help="performance columns (default both composites)")
    p.add_argument("--sync-json", dest="sync_json",
                   help="JSON mapping pair ids to synchrony scores")
    p.add_argument("--sync-column", dest="sync_column",
                   help="column of --scores holding synchrony (default syncr2)")
    p.add_argument("--min-pairs", dest="min_pairs", type=int, default=3)
    p.add_argument("--permutations", type=int, default=0)
    p.add_argument("--csv", help="also write long-format rows as CSV")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
