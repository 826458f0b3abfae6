"""Layer-grid heatmaps and their aggregation into synchrony scores.

The directional score takes, per source layer, the mean of the k best test
R2 values across the partner's layers (k=1 is the best-match rule), clamps
that per-layer aggregate at zero when requested, and averages over source
layers. The symmetric score averages both directions. Scores aggregate over
split seeds as mean plus standard error (sample stddev / sqrt(n)).
"""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .pairsets import (
    PairFamily,
    SplitPlan,
    build_pair_family,
    enforce_budget,
    split_family,
)
from .regression import RidgeSolver, r2_uniform
from .repstore import Corpus

log = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
PARTITION_SOURCES = ("social_iqa", "social_chemistry", "normbank")


@dataclass(frozen=True)
class ScoreVariant:
    k: int = 1
    clamp_negatives: bool = True

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class SynchronyHeatmap:
    direction: str
    condition: str
    lag: int
    grid: np.ndarray
    split_seed: int
    lam: float

    @property
    def n_source_layers(self) -> int:
        return self.grid.shape[0]

    @property
    def n_target_layers(self) -> int:
        return self.grid.shape[1]


@dataclass
class SyncScore:
    forward: float | None
    backward: float | None
    symmetric: float
    per_seed: list[float]
    stderr: float
    variant: ScoreVariant


@dataclass
class ControlReport:
    experimental: SyncScore
    passive: SyncScore | None
    lag_scores: dict[int, SyncScore]
    warnings: list[str] = field(default_factory=list)


def _grid_scores(family: PairFamily, train_idx: np.ndarray, test_idx: np.ndarray,
                 lam: float, threads: int = 1) -> np.ndarray:
    """Test R2 for every layer pair; one factorization per source layer."""
    src_tr = family.sources[train_idx]
    tgt_tr = family.targets[train_idx]
    src_te = family.sources[test_idx]
    tgt_te = family.targets[test_idx]
    l_src, l_tgt = family.n_source_layers, family.n_target_layers
    grid = np.empty((l_src, l_tgt), dtype=np.float64)

    def fill_row(ls: int) -> None:
        solver = RidgeSolver(src_tr[:, ls, :], lam)
        x_te = src_te[:, ls, :]
        for lt in range(l_tgt):
            m = solver.solve(tgt_tr[:, lt, :])
            grid[ls, lt] = r2_uniform(tgt_te[:, lt, :], m.predict(x_te))

    if threads <= 1:
        for ls in range(l_src):
            fill_row(ls)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_row, range(l_src)))
    if not np.isfinite(grid).all():
        raise NumericError("heatmap contains non-finite cells")
    return grid


def compute_heatmap(corpus: Corpus, direction: str, condition: str = "experimental",
                    lag: int = 0, plan: SplitPlan = SplitPlan(), lam: float = 0.1,
                    allow_short: bool = False, threads: int = 1) -> SynchronyHeatmap:
    """Full pipeline for one direction and condition at one split seed."""
    family = build_pair_family(corpus, direction, condition, lag)
    family = enforce_budget(family, plan.sample_budget, plan.seed, allow_short)
    train_idx, test_idx = split_family(family, plan)
    grid = _grid_scores(family, train_idx, test_idx, lam, threads)
    return SynchronyHeatmap(direction, condition, lag, grid, plan.seed, lam)


def syncr2_directional(heatmap: SynchronyHeatmap | np.ndarray, k: int = 1,
                       clamp: bool = True) -> float:
    grid = heatmap.grid if isinstance(heatmap, SynchronyHeatmap) else np.asarray(heatmap)
    if grid.ndim != 2:
        raise ValueError("heatmap grid must be 2-d")
    if not 1 <= k <= grid.shape[1]:
        raise ValueError(f"k must lie in [1, {grid.shape[1]}], got {k}")
    top_k = np.sort(grid, axis=1)[:, -k:].mean(axis=1)
    if clamp:
        top_k = np.maximum(top_k, 0.0)
    return float(top_k.mean())


def _check_pairing(fwd: SynchronyHeatmap, bwd: SynchronyHeatmap) -> None:
    if fwd.direction == bwd.direction:
        raise DataError(
            f"symmetric score needs opposite directions, got {fwd.direction} twice")
    if (fwd.condition, fwd.lag) != (bwd.condition, bwd.lag):
        raise DataError(
            f"mismatched conditions: {fwd.condition}/lag{fwd.lag} vs "
            f"{bwd.condition}/lag{bwd.lag}")
    if fwd.split_seed != bwd.split_seed:
        raise DataError(
            f"mismatched split seeds: {fwd.split_seed} vs {bwd.split_seed}")


def _stderr(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def syncr2_symmetric(forward, backward, variant: ScoreVariant = ScoreVariant()) -> SyncScore:
    """Symmetric score from per-seed heatmap pairs (single heatmaps allowed)."""
    variant.validate()
    fwds = [forward] if isinstance(forward, SynchronyHeatmap) else list(forward)
    bwds = [backward] if isinstance(backward, SynchronyHeatmap) else list(backward)
    if len(fwds) != len(bwds) or not fwds:
        raise DataError("need equally many forward and backward heatmaps, at least one")
    fwd_vals, bwd_vals, sym_vals = [], [], []
    for f, b in zip(fwds, bwds):
        _check_pairing(f, b)
        fv = syncr2_directional(f, variant.k, variant.clamp_negatives)
        bv = syncr2_directional(b, variant.k, variant.clamp_negatives)
        fwd_vals.append(fv)
        bwd_vals.append(bv)
        sym_vals.append(0.5 * (fv + bv))
    return SyncScore(
        forward=float(np.mean(fwd_vals)),
        backward=float(np.mean(bwd_vals)),
        symmetric=float(np.mean(sym_vals)),
        per_seed=sym_vals,
        stderr=_stderr(sym_vals),
        variant=variant,
    )


def _one_sided_score(heatmaps: list[SynchronyHeatmap], side: str,
                     variant: ScoreVariant) -> SyncScore:
    """Score when only one direction has data; symmetric equals that side."""
    vals = [syncr2_directional(h, variant.k, variant.clamp_negatives) for h in heatmaps]
    mean = float(np.mean(vals))
    return SyncScore(
        forward=mean if side == "forward" else None,
        backward=mean if side == "backward" else None,
        symmetric=mean,
        per_seed=vals,
        stderr=_stderr(vals),
        variant=variant,
    )


def score_corpus(corpus: Corpus, condition: str = "experimental", lag: int = 0,
                 plan: SplitPlan = SplitPlan(), lam: float = 0.1,
                 seeds=DEFAULT_SEEDS, variant: ScoreVariant = ScoreVariant(),
                 allow_short: bool = False, threads: int = 1) -> SyncScore:
    """Symmetric synchrony aggregated over split seeds."""
    fwds, bwds = [], []
    for seed in seeds:
        seeded = replace(plan, seed=seed)
        fwds.append(compute_heatmap(corpus, "A_to_B", condition, lag, seeded,
                                    lam, allow_short, threads))
        bwds.append(compute_heatmap(corpus, "B_to_A", condition, lag, seeded,
                                    lam, allow_short, threads))
    return syncr2_symmetric(fwds, bwds, variant)


def run_controls(corpus: Corpus, lags=(1, 2, 3, 4), plan: SplitPlan = SplitPlan(),
                 lam: float = 0.1, seeds=DEFAULT_SEEDS,
                 variant: ScoreVariant = ScoreVariant(), allow_short: bool = False,
                 threads: int = 1) -> ControlReport:
    """Experimental, passive and lagged scores under identical settings."""
    for k in lags:
        if k < 1:
            raise ValueError(f"lags must be >= 1, got {k}")
    warnings: list[str] = []
    experimental = score_corpus(corpus, "experimental", 0, plan, lam, seeds,
                                variant, allow_short, threads)

    passive = None
    have_a = corpus.passive_coverage("A") > 0
    have_b = corpus.passive_coverage("B") > 0
    if have_a and have_b:
        passive = score_corpus(corpus, "passive_control", 0, plan, lam, seeds,
                               variant, allow_short, threads)
    elif have_a or have_b:
        direction = "A_to_B" if have_a else "B_to_A"
        side = "forward" if have_a else "backward"
        hms = [compute_heatmap(corpus, direction, "passive_control", 0,
                               replace(plan, seed=s), lam, allow_short, threads)
               for s in seeds]
        passive = _one_sided_score(hms, side, variant)
        msg = (f"passive traces only cover role {'A' if have_a else 'B'}; "
               f"passive score uses the {direction} direction alone")
        warnings.append(msg)
        log.warning("%s", msg)
    else:
        msg = "no passive-reader traces in corpus; passive control omitted"
        warnings.append(msg)
        log.warning("%s", msg)

    lag_scores = {}
    for k in lags:
        lag_scores[k] = score_corpus(corpus, "lag_k", k, plan, lam, seeds,
                                     variant, allow_short, threads)
    return ControlReport(experimental, passive, lag_scores, warnings)


def _rel_rng(seed: int, relationship: str) -> np.random.Generator:
    digest = hashlib.sha256(relationship.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:4], "little")])


def evaluate_partitioned(corpus: Corpus, plan: SplitPlan = SplitPlan(),
                         lam: float = 0.1, subsample_seeds=DEFAULT_SEEDS,
                         variant: ScoreVariant = ScoreVariant(),
                         scenario_sources=PARTITION_SOURCES,
                         allow_short: bool = False,
                         threads: int = 1) -> dict[str, SyncScore]:
    """Per-relationship synchrony from maps trained on the unpartitioned split.

    Test rows are restricted to the named scenario sources when any row
    matches; every relationship is re-evaluated on equal-size random subsets
    (the smallest category's size) and averaged over the subsample seeds.
    """
    variant.validate()
    per_direction = {}
    for direction in ("A_to_B", "B_to_A"):
        family = build_pair_family(corpus, direction)
        family = enforce_budget(family, plan.sample_budget, plan.seed, allow_short)
        train_idx, test_idx = split_family(family, plan)
        maps = []
        for ls in range(family.n_source_layers):
            solver = RidgeSolver(family.sources[train_idx, ls, :], lam)
            maps.append([solver.solve(family.targets[train_idx, lt, :])
                         for lt in range(family.n_target_layers)])
        te_sources = family.meta.scenario_source[test_idx]
        source_mask = np.isin(te_sources, list(scenario_sources))
        if scenario_sources and not source_mask.any():
            log.warning("no test rows match scenario sources %s for %s; keeping all",
                        tuple(scenario_sources), direction)
            source_mask = np.ones(len(test_idx), dtype=bool)
        kept = test_idx[source_mask]
        per_direction[direction] = (family, maps, kept)

    rels_per_dir = []
    for direction in ("A_to_B", "B_to_A"):
        family, _, kept = per_direction[direction]
        rels_per_dir.append(set(family.meta.relationship[kept]))
    shared = sorted(rels_per_dir[0] & rels_per_dir[1])
    corpus_rels = {corpus.meta(i).relationship for i in corpus.interaction_ids}
    for rel in sorted(corpus_rels - set(shared)):
        log.warning("relationship %r has no evaluable test rows; excluded", rel)
    if not shared:
        raise DataError("no relationship category has test rows in both directions")

    sizes = {}
    for rel in shared:
        counts = []
        for direction in ("A_to_B", "B_to_A"):
            family, _, kept = per_direction[direction]
            counts.append(int((family.meta.relationship[kept] == rel).sum()))
        sizes[rel] = min(counts)
    n_min = min(sizes.values())
    if n_min < 2:
        raise DataError(
            f"smallest relationship category has {n_min} test rows; need >= 2")

    def eval_grid(direction: str, rows: np.ndarray) -> np.ndarray:
        family, maps, _ = per_direction[direction]
        l_src, l_tgt = family.n_source_layers, family.n_target_layers
        grid = np.empty((l_src, l_tgt))
        for ls in range(l_src):
            x = family.sources[rows, ls, :]
            for lt in range(l_tgt):
                grid[ls, lt] = r2_uniform(family.targets[rows, lt, :],
                                          maps[ls][lt].predict(x))
        return grid

    out = {}
    for rel in shared:
        sym_vals = []
        fwd_vals, bwd_vals = [], []
        for seed in subsample_seeds:
            rng = _rel_rng(seed, rel)
            dir_vals = {}
            for direction in ("A_to_B", "B_to_A"):
                family, _, kept = per_direction[direction]
                rows = kept[family.meta.relationship[kept] == rel]
                pick = rng.choice(len(rows), size=n_min, replace=False)
                grid = eval_grid(direction, rows[np.sort(pick)])
                dir_vals[direction] = syncr2_directional(
                    grid, variant.k, variant.clamp_negatives)
            fwd_vals.append(dir_vals["A_to_B"])
            bwd_vals.append(dir_vals["B_to_A"])
            sym_vals.append(0.5 * (dir_vals["A_to_B"] + dir_vals["B_to_A"]))
        out[rel] = SyncScore(
            forward=float(np.mean(fwd_vals)),
            backward=float(np.mean(bwd_vals)),
            symmetric=float(np.mean(sym_vals)),
            per_seed=sym_vals,
            stderr=_stderr(sym_vals),
            variant=variant,
        )
    return out


def sample_size_sweep(corpus: Corpus, budgets, plan: SplitPlan = SplitPlan(),
                      lam: float = 0.1, seeds=DEFAULT_SEEDS,
                      variant: ScoreVariant = ScoreVariant(),
                      threads: int = 1) -> dict[int, SyncScore]:
    """Full scoring pipeline at each sample budget (strict: no short corpora)."""
    out = {}
    for budget in budgets:
        if budget < 1:
            raise ValueError(f"budgets must be positive, got {budget}")
        sized = replace(plan, sample_budget=budget)
        out[budget] = score_corpus(corpus, "experimental", 0, sized, lam, seeds,
                                   variant, allow_short=False, threads=threads)
    return out


def heatmap_to_csv(hm: SynchronyHeatmap, path: str | Path) -> None:
    """Rows are source layers, columns target layers."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["source_layer"]
                        + [f"target_{j}" for j in range(hm.n_target_layers)])
        for ls in range(hm.n_source_layers):
            writer.writerow([ls] + [f"{v:.17g}" for v in hm.grid[ls]])


def heatmap_from_csv(path: str | Path, direction: str = "A_to_B",
                     condition: str = "experimental", lag: int = 0,
                     split_seed: int = 0, lam: float = 0.1) -> SynchronyHeatmap:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    grid = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return SynchronyHeatmap(direction, condition, lag, grid, split_seed, lam)


def heatmap_to_dict(hm: SynchronyHeatmap) -> dict:
    return {
        "direction": hm.direction,
        "condition": hm.condition,
        "lag": hm.lag,
        "split_seed": hm.split_seed,
        "lam": hm.lam,
        "n_source_layers": hm.n_source_layers,
        "n_target_layers": hm.n_target_layers,
        "grid": [[float(v) for v in row] for row in hm.grid],
    }


def score_to_dict(score: SyncScore) -> dict:
    return {
        "forward": score.forward,
        "backward": score.backward,
        "symmetric": score.symmetric,
        "per_seed": list(score.per_seed),
        "stderr": score.stderr,
        "variant": {"k": score.variant.k,
                    "clamp_negatives": score.variant.clamp_negatives},
    }


def controls_to_rows(report: ControlReport) -> list[dict]:
    """Long-format rows for lag-curve plots."""
    rows = []

    def add(condition: str, lag: int, score: SyncScore) -> None:
        for i, v in enumerate(score.per_seed):
            rows.append({"condition": condition, "lag": lag, "seed_index": i,
                         "symmetric": v})
        rows.append({"condition": condition, "lag": lag, "seed_index": "mean",
                     "symmetric": score.symmetric})

    add("experimental", 0, report.experimental)
    if report.passive is not None:
        add("passive_control", 0, report.passive)
    for k in sorted(report.lag_scores):
        add("lag_k", k, report.lag_scores[k])
    return rows


def partition_to_rows(scores: dict[str, SyncScore]) -> list[dict]:
    """Long-format rows for relationship boxplots."""
    rows = []
    for rel in sorted(scores):
        for i, v in enumerate(scores[rel].per_seed):
            rows.append({"relationship": rel, "seed_index": i, "symmetric": v})
        rows.append({"relationship": rel, "seed_index": "mean",
                     "symmetric": scores[rel].symmetric})
    return rows


def write_long_csv(path: str | Path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("", "utf-8")
        return
    fields = list(rows[0])
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
