"""Correlation machinery linking synchrony scores to external evaluations.

Pearson r with parametric two-sided significance, partial correlation over
confound covariates, and ingestion of per-model-pair score tables from CSV.

Significance uses the exact t transform t = r * sqrt(df / (1 - r^2)) with
df = n - 2 for plain correlations and df = n - 2 - q after controlling for
q covariates; the two-sided p-value is the regularized incomplete beta
I_{df/(df+t^2)}(df/2, 1/2).  Sample sizes here are tiny (7-9 pairs per
family), so a permutation fallback is available via ``permutations=``.

Partial correlation residualizes both arguments on [1 | Z] by least squares
and correlates the residuals.  With an empty covariate set it reduces to
``pearson`` exactly.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from .errors import DataError, NumericError
from .regression import RankDeficiencyError

logger = logging.getLogger(__name__)

# Canonical family tags; CSV files may use free-form tags (e.g. model names).
FAMILY_TAGS = ("within_family_1", "within_family_2", "cross_family")

REQUIRED_TEXT_COLUMNS = ("pair_id", "model_a", "model_b", "family")
DEFAULT_METRICS = ("perf_overall", "perf_goal")
MIN_FAMILY_PAIRS = 3


class UndefinedCorrelationError(NumericError):
    """Correlation undefined: a constant input or an all-zero residual."""


class DuplicatePairError(DataError):
    """A score table lists the same model-pair id more than once."""


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_two_sided: float
    n: int
    covariates: tuple[str, ...] = ()

    @property
    def df(self) -> int:
        return self.n - 2 - len(self.covariates)


@dataclass(frozen=True)
class FamilyCorrelation:
    """One (family tag, performance column) cell of a correlation sweep."""

    family: str
    metric: str
    pearson: CorrelationResult
    partial: CorrelationResult | None = None


@dataclass(frozen=True)
class ScoreTable:
    """Per-model-pair external scores with numeric columns kept parallel."""

    pair_ids: tuple[str, ...]
    model_a: tuple[str, ...]
    model_b: tuple[str, ...]
    families: tuple[str, ...]
    columns: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.pair_ids)
        if n == 0:
            raise DataError("score table has no rows")
        seen: set[str] = set()
        for pid in self.pair_ids:
            if pid in seen:
                raise DuplicatePairError(f"duplicate pair_id {pid!r} in score table")
            seen.add(pid)
        for name in ("model_a", "model_b", "families"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name!r} has wrong length")
        for name, col in self.columns.items():
            if col.shape != (n,):
                raise DataError(f"numeric column {name!r} has shape {col.shape}, want ({n},)")
            if not np.all(np.isfinite(col)):
                row = int(np.flatnonzero(~np.isfinite(col))[0])
                raise DataError(
                    f"non-finite value in column {name!r} at pair {self.pair_ids[row]!r}")

    @property
    def n_rows(self) -> int:
        return len(self.pair_ids)

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise DataError(
                f"unknown score column {name!r}; have {sorted(self.columns)}")
        return self.columns[name]

    def index_of(self, pair_id: str) -> int:
        try:
            return self.pair_ids.index(pair_id)
        except ValueError:
            raise DataError(f"pair {pair_id!r} not in score table") from None


def load_score_table(path: str | Path, dimension_prefix: str = "dim_") -> ScoreTable:
    """Read a score CSV: pair_id, model_a, model_b, family, then numeric columns.

    Every column beyond the four text columns is parsed as float.  When no
    ``perf_overall`` column is present but per-dimension columns prefixed by
    ``dimension_prefix`` exist, their row mean is synthesized as
    ``perf_overall`` (the per-dimension columns are kept).
    """
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        fields = reader.fieldnames
        if fields is None:
            raise DataError(f"{path}: empty score file")
        missing = [c for c in REQUIRED_TEXT_COLUMNS if c not in fields]
        if missing:
            raise DataError(f"{path}: missing required columns {missing}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no data rows")
    numeric_names = [c for c in fields if c not in REQUIRED_TEXT_COLUMNS]
    columns: dict[str, np.ndarray] = {}
    for name in numeric_names:
        vals = np.empty(len(rows), dtype=np.float64)
        for i, row in enumerate(rows):
            cell = row[name]
            try:
                vals[i] = float(cell) if cell not in (None, "") else math.nan
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} in column {name!r} "
                    f"(pair {row['pair_id']!r})") from None
        columns[name] = vals
    if "perf_overall" not in columns:
        dims = [n for n in numeric_names if n.startswith(dimension_prefix)]
        if dims:
            columns["perf_overall"] = np.mean([columns[d] for d in dims], axis=0)
    return ScoreTable(
        pair_ids=tuple(r["pair_id"] for r in rows),
        model_a=tuple(r["model_a"] for r in rows),
        model_b=tuple(r["model_b"] for r in rows),
        families=tuple(r["family"] for r in rows),
        columns=columns,
    )


def _as_vector(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def p_from_t(t: float, df: int) -> float:
    """Two-sided Student-t tail probability via the regularized beta."""
    if df < 1:
        raise ValueError(f"need df >= 1, got {df}")
    if math.isinf(t):
        return 0.0
    return float(special.betainc(0.5 * df, 0.5, df / (df + t * t)))


def _p_value(r: float, df: int) -> float:
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt(df / (1.0 - r * r))
    return p_from_t(t, df)


def _residual_r(rx: np.ndarray, ry: np.ndarray, scale_x: float, scale_y: float) -> float:
    # scale_* carry the pre-residualization magnitudes so that "residual is
    # numerically zero" can be told apart from small-but-real residuals.
    nx = float(np.linalg.norm(rx))
    ny = float(np.linalg.norm(ry))
    if nx <= 1e-9 * max(scale_x, 1e-300):
        raise UndefinedCorrelationError("x is constant after residualization")
    if ny <= 1e-9 * max(scale_y, 1e-300):
        raise UndefinedCorrelationError("y is constant after residualization")
    r = float(np.dot(rx, ry) / (nx * ny))
    return max(-1.0, min(1.0, r))


def _perm_p(rx: np.ndarray, ry: np.ndarray, r_obs: float, permutations: int,
            seed: int) -> float:
    rng = np.random.default_rng(seed)
    hits = 0
    for _ in range(permutations):
        perm = rng.permutation(ry.shape[0])
        rp = float(np.dot(rx, ry[perm]) / (np.linalg.norm(rx) * np.linalg.norm(ry)))
        if abs(rp) >= abs(r_obs) - 1e-12:
            hits += 1
    return (hits + 1) / (permutations + 1)


def pearson(x, y, permutations: int = 0, perm_seed: int = 0) -> CorrelationResult:
    """Product-moment correlation with a two-sided parametric p-value.

    ``permutations > 0`` replaces the t-based p with a sign-agnostic
    permutation p-value (add-one correction), keeping r unchanged.
    """
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    if xv.shape[0] != yv.shape[0]:
        raise ValueError(f"length mismatch: {xv.shape[0]} vs {yv.shape[0]}")
    n = xv.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    if np.all(xv == xv[0]):
        raise UndefinedCorrelationError("x is constant")
    if np.all(yv == yv[0]):
        raise UndefinedCorrelationError("y is constant")
    rx = xv - xv.mean()
    ry = yv - yv.mean()
    scale_x = float(np.linalg.norm(rx))
    scale_y = float(np.linalg.norm(ry))
    r = _residual_r(rx, ry, scale_x, scale_y)
    if permutations > 0:
        p = _perm_p(rx, ry, r, permutations, perm_seed)
    else:
        p = _p_value(r, n - 2)
    return CorrelationResult(r=r, p_two_sided=p, n=n)


def partial_correlation(x, y, Z, names: Sequence[str] | None = None,
                        permutations: int = 0, perm_seed: int = 0) -> CorrelationResult:
    """Correlation of x and y after residualizing both on [1 | Z].

    Degrees of freedom drop to n - 2 - q for q covariate columns.  An empty
    or ``None`` Z falls through to :func:`pearson` exactly.
    """
    if Z is None:
        return pearson(x, y, permutations=permutations, perm_seed=perm_seed)
    zm = np.asarray(Z, dtype=np.float64)
    if zm.ndim == 1:
        zm = zm[:, None]
    if zm.ndim != 2:
        raise ValueError(f"Z must be 2-D, got shape {zm.shape}")
    if zm.shape[1] == 0:
        return pearson(x, y, permutations=permutations, perm_seed=perm_seed)
    if not np.all(np.isfinite(zm)):
        raise ValueError("Z contains non-finite values")
    xv = _as_vector(x, "x")
    yv = _as_vector(y, "y")
    n, q = zm.shape
    if xv.shape[0] != n or yv.shape[0] != n:
        raise ValueError("x, y, Z row counts disagree")
    if n <= q + 2:
        raise ValueError(f"need n > q + 2 (n={n}, q={q})")
    if names is None:
        names = tuple(f"z{j}" for j in range(q))
    elif len(names) != q:
        raise ValueError(f"{len(names)} names for {q} covariate columns")
    design = np.concatenate([np.ones((n, 1)), zm], axis=1)
    if np.linalg.matrix_rank(design) < q + 1:
        raise RankDeficiencyError(
            "covariate matrix [1|Z] is rank deficient; drop collinear columns")
    coef, *_ = np.linalg.lstsq(design, np.stack([xv, yv], axis=1), rcond=None)
    resid = np.stack([xv, yv], axis=1) - design @ coef
    scale_x = float(np.linalg.norm(xv - xv.mean()))
    scale_y = float(np.linalg.norm(yv - yv.mean()))
    r = _residual_r(resid[:, 0], resid[:, 1], scale_x, scale_y)
    if permutations > 0:
        p = _perm_p(resid[:, 0], resid[:, 1], r, permutations, perm_seed)
    else:
        p = _p_value(r, n - 2 - q)
    return CorrelationResult(r=r, p_two_sided=p, n=n, covariates=tuple(names))


def _score_value(score) -> float:
    sym = getattr(score, "symmetric", score)
    return float(sym)


def correlate_by_family(scores: Mapping[str, object], table: ScoreTable,
                        covariates: Sequence[str] = (),
                        metrics: Sequence[str] | None = None,
                        min_pairs: int = MIN_FAMILY_PAIRS,
                        permutations: int = 0) -> list[FamilyCorrelation]:
    """Correlate synchrony against each performance column, per family tag.

    ``scores`` maps pair_id -> SyncScore (or bare float).  Rows are grouped
    by the table's family tag; an "overall" group over all scored pairs is
    included first whenever more than one tag is present (with a single tag
    it would duplicate that family).  Groups with fewer than ``min_pairs``
    pairs are skipped with a warning.  With ``covariates`` given, a partial
    correlation over those table columns accompanies each pearson result.
    """
    missing = sorted(set(scores) - set(table.pair_ids))
    if missing:
        raise DataError(f"synchrony pairs missing from score table: {missing}")
    if metrics is None:
        metrics = [m for m in DEFAULT_METRICS if m in table.columns]
        if not metrics:
            raise DataError(
                f"score table has none of the default performance columns "
                f"{DEFAULT_METRICS}; pass metrics= explicitly")
    rows = [i for i, pid in enumerate(table.pair_ids) if pid in scores]
    x_all = np.array([_score_value(scores[table.pair_ids[i]]) for i in rows])
    fams = [table.families[i] for i in rows]
    distinct = sorted(set(fams))
    groups: list[tuple[str, np.ndarray]] = []
    if len(distinct) > 1:
        groups.append(("overall", np.arange(len(rows))))
    for fam in distinct:
        groups.append((fam, np.flatnonzero([f == fam for f in fams])))
    cov_cols = [table.column(c) for c in covariates]
    results: list[FamilyCorrelation] = []
    for fam, idx in groups:
        if idx.shape[0] < min_pairs:
            logger.warning("family %r has %d pairs (< %d); skipped",
                           fam, idx.shape[0], min_pairs)
            continue
        sub = [rows[i] for i in idx]
        x = x_all[idx]
        for metric in metrics:
            y = table.column(metric)[sub]
            plain = pearson(x, y, permutations=permutations)
            part = None
            if covariates:
                Z = np.stack([c[sub] for c in cov_cols], axis=1)
                part = partial_correlation(x, y, Z, names=tuple(covariates),
                                           permutations=permutations)
            results.append(FamilyCorrelation(fam, metric, plain, part))
    return results


def correlation_to_dict(res: CorrelationResult) -> dict:
    return {"r": res.r, "p_two_sided": res.p_two_sided, "n": res.n,
            "covariates": list(res.covariates)}


def family_results_to_rows(results: Sequence[FamilyCorrelation]) -> list[dict]:
    """Flatten to long-format rows (one per correlation kind) for CSV."""
    rows = []
    for fc in results:
        rows.append({"family": fc.family, "metric": fc.metric, "kind": "pearson",
                     "r": "%.17g" % fc.pearson.r,
                     "p_two_sided": "%.17g" % fc.pearson.p_two_sided,
                     "n": fc.pearson.n, "covariates": ""})
        if fc.partial is not None:
            rows.append({"family": fc.family, "metric": fc.metric, "kind": "partial",
                         "r": "%.17g" % fc.partial.r,
                         "p_two_sided": "%.17g" % fc.partial.p_two_sided,
                         "n": fc.partial.n,
                         "covariates": "|".join(fc.partial.covariates)})
    return rows


def family_results_to_dict(results: Sequence[FamilyCorrelation]) -> dict:
    out: dict = {}
    for fc in results:
        cell = out.setdefault(fc.family, {}).setdefault(fc.metric, {})
        cell["pearson"] = correlation_to_dict(fc.pearson)
        if fc.partial is not None:
            cell["partial"] = correlation_to_dict(fc.partial)
    return out
