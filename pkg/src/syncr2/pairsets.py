"""Directional (source, target) datasets, leakage-safe splits, sample budgets.

Alignment rules per direction and condition, with turns 0-indexed and T the
shared turn count of an interaction:

    A_to_B experimental      (h_A[t],        h_B[t])      t = 0..T-1
    A_to_B lag_k             (h_A[t],        h_B[t+k])    t = 0..T-1-k
    A_to_B passive_control   (h_A_read[t],   h_B[t])      t = 0..T-1
    B_to_A experimental      (h_B[t],        h_A[t+1])    t = 0..T-2
    B_to_A lag_k             (h_B[t],        h_A[t+1+k])  t = 0..T-2-k
    B_to_A passive_control   (h_B_read[t],   h_A[t+1])    t = 0..T-2

The source turn is never shifted; the condition only moves the target.
For the row-predicting direction B_to_A, the one-turn base offset reflects
that B acts after A within a round, so B's prediction target is A's next
turn; its lag-k control shifts a further k turns.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import DataError
from .repstore import Corpus

log = logging.getLogger(__name__)

DIRECTIONS = ("A_to_B", "B_to_A")
CONDITIONS = ("experimental", "passive_control", "lag_k")
SPLIT_POLICIES = ("interaction_disjoint", "persona_disjoint")


class EmptyDatasetError(DataError):
    pass


class TraceMismatchError(DataError):
    pass


class TooFewGroupsError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


@dataclass(frozen=True)
class PairSpec:
    direction: str
    condition: str = "experimental"
    lag: int = 0
    source_layer: int = 0
    target_layer: int = 0

    def validate(self) -> None:
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        if self.condition == "lag_k" and self.lag < 1:
            raise ValueError("lag_k requires lag >= 1")
        if self.condition != "lag_k" and self.lag != 0:
            raise ValueError(f"lag must be 0 for condition {self.condition!r}")


@dataclass(frozen=True)
class SplitPlan:
    policy: str = "interaction_disjoint"
    train_fraction: float = 0.8
    seed: int = 0
    sample_budget: int = 6500

    def validate(self) -> None:
        if self.policy not in SPLIT_POLICIES:
            raise ValueError(f"policy must be one of {SPLIT_POLICIES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.sample_budget < 1:
            raise ValueError("sample_budget must be positive")


@dataclass
class RowMeta:
    """Per-row provenance; every sample reconstructs to (interaction, turn)."""

    interaction_id: np.ndarray
    turn: np.ndarray
    persona_pair_id: np.ndarray
    relationship: np.ndarray
    scenario_source: np.ndarray

    def take(self, idx: np.ndarray) -> "RowMeta":
        return RowMeta(*(a[idx] for a in self._arrays()))

    def _arrays(self):
        return (self.interaction_id, self.turn, self.persona_pair_id,
                self.relationship, self.scenario_source)

    def __len__(self) -> int:
        return len(self.turn)


@dataclass
class PairDataset:
    X: np.ndarray
    Y: np.ndarray
    meta: RowMeta
    spec: PairSpec


class PairFamily:
    """All layer-pair datasets of one (direction, condition) sharing rows.

    ``sources`` has shape (N, L_src, D_src) and ``targets`` (N, L_tgt, D_tgt);
    slicing a layer pair is a view, so the family is cheap to query.
    """

    def __init__(self, sources: np.ndarray, targets: np.ndarray, meta: RowMeta,
                 direction: str, condition: str, lag: int):
        self.sources = sources
        self.targets = targets
        self.meta = meta
        self.direction = direction
        self.condition = condition
        self.lag = lag

    @property
    def n_rows(self) -> int:
        return self.sources.shape[0]

    @property
    def n_source_layers(self) -> int:
        return self.sources.shape[1]

    @property
    def n_target_layers(self) -> int:
        return self.targets.shape[1]

    def dataset(self, source_layer: int, target_layer: int) -> PairDataset:
        spec = PairSpec(self.direction, self.condition, self.lag,
                        source_layer, target_layer)
        return PairDataset(
            X=self.sources[:, source_layer, :],
            Y=self.targets[:, target_layer, :],
            meta=self.meta,
            spec=spec,
        )

    def subset(self, idx: np.ndarray) -> "PairFamily":
        idx = np.asarray(idx)
        return PairFamily(self.sources[idx], self.targets[idx], self.meta.take(idx),
                          self.direction, self.condition, self.lag)


def target_offset(direction: str, condition: str, lag: int) -> int:
    base = 0 if direction == "A_to_B" else 1
    return base + (lag if condition == "lag_k" else 0)


def build_pair_family(corpus: Corpus, direction: str, condition: str = "experimental",
                      lag: int = 0) -> PairFamily:
    """Materialize the full layer-grid dataset family for one condition."""
    spec = PairSpec(direction, condition, lag)
    spec.validate()
    src_role, tgt_role = ("A", "B") if direction == "A_to_B" else ("B", "A")
    src_cond = "passive_reader" if condition == "passive_control" else "interactive"
    off = target_offset(direction, condition, lag)
    return _build_family(corpus, (src_role, src_cond), (tgt_role, "interactive"),
                         off, direction, condition, lag)


def _build_family(corpus: Corpus, src_key: tuple[str, str], tgt_key: tuple[str, str],
                  tgt_offset: int, direction: str, condition: str, lag: int) -> PairFamily:
    src_blocks, tgt_blocks = [], []
    iids, turns, personas, rels, sources = [], [], [], [], []
    src_shape = tgt_shape = None
    n_missing = 0
    for iid in corpus.interaction_ids:
        rec = corpus.record(iid)
        if not (rec.has(*src_key) and rec.has(*tgt_key)):
            n_missing += 1
            continue
        src = corpus.load(iid, *src_key)
        tgt = corpus.load(iid, *tgt_key)
        if src.turns != tgt.turns:
            raise TraceMismatchError(
                f"interaction {iid!r}: source has {src.turns} turns, target {tgt.turns}"
            )
        if src_shape is None:
            src_shape, tgt_shape = src.values.shape[1:], tgt.values.shape[1:]
        elif src.values.shape[1:] != src_shape or tgt.values.shape[1:] != tgt_shape:
            raise TraceMismatchError(
                f"interaction {iid!r}: layer grid {src.values.shape[1:]}x{tgt.values.shape[1:]} "
                f"differs from corpus {src_shape}x{tgt_shape}"
            )
        n = src.turns - tgt_offset
        if n < 1:
            continue
        src_blocks.append(src.values[:n])
        tgt_blocks.append(tgt.values[tgt_offset:tgt_offset + n])
        m = rec.meta
        iids.extend([iid] * n)
        turns.extend(range(n))
        personas.extend([m.persona_pair_id] * n)
        rels.extend([m.relationship] * n)
        sources.extend([m.scenario_source] * n)
    if not src_blocks:
        raise EmptyDatasetError(
            f"no usable rows for direction={direction} condition={condition} lag={lag}"
            + (f" ({n_missing} interactions lacked a {src_key[1]} source trace)"
               if n_missing else "")
        )
    if n_missing:
        log.warning("%d interactions lacked a %s trace for role %s; skipped",
                    n_missing, src_key[1], src_key[0])
    meta = RowMeta(
        interaction_id=np.array(iids, dtype=object),
        turn=np.array(turns, dtype=np.int64),
        persona_pair_id=np.array(personas, dtype=object),
        relationship=np.array(rels, dtype=object),
        scenario_source=np.array(sources, dtype=object),
    )
    return PairFamily(np.concatenate(src_blocks), np.concatenate(tgt_blocks),
                      meta, direction, condition, lag)


def build_pairs(corpus: Corpus, spec: PairSpec) -> PairDataset:
    """Single layer-pair dataset; see ``build_pair_family`` for the grid."""
    family = build_pair_family(corpus, spec.direction, spec.condition, spec.lag)
    return family.dataset(spec.source_layer, spec.target_layer)


def _group_key(meta: RowMeta, policy: str) -> np.ndarray:
    return meta.interaction_id if policy == "interaction_disjoint" else meta.persona_pair_id


def split_groups(group_ids: list[str], plan: SplitPlan) -> tuple[set[str], set[str]]:
    """Partition grouping units; fractional counts round toward training."""
    plan.validate()
    groups = sorted(set(group_ids))
    if len(groups) < 2:
        raise TooFewGroupsError(
            f"need at least 2 {plan.policy} groups to split, got {len(groups)}"
        )
    n_train = math.ceil(plan.train_fraction * len(groups) - 1e-9)
    n_train = min(max(n_train, 1), len(groups) - 1)
    perm = np.random.default_rng(plan.seed).permutation(len(groups))
    train = {groups[i] for i in perm[:n_train]}
    test = set(groups) - train
    return train, test


def split_family(family: PairFamily, plan: SplitPlan) -> tuple[np.ndarray, np.ndarray]:
    """Row indices (train, test); the grouping unit never straddles the split."""
    keys = _group_key(family.meta, plan.policy)
    train_groups, _ = split_groups(list(keys), plan)
    in_train = np.array([k in train_groups for k in keys], dtype=bool)
    return np.nonzero(in_train)[0], np.nonzero(~in_train)[0]


def enforce_budget(family: PairFamily, budget: int, seed: int,
                   allow_short: bool = False) -> PairFamily:
    """Cap the family at ``budget`` rows by dropping whole interactions.

    Interactions are kept in a seed-determined random order until the budget
    is reached; the interaction crossing the budget is trimmed at row level
    (earliest turns kept). Idempotent: a family already at the budget is
    returned unchanged.
    """
    if budget < 1:
        raise ValueError("budget must be positive")
    n = family.n_rows
    if n == budget:
        return family
    if n < budget:
        if not allow_short:
            raise InsufficientDataError(
                f"family has {n} rows, below the sample budget {budget}; "
                "collecting more interactions requires new simulations "
                "(pass allow_short to proceed with fewer rows)"
            )
        log.warning("family has %d rows, below budget %d; proceeding short", n, budget)
        return family
    iids = family.meta.interaction_id
    unique = sorted(set(iids))
    order = np.random.default_rng(seed).permutation(len(unique))
    keep = np.zeros(n, dtype=bool)
    total = 0
    for gi in order:
        rows = np.nonzero(iids == unique[gi])[0]
        room = budget - total
        if room <= 0:
            break
        rows = rows[:room]  # rows are in turn order within the interaction
        keep[rows] = True
        total += len(rows)
    return family.subset(np.nonzero(keep)[0])


def save_split(path: str | Path, plan: SplitPlan, train_groups: set[str],
               test_groups: set[str]) -> None:
    payload = {
        "plan": asdict(plan),
        "train_group_ids": sorted(train_groups),
        "test_group_ids": sorted(test_groups),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", "utf-8")


def load_split(path: str | Path) -> tuple[SplitPlan, set[str], set[str]]:
    payload = json.loads(Path(path).read_text("utf-8"))
    plan = SplitPlan(**payload["plan"])
    return plan, set(payload["train_group_ids"]), set(payload["test_group_ids"])


def apply_saved_split(family: PairFamily, plan: SplitPlan, train_groups: set[str],
                      test_groups: set[str]) -> tuple[np.ndarray, np.ndarray]:
    keys = _group_key(family.meta, plan.policy)
    known = train_groups | test_groups
    missing = {k for k in keys} - known
    if missing:
        raise DataError(f"saved split does not cover groups {sorted(missing)[:5]}")
    in_train = np.array([k in train_groups for k in keys], dtype=bool)
    return np.nonzero(in_train)[0], np.nonzero(~in_train)[0]
