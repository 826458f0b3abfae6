"""Linear readout of categorical emotion/action distributions from hidden states.

Per-turn distributions over a fixed emotion (8) or action (5) vocabulary are
decoded from one agent's representations at a chosen layer, under three
alignments:

  self_current     h_t predicts the same agent's own turn-t distribution
  partner_previous h_t predicts the partner's turn-(t-1) distribution
  partner_next     h_t predicts the partner's turn-(t+1) distribution

The decoder is a ridge readout (lam defaults to 0.1, matching the synchrony
maps) onto log-probabilities: raw logits carry a per-row additive gauge that
the log of the normalized distribution removes.  Targets are smoothed by
eps=1e-6 before the logarithm, and predictions are renormalized through a
stable softmax, so every emitted vector is a valid distribution.  Quality is
mean test-set KL divergence in nats against the true distributions, reported
next to a baseline that always predicts the training-set mean distribution.

Target distributions ride alongside a corpus as JSON sidecars under
<root>/affect/<interaction_id>.json: one entry per turn, per agent role,
with "emotion_logits"[8] and "action_logits"[5] arrays.  Interactions
without a sidecar are skipped and counted, mirroring how pair construction
skips interactions that lack a trace.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError
from .pairsets import EmptyDatasetError, SplitPlan, split_groups
from .regression import AffineMap, fit_ridge, predict

logger = logging.getLogger(__name__)

EMOTIONS = ("Joy", "Trust", "Fear", "Surprise", "Sadness", "Disgust",
            "Anger", "Anticipation")
ACTIONS = ("Assertive", "Directive", "Commissive", "Expressive", "Declaration")
VOCABS = {"emotion": EMOTIONS, "action": ACTIONS}
ALIGNMENTS = ("self_current", "partner_previous", "partner_next")
AFFECT_DIR = "affect"
SMOOTH_EPS = 1e-6
DECODE_SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class DistTarget:
    """Per-sample probability rows over one fixed vocabulary."""

    kind: str
    alignment: str
    probs: np.ndarray  # (n, V) float64

    def __post_init__(self) -> None:
        if self.kind not in VOCABS:
            raise ValueError(f"kind must be one of {sorted(VOCABS)}, got {self.kind!r}")
        if self.alignment not in ALIGNMENTS:
            raise ValueError(
                f"alignment must be one of {ALIGNMENTS}, got {self.alignment!r}")
        v = len(VOCABS[self.kind])
        if self.probs.ndim != 2 or self.probs.shape[1] != v:
            raise ValueError(
                f"{self.kind} targets need width {v}, got shape {self.probs.shape}")
        if np.any(self.probs < 0.0):
            raise ValueError("probabilities must be non-negative")
        sums = self.probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            bad = int(np.argmax(np.abs(sums - 1.0)))
            raise ValueError(f"row {bad} sums to {sums[bad]!r}, not 1")

    @property
    def n_rows(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True)
class DecodeDataset:
    """Aligned (representation, distribution) rows ready for a readout fit."""

    X: np.ndarray        # (n, D)
    probs: np.ndarray    # (n, V)
    groups: np.ndarray   # (n,) interaction id per row, for disjoint splits
    kind: str
    alignment: str
    role: str
    layer: int
    n_skipped: int = 0


@dataclass(frozen=True)
class DecodeReport:
    kind: str
    alignment: str
    kl: float
    baseline: float
    per_seed_kl: tuple[float, ...]
    per_seed_baseline: tuple[float, ...]
    n_rows: int
    n_skipped: int


def stable_softmax(logits) -> np.ndarray:
    """Row-wise softmax with the max subtracted; works for any width."""
    arr = np.asarray(logits, dtype=np.float64)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"logits must be 1-D or 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logits contain non-finite values")
    z = arr - arr.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def softmax_targets(logits, kind: str, alignment: str = "self_current") -> DistTarget:
    """Normalize logit rows into a DistTarget, enforcing the vocabulary width."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    v = len(VOCABS.get(kind, ()))
    if kind not in VOCABS:
        raise ValueError(f"kind must be one of {sorted(VOCABS)}, got {kind!r}")
    if arr.shape[1] != v:
        raise ValueError(f"{kind} logits need width {v}, got {arr.shape[1]}")
    return DistTarget(kind=kind, alignment=alignment, probs=stable_softmax(arr))


def _smooth(p: np.ndarray, eps: float) -> np.ndarray:
    sm = p + eps
    return sm / sm.sum(axis=-1, keepdims=True)


def kl_divergence(p, q, eps: float = SMOOTH_EPS) -> float:
    """KL(P || Q) in nats after symmetric eps-smoothing; 0*ln(0/q) is 0."""
    pv = np.asarray(p, dtype=np.float64)
    qv = np.asarray(q, dtype=np.float64)
    if pv.shape != qv.shape or pv.ndim != 1:
        raise ValueError(f"need matching vectors, got {pv.shape} vs {qv.shape}")
    ps = _smooth(pv, eps)
    qs = _smooth(qv, eps)
    if np.any(qs <= 0.0):
        raise ValueError("Q has zero mass after smoothing; increase eps")
    terms = np.where(ps > 0.0, ps * np.log(np.where(ps > 0.0, ps / qs, 1.0)), 0.0)
    return float(terms.sum())


def mean_kl(probs_true: np.ndarray, probs_pred: np.ndarray,
            eps: float = SMOOTH_EPS) -> float:
    if probs_true.shape != probs_pred.shape:
        raise ValueError(
            f"shape mismatch: {probs_true.shape} vs {probs_pred.shape}")
    return float(np.mean([kl_divergence(t, p, eps)
                          for t, p in zip(probs_true, probs_pred)]))


def baseline_report(train_probs: np.ndarray, test_probs: np.ndarray,
                    eps: float = SMOOTH_EPS) -> float:
    """Mean KL of test rows against the training-set mean distribution."""
    if train_probs.ndim != 2 or train_probs.shape[0] == 0:
        raise ValueError("empty or malformed training targets")
    if test_probs.ndim != 2 or test_probs.shape[0] == 0:
        raise ValueError("empty or malformed test targets")
    mean_dist = train_probs.mean(axis=0)
    return float(np.mean([kl_divergence(t, mean_dist, eps) for t in test_probs]))


def fit_decoder(X, targets, lam: float = 0.1, eps: float = SMOOTH_EPS) -> AffineMap:
    """Ridge readout from representations onto smoothed log-probabilities."""
    probs = targets.probs if isinstance(targets, DistTarget) else np.asarray(targets)
    if probs.ndim != 2:
        raise ValueError(f"targets must be 2-D, got shape {probs.shape}")
    if X.shape[0] != probs.shape[0]:
        raise DataError(
            f"insufficient aligned rows: {X.shape[0]} representations vs "
            f"{probs.shape[0]} targets")
    if X.shape[0] < 2:
        raise DataError(f"insufficient aligned rows: got {X.shape[0]}, need >= 2")
    return fit_ridge(np.asarray(X, dtype=np.float64),
                     np.log(_smooth(probs, eps)), lam)


def decode_proba(m, X) -> np.ndarray:
    """Apply a fitted readout and renormalize into distributions."""
    return stable_softmax(predict(m, np.asarray(X, dtype=np.float64)))


def affect_path(root: str | Path, interaction_id: str) -> Path:
    return Path(root) / AFFECT_DIR / f"{interaction_id}.json"


def write_affect(root: str | Path, interaction_id: str, turns: list[dict]) -> Path:
    """Write one sidecar; ``turns[t][role]`` holds the two logit arrays."""
    path = affect_path(root, interaction_id)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"interaction_id": interaction_id, "turns": turns}
    path.write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")), "utf-8")
    return path


def load_affect(root: str | Path, interaction_id: str) -> dict[str, dict[str, np.ndarray]]:
    """Read a sidecar into per-role (T, V) logit arrays.

    Returns {"A": {"emotion": (T,8), "action": (T,5)}, "B": {...}}.
    """
    path = affect_path(root, interaction_id)
    if not path.exists():
        raise DataError(f"no affect sidecar for {interaction_id!r} at {path}")
    try:
        doc = json.loads(path.read_text("utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc
    if doc.get("interaction_id") != interaction_id:
        raise DataError(f"{path}: sidecar names {doc.get('interaction_id')!r}")
    turns = doc.get("turns")
    if not isinstance(turns, list) or not turns:
        raise DataError(f"{path}: missing or empty turns array")
    out: dict[str, dict[str, list]] = {
        r: {"emotion": [], "action": []} for r in ("A", "B")}
    for t, entry in enumerate(turns):
        if entry.get("turn") != t:
            raise DataError(f"{path}: turn entries must be contiguous from 0")
        for role in ("A", "B"):
            if role not in entry:
                raise DataError(f"{path}: turn {t} missing role {role!r}")
            for kind, key in (("emotion", "emotion_logits"), ("action", "action_logits")):
                row = entry[role].get(key)
                width = len(VOCABS[kind])
                if not isinstance(row, list) or len(row) != width:
                    raise DataError(
                        f"{path}: turn {t} role {role} {key} must have {width} entries")
                out[role][kind].append(row)
    result: dict[str, dict[str, np.ndarray]] = {}
    for role, kinds in out.items():
        result[role] = {}
        for kind, rows in kinds.items():
            arr = np.asarray(rows, dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{path}: non-finite {kind} logits for role {role}")
            result[role][kind] = arr
    return result


def _aligned_indices(alignment: str, turns: int) -> tuple[range, range, str]:
    """(source turn range, target turn range, target owner) for one trace."""
    if alignment == "self_current":
        return range(turns), range(turns), "self"
    if alignment == "partner_previous":
        return range(1, turns), range(0, turns - 1), "partner"
    if alignment == "partner_next":
        return range(0, turns - 1), range(1, turns), "partner"
    raise ValueError(f"alignment must be one of {ALIGNMENTS}, got {alignment!r}")


def build_decode_dataset(corpus, kind: str, alignment: str, role: str = "A",
                         layer: int = -1, condition: str = "interactive") -> DecodeDataset:
    """Assemble aligned rows across a corpus; sidecar-less interactions skipped."""
    if kind not in VOCABS:
        raise ValueError(f"kind must be one of {sorted(VOCABS)}, got {kind!r}")
    if role not in ("A", "B"):
        raise ValueError(f"role must be 'A' or 'B', got {role!r}")
    _aligned_indices(alignment, 2)
    partner = "B" if role == "A" else "A"
    xs, ps, gids = [], [], []
    skipped = 0
    for iid in corpus.interaction_ids:
        if not corpus.record(iid).has(role, condition):
            skipped += 1
            continue
        try:
            affect = load_affect(corpus.root, iid)
        except DataError:
            skipped += 1
            continue
        trace = corpus.load(iid, role, condition)
        owner_logits = affect[role][kind], affect[partner][kind]
        src_idx, tgt_idx, owner = _aligned_indices(alignment, trace.turns)
        logits = owner_logits[0] if owner == "self" else owner_logits[1]
        if logits.shape[0] != trace.turns:
            raise DataError(
                f"{iid}: sidecar has {logits.shape[0]} turns, trace has {trace.turns}")
        if len(src_idx) == 0:
            continue
        reps = trace.values[:, layer, :].astype(np.float64)
        xs.append(reps[list(src_idx)])
        ps.append(stable_softmax(logits[list(tgt_idx)]))
        gids.extend([iid] * len(src_idx))
    if skipped:
        logger.warning("decode dataset: skipped %d interaction(s) without a "
                       "usable sidecar or %r trace", skipped, role)
    if not xs:
        raise EmptyDatasetError(
            f"no aligned rows for kind={kind!r} alignment={alignment!r} role={role!r}")
    return DecodeDataset(
        X=np.concatenate(xs, axis=0),
        probs=np.concatenate(ps, axis=0),
        groups=np.asarray(gids),
        kind=kind, alignment=alignment, role=role, layer=layer,
        n_skipped=skipped)


def run_decode(corpus, kind: str, alignment: str, role: str = "A",
               layer: int = -1, lam: float = 0.1,
               plan: SplitPlan = SplitPlan(), seeds=DECODE_SEEDS,
               eps: float = SMOOTH_EPS) -> DecodeReport:
    """Fit and score a readout per seed over interaction-disjoint splits.

    The plan's sample budget is ignored here: decode rows are scarce (one
    per turn) and the readout target is low-dimensional.
    """
    ds = build_decode_dataset(corpus, kind, alignment, role=role, layer=layer)
    kls, bases = [], []
    for seed in seeds:
        train_groups, _ = split_groups(list(ds.groups), replace(plan, seed=seed))
        in_train = np.array([g in train_groups for g in ds.groups], dtype=bool)
        if not in_train.any() or in_train.all():
            raise DataError("degenerate decode split; need both sides populated")
        m = fit_decoder(ds.X[in_train], ds.probs[in_train], lam=lam, eps=eps)
        pred = decode_proba(m, ds.X[~in_train])
        kls.append(mean_kl(ds.probs[~in_train], pred, eps))
        bases.append(baseline_report(ds.probs[in_train], ds.probs[~in_train], eps))
    return DecodeReport(
        kind=kind, alignment=alignment,
        kl=float(np.mean(kls)), baseline=float(np.mean(bases)),
        per_seed_kl=tuple(kls), per_seed_baseline=tuple(bases),
        n_rows=ds.X.shape[0], n_skipped=ds.n_skipped)


def report_to_dict(report: DecodeReport) -> dict:
    return {
        "kind": report.kind,
        "alignment": report.alignment,
        "kl": report.kl,
        "baseline": report.baseline,
        "per_seed_kl": list(report.per_seed_kl),
        "per_seed_baseline": list(report.per_seed_baseline),
        "n_rows": report.n_rows,
        "n_skipped": report.n_skipped,
    }
