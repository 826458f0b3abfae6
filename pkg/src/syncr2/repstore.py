"""On-disk representation dumps (REPD) and corpus loading.

A REPD file stores one agent's per-turn, per-layer hidden vectors for one
interaction:

    bytes 0..3    magic ``REPD``
    bytes 4..7    format version, u32 little-endian (currently 1)
    bytes 8..11   header length H, u32 little-endian
    bytes 12..12+H  UTF-8 JSON header with keys
                  {model_id, interaction_id, agent_role, condition,
                   turns, layers, dim, dtype:"f32le", layout:"turn-layer-dim"}
    remainder     turns*layers*dim float32 little-endian values,
                  turn-major, then layer, then dim

The header JSON is serialized with sorted keys and no whitespace, so writing
the same trace twice produces byte-identical files.

A corpus is a directory containing ``manifest.json`` (an array of per-trace
entries, see ``MANIFEST_KEYS``) plus the referenced REPD files. Traces are
loaded lazily; loaded traces and corpora are immutable and safe to share
across workers.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

MAGIC = b"REPD"
FORMAT_VERSION = 1

ROLES = ("A", "B")
CONDITIONS = ("interactive", "passive_reader")

# Closed relationship vocabulary; unmapped strings normalize to "unknown".
RELATIONSHIPS = (
    "strangers",
    "know_by_name",
    "acquaintance",
    "friend",
    "romantic",
    "family",
    "unknown",
)

# Alias keys are already lowercased with underscores.
_RELATIONSHIP_ALIASES = {
    "stranger": "strangers",
    "know_by_names": "know_by_name",
    "acquaintances": "acquaintance",
    "friends": "friend",
    "romantic_relationship": "romantic",
    "romance": "romantic",
    "family_member": "family",
}

MANIFEST_NAME = "manifest.json"
MANIFEST_KEYS = (
    "file",
    "interaction_id",
    "scenario_id",
    "scenario_source",
    "relationship",
    "persona_pair_id",
    "seed",
    "model_a",
    "model_b",
    "turn_count",
    "agent_role",
    "condition",
)


class RepdFormatError(DataError):
    """Malformed REPD file."""


class BadMagicError(RepdFormatError):
    pass


class VersionMismatchError(RepdFormatError):
    pass


class HeaderError(RepdFormatError):
    """Missing, truncated, or inconsistent JSON header."""


class TruncatedPayloadError(RepdFormatError):
    pass


class TrailingBytesError(RepdFormatError):
    """Payload longer than the declared turns*layers*dim."""


class NonFiniteValueError(RepdFormatError):
    """NaN or Inf in the payload; carries the first offending coordinates."""

    def __init__(self, msg: str, turn: int, layer: int, dim: int):
        super().__init__(msg)
        self.turn = turn
        self.layer = layer
        self.dim = dim


class TraceValidationError(DataError):
    """A trace violates an invariant; ``field`` names the offender."""

    def __init__(self, msg: str, field_name: str):
        super().__init__(msg)
        self.field = field_name


class ManifestError(DataError):
    pass


class DuplicateInteractionError(ManifestError):
    pass


def normalize_relationship(label: str | None) -> str:
    """Map a free-form relationship label onto the closed vocabulary."""
    if not label:
        return "unknown"
    key = str(label).strip().lower().replace("-", "_").replace(" ", "_")
    key = _RELATIONSHIP_ALIASES.get(key, key)
    return key if key in RELATIONSHIPS else "unknown"


@dataclass(frozen=True)
class RepresentationTrace:
    """One agent's hidden vectors for one interaction, shape (T, L, D) float32."""

    model_id: str
    interaction_id: str
    agent_role: str
    condition: str
    values: np.ndarray

    @property
    def turns(self) -> int:
        return self.values.shape[0]

    @property
    def layers(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    def validate(self) -> None:
        if self.agent_role not in ROLES:
            raise TraceValidationError(
                f"agent_role must be one of {ROLES}, got {self.agent_role!r}", "agent_role"
            )
        if self.condition not in CONDITIONS:
            raise TraceValidationError(
                f"condition must be one of {CONDITIONS}, got {self.condition!r}", "condition"
            )
        v = self.values
        if not isinstance(v, np.ndarray) or v.ndim != 3:
            raise TraceValidationError("values must be a 3-axis array (turn, layer, dim)", "values")
        if v.dtype != np.float32:
            raise TraceValidationError(f"values must be float32, got {v.dtype}", "values")
        if min(v.shape) < 1:
            raise TraceValidationError(f"all axes must be positive, got shape {v.shape}", "values")
        bad = ~np.isfinite(v)
        if bad.any():
            t, l, d = (int(i[0]) for i in np.nonzero(bad))
            raise TraceValidationError(
                f"non-finite value at turn={t} layer={l} dim={d}", "values"
            )


def write_trace(trace: RepresentationTrace, path: str | Path) -> None:
    """Write a trace to REPD format; byte-identical for identical inputs."""
    trace.validate()
    header = {
        "model_id": trace.model_id,
        "interaction_id": trace.interaction_id,
        "agent_role": trace.agent_role,
        "condition": trace.condition,
        "turns": trace.turns,
        "layers": trace.layers,
        "dim": trace.dim,
        "dtype": "f32le",
        "layout": "turn-layer-dim",
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(trace.values, dtype="<f4").tobytes()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        f.write(payload)


def read_trace(path: str | Path) -> RepresentationTrace:
    """Read and fully validate a REPD file.

    Raises a distinct error per failure mode: BadMagicError,
    VersionMismatchError, HeaderError, TruncatedPayloadError,
    TrailingBytesError, NonFiniteValueError.
    """
    raw = Path(path).read_bytes()
    header, offset = _parse_header(raw, path)
    t, l, d = header["turns"], header["layers"], header["dim"]
    expected = t * l * d * 4
    got = len(raw) - offset
    if got < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {got} bytes, expected {expected} for (T={t}, L={l}, D={d})"
        )
    if got > expected:
        raise TrailingBytesError(
            f"{path}: {got - expected} trailing bytes beyond declared (T={t}, L={l}, D={d})"
        )
    values = np.frombuffer(raw, dtype="<f4", count=t * l * d, offset=offset).reshape(t, l, d)
    bad = ~np.isfinite(values)
    if bad.any():
        ti, li, di = (int(i[0]) for i in np.nonzero(bad))
        raise NonFiniteValueError(
            f"{path}: non-finite value at turn={ti} layer={li} dim={di}", ti, li, di
        )
    trace = RepresentationTrace(
        model_id=header["model_id"],
        interaction_id=header["interaction_id"],
        agent_role=header["agent_role"],
        condition=header["condition"],
        values=values.copy(),
    )
    trace.validate()
    return trace


def read_trace_header(path: str | Path) -> dict:
    """Parse only the header of a REPD file (cheap validation pass)."""
    with open(path, "rb") as f:
        raw = f.read(12)
        if len(raw) < 12:
            raise HeaderError(f"{path}: file too short for REPD framing")
        hlen = struct.unpack("<I", raw[8:12])[0]
        raw += f.read(hlen)
    header, _ = _parse_header(raw, path)
    return header


def _parse_header(raw: bytes, path) -> tuple[dict, int]:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise HeaderError(f"{path}: file too short for REPD framing")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    hlen = struct.unpack("<I", raw[8:12])[0]
    if len(raw) < 12 + hlen:
        raise HeaderError(f"{path}: declared header length {hlen} exceeds file size")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"{path}: header is not valid JSON ({e})") from e
    required = {
        "model_id", "interaction_id", "agent_role", "condition",
        "turns", "layers", "dim", "dtype", "layout",
    }
    missing = required - header.keys()
    if missing:
        raise HeaderError(f"{path}: header missing keys {sorted(missing)}")
    if header["dtype"] != "f32le" or header["layout"] != "turn-layer-dim":
        raise HeaderError(
            f"{path}: unsupported dtype/layout {header['dtype']!r}/{header['layout']!r}"
        )
    for k in ("turns", "layers", "dim"):
        if not isinstance(header[k], int) or header[k] < 1:
            raise HeaderError(f"{path}: header field {k!r} must be a positive integer")
    return header, 12 + hlen


@dataclass(frozen=True)
class InteractionMeta:
    interaction_id: str
    scenario_id: str
    scenario_source: str
    relationship: str
    persona_pair_id: str
    seed: int
    model_a: str
    model_b: str
    turn_count: int


@dataclass
class InteractionRecord:
    """One interaction's metadata plus its trace files keyed by (role, condition)."""

    meta: InteractionMeta
    files: dict[tuple[str, str], Path] = field(default_factory=dict)

    def has(self, role: str, condition: str = "interactive") -> bool:
        return (role, condition) in self.files


class Corpus:
    """Validated, immutable index over a representation dump directory."""

    def __init__(self, root: Path, records: dict[str, InteractionRecord], warnings: list[str]):
        self.root = Path(root)
        self._records = dict(sorted(records.items()))
        self.warnings = list(warnings)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def interaction_ids(self) -> list[str]:
        return list(self._records)

    def record(self, interaction_id: str) -> InteractionRecord:
        return self._records[interaction_id]

    def meta(self, interaction_id: str) -> InteractionMeta:
        return self._records[interaction_id].meta

    def load(
        self, interaction_id: str, role: str, condition: str = "interactive"
    ) -> RepresentationTrace:
        rec = self._records[interaction_id]
        try:
            path = rec.files[(role, condition)]
        except KeyError:
            raise DataError(
                f"interaction {interaction_id!r} has no trace for role={role} condition={condition}"
            ) from None
        return read_trace(path)

    def passive_coverage(self, role: str) -> int:
        """Number of interactions that carry a passive-reader trace for ``role``."""
        return sum(r.has(role, "passive_reader") for r in self._records.values())

    def model_pairs(self) -> list[tuple[str, str]]:
        return sorted({(r.meta.model_a, r.meta.model_b) for r in self._records.values()})

    def filter_pair(self, model_a: str, model_b: str) -> "Corpus":
        kept = {
            i: r
            for i, r in self._records.items()
            if r.meta.model_a == model_a and r.meta.model_b == model_b
        }
        return Corpus(self.root, kept, self.warnings)


@dataclass
class CorpusReport:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    n_interactions: int = 0
    n_traces: int = 0
    has_duplicates: bool = False

    @property
    def ok(self) -> bool:
        return not self.errors


def load_corpus(root: str | Path) -> Corpus:
    """Load and validate a corpus; incomplete interactions are excluded with a warning."""
    root = Path(root)
    records, report = _scan_manifest(root, deep=False)
    if report.has_duplicates:
        raise DuplicateInteractionError(f"{root}: " + "; ".join(report.errors))
    if report.errors:
        raise ManifestError(f"{root}: " + "; ".join(report.errors))
    for w in report.warnings:
        log.warning("%s", w)
    return Corpus(root, records, report.warnings)


def validate_corpus(root: str | Path, deep: bool = True) -> CorpusReport:
    """Validate manifest structure and every referenced trace.

    With ``deep`` (the default) every trace payload is read and checked for
    shape and finiteness; otherwise only headers are inspected.
    """
    _, report = _scan_manifest(Path(root), deep=deep)
    return report


def _scan_manifest(root: Path, deep: bool) -> tuple[dict[str, InteractionRecord], CorpusReport]:
    report = CorpusReport()
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        report.errors.append(f"missing {MANIFEST_NAME}")
        return {}, report
    try:
        entries = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as e:
        report.errors.append(f"manifest parse error: {e}")
        return {}, report
    if not isinstance(entries, list):
        report.errors.append("manifest must be a JSON array")
        return {}, report

    records: dict[str, InteractionRecord] = {}
    for i, entry in enumerate(entries):
        missing = [k for k in MANIFEST_KEYS if k not in entry]
        if missing:
            report.errors.append(f"manifest entry {i} missing keys {missing}")
            continue
        iid = str(entry["interaction_id"])
        role, condition = entry["agent_role"], entry["condition"]
        if role not in ROLES or condition not in CONDITIONS:
            report.errors.append(
                f"manifest entry {i} ({iid}): bad agent_role/condition {role!r}/{condition!r}"
            )
            continue
        meta = InteractionMeta(
            interaction_id=iid,
            scenario_id=str(entry["scenario_id"]),
            scenario_source=str(entry["scenario_source"]),
            relationship=normalize_relationship(entry["relationship"]),
            persona_pair_id=str(entry["persona_pair_id"]),
            seed=int(entry["seed"]),
            model_a=str(entry["model_a"]),
            model_b=str(entry["model_b"]),
            turn_count=int(entry["turn_count"]),
        )
        rec = records.get(iid)
        if rec is None:
            rec = records[iid] = InteractionRecord(meta=meta)
        elif rec.meta != meta:
            report.errors.append(
                f"manifest entries for {iid!r} disagree on interaction metadata"
            )
            continue
        key = (role, condition)
        if key in rec.files:
            report.has_duplicates = True
            report.errors.append(
                f"duplicate manifest entry for interaction {iid!r} role={role} condition={condition}"
            )
            continue
        path = root / entry["file"]
        if not path.is_file():
            report.errors.append(f"{iid}: trace file {entry['file']!r} not found")
            continue
        try:
            header = read_trace_header(path)
            _check_header_against_entry(header, entry)
            if deep:
                read_trace(path)
            report.n_traces += 1
            rec.files[key] = path
        except DataError as e:
            report.errors.append(str(e))

    # Exclude interactions that lack a full interactive pair.
    for iid in list(records):
        rec = records[iid]
        missing = [r for r in ROLES if not rec.has(r)]
        if missing:
            report.warnings.append(
                f"interaction {iid!r} missing interactive trace for role(s) {missing}; excluded"
            )
            del records[iid]
    report.n_interactions = len(records)
    return records, report


def _check_header_against_entry(header: dict, entry: dict) -> None:
    for hk, ek in (("interaction_id", "interaction_id"), ("agent_role", "agent_role"),
                   ("condition", "condition"), ("turns", "turn_count")):
        if header[hk] != entry[ek]:
            raise HeaderError(
                f"{entry['file']}: header {hk}={header[hk]!r} disagrees with manifest "
                f"{ek}={entry[ek]!r}"
            )


def write_manifest(root: str | Path, entries: list[dict]) -> None:
    """Write ``manifest.json``; entries must carry all MANIFEST_KEYS."""
    for i, e in enumerate(entries):
        missing = [k for k in MANIFEST_KEYS if k not in e]
        if missing:
            raise ManifestError(f"manifest entry {i} missing keys {missing}")
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(entries, sort_keys=True, indent=1) + "\n", "utf-8")
