import hashlib

import numpy as np
import pytest

from syncr2 import repstore


def _trace_seed(iid: str, role: str, condition: str) -> int:
    digest = hashlib.sha256(f"{iid}/{role}/{condition}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def make_trace(iid, role, condition="interactive", turns=6, layers=3, dim=4,
               model="toy-model", fill=None):
    if fill is None:
        rng = np.random.default_rng(_trace_seed(iid, role, condition))
        values = rng.standard_normal((turns, layers, dim)).astype(np.float32)
    else:
        values = np.asarray(fill, dtype=np.float32)
    return repstore.RepresentationTrace(model, iid, role, condition, values)


def manifest_entry(iid, role, condition, fname, turns, relationship="friend",
                   persona="p0", source="social_iqa", scenario="s0", seed=0,
                   model_a="toy-model", model_b="toy-model"):
    return {
        "file": fname,
        "interaction_id": iid,
        "scenario_id": scenario,
        "scenario_source": source,
        "relationship": relationship,
        "persona_pair_id": persona,
        "seed": seed,
        "model_a": model_a,
        "model_b": model_b,
        "turn_count": turns,
        "agent_role": role,
        "condition": condition,
    }


@pytest.fixture
def corpus_factory(tmp_path):
    """Build a REPD corpus on disk and return its root.

    ``spec_rows`` is a list of dicts with keys: iid, and optionally turns,
    relationship, persona, source, passive_roles, fill (callable
    (role, condition, turns, layers, dim) -> array).
    """

    def build(spec_rows, layers=3, dim=4, root_name="corpus"):
        root = tmp_path / root_name
        root.mkdir(exist_ok=True)
        entries = []
        for row in spec_rows:
            iid = row["iid"]
            turns = row.get("turns", 6)
            fill = row.get("fill")
            keys = [("A", "interactive"), ("B", "interactive")]
            keys += [(r, "passive_reader") for r in row.get("passive_roles", ())]
            for role, condition in keys:
                values = fill(role, condition, turns, layers, dim) if fill else None
                trace = make_trace(iid, role, condition, turns, layers, dim, fill=values)
                fname = f"{iid}_{role}_{condition}.repd"
                repstore.write_trace(trace, root / fname)
                entries.append(manifest_entry(
                    iid, role, condition, fname, turns,
                    relationship=row.get("relationship", "friend"),
                    persona=row.get("persona", "p0"),
                    source=row.get("source", "social_iqa"),
                ))
        repstore.write_manifest(root, entries)
        return root

    return build
