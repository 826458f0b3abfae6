"""Synthetic two-agent corpora with analytically known coupling.

Construction: each turn t draws an i.i.d. latent u_t ~ N(0, I_dim). Agent A's
layer l stores an orthogonal rotation Q_A[l] @ u_t, so A carries the latent
exactly. Agent B's layer l stores

    Q_B[l] @ (sqrt(s_i) * c_t + sqrt(1 - s_i) * noise * eps_{t,l})

where c_t averages the last ``markov_order`` latents (unit variance) and
s_i is the interaction's signal fraction. Orthogonal rotations preserve
isotropic covariance, so the population R2 of any (A layer -> B layer)
regression is closed-form; see ``expected_forward``.

A passive-reader trace for either role stores a * u_t plus fresh unit noise
(rotated), attenuating its predictive power over the partner by a^2.

The same-turn latent never leaks into the next turn, so predicting a
partner's FUTURE representation (the lagged controls, and every pairing
that targets A's next turn) carries zero signal by construction when
markov_order is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import repstore
from .repstore import Corpus, RepresentationTrace

_DEFAULT_SOURCES = ("social_iqa", "social_chemistry", "normbank")


@dataclass(frozen=True)
class CouplingSpec:
    n_interactions: int = 24
    turns: int = 12
    layers_a: int = 4
    layers_b: int = 4
    dim: int = 16
    signal: float = 0.75
    noise: float = 1.0
    markov_order: int = 1
    relationship_multipliers: dict[str, float] = field(
        default_factory=lambda: {"friend": 1.0})
    passive_attenuation: float | None = None
    seed: int = 0
    model_a: str = "synth-a"
    model_b: str = "synth-b"
    scenario_sources: tuple[str, ...] = _DEFAULT_SOURCES
    interactions_per_persona: int = 2

    def validate(self) -> None:
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError("signal fraction must lie in [0, 1]")
        if self.markov_order < 1:
            raise ValueError("markov_order must be >= 1")
        if min(self.n_interactions, self.turns, self.layers_a,
               self.layers_b, self.dim) < 1:
            raise ValueError("interaction, turn, layer and dim counts must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.passive_attenuation is not None and not 0.0 <= self.passive_attenuation <= 1.0:
            raise ValueError("passive attenuation must lie in [0, 1]")
        if not self.relationship_multipliers:
            raise ValueError("need at least one relationship multiplier")
        for rel, mult in self.relationship_multipliers.items():
            if not 0.0 <= self.signal * mult <= 1.0:
                raise ValueError(
                    f"relationship {rel!r}: signal * multiplier = "
                    f"{self.signal * mult} falls outside [0, 1]")
        if self.interactions_per_persona < 1:
            raise ValueError("interactions_per_persona must be >= 1")


def _random_orthogonal(rng: np.random.Generator, d: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def _coupling_window(u: np.ndarray, order: int) -> np.ndarray:
    """Unit-variance average of each turn's last ``order`` latents."""
    t = u.shape[0]
    c = np.zeros_like(u)
    for i in range(t):
        lo = max(0, i - order + 1)
        window = u[lo:i + 1]
        c[i] = window.sum(axis=0) / math.sqrt(len(window))
    return c


def _relationship_of(spec: CouplingSpec, index: int) -> tuple[str, float]:
    rels = sorted(spec.relationship_multipliers)
    rel = rels[index % len(rels)]
    return rel, spec.relationship_multipliers[rel]


def generate(spec: CouplingSpec, root: str | Path) -> Corpus:
    """Write a REPD corpus with planted coupling; bit-reproducible per seed."""
    spec.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_interactions + 1)
    proj_rng = np.random.default_rng(children[0])
    q_a = [_random_orthogonal(proj_rng, spec.dim) for _ in range(spec.layers_a)]
    q_b = [_random_orthogonal(proj_rng, spec.dim) for _ in range(spec.layers_b)]
    q_read_a = [_random_orthogonal(proj_rng, spec.dim) for _ in range(spec.layers_a)]
    q_read_b = [_random_orthogonal(proj_rng, spec.dim) for _ in range(spec.layers_b)]

    entries = []
    for i in range(spec.n_interactions):
        rng = np.random.default_rng(children[i + 1])
        rel, mult = _relationship_of(spec, i)
        s = spec.signal * mult
        u = rng.standard_normal((spec.turns, spec.dim))
        c = _coupling_window(u, spec.markov_order)
        vals_a = np.stack([u @ q.T for q in q_a], axis=1)
        eps = rng.standard_normal((spec.turns, spec.layers_b, spec.dim))
        mix_b = math.sqrt(s) * c[:, None, :] + math.sqrt(1.0 - s) * spec.noise * eps
        vals_b = np.stack([mix_b[:, l, :] @ q_b[l].T for l in range(spec.layers_b)], axis=1)

        iid = f"synth{i:04d}"
        traces = {
            ("A", "interactive"): (spec.model_a, vals_a),
            ("B", "interactive"): (spec.model_b, vals_b),
        }
        if spec.passive_attenuation is not None:
            a = spec.passive_attenuation
            for role, q_read, n_layers, model in (
                    ("A", q_read_a, spec.layers_a, spec.model_a),
                    ("B", q_read_b, spec.layers_b, spec.model_b)):
                eta = rng.standard_normal((spec.turns, n_layers, spec.dim))
                mix = a * u[:, None, :] + math.sqrt(1.0 - a * a) * eta
                vals = np.stack(
                    [mix[:, l, :] @ q_read[l].T for l in range(n_layers)], axis=1)
                traces[(role, "passive_reader")] = (model, vals)

        persona = f"pp{i // spec.interactions_per_persona:04d}"
        source = spec.scenario_sources[i % len(spec.scenario_sources)]
        for (role, condition), (model, vals) in traces.items():
            fname = f"{iid}_{role}_{condition}.repd"
            trace = RepresentationTrace(model, iid, role, condition,
                                        vals.astype(np.float32))
            repstore.write_trace(trace, root / fname)
            entries.append({
                "file": fname,
                "interaction_id": iid,
                "scenario_id": f"sc{i:04d}",
                "scenario_source": source,
                "relationship": rel,
                "persona_pair_id": persona,
                "seed": i,
                "model_a": spec.model_a,
                "model_b": spec.model_b,
                "turn_count": spec.turns,
                "agent_role": role,
                "condition": condition,
            })
    repstore.write_manifest(root, entries)
    return repstore.load_corpus(root)


def generate_passive_variant(spec: CouplingSpec, root: str | Path,
                             attenuation: float) -> Corpus:
    return generate(replace(spec, passive_attenuation=attenuation), root)


def _uniform_signal(spec: CouplingSpec) -> float:
    mults = set(spec.relationship_multipliers.values())
    if len(mults) != 1:
        raise ValueError("analytic scores need a uniform relationship multiplier")
    return spec.signal * mults.pop()


def expected_forward(spec: CouplingSpec, lag: int = 0,
                     attenuation: float = 1.0) -> float:
    """Population R2 of any (A layer -> B layer) cell at the given lag.

    The source turn contributes 1/markov_order of the coupling window's
    variance when it falls inside the window and nothing otherwise; the
    passive reader's contribution is further scaled by attenuation^2.
    """
    s = _uniform_signal(spec)
    total = s + (1.0 - s) * spec.noise ** 2
    if total == 0.0:
        return 1.0
    in_window = 0 <= lag <= spec.markov_order - 1
    share = (1.0 / spec.markov_order) if in_window else 0.0
    return s * share * attenuation ** 2 / total


def expected_backward(spec: CouplingSpec) -> float:
    """Predicting A's next turn carries no signal: latents are i.i.d."""
    return 0.0


def expected_symmetric(spec: CouplingSpec, lag: int = 0,
                       attenuation: float = 1.0) -> float:
    return 0.5 * (expected_forward(spec, lag, attenuation) + expected_backward(spec))


def expected_best_cell(spec: CouplingSpec) -> float:
    return expected_forward(spec, lag=0)
