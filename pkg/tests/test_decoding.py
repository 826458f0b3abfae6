"""Distribution decoding: softmax targets, KL scoring, sidecar ingestion.

Corpus-level tests plant logits as exact affine functions of the stored
representations, so each alignment either decodes almost perfectly or sits
at the baseline, which pins down the turn-index arithmetic.
"""

import json
import math

import numpy as np
import pytest

from syncr2 import repstore
from syncr2.decoding import (
    ACTIONS,
    EMOTIONS,
    DecodeReport,
    DistTarget,
    baseline_report,
    build_decode_dataset,
    decode_proba,
    fit_decoder,
    kl_divergence,
    load_affect,
    mean_kl,
    report_to_dict,
    run_decode,
    softmax_targets,
    stable_softmax,
    write_affect,
)
from syncr2.errors import DataError
from syncr2.pairsets import EmptyDatasetError, SplitPlan


class TestSoftmaxTargets:
    def test_vocabularies(self):
        assert len(EMOTIONS) == 8 and EMOTIONS[0] == "Joy"
        assert len(ACTIONS) == 5 and ACTIONS[-1] == "Declaration"

    def test_equal_logits_give_uniform(self):
        # symmetry [TRIVIAL]
        t = softmax_targets(np.zeros((3, 8)), "emotion")
        assert np.all(t.probs == 0.125)
        t = softmax_targets(np.full((2, 5), 7.3), "action")
        assert t.probs == pytest.approx(np.full((2, 5), 0.2), abs=1e-15)

    def test_huge_logit_is_stable(self):
        row = np.zeros(8)
        row[0] = 1000.0
        t = softmax_targets(row, "emotion")
        assert np.all(np.isfinite(t.probs))
        assert t.probs[0, 0] == pytest.approx(1.0, abs=1e-12)
        assert t.probs[0, 1:] == pytest.approx(np.zeros(7), abs=1e-12)

    def test_two_slot_scalar_value(self):
        # [1, 2] -> [1/(1+e), e/(1+e)] [DERIVED]
        p = stable_softmax([1.0, 2.0])
        assert p[0] == pytest.approx(1.0 / (1.0 + math.e), abs=1e-15)
        assert p[1] == pytest.approx(math.e / (1.0 + math.e), abs=1e-15)
        assert p[0] == pytest.approx(0.2689414213699951)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        t = softmax_targets(rng.normal(0, 5, size=(40, 5)), "action")
        assert t.probs.sum(axis=1) == pytest.approx(np.ones(40), abs=1e-12)
        assert np.all(t.probs >= 0.0)

    def test_wrong_width_rejected(self):
        with pytest.raises(ValueError, match="width 8"):
            softmax_targets(np.zeros((2, 5)), "emotion")
        with pytest.raises(ValueError, match="width 5"):
            softmax_targets(np.zeros((2, 8)), "action")
        with pytest.raises(ValueError, match="kind"):
            softmax_targets(np.zeros((2, 8)), "mood")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            stable_softmax([1.0, np.nan])

    def test_dist_target_validation(self):
        ok = np.full((2, 5), 0.2)
        DistTarget("action", "self_current", ok)
        with pytest.raises(ValueError, match="alignment"):
            DistTarget("action", "sideways", ok)
        with pytest.raises(ValueError, match="kind"):
            DistTarget("vibe", "self_current", ok)
        with pytest.raises(ValueError, match="non-negative"):
            DistTarget("action", "self_current",
                       np.array([[0.5, 0.7, -0.2, 0.5, 0.5]]))
        with pytest.raises(ValueError, match="sums to"):
            DistTarget("action", "self_current",
                       np.array([[0.5, 0.2, 0.1, 0.1, 0.2]]))


class TestKL:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert kl_divergence(p, p) == 0.0

    def test_hand_value(self):
        # 0.5*ln(25/9) [DERIVED]
        got = kl_divergence([0.5, 0.5], [0.9, 0.1])
        assert got == pytest.approx(0.5 * math.log(25.0 / 9.0), abs=1e-4)
        assert got == pytest.approx(0.5108256237659907, abs=1e-4)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            p = stable_softmax(rng.normal(0, 3, size=6))
            q = stable_softmax(rng.normal(0, 3, size=6))
            assert kl_divergence(p, q) >= 0.0

    def test_zero_times_log_zero(self):
        # 0*ln(0/q) = 0 with smoothing disabled
        assert kl_divergence([1.0, 0.0], [0.5, 0.5], eps=0.0) == pytest.approx(
            math.log(2.0), abs=1e-15)

    def test_zero_q_rejected_without_smoothing(self):
        with pytest.raises(ValueError, match="zero mass"):
            kl_divergence([0.5, 0.5], [1.0, 0.0], eps=0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])

    def test_mean_kl_shape_check(self):
        with pytest.raises(ValueError):
            mean_kl(np.zeros((3, 4)), np.zeros((3, 5)))


class TestBaseline:
    def test_train_mean_equals_targets(self):
        p = np.tile([0.25, 0.75], (6, 1))
        assert baseline_report(p, p[:3]) == 0.0

    def test_alternating_one_hot_vs_uniform(self):
        # uniform train mean, one-hot tests: ln 2 per sample [DERIVED]
        train = np.array([[1.0, 0.0], [0.0, 1.0]] * 5)
        test = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        got = baseline_report(train, test)
        assert got == pytest.approx(math.log(2.0), abs=1e-4)

    def test_single_test_sample(self):
        train = np.array([[0.5, 0.5], [0.5, 0.5]])
        test = np.array([[0.9, 0.1]])
        assert baseline_report(train, test) == pytest.approx(
            kl_divergence([0.9, 0.1], [0.5, 0.5]), abs=1e-12)

    def test_empty_rejected(self):
        good = np.array([[0.5, 0.5]])
        with pytest.raises(ValueError):
            baseline_report(np.empty((0, 2)), good)
        with pytest.raises(ValueError):
            baseline_report(good, np.empty((0, 2)))


def planted_problem(n=600, d=8, v=5, seed=0, scale=0.6, shuffle=False):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    W = scale * rng.standard_normal((d, v))
    b = 0.3 * rng.standard_normal(v)
    probs = stable_softmax(X @ W + b)
    if shuffle:
        probs = probs[rng.permutation(n)]
    cut = int(0.8 * n)
    return (X[:cut], probs[:cut]), (X[cut:], probs[cut:])


class TestDecoder:
    def test_constant_targets_reproduced(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((100, 6))
        probs = np.tile(stable_softmax(np.arange(5.0)), (100, 1))
        m = fit_decoder(X, probs, lam=0.1)
        pred = decode_proba(m, rng.standard_normal((20, 6)))
        assert mean_kl(np.tile(probs[0], (20, 1)), pred) < 1e-6

    def test_planted_affine_beats_baseline(self):
        (Xtr, Ptr), (Xte, Pte) = planted_problem()
        m = fit_decoder(Xtr, Ptr, lam=0.1)
        pred = decode_proba(m, Xte)
        kl = mean_kl(Pte, pred)
        base = baseline_report(Ptr, Pte)
        assert kl < 0.5 * base
        assert kl < 0.05
        assert pred.sum(axis=1) == pytest.approx(np.ones(len(pred)), abs=1e-6)
        assert np.all(pred >= 0.0)

    def test_shuffled_correspondence_no_better_than_baseline(self):
        (Xtr, Ptr), (Xte, Pte) = planted_problem(shuffle=True, seed=3)
        m = fit_decoder(Xtr, Ptr, lam=0.1)
        kl = mean_kl(Pte, decode_proba(m, Xte))
        base = baseline_report(Ptr, Pte)
        assert kl >= base - 0.02

    def test_orthogonal_reencoding_invariance(self):
        (Xtr, Ptr), (Xte, Pte) = planted_problem(n=300, seed=4)
        q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((8, 8)))
        m1 = fit_decoder(Xtr, Ptr, lam=0.1)
        m2 = fit_decoder(Xtr @ q, Ptr, lam=0.1)
        p1 = decode_proba(m1, Xte)
        p2 = decode_proba(m2, Xte @ q)
        assert p2 == pytest.approx(p1, abs=1e-9)
        assert mean_kl(Pte, p2) == pytest.approx(mean_kl(Pte, p1), abs=1e-10)

    def test_invertible_reencoding_invariance_small_lam(self):
        (Xtr, Ptr), (Xte, Pte) = planted_problem(n=300, seed=6)
        rng = np.random.default_rng(7)
        M = rng.standard_normal((8, 8)) + 3.0 * np.eye(8)
        shift = rng.standard_normal(8)
        m1 = fit_decoder(Xtr, Ptr, lam=1e-8)
        m2 = fit_decoder(Xtr @ M + shift, Ptr, lam=1e-8)
        kl1 = mean_kl(Pte, decode_proba(m1, Xte))
        kl2 = mean_kl(Pte, decode_proba(m2, Xte @ M + shift))
        assert kl2 == pytest.approx(kl1, abs=1e-6)

    def test_dist_target_and_array_agree(self):
        (Xtr, Ptr), _ = planted_problem(n=120, seed=8)
        target = DistTarget("action", "self_current", Ptr)
        m1 = fit_decoder(Xtr, target, lam=0.1)
        m2 = fit_decoder(Xtr, Ptr, lam=0.1)
        assert np.array_equal(m1.W, m2.W)
        assert np.array_equal(m1.b, m2.b)

    def test_insufficient_rows(self):
        with pytest.raises(DataError, match="insufficient aligned rows"):
            fit_decoder(np.zeros((1, 4)), np.array([[0.5, 0.5]]))
        with pytest.raises(DataError, match="insufficient aligned rows"):
            fit_decoder(np.zeros((3, 4)), np.full((2, 2), 0.5))


class TestSidecars:
    def turns_doc(self, t_count, width_e=8, width_a=5, base=0.0):
        turns = []
        for t in range(t_count):
            entry = {"turn": t}
            for role_i, role in enumerate(("A", "B")):
                entry[role] = {
                    "emotion_logits": [base + t + role_i + j for j in range(width_e)],
                    "action_logits": [base - t - role_i - j for j in range(width_a)],
                }
            turns.append(entry)
        return turns

    def test_round_trip(self, tmp_path):
        turns = self.turns_doc(3)
        path = write_affect(tmp_path, "conv0", turns)
        assert path == tmp_path / "affect" / "conv0.json"
        loaded = load_affect(tmp_path, "conv0")
        assert loaded["A"]["emotion"].shape == (3, 8)
        assert loaded["B"]["action"].shape == (3, 5)
        assert loaded["B"]["emotion"][2, 0] == pytest.approx(3.0)
        assert loaded["A"]["action"][1, 4] == pytest.approx(-5.0)

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(DataError, match="no affect sidecar"):
            load_affect(tmp_path, "ghost")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "affect"
        p.mkdir()
        (p / "bad.json").write_text("{not json", "utf-8")
        with pytest.raises(DataError, match="invalid JSON"):
            load_affect(tmp_path, "bad")

    def test_wrong_interaction_id(self, tmp_path):
        write_affect(tmp_path, "conv0", self.turns_doc(2))
        data = json.loads((tmp_path / "affect" / "conv0.json").read_text())
        data["interaction_id"] = "other"
        (tmp_path / "affect" / "conv0.json").write_text(json.dumps(data))
        with pytest.raises(DataError, match="sidecar names"):
            load_affect(tmp_path, "conv0")

    def test_non_contiguous_turns(self, tmp_path):
        turns = self.turns_doc(3)
        turns[1]["turn"] = 5
        write_affect(tmp_path, "conv0", turns)
        with pytest.raises(DataError, match="contiguous"):
            load_affect(tmp_path, "conv0")

    def test_missing_role(self, tmp_path):
        turns = self.turns_doc(2)
        del turns[1]["B"]
        write_affect(tmp_path, "conv0", turns)
        with pytest.raises(DataError, match="missing role 'B'"):
            load_affect(tmp_path, "conv0")

    def test_wrong_width(self, tmp_path):
        turns = self.turns_doc(2)
        turns[0]["A"]["emotion_logits"] = [1.0] * 7
        write_affect(tmp_path, "conv0", turns)
        with pytest.raises(DataError, match="8 entries"):
            load_affect(tmp_path, "conv0")

    def test_non_finite_logits(self, tmp_path):
        turns = self.turns_doc(2)
        turns[0]["A"]["action_logits"] = [1.0, 2.0, float("nan"), 0.0, 1.0]
        write_affect(tmp_path, "conv0", turns)
        with pytest.raises(DataError, match="non-finite"):
            load_affect(tmp_path, "conv0")

    def test_empty_turns(self, tmp_path):
        write_affect(tmp_path, "conv0", [])
        with pytest.raises(DataError, match="empty turns"):
            load_affect(tmp_path, "conv0")


def plant_sidecars(root, plant, rng_seed=0):
    """Write sidecars with emotion/action logits from ``plant``.

    plant(role, reps_by_role, t) -> (emotion logits[8], action logits[5]);
    reps use the last layer of each interactive trace.
    """
    corpus = repstore.load_corpus(root)
    for iid in corpus.interaction_ids:
        reps = {r: corpus.load(iid, r).values[:, -1, :].astype(np.float64)
                for r in ("A", "B")}
        t_count = reps["A"].shape[0]
        turns = []
        for t in range(t_count):
            entry = {"turn": t}
            for role in ("A", "B"):
                emo, act = plant(role, reps, t)
                entry[role] = {"emotion_logits": list(map(float, emo)),
                               "action_logits": list(map(float, act))}
            turns.append(entry)
        write_affect(root, iid, turns)
    return corpus


def affine_maps(dim, seed=9):
    rng = np.random.default_rng(seed)
    return (0.8 * rng.standard_normal((dim, 8)),
            0.8 * rng.standard_normal((dim, 5)))


class TestCorpusDecode:
    N, T, DIM = 10, 12, 6

    def base_corpus(self, corpus_factory):
        rows = [{"iid": f"dconv{k:02d}", "turns": self.T} for k in range(self.N)]
        return corpus_factory(rows, layers=2, dim=self.DIM, root_name="decode")

    def test_self_current_decodes_planted_logits(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)

        def plant(role, reps, t):
            return reps[role][t] @ We, reps[role][t] @ Wa

        plant_sidecars(root, plant)
        report = run_decode(repstore.load_corpus(root), "emotion", "self_current")
        assert report.kl < 0.5 * report.baseline
        assert report.kl < 0.05
        assert report.n_rows == self.N * self.T
        assert report.n_skipped == 0
        assert len(report.per_seed_kl) == 3

    def test_partner_previous_alignment_indexing(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)

        def plant(role, reps, t):
            # B's turn-t logits follow A's turn-(t+1) representation, which is
            # exactly what partner_previous pairs with h^A_{t+1}
            if role == "B" and t + 1 < reps["A"].shape[0]:
                src = reps["A"][t + 1]
            else:
                src = np.zeros(self.DIM)
            return src @ We, src @ Wa

        corpus = plant_sidecars(root, plant)
        good = run_decode(corpus, "emotion", "partner_previous", role="A")
        assert good.kl < 0.5 * good.baseline
        assert good.n_rows == self.N * (self.T - 1)
        # the other partner alignment sees unrelated rows
        off = run_decode(corpus, "emotion", "partner_next", role="A")
        assert off.kl >= off.baseline - 0.02

    def test_partner_next_alignment_indexing(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)

        def plant(role, reps, t):
            if role == "B" and t >= 1:
                src = reps["A"][t - 1]
            else:
                src = np.zeros(self.DIM)
            return src @ We, src @ Wa

        corpus = plant_sidecars(root, plant)
        good = run_decode(corpus, "emotion", "partner_next", role="A")
        assert good.kl < 0.5 * good.baseline
        assert good.n_rows == self.N * (self.T - 1)

    def test_action_vocabulary_widths(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)
        plant_sidecars(root, lambda role, reps, t: (reps[role][t] @ We,
                                                    reps[role][t] @ Wa))
        corpus = repstore.load_corpus(root)
        ds_e = build_decode_dataset(corpus, "emotion", "self_current")
        ds_a = build_decode_dataset(corpus, "action", "self_current")
        assert ds_e.probs.shape == (self.N * self.T, 8)
        assert ds_a.probs.shape == (self.N * self.T, 5)
        report = run_decode(corpus, "action", "self_current")
        assert report.kl < 0.5 * report.baseline

    def test_layer_selection(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)
        corpus = repstore.load_corpus(root)
        # plant from layer 0 instead of the default last layer
        for iid in corpus.interaction_ids:
            reps0 = {r: corpus.load(iid, r).values[:, 0, :].astype(np.float64)
                     for r in ("A", "B")}
            turns = []
            for t in range(self.T):
                entry = {"turn": t}
                for role in ("A", "B"):
                    entry[role] = {
                        "emotion_logits": list(map(float, reps0[role][t] @ We)),
                        "action_logits": list(map(float, reps0[role][t] @ Wa))}
                turns.append(entry)
            write_affect(root, iid, turns)
        at0 = run_decode(corpus, "emotion", "self_current", layer=0)
        at_last = run_decode(corpus, "emotion", "self_current", layer=-1)
        assert at0.kl < 0.5 * at0.baseline
        assert at_last.kl >= at_last.baseline - 0.02

    def test_skip_count_and_warning(self, corpus_factory, caplog):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)
        plant_sidecars(root, lambda role, reps, t: (reps[role][t] @ We,
                                                    reps[role][t] @ Wa))
        (root / "affect" / "dconv03.json").unlink()
        corpus = repstore.load_corpus(root)
        with caplog.at_level("WARNING"):
            ds = build_decode_dataset(corpus, "emotion", "self_current")
        assert ds.n_skipped == 1
        assert "skipped 1" in caplog.text
        assert ds.X.shape[0] == (self.N - 1) * self.T
        assert "dconv03" not in set(ds.groups)

    def test_no_sidecars_at_all(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        corpus = repstore.load_corpus(root)
        with pytest.raises(EmptyDatasetError):
            build_decode_dataset(corpus, "emotion", "self_current")

    def test_sidecar_turn_mismatch(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)
        corpus = repstore.load_corpus(root)
        for iid in corpus.interaction_ids:
            turns = []
            for t in range(self.T - 1):  # one short
                entry = {"turn": t}
                for role in ("A", "B"):
                    entry[role] = {"emotion_logits": [0.0] * 8,
                                   "action_logits": [0.0] * 5}
                turns.append(entry)
            write_affect(root, iid, turns)
        with pytest.raises(DataError, match="turns"):
            build_decode_dataset(corpus, "emotion", "self_current")

    def test_run_decode_deterministic(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)
        plant_sidecars(root, lambda role, reps, t: (reps[role][t] @ We,
                                                    reps[role][t] @ Wa))
        corpus = repstore.load_corpus(root)
        r1 = run_decode(corpus, "emotion", "self_current", plan=SplitPlan())
        r2 = run_decode(corpus, "emotion", "self_current", plan=SplitPlan())
        assert r1 == r2
        d = report_to_dict(r1)
        assert json.dumps(d, sort_keys=True) == json.dumps(report_to_dict(r2),
                                                           sort_keys=True)
        assert isinstance(r1, DecodeReport)
        assert r1.kl == pytest.approx(float(np.mean(r1.per_seed_kl)), abs=1e-15)

    def test_role_b_uses_own_trace(self, corpus_factory):
        root = self.base_corpus(corpus_factory)
        We, Wa = affine_maps(self.DIM)

        def plant(role, reps, t):
            # only B's own reps drive B's logits
            src = reps["B"][t] if role == "B" else np.zeros(self.DIM)
            return src @ We, src @ Wa

        corpus = plant_sidecars(root, plant)
        as_b = run_decode(corpus, "emotion", "self_current", role="B")
        assert as_b.kl < 0.5 * as_b.baseline
