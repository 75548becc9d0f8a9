"""Representation diagnostics: PCA state/similarity/shift against
constructed data and the Jacobi oracle, CKA invariances and a naive trace
oracle, Fisher vs a hand-rolled loop, min-k MIA vs a pair loop, and the
perturbation probe's qualitative behavior."""

import math

import numpy as np
import pytest

from unlearn_lens.diagnostics import (
    FISHER_BIN_EDGES,
    ProbeSet,
    build_probe_set,
    capture_activations,
    compare_states,
    fisher_diagonal,
    linear_cka,
    locality_trial,
    mean_pca_distance,
    min_k_mia,
    min_k_scores,
    pca_shift,
    pca_similarity,
    pca_state_from_activations,
    perturbation_probe,
    rank_auc,
)
from unlearn_lens.linalg import spectral_norm_sym
from unlearn_lens.model import (
    Batch,
    Corpus,
    CorpusSpec,
    ModelError,
    OptimizerState,
    adamw_step,
    init_model,
    loss_and_grads,
    make_holdout_corpus,
    make_synthetic_corpora,
    windows_and_targets,
)

from oracles import fisher_loop_oracle, jacobi_eigh, naive_cka, pair_loop_auc


def random_activations(seed, rows=20, cols=8, scale=1.0):
    rng = np.random.default_rng(seed)
    return scale * rng.standard_normal((rows, cols)) + rng.standard_normal(cols)


class TestPCAState:
    def test_one_dimensional_data(self):
        rng = np.random.default_rng(0)
        coords = rng.standard_normal(30)
        acts = np.zeros((30, 5))
        acts[:, 0] = coords  # everything along e1
        state = pca_state_from_activations(acts)
        np.testing.assert_allclose(np.abs(state.c1), [1, 0, 0, 0, 0], atol=1e-9)
        assert state.lam2 == pytest.approx(0.0, abs=1e-12)

    def test_matches_jacobi_oracle(self):
        acts = random_activations(1, rows=20, cols=8)
        state = pca_state_from_activations(acts)
        centered = acts - acts.mean(axis=0, keepdims=True)
        cov = centered.T @ centered / (acts.shape[0] - 1)
        values, vectors = jacobi_eigh(cov)
        assert abs(abs(state.c1 @ vectors[:, 0]) - 1.0) < 1e-8
        assert state.lam1 == pytest.approx(values[0], rel=1e-10)
        assert state.lam2 == pytest.approx(values[1], rel=1e-10)

    def test_identical_projection(self):
        acts = random_activations(2)
        a = pca_state_from_activations(acts)
        b = pca_state_from_activations(acts.copy())
        assert a.projection == b.projection

    def test_collapsed_layer_rejected(self):
        acts = np.ones((10, 4)) * 3.0  # identical rows: rank 0 after centering
        with pytest.raises(ModelError, match="collapsed layer"):
            pca_state_from_activations(acts)

    def test_needs_three_rows(self):
        with pytest.raises(ModelError, match="at least 3"):
            pca_state_from_activations(np.eye(2))


class TestPCASimilarityShift:
    def test_same_state_similarity_one_shift_zero(self):
        acts = random_activations(3)
        a = pca_state_from_activations(acts)
        b = pca_state_from_activations(acts.copy())
        assert pca_similarity(a, b) == pytest.approx(1.0, abs=1e-12)
        assert pca_shift(a, b) == (0.0, 0.0)

    def test_rotated_copy_similarity(self):
        # a rotation mixes the principal directions; the cosine against the
        # rotated basis is pinned by construction
        acts = random_activations(4, rows=40, cols=6)
        rng = np.random.default_rng(5)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        a = pca_state_from_activations(acts)
        b = pca_state_from_activations(acts @ q)
        expected = abs(float(a.c1 @ (q @ b.c1)))
        assert expected == pytest.approx(1.0, abs=1e-6)
        assert -1.0 <= pca_similarity(a, b) <= 1.0

    def test_translation_along_c1(self):
        acts = random_activations(6, rows=50, cols=6)
        a = pca_state_from_activations(acts)
        t = 2.5
        b = pca_state_from_activations(acts + t * a.c1)
        s1, s2 = pca_shift(a, b)
        assert s1 == pytest.approx(t, abs=1e-9)
        assert s2 == pytest.approx(0.0, abs=1e-9)

    def test_davis_kahan_style_bound(self):
        # perturb the covariance directly; 1 - cos and sin(theta) are both
        # controlled by the spectral perturbation over the eigengap
        rng = np.random.default_rng(7)
        for trial in range(20):
            acts = random_activations(100 + trial, rows=30, cols=6)
            centered = acts - acts.mean(axis=0, keepdims=True)
            cov = centered.T @ centered / (acts.shape[0] - 1)
            values, vectors = jacobi_eigh(cov)
            gap = values[0] - values[1]
            e = rng.standard_normal((6, 6))
            e = 0.5 * (e + e.T)
            e *= (0.2 * gap) / spectral_norm_sym(e)
            v2, _ = jacobi_eigh(cov + e)
            from unlearn_lens.linalg import sym_top_eigs

            c1 = sym_top_eigs(cov, 1)[0].vector
            c1p = sym_top_eigs(cov + e, 1)[0].vector
            cos = abs(float(c1 @ c1p))
            sin = math.sqrt(max(0.0, 1.0 - cos * cos))
            norm_e = spectral_norm_sym(e)
            assert sin <= 2.0 * norm_e / gap + 1e-12
            assert 1.0 - cos <= 4.0 * norm_e / gap + 1e-12

    def test_mean_distance_arithmetic(self):
        assert mean_pca_distance([(0.0, 0.0), (0.0, 0.0)]) == 0.0
        assert mean_pca_distance([(3.0, 4.0), (0.0, 0.0)]) == pytest.approx(2.5)


class TestLinearCKA:
    def test_self_is_one(self):
        x = random_activations(8, rows=12, cols=5)
        assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-10)

    def test_orthogonal_rotation_invariance(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            x = random_activations(200 + trial, rows=12, cols=6)
            q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
            assert linear_cka(x, x @ q) == pytest.approx(1.0, abs=1e-9)

    def test_scaling_invariance(self):
        x = random_activations(10, rows=12, cols=5)
        for alpha in (0.1, 7.0):
            assert linear_cka(x, alpha * x) == pytest.approx(1.0, abs=1e-9)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((12, 5))
        y = rng.standard_normal((12, 7))
        assert abs(linear_cka(x, y) - naive_cka(x, y)) < 1e-10

    def test_symmetry(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            x = rng.standard_normal((10, 4))
            y = rng.standard_normal((10, 6))
            assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12

    def test_zero_variance_rejected(self):
        x = np.ones((6, 3))
        y = random_activations(13, rows=6, cols=3)
        with pytest.raises(ModelError, match="degenerate activations"):
            linear_cka(x, y)

    def test_row_mismatch_rejected(self):
        with pytest.raises(ModelError, match="row count"):
            linear_cka(np.eye(3), np.eye(4))


def small_probe(seed=0, vocab=12, ctx=3):
    spec = CorpusSpec(
        vocab_size=vocab, context_len=ctx, seq_len=9, n_forget=5, n_retain=5,
        n_unrelated=3, n_holdout=4, unrelated_token_lo=vocab - 3,
    )
    forget, retain, unrelated = make_synthetic_corpora(seed, spec)
    probe = build_probe_set(forget, ctx, 24, seed)
    return probe, (forget, retain, unrelated), spec


class TestFisher:
    def test_matches_loop_oracle(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=2, hidden_widths=(5,), seed=3)
        probe, _, _ = small_probe(3)
        summary = fisher_diagonal(model, probe)
        oracle = fisher_loop_oracle(model, probe.batch)
        o_total = sum(o.sum() for o in oracle.values())
        o_count = sum(o.size for o in oracle.values())
        assert summary.global_mean == pytest.approx(o_total / o_count, abs=1e-12, rel=1e-12)
        for name in oracle:
            assert np.abs(summary.diag[name] - oracle[name]).max() < 1e-12

    def test_nonnegative(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=3, hidden_widths=(6, 4), seed=4)
        probe, _, _ = small_probe(4)
        summary = fisher_diagonal(model, probe)
        for diag in summary.diag.values():
            assert diag.min() >= 0.0

    def test_saturated_model_zero_fisher(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=3, hidden_widths=(6,), seed=5)
        probe, _, _ = small_probe(5)
        # drive p(target) -> 1 via a huge output bias on every target token
        model.params["w_out"] = np.zeros_like(model.params["w_out"])
        model.params["b_out"] = np.full(12, -200.0)
        targets = set(probe.batch.targets.tolist())
        if len(targets) == 12:  # cannot saturate all tokens at once
            pytest.skip("probe covers the whole vocabulary")
        for t in targets:
            model.params["b_out"][t] = 200.0
        summary = fisher_diagonal(model, probe)
        if len(targets) == 1:
            assert summary.global_mean < 1e-12

    def test_histogram_counts(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=3, hidden_widths=(6, 4), seed=6)
        probe, _, _ = small_probe(6)
        summary = fisher_diagonal(model, probe)
        from unlearn_lens.diagnostics import fisher_groups

        groups = fisher_groups(model)
        for gname, members in groups.items():
            expected = sum(model.params[m].size for m in members)
            assert summary.histograms[gname].sum() == expected
        assert len(FISHER_BIN_EDGES) == 65


class TestMinKMia:
    def test_identical_scores_auc_half(self):
        scores = np.array([1.0, 1.0, 1.0])
        assert rank_auc(scores, scores.copy()) == pytest.approx(0.5, abs=1e-12)

    def test_matches_pair_loop(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            m = rng.standard_normal(9)
            n = rng.standard_normal(7)
            n[0] = m[0]  # force a tie
            assert abs(rank_auc(m, n) - pair_loop_auc(m, n)) < 1e-12

    def test_label_swap_antisymmetry(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            m = rng.standard_normal(8)
            n = rng.standard_normal(6)
            assert abs(rank_auc(m, n) + rank_auc(n, m) - 1.0) < 1e-12

    def test_short_sequences_skipped(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=3, hidden_widths=(6,), seed=7)
        members = Corpus(
            12,
            [np.array([0, 1, 2, 3, 4], dtype=np.int64), np.array([0, 1], dtype=np.int64)],
            "forget",
            [0, 1],
        )
        scores, skipped = min_k_scores(model, members, 0.2)
        assert skipped == 1
        assert scores.size == 1

    def test_min_k_takes_lowest_fraction(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=3, hidden_widths=(6,), seed=8)
        probe, corpora, spec = small_probe(8)
        forget = corpora[0]
        from unlearn_lens.model import evaluate

        lp = evaluate(model, forget)["per_sequence_logprobs"]
        scores, _ = min_k_scores(model, forget, 0.5)
        for seq_lp, score in zip(lp, scores):
            take = math.ceil(0.5 * seq_lp.size)
            assert score == pytest.approx(float(np.sort(seq_lp)[:take].mean()), abs=1e-12)

    def test_trained_model_separates(self):
        spec = CorpusSpec(
            vocab_size=16, context_len=4, seq_len=12, n_forget=8, n_retain=8,
            n_unrelated=3, n_holdout=8, unrelated_token_lo=12,
        )
        forget, retain, _ = make_synthetic_corpora(16, spec)
        holdout = make_holdout_corpus(16, spec)
        model = init_model(vocab_size=16, context_len=4, embed_dim=8, hidden_widths=(24, 24), seed=16)
        fresh_auc = min_k_mia(model, forget, holdout, 0.2).auc
        assert 0.2 <= fresh_auc <= 0.8
        fb, _ = windows_and_targets(forget, 4)
        rb, _ = windows_and_targets(retain, 4)
        batch = Batch(
            np.concatenate([fb.windows, rb.windows]),
            np.concatenate([fb.targets, rb.targets]),
        )
        opt = OptimizerState.fresh(model, peak_lr=5e-3)
        steps = 400
        rng = np.random.default_rng(16)
        for _ in range(steps):
            idx = rng.permutation(len(batch))[:64]
            _, grads = loss_and_grads(model, batch.take(idx))
            adamw_step(model, grads, opt, steps)
        trained_auc = min_k_mia(model, forget, holdout, 0.2).auc
        assert trained_auc > 0.9


class TestPerturbationProbe:
    def make_model_probe(self, seed=20):
        model = init_model(vocab_size=12, context_len=3, embed_dim=4, hidden_widths=(8, 8), seed=seed)
        probe, _, _ = small_probe(seed)
        return model, probe

    def test_zero_scale_is_baseline(self):
        model, probe = self.make_model_probe()
        report = perturbation_probe(model, probe, [{"w0": 0.0, "w1": 0.0}], seed=1)
        point = report["points"][0]
        assert point["mean_pca_distance"] == 0.0
        assert all(v == 0.0 for v in point["one_minus_similarity"])
        assert point["delta_fisher_mean"] == 0.0
        assert all(v == 0.0 for v in point["delta_gram_frobenius"])
        # CKA of a state with itself carries float round-off; zero scale
        # must reproduce exactly that self-comparison value, not drift
        acts = capture_activations(model, probe)
        expected = [1.0 - linear_cka(a, a) for a in acts]
        assert point["one_minus_cka"] == expected

    def test_cka_drop_monotone_in_gram_change(self):
        model, probe = self.make_model_probe(21)
        unit = float(np.linalg.norm(model.params["w1"]))
        schedule = [{"w1": s * unit} for s in (0.0, 0.5, 1.0, 2.0, 4.0)]
        report = perturbation_probe(model, probe, schedule, seed=2)
        last_layer = -1
        dk = [p["delta_gram_frobenius"][last_layer] for p in report["points"]]
        one_minus_cka = [p["one_minus_cka"][last_layer] for p in report["points"]]
        assert all(dk[i] < dk[i + 1] for i in range(len(dk) - 1))
        assert all(
            one_minus_cka[i] <= one_minus_cka[i + 1] + 1e-12
            for i in range(len(one_minus_cka) - 1)
        )

    def test_single_layer_leaves_upstream_untouched(self):
        model, probe = self.make_model_probe(22)
        unit = float(np.linalg.norm(model.params["w1"]))
        report = perturbation_probe(model, probe, [{"w1": unit}], seed=3)
        point = report["points"][0]
        assert point["one_minus_similarity"][0] == 0.0  # layer 0 unaffected
        assert point["one_minus_cka"][0] == 0.0

    def test_locality_spread_beats_single(self):
        # needs depth: with several hidden layers the single-layer (last
        # weight) perturbation leaves every upstream activation at exactly
        # baseline, while the spread perturbation moves all of them
        wins = 0
        for seed in range(10):
            model = init_model(
                vocab_size=12, context_len=3, embed_dim=4, hidden_widths=(8, 8, 8),
                seed=30 + seed,
            )
            probe, _, _ = small_probe(30 + seed)
            unit = float(np.linalg.norm(model.params["w2"]))
            result = locality_trial(model, probe, 2.0 * unit, seed)
            wins += result["spread"] > result["single"]
        assert wins >= 9


class TestCompareStates:
    def test_self_comparison(self):
        model = init_model(vocab_size=12, context_len=3, embed_dim=4, hidden_widths=(8, 8), seed=23)
        probe, _, _ = small_probe(23)
        acts = capture_activations(model, probe)
        records = compare_states(acts, [a.copy() for a in acts])
        for rec in records:
            assert rec.pca_similarity == pytest.approx(1.0, abs=1e-12)
            assert rec.cka == pytest.approx(1.0, abs=1e-10)
            assert (rec.shift_pc1, rec.shift_pc2) == (0.0, 0.0)
