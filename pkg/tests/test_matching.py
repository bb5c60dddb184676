"""Level cosines, expert weights, weighting modes and the ranking loss."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rome import tensor as tn
from rome.gradcheck import finite_diff_check
from rome.matching import (WEIGHTING_MODES, contrastive_loss, cosine_matrix, expert_weights, level_cosine,
                           match_score, score_matrix)
from rome.tensor import Tensor

from conftest import tiny_model_config, tiny_table


def vecs(*rows):
    return [Tensor(np.asarray(r, dtype=float)) for r in rows]


class TestLevelCosine:
    def test_parallel(self, f64):
        assert level_cosine(*vecs([1.0, 2.0], [1.0, 2.0])).item() == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self, f64):
        assert level_cosine(*vecs([1.0, 0.0], [0.0, 3.0])).item() == 0.0

    def test_antiparallel(self, f64):
        assert level_cosine(*vecs([1.0, -2.0], [-1.0, 2.0])).item() == pytest.approx(-1.0, abs=1e-15)

    def test_zero_norm_names_side_and_level(self):
        with pytest.raises(ZeroDivisionError, match="text.*'object'"):
            level_cosine(*vecs([1.0, 0.0], [0.0, 0.0]), level=2)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_range_and_scale_invariance(self, seed, lam):
        rng = np.random.default_rng(seed)
        v, c = rng.normal(size=(5, 6)), rng.normal(size=(4, 6))
        with tn.precision("float64"):
            cos = cosine_matrix(Tensor(v), Tensor(c)).data
            scaled = cosine_matrix(Tensor(lam * v), Tensor(c)).data
        assert np.all(np.abs(cos) <= 1.0)
        np.testing.assert_allclose(cos, scaled, atol=1e-12)


class TestExpertWeights:
    def test_zero_heads_uniform(self, f64, rng):
        w = expert_weights([Tensor(rng.normal(size=4)) for _ in range(3)], Tensor(np.zeros((3, 4))))
        np.testing.assert_allclose(w.data, [1 / 3] * 3, atol=1e-15)

    def test_log_two_logit(self, f64):
        levels = vecs([1.0, 0.0], [1.0, 0.0], [1.0, 0.0])
        heads = Tensor(np.array([[0.0, 0.0], [math.log(2), 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(expert_weights(levels, heads).data, [0.25, 0.5, 0.25], atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_simplex(self, seed):
        rng = np.random.default_rng(seed)
        w = expert_weights([Tensor(rng.normal(size=(7, 8)) * 5) for _ in range(3)], Tensor(rng.normal(size=(3, 8))))
        assert np.all(w.data > 0)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def levels(rng, n, d=6):
    return [Tensor(rng.normal(size=(n, d))) for _ in range(3)]


class TestMatchScore:
    @pytest.mark.parametrize("mode", WEIGHTING_MODES)
    def test_all_ones(self, f64, rng, mode):
        v = [Tensor(rng.normal(size=4)) for _ in range(3)]
        heads = Tensor(rng.normal(size=(3, 4)))
        assert match_score(v, v, mode, heads, heads).item() == pytest.approx(1.0, abs=1e-12)

    def test_average_one_third(self, f64):
        v = vecs([1.0, 0.0], [0.0, 1.0], [0.0, 1.0])
        c = vecs([1.0, 0.0], [1.0, 0.0], [1.0, 0.0])
        z = Tensor(np.zeros((3, 2)))
        assert match_score(v, c, "average", z, z).item() == pytest.approx(1 / 3, abs=1e-15)

    def test_video_weights_hand_value(self, f64):
        v = vecs([1.0, 0.0], [0.0, 1.0], [0.0, 1.0])
        c = vecs([1.0, 0.0], [1.0, 0.0], [1.0, 0.0])
        heads = Tensor(np.array([[math.log(2), 0.0], [0.0, 0.0], [0.0, 0.0]]))
        assert match_score(v, c, "video_only", heads, Tensor(np.zeros((3, 2)))).item() == pytest.approx(0.5, abs=1e-15)

    def test_both_is_mean_of_weightings(self, f64, rng):
        v, c = levels(rng, 3), levels(rng, 4)
        hv, ht = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6)))
        both = score_matrix(v, c, "both", hv, ht).data
        half = (score_matrix(v, c, "video_only", hv, ht).data + score_matrix(v, c, "text_only", hv, ht).data) / 2
        np.testing.assert_allclose(both, half, atol=1e-14)

    def test_average_is_mean_of_cosines(self, f64, rng):
        v, c = levels(rng, 5), levels(rng, 5)
        z = Tensor(np.zeros((3, 6)))
        mean = sum(cosine_matrix(a, b).data for a, b in zip(v, c)) / 3
        np.testing.assert_allclose(score_matrix(v, c, "average", z, z).data, mean, atol=1e-15)

    def test_matrix_matches_pairwise(self, f64, rng):
        v, c = levels(rng, 3), levels(rng, 2)
        hv, ht = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(3, 6)))
        s = score_matrix(v, c, "both", hv, ht).data
        for i in range(3):
            for j in range(2):
                one = match_score([x[i] for x in v], [x[j] for x in c], "both", hv, ht).item()
                assert s[i, j] == pytest.approx(one, abs=1e-14)

    @pytest.mark.parametrize("mode", WEIGHTING_MODES)
    def test_range(self, rng, mode):
        s = score_matrix(levels(rng, 6), levels(rng, 6), mode, Tensor(rng.normal(size=(3, 6))),
                         Tensor(rng.normal(size=(3, 6)))).data
        assert np.all(np.abs(s) <= 1.0 + 1e-6)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError, match="average, text_only, video_only, both"):
            score_matrix(levels(rng, 2), levels(rng, 2), "max", Tensor(np.zeros((3, 6))), Tensor(np.zeros((3, 6))))


def brute_force_loss(s, margin):
    b = len(s)
    terms = [max(0.0, margin + s[i][j] - s[i][i]) + max(0.0, margin + s[j][i] - s[i][i])
             for i in range(b) for j in range(b) if i != j]
    return sum(terms) / (2 * b * (b - 1))


class TestContrastiveLoss:
    def test_margin_satisfied(self, f64):
        s = Tensor(np.array([[0.9, 0.1, 0.2], [0.0, 0.8, 0.3], [0.4, 0.5, 0.95]]))
        assert contrastive_loss(s, 0.2).item() == 0.0

    def test_hand_value(self, f64):
        s = Tensor(np.array([[0.5, 0.6], [0.6, 0.5]]))
        assert contrastive_loss(s, 0.2).item() == pytest.approx(0.3, abs=1e-15)

    def test_batch_of_one(self):
        with pytest.raises(ValueError, match="no negatives"):
            contrastive_loss(Tensor(np.ones((1, 1))))

    def test_non_square(self):
        with pytest.raises(tn.DimensionError):
            contrastive_loss(Tensor(np.ones((2, 3))))

    def test_bad_margin(self):
        with pytest.raises(ValueError, match="margin"):
            contrastive_loss(Tensor(np.eye(2)), 0.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 100_000))
    def test_zero_iff_all_margins_hold(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(-1, 1, size=(4, 4))
        if seed % 2:
            s[np.diag_indices(4)] += 1.5  # bias half the draws towards satisfied margins
        with tn.precision("float64"):
            loss = contrastive_loss(Tensor(s), 0.2).item()
        holds = all(s[i, i] - s[i, j] >= 0.2 and s[i, i] - s[j, i] >= 0.2
                    for i in range(4) for j in range(4) if i != j)
        assert loss >= 0
        assert (loss == 0) == holds
        assert loss == pytest.approx(brute_force_loss(s, 0.2), abs=1e-12)

    def test_gradients_through_full_model(self, f64, small_corpus):
        from rome.model import RetrievalModel
        cfg = tiny_model_config(d2=8, d3=8, droi=8, features="2d_only", weighting="both")
        model = RetrievalModel.initialise(cfg, tiny_table(vocab_size=40), np.random.default_rng(3))
        clips, caps = small_corpus.clips[:3], small_corpus.captions[:3]
        subset = {k: v for k, v in model.params.items() if k.startswith("match.") or k.endswith("proj_s.w")}
        report = finite_diff_check(lambda: model.batch_loss(clips, caps, 0.2), subset)
        assert report.passed, "\n".join(report.lines())
