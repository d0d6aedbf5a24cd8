import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from apd import nn, uncertainty as U
from apd.nn import NetSpec
from apd.sgld import SampleSet
from apd.uncertainty import PredictiveBatch


def random_batch(rng, T=None, C=None):
    T = T or int(rng.integers(1, 30))
    C = C or int(rng.integers(2, 11))
    logits = rng.normal(scale=rng.uniform(0.1, 6), size=(T, C))
    p = nn.softmax(logits)
    if rng.random() < 0.3:  # hard one-hot rows with exact zeros
        p = np.eye(C)[rng.integers(0, C, T)]
    return p


def direct_entropy(p):
    return -sum(x * math.log(x) for x in p if x > 0)


def direct_bald(p):
    T = len(p)
    mean = [sum(row[c] for row in p) / T for c in range(len(p[0]))]
    return direct_entropy(mean) - sum(direct_entropy(row) for row in p) / T


def direct_vr(p):
    votes = {}
    for row in p:
        y = max(range(len(row)), key=lambda c: (row[c], -c))
        votes[y] = votes.get(y, 0) + 1
    best = max(votes.values())
    return 1 - best / len(p)


def direct_model_variance(p):
    T = len(p)
    C = len(p[0])
    sq = sum(sum(v * v for v in row) for row in p) / T
    mean = [sum(row[c] for row in p) / T for c in range(C)]
    return sq - sum(m * m for m in mean)


class TestPredictiveMean:
    def test_single_row(self):
        np.testing.assert_array_equal(U.predictive_mean([[0.2, 0.8]]), [0.2, 0.8])

    def test_symmetry(self):
        np.testing.assert_array_equal(U.predictive_mean([[1, 0], [0, 1]]), [0.5, 0.5])

    def test_extended_precision(self):
        rng = np.random.default_rng(0)
        p = random_batch(rng, T=17, C=5)
        exact = [float(sum(Fraction(v) for v in p[:, c]) / 17) for c in range(5)]
        np.testing.assert_allclose(U.predictive_mean(p), exact, rtol=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            U.predictive_mean(np.zeros((0, 3)))


class TestScalars:
    def test_entropy_cases(self):
        assert U.entropy([0, 1, 0]) == 0.0
        assert U.entropy(np.full(10, 0.1)) == pytest.approx(2.302585, abs=1e-6)
        assert U.entropy([0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    def test_bald_cases(self):
        assert U.bald([[0.3, 0.7]] * 4) == 0.0
        assert U.bald([[1, 0], [0, 1]]) == pytest.approx(math.log(2), abs=1e-15)

    def test_vr_cases(self):
        assert U.variation_ratio([[0.9, 0.1]] * 3) == 0.0
        assert U.variation_ratio([[1, 0], [1, 0], [1, 0], [0, 1]]) == 0.25
        assert U.variation_ratio([[1, 0], [0, 1]]) == 0.5

    def test_vr_tie_goes_to_lowest_class(self):
        # row argmax tie [0.5, 0.5] votes class 0
        assert U.variation_ratio([[0.5, 0.5], [1, 0]]) == 0.0

    def test_model_variance_cases(self):
        assert U.model_variance([[0.2, 0.8]] * 3) == 0.0
        assert U.model_variance([[1, 0], [0, 1]]) == 0.5

    def test_model_variance_is_covariance_trace(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            p = random_batch(rng)
            assert abs(U.model_variance(p) - p.var(axis=0).sum()) < 1e-12

    def test_batch_validation(self):
        with pytest.raises(ValueError):
            PredictiveBatch([[0.5, 0.6]])
        with pytest.raises(ValueError):
            PredictiveBatch(np.zeros((0, 2)))


class TestAgainstDirectEvaluation:
    def test_thousand_random_batches(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            p = random_batch(rng)
            rows = p.tolist()
            mean = U.predictive_mean(p)
            assert abs(U.entropy(mean) - direct_entropy(mean.tolist())) < 1e-12
            assert abs(U.bald(p) - max(direct_bald(rows), 0.0)) < 1e-12
            assert U.variation_ratio(p) == direct_vr(rows)
            assert abs(U.model_variance(p) - max(direct_model_variance(rows), 0.0)) < 1e-12
            assert U.bald(p) <= U.entropy(mean) + 1e-15

    def test_stacks_match_scalars(self):
        rng = np.random.default_rng(8)
        stack = np.stack([random_batch(rng, T=9, C=4) for _ in range(40)])
        np.testing.assert_allclose(U.score(stack, "entropy"), [U.entropy(U.predictive_mean(b)) for b in stack], atol=1e-13)
        np.testing.assert_allclose(U.score(stack, "bald"), [U.bald(b) for b in stack], atol=1e-13)
        np.testing.assert_array_equal(U.score(stack, "vr"), [U.variation_ratio(b) for b in stack])
        np.testing.assert_allclose(U.score(stack, "model_variance"), [U.model_variance(b) for b in stack], atol=1e-13)


@st.composite
def batches(draw):
    t = draw(st.integers(1, 8))
    c = draw(st.integers(2, 6))
    logits = draw(arrays(np.float64, (t, c), elements=st.floats(-8, 8)))
    return nn.softmax(logits)


class TestProperties:
    @given(batches(), st.randoms())
    def test_row_permutation_invariance(self, p, rnd):
        perm = list(range(len(p)))
        rnd.shuffle(perm)
        q = p[perm]
        assert U.bald(q) == pytest.approx(U.bald(p), abs=1e-12)
        assert U.variation_ratio(q) == U.variation_ratio(p)
        assert U.model_variance(q) == pytest.approx(U.model_variance(p), abs=1e-12)
        assert U.entropy(U.predictive_mean(q)) == pytest.approx(U.entropy(U.predictive_mean(p)), abs=1e-12)

    @given(batches())
    def test_bounds(self, p):
        c = p.shape[1]
        assert 0.0 <= U.bald(p) <= U.entropy(U.predictive_mean(p)) + 1e-12
        assert 0.0 <= U.variation_ratio(p) <= 1 - 1 / c + 1e-15
        assert U.model_variance(p) >= 0.0

    @given(batches())
    def test_vr_zero_iff_votes_agree(self, p):
        agree = len(set(p.argmax(axis=1))) == 1
        assert (U.variation_ratio(p) == 0.0) == agree

    @given(arrays(np.float64, 5, elements=st.floats(0.01, 1)), st.permutations(range(5)))
    def test_entropy_label_permutation(self, w, perm):
        p = w / w.sum()
        assert U.entropy(p[list(perm)]) == pytest.approx(U.entropy(p), abs=1e-12)


class TestPredict:
    def setup_method(self):
        self.spec = NetSpec((3, 4, 3))
        rng = np.random.default_rng(0)
        self.samples = rng.normal(size=(6, self.spec.n_params))
        self.x = rng.normal(size=(5, 3))

    def test_point_source_degenerates(self):
        (b, *_) = U.predict_batch(self.spec, self.samples[0], self.x, 1, tag="point")
        assert b.n_samples == 1
        assert U.bald(b) == 0 and U.variation_ratio(b) == 0 and U.model_variance(b) == 0

    def test_sample_set_in_draw_order(self):
        s = SampleSet(self.samples, self.spec)
        stack = U.predict(self.spec, s, self.x, 6)
        for t in range(6):
            np.testing.assert_array_equal(stack[:, t], nn.softmax(nn.forward(self.spec, self.samples[t], self.x)))

    def test_too_many_samples(self):
        with pytest.raises(ValueError):
            U.predict(self.spec, SampleSet(self.samples, self.spec), self.x, 7)

    def test_dropout_rate_zero_rows_identical(self):
        spec = NetSpec((3, 4, 3), dropout_rate=0.0)
        stack = U.predict(spec, U.DropoutSource(spec, self.samples[0]), self.x, 5, np.random.default_rng(1))
        for t in range(1, 5):
            np.testing.assert_array_equal(stack[:, t], stack[:, 0])

    def test_dropout_rows_differ(self):
        spec = NetSpec((3, 40, 3), dropout_rate=0.5)
        p = nn.init_params(spec, np.random.default_rng(2))
        stack = U.predict(spec, U.DropoutSource(spec, p), self.x, 5, np.random.default_rng(1))
        assert not np.array_equal(stack[:, 0], stack[:, 1])

    def test_csv_dump(self, tmp_path):
        batches = U.predict_batch(self.spec, SampleSet(self.samples, self.spec), self.x, 2)
        U.write_csv(tmp_path / "p.csv", batches)
        lines = (tmp_path / "p.csv").read_text().splitlines()
        assert lines[0] == "input_id,sample_id,p_0,p_1,p_2"
        assert len(lines) == 1 + 5 * 2
