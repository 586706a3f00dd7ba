import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypercare.errors import DegenerateColumn, ShapeMismatch
from hypercare.metrics import accuracy, aupr, aupr_macro, auroc, auroc_macro, safe_auroc

from oracles import brute_aupr, brute_auroc


def random_instance(rng):
    n, t = int(rng.integers(2, 51)), int(rng.integers(1, 6))
    # coarse scores so that ties are common
    scores = rng.integers(0, int(rng.integers(2, 12)), size=(n, t)) / 10.0
    labels = (rng.random((n, t)) < rng.uniform(0.2, 0.8)).astype(float)
    return scores, labels


def test_oracle_agreement_on_random_instances():
    rng = np.random.default_rng(7)
    checked = 0
    for _ in range(200):
        scores, labels = random_instance(rng)
        for t in range(scores.shape[1]):
            s, y = scores[:, t].tolist(), labels[:, t].astype(bool).tolist()
            if any(y):
                assert aupr(scores[:, t], labels[:, t]) == brute_aupr(s, y)
            if any(y) and not all(y):
                assert auroc(scores[:, t], labels[:, t]) == brute_auroc(s, y)
                checked += 1
    assert checked > 300


class TestAccuracy:
    def test_perfect(self):
        assert accuracy([[0.9], [0.1]], [[1], [0]]) == 1.0

    def test_threshold_inclusive(self):
        assert accuracy([0.5], [1]) == 1.0

    def test_macro(self):
        pred = np.array([[0.9, 0.9], [0.1, 0.9]])
        y = np.array([[1, 1], [0, 0]])
        assert accuracy(pred, y) == 0.75

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            accuracy(np.zeros((2, 2)), np.zeros((2, 1)))

    def test_empty(self):
        with pytest.raises(ShapeMismatch):
            accuracy(np.zeros((0, 1)), np.zeros((0, 1)))


class TestAuroc:
    def test_separated(self):
        assert auroc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_example(self):
        assert auroc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75

    def test_single_class(self):
        with pytest.raises(DegenerateColumn):
            auroc([0.1, 0.2], [1, 1])

    def test_macro_skips_degenerate_column(self):
        pred = np.array([[0.8, 0.1], [0.6, 0.2], [0.4, 0.3], [0.2, 0.4]])
        y = np.array([[1, 1], [0, 1], [1, 1], [0, 1]])
        with pytest.warns(RuntimeWarning, match="skipped"):
            assert auroc_macro(pred, y) == 0.75

    def test_macro_all_degenerate(self):
        with pytest.raises(DegenerateColumn):
            auroc_macro(np.zeros((3, 2)), np.ones((3, 2)))

    def test_macro_average(self):
        pred = np.array([[0.9, 0.1], [0.1, 0.9]])
        y = np.array([[1, 1], [0, 0]])
        assert auroc_macro(pred, y) == 0.5

    def test_safe_auroc(self):
        assert np.isnan(safe_auroc(np.zeros((2, 1)), np.ones((2, 1))))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert safe_auroc(np.array([[0.2], [0.7]]), np.array([[0], [1]])) == 1.0

    @settings(max_examples=80, deadline=None)
    @given(data=st.lists(st.tuples(st.floats(-10, 10), st.booleans()), min_size=2, max_size=40),
           kind=st.sampled_from(["exp", "cube", "affine", "tanh"]))
    def test_monotone_invariance(self, data, kind):
        s = np.array([d[0] for d in data])
        y = np.array([d[1] for d in data], float)
        if y.min() == y.max():
            return
        f = {"exp": lambda x: np.exp(x / 4), "cube": lambda x: x ** 3 + x,
             "affine": lambda x: 3 * x - 7, "tanh": lambda x: np.tanh(x / 20)}[kind]
        t = f(s)
        # only transforms that stay strictly monotone in floating point
        order = np.argsort(s, kind="stable")
        if not np.array_equal(np.sign(np.diff(t[order])), np.sign(np.diff(s[order]))):
            return
        assert auroc(t, y) == auroc(s, y)


class TestAupr:
    def test_all_positive(self):
        assert aupr([0.1, 0.5, 0.3], [1, 1, 1]) == 1.0

    def test_single_positive_first(self):
        assert aupr([0.9, 0.2, 0.1], [1, 0, 0]) == 1.0

    def test_example(self):
        assert aupr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2, abs=1e-15)

    def test_ties_keep_input_order(self):
        assert aupr([0.5, 0.5], [0, 1]) == 0.5
        assert aupr([0.5, 0.5], [1, 0]) == 1.0

    def test_no_positive(self):
        with pytest.raises(DegenerateColumn):
            aupr([0.1, 0.2], [0, 0])

    def test_macro_keeps_all_positive_column(self):
        pred = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
        y = np.array([[1, 1], [0, 1], [1, 1]])
        assert aupr_macro(pred, y) == pytest.approx(((1 + 2 / 3) / 2 + 1.0) / 2, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ranges(seed):
    scores, labels = random_instance(np.random.default_rng(seed))
    assert 0.0 <= accuracy(scores, labels) <= 1.0
    for fn in (auroc_macro, aupr_macro):
        try:
            v = fn(scores, labels, warn=False)
        except DegenerateColumn:
            continue
        assert 0.0 <= v <= 1.0
