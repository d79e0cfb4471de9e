import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from angular_at import autodiff as ad
from angular_at.autodiff import Tensor
from angular_at.hypersphere import HypersphereHead, NormalizationError
from angular_at.regularizers import (RegularizerWeights, descend_sep_loss, max_pairwise_cosine,
                                     pairwise_cosine_matrix, sep_loss, true_class_angles, wfc_loss)

entries = st.floats(-5, 5, allow_nan=False).filter(lambda v: abs(v) > 1e-2)


def head(W):
    return HypersphereHead(Tensor(np.asarray(W, dtype=np.float64), requires_grad=True))


def at_degrees(*deg):
    r = np.radians(deg)
    return head(np.stack([np.cos(r), np.sin(r)]))


class TestWFC:
    W = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])

    def test_aligned_is_zero(self):
        assert wfc_loss(Tensor([[2.0, 0.0, 0.0]]), head(self.W), [0]).item() == 0.0

    def test_orthogonal(self):
        assert abs(wfc_loss(Tensor([[0.0, 3.0, 0.0]]), head(self.W), [0]).item() - oracles.PI_OVER_2_SQ) < 1e-9

    def test_antipodal(self):
        v = wfc_loss(Tensor([[-1.0, 0.0, 0.0]]), head(self.W), [0]).item()
        assert abs(v - oracles.PI_SQ) < 1e-9

    def test_sixty_degrees(self):
        rng = np.random.default_rng(11)
        a = oracles.unit(rng.normal(size=3), 0)
        r = rng.normal(size=3)
        b = oracles.unit(r - (r @ a) * a, 0)
        z = 0.5 * a + math.sqrt(0.75) * b  # unit, dot 0.5 with a
        assert abs(z @ a - 0.5) < 1e-15
        v = wfc_loss(Tensor([z]), head(np.stack([a, b], axis=1)), [0]).item()
        assert abs(v - oracles.PI_OVER_3_SQ) < 1e-9

    def test_batch_mean_matches_oracle(self):
        rng = np.random.default_rng(2)
        W, z, y = rng.normal(size=(5, 4)), rng.normal(size=(7, 5)), rng.integers(0, 4, size=7)
        assert abs(wfc_loss(Tensor(z), head(W), y).item() - oracles.wfc(W, z, y)) < 1e-12

    def test_zero_feature_rejected(self):
        with pytest.raises(NormalizationError):
            wfc_loss(Tensor([[0.0, 0.0, 0.0]]), head(self.W), [0])

    @given(arrays(np.float64, (3, 4), elements=entries), arrays(np.float64, (5, 3), elements=entries),
           st.lists(st.integers(0, 3), min_size=5, max_size=5))
    def test_range(self, W, z, y):
        v = wfc_loss(Tensor(z), head(W), y).item()
        assert 0.0 <= v <= oracles.PI_SQ + 1e-12

    def test_angles_match_oracle(self):
        rng = np.random.default_rng(9)
        W, z, y = rng.normal(size=(3, 4)), rng.normal(size=(6, 3)), rng.integers(0, 4, size=6)
        expect = np.arccos(oracles.cosines(W, z)[np.arange(6), y])
        np.testing.assert_allclose(true_class_angles(Tensor(z), head(W), y).data, expect, atol=1e-12)


class TestSep:
    def test_identical_pair(self):
        assert abs(sep_loss(head([[1.0, 2.0], [1.0, 2.0]])).item() - 1.0) < 1e-12

    def test_orthogonal_columns(self):
        assert sep_loss(head(np.eye(4))).item() == 0.0

    def test_regular_triangle(self):
        assert abs(sep_loss(at_degrees(0, 120, 240)).item() + 0.5) < 1e-9

    def test_0_90_120(self):
        assert abs(sep_loss(at_degrees(0, 90, 120)).item() - oracles.SEP_0_90_120) < 1e-9

    def test_matches_oracle(self):
        W = np.random.default_rng(4).normal(size=(6, 5))
        assert abs(sep_loss(head(W)).item() - oracles.sep(W)) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            sep_loss(head([[1.0], [0.0]]))

    def test_gradient_only_through_row_maximizers(self):
        # columns 0,1 nearly parallel, 2 far away: row 2's max is column 1 (closer than 0)
        h = at_degrees(0, 10, 100)
        ad.backward(sep_loss(h))
        fd = ad.finite_diff_check(lambda p: sep_loss(HypersphereHead(p["W"])), {"W": h.W})
        assert fd.max_rel_error < 1e-6

    @given(arrays(np.float64, (4, 3), elements=entries), arrays(np.float64, (3,), elements=st.floats(1e-2, 1e2)))
    def test_column_scale_invariance(self, W, c):
        assert abs(sep_loss(head(W)).item() - sep_loss(head(W * c)).item()) < 1e-12


class TestPairwise:
    def test_identity(self):
        np.testing.assert_array_equal(pairwise_cosine_matrix(head(np.eye(3))).data, np.eye(3))

    def test_antipodal(self):
        np.testing.assert_allclose(pairwise_cosine_matrix(head([[1.0, -2.0], [0.0, 0.0]])).data,
                                   [[1, -1], [-1, 1]], atol=1e-15)

    @given(arrays(np.float64, (5, 4), elements=entries))
    def test_symmetric_unit_diagonal(self, W):
        C = pairwise_cosine_matrix(head(W)).data
        assert np.max(np.abs(C - C.T)) < 1e-12
        assert np.max(np.abs(np.diag(C) - 1.0)) < 1e-12


def test_descent_reaches_regular_triangle():
    h = head(np.random.default_rng(0).normal(size=(2, 3)))
    assert abs(descend_sep_loss(h, 2000) + 0.5) < 1e-3
    assert abs(max_pairwise_cosine(h) + 0.5) < 1e-3


def test_weights_validated():
    RegularizerWeights(0.55, 0.48)
    with pytest.raises(ValueError):
        RegularizerWeights(-1.0, 0.0)
    with pytest.raises(ValueError):
        RegularizerWeights(0.0, float("inf"))
