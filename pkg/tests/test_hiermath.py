import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierparc.errors import RootRequested, ShapeMismatch
from hierparc.gradcheck import random_taxonomy
from hierparc.hiermath import (
    greedy_decode,
    hier_softmax_backward,
    hierarchical_softmax,
    hierarchical_softmax_segmented,
    leaf_marginals,
    log_conditionals,
    log_leaf_marginals,
    marginal_decode,
    node_marginal,
    node_marginals_at_level,
)
from hierparc.losses import relative_error
from hierparc.taxonomy import parse_taxonomy


def complete_binary(depth):
    lines = ["root"]

    def grow(prefix, level):
        if level > depth:
            return
        for c in "lr":
            lines.append(" " * level + prefix + c)
            grow(prefix + c, level + 1)

    grow("", 1)
    return parse_taxonomy("\n".join(lines))


def five_cond(five, pa=0.6, pa1=0.3):
    cond = np.zeros(five.n_channels)
    cond[five.channel_of[five.find("a")]] = pa
    cond[five.channel_of[five.find("b")]] = 1 - pa
    cond[five.channel_of[five.find("a1")]] = pa1
    cond[five.channel_of[five.find("a2")]] = 1 - pa1
    return cond


class TestSoftmax:
    def test_symmetric_pair(self):
        t = parse_taxonomy("root\n a\n b")
        np.testing.assert_allclose(hierarchical_softmax(np.zeros(2), t), [0.5, 0.5])

    def test_logistic_pair(self):
        t = parse_taxonomy("root\n a\n b")
        e = math.e
        np.testing.assert_allclose(hierarchical_softmax(np.array([1.0, 0.0]), t), [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        np.testing.assert_allclose(hierarchical_softmax(np.array([1.0, 0.0]), t), [0.73106, 0.26894], atol=1e-5)

    def test_no_overflow(self, flat3):
        with np.errstate(over="raise", invalid="raise"):
            p = hierarchical_softmax(np.array([1000.0, 0.0, 0.0]), flat3)
        np.testing.assert_allclose(p, [1.0, 0.0, 0.0], atol=1e-300)

    def test_groups_independent(self, five):
        scores = np.zeros(five.n_channels)
        scores[five.channel_of[five.find("a1")]] = 3.0
        p = hierarchical_softmax(scores, five)
        assert p[five.channel_of[five.find("a")]] == 0.5

    def test_wrong_channel_count(self, five):
        with pytest.raises(ShapeMismatch):
            hierarchical_softmax(np.zeros(3), five)

    def test_flat_tree_matches_plain_softmax(self, rng):
        t = parse_taxonomy("root\n" + "\n".join(f" c{i}" for i in range(7)))
        f = rng.normal(size=(50, 7)) * 10
        e = np.exp(f - f.max(axis=-1, keepdims=True))
        np.testing.assert_array_equal(hierarchical_softmax_segmented(f, t), e / e.sum(axis=-1, keepdims=True))

    def test_matrix_matches_segmented(self, rng):
        for _ in range(20):
            t = random_taxonomy(rng)
            f = rng.uniform(-50, 50, (200, t.n_channels))
            np.testing.assert_allclose(hierarchical_softmax(f, t), hierarchical_softmax_segmented(f, t), rtol=0, atol=1e-12)

    def test_grid_shape_preserved(self, five, rng):
        f = rng.normal(size=(4, 5, 6, five.n_channels))
        assert hierarchical_softmax(f, five).shape == f.shape
        assert leaf_marginals(hierarchical_softmax(f, five), five).shape == (4, 5, 6, 3)

    def test_log_conditionals_deep_no_underflow(self, flat3):
        lc = log_conditionals(np.array([0.0, -2000.0, 0.0]), flat3)
        assert np.isfinite(lc).all()
        assert lc[1] == pytest.approx(-2000.0 - math.log(2))


class TestMarginals:
    @pytest.mark.parametrize("depth", [1, 2, 3, 4])
    def test_binary_uniform(self, depth):
        t = complete_binary(depth)
        lm = leaf_marginals(hierarchical_softmax(np.zeros(t.n_channels), t), t)
        np.testing.assert_allclose(lm, 2.0**-depth)

    def test_five_node_example(self, five):
        cond = five_cond(five)
        lm = leaf_marginals(cond, five)
        np.testing.assert_allclose(lm, [0.18, 0.42, 0.4], atol=1e-15)
        assert lm.sum() == pytest.approx(1.0, abs=1e-15)
        assert node_marginal(cond, five, "a") == pytest.approx(0.6)
        kids = node_marginal(cond, five, "a1") + node_marginal(cond, five, "a2")
        assert kids == pytest.approx(0.6, abs=1e-15)

    def test_flat_identity(self, flat3, rng):
        cond = hierarchical_softmax(rng.normal(size=(10, 3)), flat3)
        np.testing.assert_array_equal(leaf_marginals(cond, flat3), cond)

    def test_root_requested(self, five):
        with pytest.raises(RootRequested):
            node_marginal(five_cond(five), five, 0)

    def test_root_child_uniform(self, five):
        cond = hierarchical_softmax(np.zeros((3, five.n_channels)), five)
        np.testing.assert_array_equal(node_marginal(cond, five, "a"), 0.5)

    def test_leaf_node_marginal_equals_leaf_entry(self, rng):
        t = random_taxonomy(rng)
        cond = hierarchical_softmax(rng.normal(size=(20, t.n_channels)), t)
        lm = leaf_marginals(cond, t)
        for label, nid in enumerate(t.leaves):
            np.testing.assert_array_equal(node_marginal(cond, t, nid), lm[:, label])

    def test_only_child_contributes_one(self):
        t = parse_taxonomy("root\n a\n  a1\n b")
        lm = leaf_marginals(hierarchical_softmax(np.array([0.0, 0.0]), t), t)
        np.testing.assert_allclose(lm, [0.5, 0.5])

    def test_level_marginals(self, five):
        cond = five_cond(five)
        m, ids = node_marginals_at_level(cond, five, 1)
        assert [five.nodes[i].name for i in ids] == ["a", "b"]
        np.testing.assert_allclose(m, [0.6, 0.4])


class TestBackward:
    def test_zero_upstream(self, five, rng):
        g = hier_softmax_backward(rng.normal(size=(3, 4)), np.zeros((3, 4)), five)
        np.testing.assert_array_equal(g, 0.0)

    def test_hand_pair(self):
        t = parse_taxonomy("root\n a\n b")
        np.testing.assert_allclose(hier_softmax_backward(np.zeros(2), np.array([1.0, 0.0]), t), [0.25, -0.25])

    def test_shape_mismatch(self, five):
        with pytest.raises(ShapeMismatch):
            hier_softmax_backward(np.zeros(4), np.zeros(3), five)

    @staticmethod
    def fd_error(t, f, u, h=1e-6):
        analytic = hier_softmax_backward(f, u, t)
        numeric = np.empty_like(f)
        for i in range(f.size):
            fp, fm = f.copy(), f.copy()
            fp[i] += h
            fm[i] -= h
            numeric[i] = (u @ hierarchical_softmax(fp, t) - u @ hierarchical_softmax(fm, t)) / (2 * h)
        return relative_error(analytic, numeric).max()

    def test_finite_differences_small(self, five, rng):
        for _ in range(20):
            assert self.fd_error(five, rng.normal(size=4), rng.normal(size=4)) < 1e-6

    def test_finite_differences_random_trees(self, rng):
        for _ in range(20):
            t = random_taxonomy(rng)
            assert self.fd_error(t, rng.normal(size=t.n_channels), rng.normal(size=t.n_channels)) < 1e-5


class TestDecoding:
    def test_classic_disagreement(self):
        # greedy picks a (0.55) but a's mass is split, so leaf b (0.45) has the top marginal
        t = parse_taxonomy("root\n a\n  a1\n  a2\n b")
        cond = np.zeros((3, t.n_channels))
        ca, cb, c1, c2 = (t.channel_of[t.find(n)] for n in ("a", "b", "a1", "a2"))
        cond[:, ca], cond[:, cb] = 0.55, 0.45
        cond[:, c1], cond[:, c2] = 0.5, 0.5
        cond[1, ca], cond[1, cb] = 0.9, 0.1  # voxel 1 agrees
        g = greedy_decode(cond, t)
        m = marginal_decode(cond, t)
        assert list(g) == [0, 0, 0]
        assert list(m) == [2, 0, 2]

    def test_flat_tree_decoders_identical(self, flat3, rng):
        cond = hierarchical_softmax(rng.normal(size=(100, 3)), flat3)
        np.testing.assert_array_equal(greedy_decode(cond, flat3), marginal_decode(cond, flat3))

    def test_uniform_balanced_tree_agree(self):
        t = complete_binary(3)
        cond = hierarchical_softmax(np.zeros((5, t.n_channels)), t)
        np.testing.assert_array_equal(greedy_decode(cond, t), marginal_decode(cond, t))
        assert (greedy_decode(cond, t) == 0).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_probability_invariants(seed):
    rng = np.random.default_rng(seed)
    t = random_taxonomy(rng)
    f = rng.uniform(-50, 50, (64, t.n_channels))
    cond = hierarchical_softmax(f, t)
    for cols in t.group_channels:
        np.testing.assert_allclose(cond[:, cols].sum(-1), 1.0, atol=1e-9)
    lm = leaf_marginals(cond, t)
    np.testing.assert_allclose(lm.sum(-1), 1.0, atol=1e-9)
    # telescoping: -log p(leaf) equals the path sum of -log conditionals
    path_sum = log_leaf_marginals(log_conditionals(f, t), t)
    ok = lm > 1e-250
    np.testing.assert_allclose(path_sum[ok], np.log(lm[ok]), atol=1e-9, rtol=0)
    for node in t.nodes[1:]:
        if node.parent != 0:
            assert (node_marginal(cond, t, node.parent) >= node_marginal(cond, t, node.id)).all()
