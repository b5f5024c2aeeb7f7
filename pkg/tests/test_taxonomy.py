import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierparc.errors import BadIndent, DuplicateName, EmptyDocument, LevelOutOfRange, MultipleRoots, UnknownLeaf, UnknownNode
from hierparc.gradcheck import random_taxonomy
from hierparc.taxonomy import (
    BUILTIN_TAXONOMIES,
    ancestor_path,
    builtin_taxonomy_text,
    load_taxonomy,
    parse_taxonomy,
    project_map,
    project_to_level,
    serialize_taxonomy,
    sibling_groups,
)


def names(tree, ids):
    return [tree.nodes[i].name for i in ids]


class TestParse:
    def test_smallest_branching_tree(self):
        t = parse_taxonomy("root\n a\n b")
        assert len(t.nodes) == 3
        assert t.leaf_count == 2
        assert [g.members for g in sibling_groups(t)] == [(1, 2)]

    def test_five_node_tree(self, five):
        assert len(five.nodes) == 5
        assert names(five, five.leaves) == ["a1", "a2", "b"]
        assert five.height == 3
        assert set(names(five, five.decision_nodes)) == {"root", "a"}
        assert [n.level for n in five.nodes] == [0, 1, 2, 2, 1]

    def test_ids_follow_document_order(self, five):
        assert names(five, range(5)) == ["root", "a", "a1", "a2", "b"]
        assert [five.nodes[i].leaf_label for i in five.leaves] == [0, 1, 2]

    def test_skipped_level(self):
        with pytest.raises(BadIndent):
            parse_taxonomy("root\n a\n   a1")

    def test_tab_indent(self):
        with pytest.raises(BadIndent):
            parse_taxonomy("root\n\ta")

    def test_indented_root(self):
        with pytest.raises(BadIndent):
            parse_taxonomy(" root\n  a")

    def test_empty(self):
        with pytest.raises(EmptyDocument):
            parse_taxonomy("# only a comment\n\n")

    def test_multiple_roots(self):
        with pytest.raises(MultipleRoots):
            parse_taxonomy("root\n a\nother")

    def test_duplicate_sibling(self):
        with pytest.raises(DuplicateName):
            parse_taxonomy("root\n a\n a")

    def test_same_name_under_different_parents_ok(self):
        t = parse_taxonomy("root\n L\n  cortex\n  wm\n R\n  cortex\n  wm")
        assert t.find("L/cortex") != t.find("R/cortex")
        with pytest.raises(UnknownNode):
            t.find("cortex")

    def test_comments_and_blank_lines(self):
        t = parse_taxonomy("# header\nroot\n\n # indented comment\n a\n b  \n")
        assert names(t, range(3)) == ["root", "a", "b"]


class TestQueries:
    def test_ancestor_path_depth1(self):
        t = parse_taxonomy("root\n a\n b")
        p = ancestor_path(t, 0)
        assert names(t, p) == ["a"] and len(p) == 1

    def test_ancestor_path_five(self, five):
        assert names(five, ancestor_path(five, 0)) == ["a", "a1"]
        assert names(five, ancestor_path(five, 2)) == ["b"]

    def test_unknown_leaf(self, five):
        with pytest.raises(UnknownLeaf):
            ancestor_path(five, 3)

    def test_cingulate_path(self):
        t = load_taxonomy("neuro6")
        leaf = t.nodes[t.find("Right cingulate WM")].leaf_label
        assert names(t, ancestor_path(t, leaf)) == [
            "Supra tentorial", "WM", "Right WM", "Right cingulate", "Right cingulate WM",
        ]
        # "Right cingulate" is an only child: no channel, conditional 1
        assert t.find("Right cingulate WM") not in t.predicted_nodes

    def test_project(self, five):
        assert project_to_level(five, 0, 1) == five.find("a")
        for leaf in range(five.leaf_count):
            lvl = five.nodes[five.leaves[leaf]].level
            assert project_to_level(five, leaf, lvl) == five.leaves[leaf]
        with pytest.raises(LevelOutOfRange):
            project_to_level(five, 2, 2)

    def test_project_map_keeps_shallow_leaves(self, five):
        m = np.array([0, 1, 2])
        assert names(five, project_map(five, m, 2)) == ["a1", "a2", "b"]
        assert names(five, project_map(five, m, 1)) == ["a", "a", "b"]

    def test_sibling_groups_only_child(self):
        t = parse_taxonomy("root\n a\n  a1\n b")
        assert [names(t, g.members) for g in sibling_groups(t)] == [["a", "b"]]
        assert t.find("a1") not in t.predicted_nodes

    def test_sibling_groups_five(self, five):
        assert [names(five, g.members) for g in sibling_groups(five)] == [["a", "b"], ["a1", "a2"]]


class TestBuiltins:
    @pytest.mark.parametrize("name", BUILTIN_TAXONOMIES)
    def test_round_trip(self, name):
        t = load_taxonomy(name)
        assert parse_taxonomy(serialize_taxonomy(t)) == t

    def test_neuro_height(self):
        assert load_taxonomy("neuro6").height == 6

    def test_phantom_tree(self):
        t = load_taxonomy("phantom8")
        assert (t.leaf_count, t.n_decisions, t.height) == (8, 7, 4)

    def test_builtin_text_has_comments(self):
        assert builtin_taxonomy_text("neuro6").startswith("#")


def check_invariants(t):
    # path / projection consistency
    for leaf in range(t.leaf_count):
        path = ancestor_path(t, leaf)
        assert t.nodes[path[0]].parent == 0
        assert path[-1] == t.leaves[leaf]
        for a, b in zip(path.nodes, path.nodes[1:]):
            assert t.nodes[b].parent == a
        for level in range(1, len(path) + 1):
            assert path[level - 1] == project_to_level(t, leaf, level)
    groups = sibling_groups(t)
    assert sum(len(g.members) for g in groups) == len(t.predicted_nodes)
    assert sorted(m for g in groups for m in g.members) == sorted(t.predicted_nodes)
    assert len(t.decision_nodes) == len(groups)
    for g in groups:
        assert len({t.nodes[m].parent for m in g.members}) == 1
        assert len({t.nodes[m].level for m in g.members}) == 1
    assert t.height == 1 + max(n.level for n in t.nodes)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_tree_invariants(seed):
    t = random_taxonomy(np.random.default_rng(seed))
    check_invariants(t)
    assert parse_taxonomy(serialize_taxonomy(t)) == t


@pytest.mark.parametrize("name", BUILTIN_TAXONOMIES)
def test_builtin_invariants(name):
    check_invariants(load_taxonomy(name))
