"""Label trees: parsing, validation and the index tables the numerics run on.

A taxonomy document lists one node per line. Indentation (one space per
level) gives the parent/child structure::

    root
     a
      a1
      a2
     b

Lines starting with ``#`` are comments. Node ids follow document order and
leaf labels are assigned to leaves in the same (depth-first) order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import (
    BadIndent,
    DuplicateName,
    EmptyDocument,
    LevelOutOfRange,
    MultipleRoots,
    TaxonomyError,
    UnknownLeaf,
    UnknownNode,
)

INDENT_UNIT = 1


@dataclass(frozen=True)
class Node:
    id: int
    name: str
    level: int
    parent: int | None
    children: tuple[int, ...] = ()
    leaf_label: int | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass(frozen=True)
class SiblingGroup:
    parent: int
    members: tuple[int, ...]


@dataclass(frozen=True)
class AncestorPath:
    leaf: int
    nodes: tuple[int, ...]

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def __getitem__(self, i):
        return self.nodes[i]


@dataclass(frozen=True, eq=False)
class LabelTree:
    """Immutable, validated label tree.

    ``predicted_nodes`` are the nodes that get a score channel (every node
    with at least one sibling); channel ``k`` belongs to
    ``predicted_nodes[k]``. ``decision_nodes`` are the parents of the
    sibling groups, in the same order as ``sibling_groups``, so decision
    channel ``d`` owns group ``d``.
    """

    nodes: tuple[Node, ...]
    _by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _validate(self.nodes)
        object.__setattr__(self, "_by_name", _name_index(self.nodes))

    def __eq__(self, other):
        if not isinstance(other, LabelTree):
            return NotImplemented
        return self.nodes == other.nodes

    def __hash__(self):
        return hash(self.nodes)

    def __len__(self):
        return len(self.nodes)

    # ---- structure -----------------------------------------------------

    @property
    def root(self) -> Node:
        return self.nodes[0]

    @cached_property
    def height(self) -> int:
        return 1 + max(n.level for n in self.nodes)

    @cached_property
    def leaves(self) -> tuple[int, ...]:
        """Node ids indexed by leaf label."""
        return tuple(n.id for n in self.nodes if n.is_leaf)

    @property
    def leaf_count(self) -> int:
        return len(self.leaves)

    @cached_property
    def sibling_groups(self) -> tuple[SiblingGroup, ...]:
        return tuple(
            SiblingGroup(n.id, n.children) for n in self.nodes if len(n.children) >= 2
        )

    @cached_property
    def predicted_nodes(self) -> tuple[int, ...]:
        grouped = {m for g in self.sibling_groups for m in g.members}
        return tuple(n.id for n in self.nodes if n.id in grouped)

    @cached_property
    def decision_nodes(self) -> tuple[int, ...]:
        return tuple(g.parent for g in self.sibling_groups)

    @property
    def n_channels(self) -> int:
        return len(self.predicted_nodes)

    @property
    def n_decisions(self) -> int:
        return len(self.decision_nodes)

    @cached_property
    def channel_of(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self.predicted_nodes)}

    @cached_property
    def decision_of(self) -> dict[int, int]:
        return {nid: d for d, nid in enumerate(self.decision_nodes)}

    # ---- index tables used by hiermath / losses ------------------------

    @cached_property
    def channel_group(self) -> np.ndarray:
        """Sibling-group (== decision) index of every score channel."""
        out = np.empty(self.n_channels, dtype=np.intp)
        for k, nid in enumerate(self.predicted_nodes):
            out[k] = self.decision_of[self.nodes[nid].parent]
        return out

    @cached_property
    def group_channels(self) -> tuple[np.ndarray, ...]:
        return tuple(
            np.array([self.channel_of[m] for m in g.members], dtype=np.intp)
            for g in self.sibling_groups
        )

    @cached_property
    def membership(self) -> np.ndarray:
        """(groups, channels) 0/1 indicator matrix."""
        m = np.zeros((self.n_decisions, self.n_channels))
        m[self.channel_group, np.arange(self.n_channels)] = 1.0
        return m

    @cached_property
    def path_channels(self) -> np.ndarray:
        """(leaves, max path length) score channels along each leaf's path, -1 padded.

        Only-child nodes have no channel and are skipped.
        """
        paths = [
            [self.channel_of[n] for n in ancestor_path(self, c) if n in self.channel_of]
            for c in range(self.leaf_count)
        ]
        width = max((len(p) for p in paths), default=0)
        out = np.full((self.leaf_count, max(width, 1)), -1, dtype=np.intp)
        for c, p in enumerate(paths):
            out[c, : len(p)] = p
        return out

    @cached_property
    def level_table(self) -> np.ndarray:
        """(height, leaves) node id of each leaf's ancestor at every level.

        Leaves shallower than a level map to themselves, so a leaf map can be
        projected to any level of an unbalanced tree.
        """
        table = np.empty((self.height, self.leaf_count), dtype=np.intp)
        for c, leaf in enumerate(self.leaves):
            chain = [leaf]
            while self.nodes[chain[-1]].parent is not None:
                chain.append(self.nodes[chain[-1]].parent)
            chain.reverse()
            for level in range(self.height):
                table[level, c] = chain[min(level, len(chain) - 1)]
        return table

    def nodes_at_level(self, level: int) -> tuple[int, ...]:
        """Ids that appear after projecting leaves to ``level``, in document order."""
        return tuple(sorted(set(self.level_table[level].tolist())))

    def leaves_under(self, node_id: int) -> np.ndarray:
        """Leaf labels in the subtree of ``node_id``."""
        level = self.nodes[node_id].level
        return np.flatnonzero(self.level_table[level] == node_id)

    # ---- lookup --------------------------------------------------------

    def path_name(self, node_id: int) -> str:
        names = []
        node = self.nodes[node_id]
        while node.parent is not None:
            names.append(node.name)
            node = self.nodes[node.parent]
        return "/".join(reversed(names)) or self.root.name

    def find(self, key: int | str) -> int:
        """Resolve a node id, a unique node name, or a slash path below the root."""
        if isinstance(key, (int, np.integer)):
            if 0 <= key < len(self.nodes):
                return int(key)
            raise UnknownNode(f"no node with id {key}")
        if key.isdigit():
            return self.find(int(key))
        if "/" in key:
            node = self.root
            for part in key.strip("/").split("/"):
                match = [c for c in node.children if self.nodes[c].name == part]
                if not match:
                    raise UnknownNode(f"no node at path {key!r}")
                node = self.nodes[match[0]]
            return node.id
        ids = self._by_name.get(key, [])
        if len(ids) == 1:
            return ids[0]
        if not ids:
            raise UnknownNode(f"no node named {key!r}")
        raise UnknownNode(f"name {key!r} is ambiguous; use a slash path")

    def leaf_node(self, leaf: int) -> int:
        if not 0 <= leaf < self.leaf_count:
            raise UnknownLeaf(f"leaf label {leaf} outside [0, {self.leaf_count})")
        return self.leaves[leaf]


def _validate(nodes):
    if not nodes:
        raise EmptyDocument("tree has no nodes")
    roots = [n for n in nodes if n.parent is None]
    if len(roots) != 1 or nodes[0].parent is not None:
        raise MultipleRoots(f"expected exactly one root at id 0, found {len(roots)}")
    leaf_labels = []
    for i, n in enumerate(nodes):
        if n.id != i:
            raise TaxonomyError(f"node ids must be dense and ordered (got {n.id} at {i})")
        if n.parent is not None:
            parent = nodes[n.parent]
            if parent.level != n.level - 1 or n.id not in parent.children:
                raise TaxonomyError(f"node {n.name!r} is inconsistent with its parent")
        elif n.level != 0:
            raise TaxonomyError("root must be at level 0")
        names = [nodes[c].name for c in n.children]
        if len(set(names)) != len(names):
            dup = next(x for x in names if names.count(x) > 1)
            raise DuplicateName(f"duplicate child name {dup!r} under {n.name!r}")
        if (n.leaf_label is None) != bool(n.children):
            raise TaxonomyError(f"node {n.name!r}: leaf_label must be set iff it is a leaf")
        if n.leaf_label is not None:
            leaf_labels.append(n.leaf_label)
    if leaf_labels != list(range(len(leaf_labels))):
        raise TaxonomyError("leaf labels must be 0..C-1 in document order")


def _name_index(nodes):
    index: dict[str, list[int]] = {}
    for n in nodes:
        index.setdefault(n.name, []).append(n.id)
    return index


# ---- parsing / serialization ---------------------------------------------


def parse_taxonomy(text: str) -> LabelTree:
    """Parse an indentation-format taxonomy document into a :class:`LabelTree`."""
    entries = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.rstrip()
        stripped = body.lstrip(" ")
        if not stripped or stripped.startswith("#"):
            continue
        lead = body[: len(body) - len(stripped)]
        if stripped[0].isspace():
            raise BadIndent(f"line {lineno}: indentation must use spaces only")
        if len(lead) % INDENT_UNIT:
            raise BadIndent(f"line {lineno}: indentation is not a multiple of {INDENT_UNIT}")
        entries.append((lineno, len(lead) // INDENT_UNIT, stripped))
    if not entries:
        raise EmptyDocument("taxonomy document has no nodes")

    parents: list[int | None] = []
    levels: list[int] = []
    names: list[str] = []
    stack: list[int] = []  # node id of the current ancestor at each depth
    for lineno, depth, name in entries:
        if not names:
            if depth != 0:
                raise BadIndent(f"line {lineno}: root must not be indented")
        elif depth == 0:
            raise MultipleRoots(f"line {lineno}: second top-level node {name!r}")
        elif depth > len(stack):
            raise BadIndent(f"line {lineno}: {name!r} skips a level (depth {depth})")
        del stack[depth:]
        parents.append(stack[-1] if stack else None)
        levels.append(depth)
        names.append(name)
        stack.append(len(names) - 1)

    children: list[list[int]] = [[] for _ in names]
    for i, p in enumerate(parents):
        if p is not None:
            if any(names[c] == names[i] for c in children[p]):
                raise DuplicateName(f"duplicate name {names[i]!r} under {names[p]!r}")
            children[p].append(i)

    nodes = []
    next_leaf = 0
    for i, name in enumerate(names):
        label = None
        if not children[i]:
            label = next_leaf
            next_leaf += 1
        nodes.append(Node(i, name, levels[i], parents[i], tuple(children[i]), label))
    return LabelTree(tuple(nodes))


def serialize_taxonomy(tree: LabelTree) -> str:
    """Inverse of :func:`parse_taxonomy` (comments are not preserved)."""
    return "".join(" " * (INDENT_UNIT * n.level) + n.name + "\n" for n in tree.nodes)


BUILTIN_TAXONOMIES = ("sample5", "flat3", "phantom8", "neuro6")


def builtin_taxonomy_text(name: str) -> str:
    return resources.files("hierparc").joinpath("data", f"{name}.txt").read_text("utf-8")


def load_taxonomy(source: str | os.PathLike) -> LabelTree:
    """Load a taxonomy from a file path or a builtin name (see ``BUILTIN_TAXONOMIES``)."""
    if str(source) in BUILTIN_TAXONOMIES:
        return parse_taxonomy(builtin_taxonomy_text(str(source)))
    with open(source, encoding="utf-8") as fh:
        return parse_taxonomy(fh.read())


# ---- queries ---------------------------------------------------------------


def ancestor_path(tree: LabelTree, leaf: int) -> AncestorPath:
    """Nodes from level 1 down to the leaf (root excluded, leaf included)."""
    node = tree.nodes[tree.leaf_node(leaf)]
    chain = []
    while node.parent is not None:
        chain.append(node.id)
        node = tree.nodes[node.parent]
    return AncestorPath(leaf, tuple(reversed(chain)))


def project_to_level(tree: LabelTree, leaf: int, level: int) -> int:
    """The leaf's unique ancestor at ``level`` (1 <= level <= level of the leaf)."""
    leaf_level = tree.nodes[tree.leaf_node(leaf)].level
    if not 1 <= level <= leaf_level:
        raise LevelOutOfRange(f"level {level} outside [1, {leaf_level}] for leaf {leaf}")
    return int(tree.level_table[level, leaf])


def project_map(tree: LabelTree, leafmap: np.ndarray, level: int) -> np.ndarray:
    """Project a leaf-label array to node ids at ``level`` (shallow leaves stay put)."""
    if not 0 <= level < tree.height:
        raise LevelOutOfRange(f"level {level} outside [0, {tree.height - 1}]")
    return tree.level_table[level][leafmap]


def sibling_groups(tree: LabelTree) -> list[SiblingGroup]:
    return list(tree.sibling_groups)
