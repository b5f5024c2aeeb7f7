"""Hierarchical softmax over sibling groups, marginals and the backward pass.

All fields carry channels on the last axis; any leading shape (a voxel
batch ``(N,)`` or a grid ``(X, Y, Z)``) is accepted and preserved.
Channel ``k`` of a score field is ``tree.predicted_nodes[k]``.
"""

from __future__ import annotations

import numpy as np

from .errors import RootRequested, ShapeMismatch
from .taxonomy import LabelTree


def _check_channels(field: np.ndarray, tree: LabelTree, what: str = "scores"):
    if field.shape[-1:] != (tree.n_channels,):
        raise ShapeMismatch(
            f"{what} have {field.shape[-1] if field.ndim else 0} channels, "
            f"tree predicts {tree.n_channels}"
        )


def _group_max(scores: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Per-channel maximum over the channel's sibling group."""
    gmax = np.empty_like(scores)
    for cols in tree.group_channels:
        gmax[..., cols] = scores[..., cols].max(axis=-1, keepdims=True)
    return gmax


def hierarchical_softmax(scores: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Conditional probabilities p(node | parent) for every predicted node.

    The per-group denominator is formed as ``exp(scores) @ membership.T``
    and broadcast back to channels, so the whole field is one elementwise
    division.
    """
    scores = np.asarray(scores)
    _check_channels(scores, tree)
    e = np.exp(scores - _group_max(scores, tree))
    m = tree.membership.astype(e.dtype)
    denom = (e @ m.T) @ m
    return e / denom


def hierarchical_softmax_segmented(scores: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Reference implementation: an ordinary softmax per sibling group."""
    scores = np.asarray(scores)
    _check_channels(scores, tree)
    out = np.empty_like(scores)
    for cols in tree.group_channels:
        z = scores[..., cols]
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        out[..., cols] = e / e.sum(axis=-1, keepdims=True)
    return out


def log_conditionals(scores: np.ndarray, tree: LabelTree) -> np.ndarray:
    """log p(node | parent) via a per-group log-sum-exp (no underflow on deep trees)."""
    scores = np.asarray(scores)
    _check_channels(scores, tree)
    out = np.empty_like(scores)
    for cols in tree.group_channels:
        z = scores[..., cols]
        z = z - z.max(axis=-1, keepdims=True)
        out[..., cols] = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return out


def _along_paths(cond: np.ndarray, tree: LabelTree, table: np.ndarray, fill, reduce):
    padded = np.concatenate([cond, np.full(cond.shape[:-1] + (1,), fill, cond.dtype)], axis=-1)
    idx = np.where(table < 0, cond.shape[-1], table)
    return reduce(padded[..., idx], axis=-1)


def leaf_marginals(cond: np.ndarray, tree: LabelTree) -> np.ndarray:
    """p(leaf) as the product of conditionals along each leaf's ancestor path."""
    cond = np.asarray(cond)
    _check_channels(cond, tree, "conditionals")
    return _along_paths(cond, tree, tree.path_channels, 1.0, np.prod)


def log_leaf_marginals(log_cond: np.ndarray, tree: LabelTree) -> np.ndarray:
    log_cond = np.asarray(log_cond)
    _check_channels(log_cond, tree, "log conditionals")
    return _along_paths(log_cond, tree, tree.path_channels, 0.0, np.sum)


def node_marginal(cond: np.ndarray, tree: LabelTree, node: int) -> np.ndarray:
    """p(node): product of conditionals from level 1 down to ``node``."""
    cond = np.asarray(cond)
    _check_channels(cond, tree, "conditionals")
    node = tree.find(node)
    if tree.nodes[node].parent is None:
        raise RootRequested("the root has probability 1 by definition")
    out = np.ones(cond.shape[:-1], dtype=cond.dtype)
    chain = []
    while tree.nodes[node].parent is not None:
        chain.append(node)
        node = tree.nodes[node].parent
    for nid in reversed(chain):
        k = tree.channel_of.get(nid)
        if k is not None:
            out = out * cond[..., k]
    return out


def node_marginals_at_level(cond: np.ndarray, tree: LabelTree, level: int) -> tuple[np.ndarray, tuple[int, ...]]:
    """Marginals of every node a leaf projects to at ``level`` (stacked on the last axis)."""
    leaf = leaf_marginals(cond, tree)
    ids = tree.nodes_at_level(level)
    table = tree.level_table[level]
    out = np.stack([leaf[..., table == nid].sum(axis=-1) for nid in ids], axis=-1)
    return out, ids


def hier_softmax_backward(scores: np.ndarray, upstream: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Vector-Jacobian product of :func:`hierarchical_softmax`.

    Within each sibling group ``g = p * (u - sum(p * u))``; groups do not
    interact.
    """
    scores = np.asarray(scores)
    upstream = np.asarray(upstream)
    _check_channels(scores, tree)
    if upstream.shape != scores.shape:
        raise ShapeMismatch(f"upstream shape {upstream.shape} != scores shape {scores.shape}")
    p = hierarchical_softmax_segmented(scores, tree)
    pu = p * upstream
    out = np.empty_like(pu)
    for cols in tree.group_channels:
        out[..., cols] = pu[..., cols] - p[..., cols] * pu[..., cols].sum(axis=-1, keepdims=True)
    return out


# ---- decoding ----------------------------------------------------------------


def marginal_decode(cond: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Leaf label with the highest marginal probability (ties -> lowest label)."""
    return np.argmax(leaf_marginals(cond, tree), axis=-1).astype(np.int32)


def greedy_decode(cond: np.ndarray, tree: LabelTree) -> np.ndarray:
    """Top-down decoding: argmax within each sibling group, then descend.

    Ties go to the first child in document order.
    """
    cond = np.asarray(cond)
    _check_channels(cond, tree, "conditionals")
    current = np.zeros(cond.shape[:-1], dtype=np.intp)
    for _ in range(tree.height - 1):
        nxt = current.copy()
        for nid, node in enumerate(tree.nodes):
            if not node.children:
                continue
            sel = current == nid
            if not sel.any():
                continue
            if len(node.children) == 1:
                nxt[sel] = node.children[0]
            else:
                cols = tree.group_channels[tree.decision_of[nid]]
                choice = np.argmax(cond[sel][:, cols], axis=-1)
                nxt[sel] = np.asarray(node.children)[choice]
        current = nxt
    leaf_label = np.array([n.leaf_label if n.leaf_label is not None else -1 for n in tree.nodes])
    return leaf_label[current].astype(np.int32)
