"""Evaluation: per-level Dice, uncertainty summaries, joint histograms, thresholded maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatch, UnknownNode, ValidationError
from .hiermath import greedy_decode, marginal_decode
from .taxonomy import LabelTree, project_map


def _same_shape(a, b, what="maps"):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


# ---- Dice -------------------------------------------------------------------------


def dice_scores(pred: np.ndarray, truth: np.ndarray) -> dict[int, float]:
    """Per-class Dice over the classes present in either map.

    A class present only in ``pred`` scores 0; classes absent from both are
    skipped since Dice is undefined for them.
    """
    _same_shape(pred, truth)
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    classes = np.union1d(np.unique(pred), np.unique(truth))
    out = {}
    for c in classes:
        a = pred == c
        b = truth == c
        out[int(c)] = 2.0 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b))
    return out


def dice_per_level(pred: np.ndarray, truth: np.ndarray, tree: LabelTree, level: int) -> tuple[dict[int, float], float]:
    """Project two leaf maps to ``level`` and return ``(per-node Dice, mean)``.

    Keys of the per-node dict are node ids.
    """
    _same_shape(pred, truth)
    per = dice_scores(project_map(tree, np.asarray(pred), level), project_map(tree, np.asarray(truth), level))
    return per, float(np.mean(list(per.values()))) if per else float("nan")


@dataclass
class DiceTable:
    """Rows are tree levels 1..L, columns are model variants; cells are median and IQR."""

    levels: list[int]
    variants: list[str]
    median: np.ndarray  # (levels, variants)
    iqr: np.ndarray

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["level"] + [f"{v}_{k}" for v in self.variants for k in ("median", "iqr")])
            for i, level in enumerate(self.levels):
                row = [level]
                for j in range(len(self.variants)):
                    row += [f"{self.median[i, j]:.6f}", f"{self.iqr[i, j]:.6f}"]
                writer.writerow(row)


def dice_table(results: dict[str, list[tuple[np.ndarray, np.ndarray]]], tree: LabelTree) -> DiceTable:
    """``results[variant]`` is a list of ``(pred, truth)`` leaf maps, one per volume."""
    levels = list(range(1, tree.height))
    variants = list(results)
    med = np.zeros((len(levels), len(variants)))
    iqr = np.zeros_like(med)
    for j, v in enumerate(variants):
        per_volume = np.array([[dice_per_level(p, t, tree, l)[1] for l in levels] for p, t in results[v]])
        q25, q50, q75 = np.percentile(per_volume, [25, 50, 75], axis=0)
        med[:, j] = q50
        iqr[:, j] = q75 - q25
    return DiceTable(levels, variants, med, iqr)


# ---- uncertainty ----------------------------------------------------------------------


def sigma_from_s(s: np.ndarray) -> np.ndarray:
    return np.exp(0.5 * np.asarray(s))


def total_uncertainty(s: np.ndarray) -> np.ndarray:
    """Sum of ``sigma = exp(s/2)`` over the channel axis (a flat field passes through as sigma)."""
    return sigma_from_s(s).sum(axis=-1)


def p_true_class(leaf_probs: np.ndarray, truth: np.ndarray) -> np.ndarray:
    _same_shape(leaf_probs.shape[:-1], truth.shape, "probabilities and labels")
    return np.take_along_axis(leaf_probs, truth[..., None].astype(np.intp), axis=-1)[..., 0]


@dataclass
class JointHistogram:
    counts: np.ndarray  # (sigma bins, error bins)
    sigma_edges: np.ndarray
    error_edges: np.ndarray
    mean_error: np.ndarray  # per sigma bin; nan where empty
    p25: np.ndarray
    p75: np.ndarray

    def write_csv(self, counts_path, curve_path) -> None:
        with open(counts_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma_lo", "sigma_hi", "error_lo", "error_hi", "count"])
            for i in range(self.counts.shape[0]):
                for j in range(self.counts.shape[1]):
                    w.writerow([f"{self.sigma_edges[i]:.6g}", f"{self.sigma_edges[i + 1]:.6g}",
                                f"{self.error_edges[j]:.6g}", f"{self.error_edges[j + 1]:.6g}", int(self.counts[i, j])])
        with open(curve_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sigma_lo", "sigma_hi", "count", "mean_error", "p25", "p75"])
            for i in range(len(self.mean_error)):
                w.writerow([f"{self.sigma_edges[i]:.6g}", f"{self.sigma_edges[i + 1]:.6g}", int(self.counts[i].sum()),
                            f"{self.mean_error[i]:.6g}", f"{self.p25[i]:.6g}", f"{self.p75[i]:.6g}"])


def joint_histogram(sigma, p_true, bins=50, clip_percentile: float = 99.5) -> JointHistogram:
    """Counts of voxels over ``(sigma, 1 - p_true)``.

    ``bins`` is either an int (same count on both axes; the sigma axis spans
    ``[0, percentile(sigma, clip_percentile)]``) or a pair of explicit edge
    arrays. Values outside the edges are clipped into the end bins so the
    counts always add up to the number of voxels.
    """
    _same_shape(sigma, p_true, "sigma and p_true")
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    err = 1.0 - np.asarray(p_true, dtype=float).reshape(-1)
    if np.any(sigma < 0):
        raise ValidationError("sigma must be non-negative")
    if isinstance(bins, (int, np.integer)):
        top = float(np.percentile(sigma, clip_percentile)) if sigma.size else 1.0
        if top <= 0:
            top = float(sigma.max()) if sigma.size and sigma.max() > 0 else 1.0
        sigma_edges = np.linspace(0.0, top, bins + 1)
        error_edges = np.linspace(0.0, 1.0, bins + 1)
    else:
        sigma_edges, error_edges = (np.asarray(e, dtype=float) for e in bins)
    si = np.clip(np.searchsorted(sigma_edges, sigma, side="right") - 1, 0, len(sigma_edges) - 2)
    ei = np.clip(np.searchsorted(error_edges, err, side="right") - 1, 0, len(error_edges) - 2)
    counts = np.zeros((len(sigma_edges) - 1, len(error_edges) - 1), dtype=np.int64)
    np.add.at(counts, (si, ei), 1)
    nb = len(sigma_edges) - 1
    mean = np.full(nb, np.nan)
    p25 = np.full(nb, np.nan)
    p75 = np.full(nb, np.nan)
    for i in range(nb):
        e = err[si == i]
        if e.size:
            mean[i] = e.mean()
            p25[i], p75[i] = np.percentile(e, [25, 75])
    return JointHistogram(counts, sigma_edges, error_edges, mean, p25, p75)


def error_by_sigma_quantile(sigma, p_true, q: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Mean ``1 - p_true`` in each sigma quantile bin, bottom to top.

    Bin edges are sigma quantiles; voxels with tied sigma always share a bin,
    so bins can be empty (reported as nan) when ties span a quantile.
    Returns ``(mean_error, count)``.
    """
    _same_shape(sigma, p_true, "sigma and p_true")
    sigma = np.asarray(sigma, dtype=float).reshape(-1)
    err = 1.0 - np.asarray(p_true, dtype=float).reshape(-1)
    edges = np.quantile(sigma, np.linspace(0, 1, q + 1))
    idx = np.clip(np.searchsorted(edges[1:-1], sigma, side="right"), 0, q - 1)
    count = np.bincount(idx, minlength=q)
    total = np.bincount(idx, weights=err, minlength=q)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), np.nan), count


# ---- thresholding -------------------------------------------------------------------------


@dataclass
class ThresholdResult:
    lower: np.ndarray
    upper: np.ndarray
    base: np.ndarray
    sigma: np.ndarray  # sigma of the node's parent decision


def selects_node(labels: np.ndarray, tree: LabelTree, node: int) -> np.ndarray:
    """Voxels whose decoded leaf lies under ``node``."""
    return np.isin(labels, tree.leaves_under(node))


def threshold_by_branch(cond: np.ndarray, s: np.ndarray, tree: LabelTree, node, sigma_threshold: float, decoder: str = "marginal") -> ThresholdResult:
    """Lower/upper-bound maps for ``node`` from its parent decision's uncertainty.

    * base:  voxels whose decoded path passes through ``node``
    * lower: base voxels whose decision sigma is below the threshold
    * upper: base plus the voxels bordering it (6-connectivity) whose
      decision sigma is at or above the threshold

    ``cond`` and ``s`` are grids with a trailing channel axis.
    """
    node = tree.find(node)
    parent = tree.nodes[node].parent
    if parent is None or parent not in tree.decision_of:
        raise UnknownNode(f"node {tree.path_name(node)!r} is not a child within a decision")
    if not sigma_threshold > 0:
        raise ValidationError("sigma threshold must be > 0")
    _same_shape(cond.shape[:-1], s.shape[:-1], "conditional and uncertainty fields")
    labels = marginal_decode(cond, tree) if decoder == "marginal" else greedy_decode(cond, tree)
    base = selects_node(labels, tree, node)
    sigma = sigma_from_s(s[..., tree.decision_of[parent]])
    uncertain = sigma >= np.float64(sigma_threshold)
    lower = base & ~uncertain
    struct = ndimage.generate_binary_structure(base.ndim, 1)
    ring = ndimage.binary_dilation(base, structure=struct) & ~base
    upper = base | (ring & uncertain)
    return ThresholdResult(lower, upper, base, sigma)


# ---- decoder consistency --------------------------------------------------------------------


@dataclass
class ConsistencyReport:
    greedy: np.ndarray
    marginal: np.ndarray
    disagree: np.ndarray

    @property
    def n_disagree(self) -> int:
        return int(self.disagree.sum())

    @property
    def agreement(self) -> float:
        return 1.0 - self.n_disagree / max(self.disagree.size, 1)


def consistency_check(cond: np.ndarray, tree: LabelTree) -> ConsistencyReport:
    """Compare greedy top-down decoding with leaf-marginal argmax decoding."""
    g = greedy_decode(cond, tree)
    m = marginal_decode(cond, tree)
    return ConsistencyReport(g, m, g != m)
