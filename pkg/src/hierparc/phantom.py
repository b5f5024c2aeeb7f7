"""Synthetic volumes whose label geometry mirrors a label tree.

Level-1 nodes split the volume into slabs along x, level-2 nodes into a
core ellipsoid and surrounding shells inside their slab, and every deeper
level subdivides its parent's angular sector around the x axis. Each branch
therefore owns its own boundary surface. Near a boundary the intensity is a
distance-weighted mix of the two region means, which is where the ambiguity
(and the uncertainty a model should learn) lives.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import LevelOutOfRange, UncoveredVoxel, UnknownNode, ValidationError
from .taxonomy import LabelTree, load_taxonomy, project_map
from .volumes import Volume

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class PhantomSpec:
    tree: LabelTree
    shape: tuple[int, int, int] = (64, 64, 64)
    voxel_size: float = 1.0
    leaf_means: tuple[float, ...] | None = None  # default: label * mean_gap
    mean_gap: float = 1.0
    noise_sigma: float | tuple[float, ...] = 0.5
    blur_width: float = 2.0
    core_radius: float = 0.8
    seed: int = 0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 8:
            raise ValidationError(f"phantom dims must be 3 values >= 8, got {self.shape}")
        object.__setattr__(self, "shape", shape)
        if self.leaf_means is not None and len(self.leaf_means) != self.tree.leaf_count:
            raise ValidationError("leaf_means needs one value per leaf")
        if not np.isscalar(self.noise_sigma) and len(self.noise_sigma) != self.tree.leaf_count:
            raise ValidationError("noise_sigma must be a scalar or one value per leaf")
        if self.blur_width < 0 or np.any(np.asarray(self.noise_sigma) < 0):
            raise ValidationError("blur width and noise must be non-negative")
        if not 0 < self.core_radius:
            raise ValidationError("core_radius must be positive")

    @property
    def means(self) -> np.ndarray:
        if self.leaf_means is not None:
            return np.asarray(self.leaf_means, dtype=float)
        return np.arange(self.tree.leaf_count, dtype=float) * self.mean_gap

    @property
    def sigmas(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.noise_sigma, dtype=float), (self.tree.leaf_count,))


# Leaf means of the shipped fixture. Left leaves sit in [0, 3] and right
# leaves in [4, 7], so every decision, the root included, is an intensity
# threshold whose two sides touch along a blurred boundary.
DEFAULT_LEAF_MEANS = (0.0, 1.0, 3.0, 2.0, 6.0, 7.0, 4.0, 5.0)


def default_spec(seed: int = 0, **overrides) -> PhantomSpec:
    """The shipped fixture: 64^3 voxels, the 8-leaf ``phantom8`` taxonomy."""
    overrides.setdefault("leaf_means", DEFAULT_LEAF_MEANS)
    return PhantomSpec(load_taxonomy("phantom8"), seed=seed, **overrides)


# ---- geometry --------------------------------------------------------------------


def _radial_breaks(k: int, outer: float) -> np.ndarray:
    # k-1 inner surfaces at roughly equal-volume spacing, the last at ``outer``
    inner = outer * (np.arange(1, k) / (k - 1)) ** (1 / 3) if k > 1 else np.array([])
    return np.concatenate([[0.0], inner, [np.inf]])


def label_geometry(spec: PhantomSpec) -> np.ndarray:
    """Leaf label of every voxel according to the tree-keyed recipe."""
    tree = spec.tree
    X, Y, Z = spec.shape
    x, y, z = np.meshgrid(
        np.arange(X) + 0.5, np.arange(Y) + 0.5, np.arange(Z) + 0.5, indexing="ij"
    )
    cy, cz = Y / 2, Z / 2
    theta = np.mod(np.arctan2(z - cz, y - cy), 2 * np.pi)
    x_lo = np.zeros(spec.shape)
    x_hi = np.full(spec.shape, float(X))
    ang_lo = np.zeros(spec.shape)
    ang_hi = np.full(spec.shape, 2 * np.pi)
    node = np.zeros(spec.shape, dtype=np.intp)

    for level in range(1, tree.height):
        for parent in tree.nodes:
            if parent.level != level - 1 or not parent.children:
                continue
            sel = node == parent.id
            if not sel.any():
                continue
            kids = np.asarray(parent.children)
            k = len(kids)
            if k == 1:
                node[sel] = kids[0]
                continue
            if level == 1:
                idx = np.clip((x[sel] * k // X).astype(int), 0, k - 1)
                width = X / k
                x_lo[sel] = idx * width
                x_hi[sel] = (idx + 1) * width
            elif level == 2:
                cx = (x_lo[sel] + x_hi[sel]) / 2
                ax = (x_hi[sel] - x_lo[sel]) / 2
                r = np.sqrt(((x[sel] - cx) / ax) ** 2 + ((y[sel] - cy) / (Y / 2)) ** 2 + ((z[sel] - cz) / (Z / 2)) ** 2)
                idx = np.searchsorted(_radial_breaks(k, spec.core_radius), r, side="right") - 1
            else:
                lo, hi = ang_lo[sel], ang_hi[sel]
                idx = np.clip(((theta[sel] - lo) / (hi - lo) * k).astype(int), 0, k - 1)
                step = (hi - lo) / k
                ang_lo[sel] = lo + idx * step
                ang_hi[sel] = lo + (idx + 1) * step
            node[sel] = kids[idx]

    leaf_of_node = np.full(len(tree.nodes), -1, dtype=np.int32)
    for label, nid in enumerate(tree.leaves):
        leaf_of_node[nid] = label
    return leaf_of_node[node]


# ---- counter-based noise ----------------------------------------------------------


def _splitmix64(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        v = (v + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        v = (v ^ (v >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        v = (v ^ (v >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return v ^ (v >> np.uint64(31))


def voxel_normals(seed: int, coords: tuple[np.ndarray, np.ndarray, np.ndarray]) -> np.ndarray:
    """Standard normal draws keyed only by ``seed`` and integer voxel coordinates."""
    x, y, z = (np.asarray(c, dtype=np.uint64) for c in coords)
    key = _splitmix64(np.array([seed], dtype=np.uint64))[0]
    packed = x | (y << np.uint64(21)) | (z << np.uint64(42))
    h1 = _splitmix64(packed ^ key)
    h2 = _splitmix64(h1 ^ np.uint64(0xD1B54A32D192ED03))
    scale = 2.0**-53
    u1 = ((h1 >> np.uint64(11)).astype(np.float64) + 1.0) * scale  # (0, 1]
    u2 = (h2 >> np.uint64(11)).astype(np.float64) * scale
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


# ---- generation ---------------------------------------------------------------------


def generate(spec: PhantomSpec) -> tuple[Volume, np.ndarray]:
    """Return ``(volume, leaf_labels)`` for ``spec``."""
    labels = label_geometry(spec)
    if (labels < 0).any():
        raise UncoveredVoxel(f"{int((labels < 0).sum())} voxels received no label")
    means = spec.means
    clean = means[labels]
    if spec.blur_width > 0:
        w = spec.blur_width
        for leaf in np.unique(labels):
            inside = labels == leaf
            if inside.all():
                continue
            dist, inds = ndimage.distance_transform_edt(inside, return_indices=True)
            d = dist[inside] - 0.5  # distance from the voxel centre to the face between regions
            near = d < w
            other = labels[tuple(i[inside][near] for i in inds)]
            alpha = 0.5 + 0.5 * d[near] / w
            vals = clean[inside]
            vals[near] = alpha * means[leaf] + (1 - alpha) * means[other]
            clean[inside] = vals
    noise = voxel_normals(spec.seed, np.indices(spec.shape))
    data = clean + spec.sigmas[labels] * noise
    volume = Volume(data.astype(np.float32), (spec.voxel_size,) * 3, id=f"phantom-seed{spec.seed}")
    return volume, labels.astype(np.int32)


def generate_dataset(spec: PhantomSpec, count: int) -> list[tuple[Volume, np.ndarray]]:
    """``count`` independent noise realizations (seeds ``spec.seed + i``)."""
    out = []
    for i in range(count):
        vol, lab = generate(replace(spec, seed=spec.seed + i))
        vol.id = f"vol{i:03d}-seed{spec.seed + i}"
        out.append((vol, lab))
    return out


# ---- boundaries -------------------------------------------------------------------------


def _neighbour_differs(field: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    mark = np.zeros(field.shape, dtype=bool)
    for axis in range(field.ndim):
        a = [slice(None)] * field.ndim
        b = [slice(None)] * field.ndim
        a[axis] = slice(1, None)
        b[axis] = slice(None, -1)
        diff = field[tuple(a)] != field[tuple(b)]
        if valid is not None:
            diff &= valid[tuple(a)] & valid[tuple(b)]
        mark[tuple(a)] |= diff
        mark[tuple(b)] |= diff
    return mark


def boundary_mask(labels: np.ndarray, level: int, tree: LabelTree) -> np.ndarray:
    """Voxels with a 6-neighbour that projects to a different node at ``level``."""
    if not 1 <= level < tree.height:
        raise LevelOutOfRange(f"level {level} outside [1, {tree.height - 1}]")
    return _neighbour_differs(project_map(tree, labels, level))


def decision_region(labels: np.ndarray, tree: LabelTree, node: int) -> np.ndarray:
    """Voxels whose true leaf lies in the subtree of ``node``."""
    return np.isin(labels, tree.leaves_under(node))


def decision_boundary_mask(labels: np.ndarray, tree: LabelTree, decision: int) -> np.ndarray:
    """Boundary between the children of ``decision`` (inside its subtree only)."""
    decision = tree.find(decision)
    if decision not in tree.decision_of:
        raise UnknownNode(f"node {tree.path_name(decision)!r} is not a decision node")
    region = decision_region(labels, tree, decision)
    child_level = tree.nodes[decision].level + 1
    return _neighbour_differs(project_map(tree, labels, child_level), region) & region
