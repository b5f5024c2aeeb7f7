"""Finite-difference checks of every loss (and the model) on random instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, finite_difference_check, flat_ce, flat_unc, hier_ce, hier_unc, relative_error
from .model import ModelConfig, VoxelClassifier
from .taxonomy import LabelTree, parse_taxonomy


def random_taxonomy(rng: np.random.Generator, max_height: int = 5, max_group: int = 8, max_nodes: int = 60) -> LabelTree:
    """A random tree of height <= ``max_height`` with at most ``max_group`` children per node.

    Only-children appear with small probability so that path skipping is exercised.
    """
    lines = ["root"]
    budget = [max_nodes - 1]

    def grow(level):
        if level >= max_height - 1 or budget[0] < 2:
            return []
        if level > 0 and rng.random() < 0.35:
            return []
        if rng.random() < 0.1:
            k = 1
        else:
            k = int(rng.integers(2, max_group + 1))
        k = min(k, budget[0])
        budget[0] -= k
        return [(level + 1, grow(level + 1)) for _ in range(k)]

    def emit(children, prefix):
        for i, (level, sub) in enumerate(children):
            name = f"{prefix}{i}"
            lines.append(" " * level + name)
            emit(sub, name + ".")

    top = grow(0)
    if len(top) < 2:  # at least one real decision at the root
        top = [(1, []), (1, [])] if not top else top + [(1, [])]
    emit(top, "n")
    return parse_taxonomy("\n".join(lines))


@dataclass
class SuiteResult:
    errors: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.errors.values())

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_error < tol


def loss_suite(tree: LabelTree, rng: np.random.Generator, n_voxels: int = 3, lam: float = 0.1, step: float = 1e-5) -> SuiteResult:
    """Max relative error of all four losses on one random instance over ``tree``."""
    target = rng.integers(0, tree.leaf_count, n_voxels)
    leaf_scores = rng.normal(size=(n_voxels, tree.leaf_count))
    s1 = rng.uniform(-1, 1, (n_voxels, 1))
    scores = rng.normal(size=(n_voxels, tree.n_channels))
    sd = rng.uniform(-1, 1, (n_voxels, tree.n_decisions))
    weights = rng.uniform(0.5, 2.0, tree.leaf_count)
    cfg = LossConfig(lam=lam)
    checks = {
        "flat_ce": (lambda scores: flat_ce(scores, target, weights), {"scores": leaf_scores}),
        "flat_unc": (lambda scores, s: flat_unc(scores, s, target, weights), {"scores": leaf_scores, "s": s1}),
        "hier_ce": (lambda scores: hier_ce(scores, target, tree), {"scores": scores}),
        "hier_unc": (lambda scores, s: hier_unc(scores, s, target, tree, cfg), {"scores": scores, "s": sd}),
    }
    return SuiteResult(
        {name: finite_difference_check(fn, inputs, step=step).max_rel_error for name, (fn, inputs) in checks.items()}
    )


def model_suite(tree: LabelTree, rng: np.random.Generator, n_voxels: int = 3, lam: float = 0.1, step: float = 1e-6) -> SuiteResult:
    """End-to-end check of model + ``hier_unc`` w.r.t. every parameter (float64, tanh units)."""
    cfg = ModelConfig(
        n_scores=tree.n_channels, n_uncertainty=tree.n_decisions, radius=1, hidden=(6, 5),
        activation="tanh", seed=int(rng.integers(1 << 31)), dtype="float64",
    )
    model = VoxelClassifier(cfg)
    # random (non-zero) heads so every path carries gradient
    for k in ("score_W", "score_b", "unc_W", "unc_b"):
        model.params[k] = rng.normal(scale=0.5, size=model.params[k].shape)
    x = rng.normal(size=(n_voxels, cfg.n_inputs))
    target = rng.integers(0, tree.leaf_count, n_voxels)
    lcfg = LossConfig(lam=lam)

    def loss_value():
        scores, s, _ = model.forward(x, keep_cache=False)
        return hier_unc(scores, s, target, tree, lcfg).value

    scores, s, cache = model.forward(x)
    out = hier_unc(scores, s, target, tree, lcfg)
    grads = model.backward(cache, out.grad_scores, out.grad_s)
    errors = {}
    for name, p in model.params.items():
        numeric = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        errors[name] = float(relative_error(grads[name], numeric).max())
    return SuiteResult(errors)
