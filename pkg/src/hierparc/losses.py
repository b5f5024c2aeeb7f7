"""Training objectives with analytic gradients.

Uncertainty channels hold ``s = log(sigma^2)``, so ``log sigma = s / 2`` and
``1 / sigma^2 = exp(-s)``. Every loss is the mean over (unmasked) voxels;
gradients are returned for that mean.

=============  ================================================================
``flat_ce``    ``-log softmax(f)[y]``
``flat_unc``   ``CE * exp(-s) + s/2``
``hier_ce``    ``-sum_{path} log p(node | parent)``
``hier_unc``   ``sum_{on-path d} [CE_d exp(-s_d) + s_d/2] + lam * sum_{off-path d} s_d/2``
=============  ================================================================
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ShapeMismatch, TargetOutOfRange, ValidationError
from .hiermath import log_conditionals
from .taxonomy import LabelTree

S_MIN = -10.0
S_MAX = 10.0


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.1
    s_min: float = S_MIN
    s_max: float = S_MAX
    class_weights: np.ndarray | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValidationError(f"lambda must be >= 0, got {self.lam}")
        if not self.s_min < self.s_max:
            raise ValidationError(f"s_min ({self.s_min}) must be < s_max ({self.s_max})")


@dataclass
class LossOutput:
    value: float
    grad_scores: np.ndarray
    grad_s: np.ndarray | None = None
    per_voxel: np.ndarray | None = field(default=None, repr=False)


def _flatten(scores, target, mask, n_channels, s=None, n_s=None):
    scores = np.asarray(scores)
    target = np.asarray(target)
    if scores.shape[-1] != n_channels:
        raise ShapeMismatch(f"scores have {scores.shape[-1]} channels, expected {n_channels}")
    lead = scores.shape[:-1]
    if target.shape != lead:
        raise ShapeMismatch(f"target shape {target.shape} != voxel shape {lead}")
    if s is not None:
        s = np.asarray(s, dtype=scores.dtype)
        if s.shape != lead + (n_s,):
            raise ShapeMismatch(f"s has shape {s.shape}, expected {lead + (n_s,)}")
        s = s.reshape(-1, n_s)
    f = scores.reshape(-1, n_channels)
    y = target.reshape(-1).astype(np.intp)
    if mask is None:
        m = np.ones(y.shape, dtype=bool)
    else:
        m = np.asarray(mask, dtype=bool)
        if m.shape != lead:
            raise ShapeMismatch(f"mask shape {m.shape} != voxel shape {lead}")
        m = m.reshape(-1)
    return f, y, m, s, lead


def _check_targets(y, m, n):
    bad = m & ((y < 0) | (y >= n))
    if bad.any():
        raise TargetOutOfRange(f"target labels must lie in [0, {n}); got {y[bad][0]}")


def _log_softmax(f):
    z = f - f.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _reduce(per_voxel, m):
    count = max(int(m.sum()), 1)
    per_voxel = np.where(m, per_voxel, 0.0)
    return float(per_voxel.sum() / count), count


# ---- flat losses ---------------------------------------------------------------


def flat_ce(scores, target, weights=None, mask=None) -> LossOutput:
    """Mean (optionally class-weighted) cross-entropy over leaf classes."""
    return _flat(scores, target, None, weights, mask)


def flat_unc(scores, s, target, weights=None, mask=None) -> LossOutput:
    """Heteroscedastic cross-entropy with one ``log sigma^2`` channel per voxel."""
    return _flat(scores, target, s, weights, mask)


def _flat(scores, target, s, weights, mask):
    n_classes = np.asarray(scores).shape[-1]
    f, y, m, s2, lead = _flatten(scores, target, mask, n_classes, s, 1 if s is not None else None)
    _check_targets(y, m, n_classes)
    y_safe = np.where(m, y, 0)
    rows = np.arange(len(y))
    logp = _log_softmax(f)
    ce = -logp[rows, y_safe]
    w = np.ones_like(ce) if weights is None else np.asarray(weights, dtype=f.dtype)[y_safe]
    dce = np.exp(logp)
    dce[rows, y_safe] -= 1.0
    if s2 is None:
        per_voxel = w * ce
        scale = w
    else:
        sv = s2[:, 0]
        inv_var = np.exp(-sv)
        per_voxel = w * ce * inv_var + 0.5 * sv
        scale = w * inv_var
    value, count = _reduce(per_voxel, m)
    coef = np.where(m, scale, 0.0) / count
    grad_f = dce * coef[:, None]
    grad_s = None
    if s2 is not None:
        gs = np.where(m, -w * ce * inv_var + 0.5, 0.0) / count
        grad_s = gs.reshape(lead + (1,)).astype(f.dtype)
    return LossOutput(value, grad_f.reshape(lead + (n_classes,)), grad_s, per_voxel.reshape(lead))


# ---- hierarchical losses --------------------------------------------------------


def hier_ce(scores, target, tree: LabelTree, mask=None) -> LossOutput:
    """Sum over the target's ancestor path of ``-log p(node | parent)``."""
    return _hier(scores, target, tree, None, 0.0, mask)


def hier_unc(scores, s, target, tree: LabelTree, cfg: LossConfig | None = None, mask=None) -> LossOutput:
    """Per-decision heteroscedastic loss with the off-path shrinkage penalty.

    Decision ``d`` (parent of sibling group ``d``) owns ``s[..., d]``. Its
    term is ``CE_d * exp(-s_d) + s_d / 2`` when the target path passes
    through group ``d``, otherwise ``lam * s_d / 2``.
    """
    cfg = cfg or LossConfig()
    return _hier(scores, target, tree, s, cfg.lam, mask)


def _hier(scores, target, tree, s, lam, mask):
    K, D = tree.n_channels, tree.n_decisions
    f, y, m, s2, lead = _flatten(scores, target, mask, K, s, D if s is not None else None)
    _check_targets(y, m, tree.leaf_count)
    y_safe = np.where(m, y, 0)
    n = len(y)
    rows = np.arange(n)

    logp = log_conditionals(f, tree)
    path = tree.path_channels[y_safe]  # (n, depth)
    valid = path >= 0
    r_idx = np.broadcast_to(rows[:, None], path.shape)[valid]
    c_idx = path[valid]
    d_idx = tree.channel_group[c_idx]

    ce_d = np.zeros((n, D), dtype=f.dtype)
    on_path = np.zeros((n, D), dtype=bool)
    ce_d[r_idx, d_idx] = -logp[r_idx, c_idx]
    on_path[r_idx, d_idx] = True
    onehot = np.zeros_like(f)
    onehot[r_idx, c_idx] = 1.0

    if s2 is None:
        per_voxel = ce_d.sum(axis=1)
        weight_d = on_path.astype(f.dtype)
    else:
        inv_var = np.exp(-s2)
        terms = np.where(on_path, ce_d * inv_var + 0.5 * s2, lam * 0.5 * s2)
        per_voxel = terms.sum(axis=1)
        weight_d = np.where(on_path, inv_var, 0.0)
    value, count = _reduce(per_voxel, m)

    mcol = (m / count).astype(f.dtype)[:, None]
    weight_ch = weight_d[:, tree.channel_group] * mcol
    grad_f = weight_ch * (np.exp(logp) - onehot)
    grad_s = None
    if s2 is not None:
        gs = np.where(on_path, -ce_d * inv_var + 0.5, 0.5 * lam) * mcol
        grad_s = gs.reshape(lead + (D,)).astype(f.dtype)
    return LossOutput(value, grad_f.reshape(lead + (K,)), grad_s, per_voxel.reshape(lead))


def inverse_frequency_weights(labels, n_classes: int) -> np.ndarray:
    """Per-class weights proportional to 1/frequency, normalized to mean 1 over present classes.

    Classes absent from ``labels`` get weight 0.
    """
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=n_classes).astype(float)
    w = np.zeros(n_classes)
    present = counts > 0
    w[present] = counts.sum() / counts[present]
    w[present] /= w[present].mean()
    return w


# ---- finite differences -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, float]
    tolerance: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(
    loss_fn: Callable[..., LossOutput],
    inputs: dict[str, np.ndarray],
    grad_names: dict[str, str] | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-5,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on every entry.

    The default step of 1e-5 keeps round-off in the difference quotient
    (about ``eps * |loss| / step``) well below the tolerance for small
    gradient entries, while truncation error stays near ``step**2``.

    ``loss_fn(**inputs)`` must return a :class:`LossOutput`. ``grad_names``
    maps input names to the ``LossOutput`` attribute holding their gradient
    (default: ``scores -> grad_scores``, ``s -> grad_s``).
    """
    grad_names = grad_names or {k: v for k, v in (("scores", "grad_scores"), ("s", "grad_s")) if k in inputs}
    inputs = {k: np.array(v, dtype=np.float64) if k in grad_names else v for k, v in inputs.items()}
    out = loss_fn(**inputs)
    errors = {}
    checked = 0
    for name, attr in grad_names.items():
        x = inputs[name]
        analytic = getattr(out, attr)
        numeric = np.zeros_like(x)
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(**inputs).value
            flat[i] = orig - step
            down = loss_fn(**inputs).value
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        errors[name] = float(relative_error(analytic, numeric, floor).max(initial=0.0))
        checked += flat.size
    return GradCheckReport(max(errors.values(), default=0.0), errors, tolerance, checked)
