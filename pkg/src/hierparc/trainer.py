"""The four-model experiment on phantoms: sampling, epochs, early stopping, prediction.

Variants:

* ``F``      flat leaf scores, class-weighted cross-entropy
* ``F_unc``  ``F`` plus one log-variance channel per voxel
* ``H``      hierarchical scores, path-summed cross-entropy
* ``H_unc``  ``H`` plus one log-variance channel per decision node
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .evaluation import dice_per_level
from .errors import ConfigMismatch, EmptySplit, NonFiniteLoss, ValidationError
from .hiermath import hierarchical_softmax, leaf_marginals, marginal_decode
from .losses import LossConfig, flat_ce, flat_unc, hier_ce, hier_unc, inverse_frequency_weights
from .model import Adam, ModelConfig, VoxelClassifier, extract_features, pad_volume
from .taxonomy import LabelTree, parse_taxonomy, serialize_taxonomy
from .volumes import Volume

log = logging.getLogger(__name__)

VARIANTS = ("F", "F_unc", "H", "H_unc")
STOP_REASONS = ("early_stop", "max_epochs", "aborted")


@dataclass
class TrainConfig:
    variant: str = "H"
    max_epochs: int = 300
    patience: int = 15
    lr: float = 4e-3
    lam: float = 0.1
    batch_size: int = 1024
    batches_per_epoch: int = 50
    val_voxels: int = 16384
    radius: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    class_weighting: str = "inverse_frequency"
    grad_clip: float = 1.0  # global-norm clip, 0 disables
    dtype: str = "float32"
    seed: int = 7
    split_seed: int = 0
    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0 < self.patience < self.max_epochs:
            raise ValidationError("need 0 < patience < max_epochs")
        if self.class_weighting not in ("inverse_frequency", "none"):
            raise ValidationError(f"unknown class_weighting {self.class_weighting!r}")
        if self.grad_clip < 0:
            raise ValidationError("grad_clip must be >= 0")
        if min(self.batch_size, self.batches_per_epoch, self.val_voxels) < 1:
            raise ValidationError("batch sizes must be positive")

    @property
    def hierarchical(self) -> bool:
        return self.variant.startswith("H")

    @property
    def uncertain(self) -> bool:
        return self.variant.endswith("_unc")


REFERENCE_VOLUMES = 5


def reference_config(variant: str = "H", **overrides) -> TrainConfig:
    """The shipped phantom configuration (seed 7)."""
    return TrainConfig(variant=variant, **overrides)


def reference_dataset(seed: int = 7, count: int = REFERENCE_VOLUMES) -> "Dataset":
    """``count`` default phantoms (seeds ``seed .. seed+count-1``): 3/1/1 volumes at the default fractions."""
    from .phantom import default_spec, generate_dataset

    spec = default_spec(seed)
    return Dataset(spec.tree, generate_dataset(spec, count))


# ---- data -----------------------------------------------------------------------


@dataclass
class Dataset:
    tree: LabelTree
    items: list[tuple[Volume, np.ndarray]]

    def split(self, cfg: TrainConfig):
        """Partition whole volumes into train/val/test by fraction, shuffled with ``split_seed``."""
        n = len(self.items)
        order = np.random.default_rng(cfg.split_seed).permutation(n)
        fr = np.array([cfg.train_fraction, cfg.val_fraction, cfg.test_fraction], dtype=float)
        counts = np.floor(fr / fr.sum() * n).astype(int)
        # hand leftovers to the split with the largest fractional remainder, train first
        for i in np.argsort(-(fr / fr.sum() * n - counts), kind="stable")[: n - counts.sum()]:
            counts[i] += 1
        bounds = np.cumsum(counts)
        parts = [order[: bounds[0]], order[bounds[0] : bounds[1]], order[bounds[1] :]]
        train, val, test = ([self.items[i] for i in p] for p in parts)
        if not train or not val:
            raise EmptySplit(f"split of {n} volumes left train={len(train)}, val={len(val)}")
        ids = [v.id for v, _ in train + val + test]
        if len(set(ids)) != len(ids):
            raise ValidationError("volume ids must be unique across splits")
        return train, val, test


# ---- objectives -------------------------------------------------------------------


class Objective:
    """Maps a variant to head sizes, its loss and its probability read-out."""

    def __init__(self, variant: str, tree: LabelTree, lam: float = 0.1, weights=None):
        self.variant = variant
        self.tree = tree
        self.hierarchical = variant.startswith("H")
        self.uncertain = variant.endswith("_unc")
        self.loss_cfg = LossConfig(lam=lam)
        self.weights = weights

    @property
    def n_scores(self) -> int:
        return self.tree.n_channels if self.hierarchical else self.tree.leaf_count

    @property
    def n_uncertainty(self) -> int:
        if not self.uncertain:
            return 0
        return self.tree.n_decisions if self.hierarchical else 1

    def loss(self, scores, s, target, mask=None):
        if self.hierarchical:
            if self.uncertain:
                return hier_unc(scores, s, target, self.tree, self.loss_cfg, mask)
            return hier_ce(scores, target, self.tree, mask)
        if self.uncertain:
            return flat_unc(scores, s, target, self.weights, mask)
        return flat_ce(scores, target, self.weights, mask)

    def leaf_probs(self, scores):
        if self.hierarchical:
            return leaf_marginals(hierarchical_softmax(scores, self.tree), self.tree)
        z = np.exp(scores - scores.max(axis=-1, keepdims=True))
        return z / z.sum(axis=-1, keepdims=True)


# ---- logging / early stopping ---------------------------------------------------------


@dataclass
class TrainLog:
    levels: int
    rows: list[dict] = field(default_factory=list)
    stop_epoch: int = 0
    stop_reason: str = ""
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    final_val_dice: list[float] = field(default_factory=list)

    @property
    def columns(self):
        return ["epoch", "train_loss", "val_loss", "wall_time"] + [f"dice_l{l}" for l in range(1, self.levels + 1)]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow(
                    [row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), f"{row['wall_time']:.3f}"]
                    + [repr(d) for d in row["dice"]]
                )


class EarlyStopping:
    """Stop once the minimum validation loss has not improved for ``patience`` epochs.

    Improvement means strictly lower; ties keep the earlier epoch.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            return True
        return False

    def should_stop(self, epoch: int) -> bool:
        return epoch - self.best_epoch >= self.patience


def run_epochs(
    train_epoch: Callable[[int], float],
    validate: Callable[[int], tuple[float, list[float]]],
    on_best: Callable[[int], None],
    max_epochs: int,
    patience: int,
    log_: TrainLog,
    progress: Callable[[str], None] | None = None,
) -> TrainLog:
    """Generic epoch loop shared by :func:`train` and the tests."""
    stopper = EarlyStopping(patience)
    start = time.perf_counter()
    for epoch in range(1, max_epochs + 1):
        train_loss = train_epoch(epoch)
        val_loss, dice = validate(epoch)
        log_.rows.append(
            dict(epoch=epoch, train_loss=train_loss, val_loss=val_loss, wall_time=time.perf_counter() - start, dice=dice)
        )
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            log_.stop_epoch, log_.stop_reason = epoch, "aborted"
            raise NonFiniteLoss(f"non-finite loss at epoch {epoch}", log_)
        if stopper.update(epoch, val_loss):
            on_best(epoch)
        if progress:
            progress(f"epoch {epoch:3d} train {train_loss:.4f} val {val_loss:.4f} dice {dice[-1] if dice else float('nan'):.4f}")
        if stopper.should_stop(epoch):
            log_.stop_epoch, log_.stop_reason = epoch, "early_stop"
            break
    else:
        log_.stop_epoch, log_.stop_reason = max_epochs, "max_epochs"
    log_.best_epoch, log_.best_val_loss = stopper.best_epoch, stopper.best
    return log_


# ---- training ------------------------------------------------------------------------------


def _sample_val_coords(items, n, rng):
    per = np.diff(np.linspace(0, n, len(items) + 1).astype(int))
    out = []
    for (vol, _), k in zip(items, per):
        flat = rng.choice(vol.data.size, size=min(k, vol.data.size), replace=False)
        flat.sort()
        out.append(np.stack(np.unravel_index(flat, vol.shape), axis=1))
    return out


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


def build_model(cfg: TrainConfig, objective: Objective, train_items) -> VoxelClassifier:
    stack = np.concatenate([v.data.reshape(-1) for v, _ in train_items])
    std = float(stack.std()) or 1.0
    mcfg = ModelConfig(
        n_scores=objective.n_scores,
        n_uncertainty=objective.n_uncertainty,
        radius=cfg.radius,
        hidden=cfg.hidden,
        activation=cfg.activation,
        seed=cfg.seed,
        input_shift=float(stack.mean()),
        input_scale=1.0 / std,
        dtype=cfg.dtype,
    )
    return VoxelClassifier(mcfg)


def train(cfg: TrainConfig, dataset: Dataset, progress: Callable[[str], None] | None = None):
    """Train one variant; returns ``(best_model, TrainLog)``."""
    tree = dataset.tree
    train_items, val_items, _ = dataset.split(cfg)
    weights = None
    if not cfg.hierarchical and cfg.class_weighting == "inverse_frequency":
        weights = inverse_frequency_weights(np.concatenate([l.reshape(-1) for _, l in train_items]), tree.leaf_count)
    objective = Objective(cfg.variant, tree, cfg.lam, weights)
    model = build_model(cfg, objective, train_items)
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    r = cfg.radius

    padded_train = [pad_volume(v.data, r) for v, _ in train_items]
    val_coords = _sample_val_coords(val_items, cfg.val_voxels, np.random.default_rng(cfg.seed + 1))
    val_feats = np.concatenate(
        [extract_features(pad_volume(v.data, r), c, r) for (v, _), c in zip(val_items, val_coords)]
    )
    val_target = np.concatenate([l[tuple(c.T)] for (_, l), c in zip(val_items, val_coords)])
    levels = tree.height - 1

    def train_epoch(epoch):
        total = 0.0
        for _ in range(cfg.batches_per_epoch):
            vi = int(rng.integers(len(train_items)))
            vol, lab = train_items[vi]
            coords = np.stack([rng.integers(0, n, cfg.batch_size) for n in vol.shape], axis=1)
            scores, s, cache = model.forward(extract_features(padded_train[vi], coords, r))
            out = objective.loss(scores, s, lab[tuple(coords.T)])
            if not np.isfinite(out.value):
                return float("nan")
            grads = model.backward(cache, out.grad_scores, out.grad_s)
            if cfg.grad_clip > 0:
                clip_global_norm(grads, cfg.grad_clip)
            opt.step(model.params, grads)
            total += out.value
        return total / cfg.batches_per_epoch

    def validate(epoch):
        scores, s, _ = model.forward(val_feats, keep_cache=False)
        loss = objective.loss(scores, s, val_target).value
        pred = np.argmax(objective.leaf_probs(scores), axis=-1)
        dice = [dice_per_level(pred, val_target, tree, lvl)[1] for lvl in range(1, levels + 1)]
        return loss, dice

    best = {}

    def on_best(epoch):
        best["params"] = {k: v.copy() for k, v in model.params.items()}

    train_log = run_epochs(train_epoch, validate, on_best, cfg.max_epochs, cfg.patience, TrainLog(levels), progress)
    best_model = VoxelClassifier(model.config, best["params"])
    train_log.final_val_dice = validation_dice(best_model, cfg.variant, tree, val_items)
    return best_model, train_log


def validation_dice(model, variant, tree, items) -> list[float]:
    """Mean-over-volumes Dice at every level on full volumes."""
    per_level = np.zeros(tree.height - 1)
    for vol, lab in items:
        pred = predict(model, vol, variant, tree).labels
        per_level += [dice_per_level(pred, lab, tree, l)[1] for l in range(1, tree.height)]
    return (per_level / len(items)).tolist()


# ---- prediction -----------------------------------------------------------------------------


@dataclass
class Prediction:
    leaf_probs: np.ndarray
    labels: np.ndarray
    s: np.ndarray | None = None
    cond: np.ndarray | None = None


def checkpoint_meta(variant: str, tree: LabelTree, **extra) -> dict:
    return {"variant": variant, "tree": serialize_taxonomy(tree), **extra}


def predict(model: VoxelClassifier, volume: Volume, variant: str, tree: LabelTree, with_cond: bool = True, chunk: int = 32768) -> Prediction:
    """Full-volume inference, voxel chunks in C order."""
    objective = Objective(variant, tree)
    if (objective.n_scores, objective.n_uncertainty) != (model.config.n_scores, model.config.n_uncertainty):
        raise ConfigMismatch(
            f"model heads ({model.config.n_scores}, {model.config.n_uncertainty}) do not fit variant "
            f"{variant} on this tree ({objective.n_scores}, {objective.n_uncertainty})"
        )
    r = model.config.radius
    padded = pad_volume(volume.data, r)
    coords = np.stack(np.unravel_index(np.arange(volume.data.size), volume.shape), axis=1)
    scores_all = []
    s_all = []
    for start in range(0, len(coords), chunk):
        scores, s, _ = model.forward_volume(padded, coords[start : start + chunk], keep_cache=False)
        scores_all.append(scores)
        if s is not None:
            s_all.append(s)
    scores = np.concatenate(scores_all).reshape(volume.shape + (-1,))
    s = np.concatenate(s_all).reshape(volume.shape + (-1,)) if s_all else None
    cond = None
    if objective.hierarchical:
        cond = hierarchical_softmax(scores, tree)
        leaf = leaf_marginals(cond, tree)
        labels = marginal_decode(cond, tree)
    else:
        leaf = objective.leaf_probs(scores)
        labels = np.argmax(leaf, axis=-1).astype(np.int32)
    return Prediction(leaf, labels, s, cond if with_cond else None)


def check_checkpoint_tree(meta: dict, tree: LabelTree | None) -> tuple[str, LabelTree]:
    stored = parse_taxonomy(meta["tree"])
    if tree is not None and tree != stored:
        raise ConfigMismatch("checkpoint was trained on a different taxonomy")
    return meta["variant"], stored


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
