"""Command-line driver: gen-phantom, train, predict, eval, threshold, hist, check-grads.

Every run writes a JSON run manifest (atomically, at the end) naming the
resolved configuration, where each setting came from, the inputs and the
outputs. Exit status is 0 on success, 1 for invalid input and 2 for runtime
failures.

Settings resolve as: command-line flag, then ``HIERPARC_<NAME>`` environment
variable, then the ``key = value`` config file, then the built-in default.
Path options fall back to ``HIERPARC_<OPTION>`` the same way.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import FORMAT_VERSION, __version__
from .config import ENV_PREFIX, format_kv, read_kv, resolve
from .errors import HierParcError, ShapeMismatch, ValidationError
from .evaluation import (
    consistency_check,
    dice_per_level,
    dice_table,
    joint_histogram,
    p_true_class,
    threshold_by_branch,
    total_uncertainty,
)
from .gradcheck import loss_suite
from .model import load_checkpoint, save_checkpoint
from .phantom import DEFAULT_LEAF_MEANS, PhantomSpec, generate_dataset
from .taxonomy import load_taxonomy, serialize_taxonomy
from .trainer import (
    Dataset,
    TrainConfig,
    check_checkpoint_tree,
    checkpoint_meta,
    config_dict,
    predict,
    train,
)
from .volumes import load_array, load_volume, save_array, save_volume

log = logging.getLogger("hierparc")

LABEL_SUFFIX = ".labels.hpv"
TAXONOMY_FILE = "taxonomy.txt"


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; usage problems are input errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage().strip()}")


# ---- run manifest --------------------------------------------------------------------


@dataclass
class RunManifest:
    subcommand: str
    version: str = __version__
    format_version: int = FORMAT_VERSION
    config: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    seed: int | None = None
    started: str = ""
    finished: str = ""
    exit_status: int | None = None
    error: str | None = None

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, path) -> None:
        # only name files that actually exist
        self.outputs = [p for p in self.outputs if Path(p).exists()]
        write_json_atomic(path, asdict(self))


def write_json_atomic(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def write_plot_manifest(out_dir, artifacts: list[dict], manifest: RunManifest) -> Path:
    """List emitted CSV / map artifacts for external plotting tools."""
    path = Path(out_dir) / "plot_manifest.json"
    write_json_atomic(path, {"format_version": FORMAT_VERSION, "artifacts": artifacts})
    manifest.add_output(path)
    return path


# ---- helpers ---------------------------------------------------------------------------


def _env_path(value, option: str):
    if value is not None:
        return value, "flag"
    env = os.environ.get(ENV_PREFIX + option.upper().replace("-", "_"))
    return (env, "env") if env is not None else (None, "default")


def _require(args, manifest, *options):
    for option in options:
        value, source = _env_path(getattr(args, option), option)
        if value is None:
            raise UsageError(f"--{option.replace('_', '-')} is required (or set {ENV_PREFIX}{option.upper()})")
        setattr(args, option, value)
        manifest.inputs[option] = value
        manifest.sources[option] = source


def _load_tree(spec):
    return load_taxonomy(spec)


def _save(manifest, path, array, voxel_size=(1.0, 1.0, 1.0)):
    save_array(path, array, voxel_size)
    manifest.add_output(path)


def _progress(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


# ---- gen-phantom ---------------------------------------------------------------------------


@dataclass
class PhantomConfig:
    """File/env/flag view of a phantom spec plus the number of volumes."""

    taxonomy: str = "phantom8"
    shape: tuple[int, ...] = (64, 64, 64)
    voxel_size: float = 1.0
    leaf_means: tuple[float, ...] | None = DEFAULT_LEAF_MEANS
    mean_gap: float = 1.0
    noise_sigma: float = 0.5
    blur_width: float = 2.0
    core_radius: float = 0.8
    seed: int = 7
    count: int = 5

    def spec(self) -> PhantomSpec:
        return PhantomSpec(
            load_taxonomy(self.taxonomy),
            shape=self.shape,
            voxel_size=self.voxel_size,
            leaf_means=self.leaf_means,
            mean_gap=self.mean_gap,
            noise_sigma=self.noise_sigma,
            blur_width=self.blur_width,
            core_radius=self.core_radius,
            seed=self.seed,
        )


def cmd_gen_phantom(args, manifest: RunManifest) -> int:
    _require(args, manifest, "out")
    file_values = {} if args.spec in (None, "default") else read_kv(args.spec)
    cfg, sources = resolve(PhantomConfig, file_values, {"seed": args.seed, "count": args.count})
    if cfg.count < 1:
        raise ValidationError("count must be >= 1")
    manifest.config, manifest.seed = asdict(cfg), cfg.seed
    manifest.sources.update(sources)
    spec = cfg.spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / TAXONOMY_FILE).write_text(serialize_taxonomy(spec.tree), encoding="utf-8")
    manifest.add_output(out / TAXONOMY_FILE)
    (out / "phantom.txt").write_text(format_kv(asdict(cfg)), encoding="utf-8")
    manifest.add_output(out / "phantom.txt")
    for vol, labels in generate_dataset(spec, cfg.count):
        _progress(f"generated {vol.id}")
        save_volume(out / f"{vol.id}.hpv", vol)
        manifest.add_output(out / f"{vol.id}.hpv")
        _save(manifest, out / f"{vol.id}{LABEL_SUFFIX}", labels, vol.voxel_size)
    return 0


def read_dataset(data_dir) -> Dataset:
    """Volumes ``<id>.hpv`` with label maps ``<id>.labels.hpv`` and a ``taxonomy.txt``."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ValidationError(f"data directory {data_dir} does not exist")
    tree = load_taxonomy(data_dir / TAXONOMY_FILE)
    items = []
    for path in sorted(data_dir.glob("*.hpv")):
        if path.name.endswith(LABEL_SUFFIX):
            continue
        vid = path.name[: -len(".hpv")]
        labels, _ = load_array(data_dir / f"{vid}{LABEL_SUFFIX}")
        vol = load_volume(path, id=vid)
        if labels.shape != vol.shape:
            raise ShapeMismatch(f"{vid}: labels {labels.shape} vs volume {vol.shape}")
        items.append((vol, labels.astype(np.int32)))
    if not items:
        raise ValidationError(f"no volumes found in {data_dir}")
    return Dataset(tree, items)


# ---- train -----------------------------------------------------------------------------------


_TRAIN_FLAGS = ("variant", "seed", "max_epochs", "patience", "lr", "lam", "batch_size", "batches_per_epoch")


def cmd_train(args, manifest: RunManifest) -> int:
    _require(args, manifest, "data", "out")
    file_values = read_kv(args.config) if args.config else {}
    if args.config:
        manifest.inputs["config"] = args.config
    cfg, sources = resolve(TrainConfig, file_values, {k: getattr(args, k) for k in _TRAIN_FLAGS})
    manifest.config, manifest.seed = config_dict(cfg), cfg.seed
    manifest.sources.update(sources)
    dataset = read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_kv(config_dict(cfg)), encoding="utf-8")
    manifest.add_output(out / "config.txt")
    train_ids, val_ids, test_ids = ([v.id for v, _ in part] for part in dataset.split(cfg))
    try:
        model, train_log = train(cfg, dataset, progress=None if args.quiet else _progress)
    except HierParcError as exc:
        partial = getattr(exc, "log", None)
        if partial is not None:
            partial.write_csv(out / "train_log.csv")
            manifest.add_output(out / "train_log.csv")
        raise
    save_checkpoint(out / "checkpoint.hpck", model, checkpoint_meta(cfg.variant, dataset.tree, config=config_dict(cfg)))
    manifest.add_output(out / "checkpoint.hpck")
    train_log.write_csv(out / "train_log.csv")
    manifest.add_output(out / "train_log.csv")
    summary = {
        "variant": cfg.variant,
        "stop_epoch": train_log.stop_epoch,
        "stop_reason": train_log.stop_reason,
        "best_epoch": train_log.best_epoch,
        "best_val_loss": train_log.best_val_loss,
        "final_val_dice": train_log.final_val_dice,
        "splits": {"train": train_ids, "val": val_ids, "test": test_ids},
    }
    write_json_atomic(out / "summary.json", summary)
    manifest.add_output(out / "summary.json")
    _progress(
        f"{cfg.variant}: stopped at epoch {train_log.stop_epoch} ({train_log.stop_reason}), "
        f"best epoch {train_log.best_epoch}, leaf Dice {train_log.final_val_dice[-1]:.4f}"
    )
    return 0


# ---- predict ------------------------------------------------------------------------------------


def cmd_predict(args, manifest: RunManifest) -> int:
    _require(args, manifest, "checkpoint", "volume", "out")
    model, meta = load_checkpoint(args.checkpoint)
    tree = _load_tree(args.tree) if args.tree else None
    variant, tree = check_checkpoint_tree(meta, tree)
    manifest.config = {"variant": variant, "chunk": args.chunk}
    volume = load_volume(args.volume)
    pred = predict(model, volume, variant, tree, chunk=args.chunk)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vs = volume.voxel_size
    (out / TAXONOMY_FILE).write_text(serialize_taxonomy(tree), encoding="utf-8")
    manifest.add_output(out / TAXONOMY_FILE)
    artifacts = []
    maps = {"leaf_probs": pred.leaf_probs.astype(np.float32), "labels": pred.labels}
    if pred.cond is not None:
        maps["cond"] = pred.cond.astype(np.float32)
    if pred.s is not None:
        maps["s"] = pred.s.astype(np.float32)
        maps["total_sigma"] = total_uncertainty(pred.s).astype(np.float32)
    for name, arr in maps.items():
        _save(manifest, out / f"{name}.hpv", arr, vs)
        artifacts.append({"kind": "map", "name": name, "path": f"{name}.hpv", "shape": list(arr.shape)})
    if pred.cond is not None:
        report = consistency_check(pred.cond, tree)
        manifest.config["decoder_disagreement"] = report.n_disagree
    write_plot_manifest(out, artifacts, manifest)
    return 0


# ---- eval -----------------------------------------------------------------------------------------


def _split_named(entries, default="model"):
    out: dict[str, list[str]] = {}
    for entry in entries:
        name, sep, path = entry.partition("=")
        if not sep:
            name, path = default, entry
        out.setdefault(name, []).append(path)
    return out


def _read_labels(path):
    arr, _ = load_array(path)
    if arr.ndim != 3:
        raise ShapeMismatch(f"{path}: expected a 3D label map, got shape {arr.shape}")
    return arr.astype(np.int32)


def cmd_eval(args, manifest: RunManifest) -> int:
    _require(args, manifest, "out")
    if not args.pred or not args.truth:
        raise UsageError("eval needs at least one --pred and one --truth")
    tree = _load_tree(args.tree)
    preds = _split_named(args.pred)
    truths = [_read_labels(p) for p in args.truth]
    manifest.inputs.update({"pred": args.pred, "truth": args.truth, "tree": args.tree})
    results = {}
    for variant, paths in preds.items():
        if len(paths) != len(truths):
            raise ValidationError(f"{variant}: {len(paths)} predictions for {len(truths)} truth maps")
        pairs = []
        for path, truth in zip(paths, truths):
            pred = _read_labels(path)
            if pred.shape != truth.shape:
                raise ShapeMismatch(f"{path}: shape {pred.shape} does not match truth {truth.shape}")
            pairs.append((pred, truth))
        results[variant] = pairs
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.level == "all":
        table = dice_table(results, tree)
        table.write_csv(out)
        manifest.config = {"level": "all", "variants": table.variants}
    else:
        level = int(args.level)
        if not 1 <= level < tree.height:
            raise ValidationError(f"level {level} outside [1, {tree.height - 1}]")
        with open(out, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["variant", "volume", "node", "dice"])
            for variant, pairs in results.items():
                for i, (pred, truth) in enumerate(pairs):
                    per, mean = dice_per_level(pred, truth, tree, level)
                    for nid, d in per.items():
                        writer.writerow([variant, i, tree.path_name(nid), f"{d:.6f}"])
                    writer.writerow([variant, i, "mean", f"{mean:.6f}"])
        manifest.config = {"level": level, "variants": list(results)}
    manifest.add_output(out)
    write_plot_manifest(out.parent, [{"kind": "dice_table", "path": out.name}], manifest)
    return 0


# ---- threshold -------------------------------------------------------------------------------------


def cmd_threshold(args, manifest: RunManifest) -> int:
    _require(args, manifest, "prediction", "out")
    if args.node is None or args.sigma is None:
        raise UsageError("threshold needs --node and --sigma")
    pdir = Path(args.prediction)
    tree = _load_tree(args.tree or pdir / TAXONOMY_FILE)
    cond, vs = load_array(pdir / "cond.hpv")
    s, _ = load_array(pdir / "s.hpv")
    result = threshold_by_branch(cond, s, tree, args.node, args.sigma, decoder=args.decoder)
    manifest.config = {"node": args.node, "sigma": args.sigma, "decoder": args.decoder}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for name in ("lower", "upper", "base", "sigma"):
        arr = getattr(result, name)
        _save(manifest, out / f"{name}.hpv", arr.astype(np.float32) if name == "sigma" else arr, vs)
        artifacts.append({"kind": "map", "name": name, "path": f"{name}.hpv"})
    manifest.config.update({k: int(getattr(result, k).sum()) for k in ("lower", "upper", "base")})
    write_plot_manifest(out, artifacts, manifest)
    return 0


# ---- hist -------------------------------------------------------------------------------------------


def cmd_hist(args, manifest: RunManifest) -> int:
    _require(args, manifest, "sigma", "probs", "out")
    sigma, _ = load_array(args.sigma)
    probs, _ = load_array(args.probs)
    if args.truth:
        manifest.inputs["truth"] = args.truth
        p_true = p_true_class(probs, _read_labels(args.truth))
    else:
        if probs.ndim != 3:
            raise ValidationError("without --truth, --probs must be a 3D map of true-class probabilities")
        p_true = probs
    if sigma.ndim == 4:  # raw s channels: sum of sigmas
        sigma = total_uncertainty(sigma)
    hist = joint_histogram(sigma, p_true, bins=args.bins, clip_percentile=args.clip)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "histogram.csv", out / "curve.csv")
    manifest.add_output(out / "histogram.csv")
    manifest.add_output(out / "curve.csv")
    manifest.config = {"bins": args.bins, "clip_percentile": args.clip, "voxels": int(hist.counts.sum())}
    write_plot_manifest(
        out, [{"kind": "joint_histogram", "path": "histogram.csv"}, {"kind": "error_curve", "path": "curve.csv"}], manifest
    )
    return 0


# ---- check-grads ------------------------------------------------------------------------------------


def cmd_check_grads(args, manifest: RunManifest) -> int:
    tree = _load_tree(args.tree)
    rng = np.random.default_rng(args.seed)
    worst: dict[str, float] = {}
    for _ in range(args.repeats):
        for name, err in loss_suite(tree, rng, lam=args.lam).errors.items():
            worst[name] = max(worst.get(name, 0.0), err)
    overall = max(worst.values())
    for name, err in worst.items():
        print(f"{name:10s} max rel. error {err:.3e}")
    print(f"max rel. error {overall:.3e} (tolerance {args.tolerance:g})")
    manifest.seed = args.seed
    manifest.config = {"tree": args.tree, "repeats": args.repeats, "lam": args.lam, "tolerance": args.tolerance,
                       "max_rel_error": overall, "errors": worst}
    return 0 if overall < args.tolerance else 2


# ---- parser / dispatch -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hierparc", description="Hierarchical parcellation with per-branch uncertainty.")
    parser.add_argument("--version", action="version", version=f"hierparc {__version__} (format version {FORMAT_VERSION})")
    parser.add_argument("--manifest", help="where to write the run manifest (default: next to the outputs)")
    parser.add_argument("-q", "--quiet", action="store_true", help="no progress on stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-phantom", help="write synthetic volumes and label maps")
    p.add_argument("--spec", default="default", help="key = value phantom file, or 'default'")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of volumes")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_phantom)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--config", help="key = value training config")
    p.add_argument("--data", help="directory written by gen-phantom")
    p.add_argument("--out", help="output directory")
    p.add_argument("--variant", choices=("F", "F_unc", "H", "H_unc"))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--batches-per-epoch", dest="batches_per_epoch", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="full-volume inference")
    p.add_argument("--checkpoint")
    p.add_argument("--volume")
    p.add_argument("--out", help="output directory")
    p.add_argument("--tree", help="taxonomy to check the checkpoint against")
    p.add_argument("--chunk", type=int, default=32768)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="per-level Dice table")
    p.add_argument("--pred", action="append", default=[], help="label map, optionally VARIANT=path; repeatable")
    p.add_argument("--truth", action="append", default=[], help="truth label map; repeatable, paired in order")
    p.add_argument("--tree", required=True)
    p.add_argument("--level", default="all", help="'all' for the level table or one level for per-node Dice")
    p.add_argument("--out", help="output CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("threshold", help="uncertainty-bounded maps for one node")
    p.add_argument("--prediction", help="directory written by predict")
    p.add_argument("--tree", help="taxonomy (default: the one stored with the prediction)")
    p.add_argument("--node")
    p.add_argument("--sigma", type=float)
    p.add_argument("--decoder", choices=("marginal", "greedy"), default="marginal")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("hist", help="joint histogram of sigma and error")
    p.add_argument("--sigma", help="sigma map (3D) or s channels (4D)")
    p.add_argument("--probs", help="leaf probabilities (with --truth) or true-class probabilities")
    p.add_argument("--truth")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--clip", type=float, default=99.5, help="sigma-axis percentile")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_hist)

    p = sub.add_parser("check-grads", help="finite-difference check of all losses")
    p.add_argument("--tree", default="sample5")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--out", default=".", help="directory for the run manifest")
    p.set_defaults(func=cmd_check_grads)
    return parser


def _manifest_path(args) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    if args.command == "eval":
        return out.with_name(out.name + ".manifest.json")
    return out / "manifest.json"


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    if args.command is None:
        print(parser.format_help(), file=sys.stderr)
        return 1
    manifest = RunManifest(args.command, started=_now())
    status = 2
    try:
        status = args.func(args, manifest)
    except ValidationError as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {manifest.error}", file=sys.stderr)
        status = 1
    except FileNotFoundError as exc:
        manifest.error = f"FileNotFoundError: {exc}"
        print(f"error: {manifest.error}", file=sys.stderr)
        status = 1
    except (HierParcError, OSError, FloatingPointError) as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"error: {manifest.error}", file=sys.stderr)
        status = 2
    finally:
        manifest.finished = _now()
        manifest.exit_status = status
        path = _manifest_path(args)
        if path is not None:
            try:
                manifest.write(path)
            except OSError as exc:
                print(f"warning: could not write manifest {path}: {exc}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
