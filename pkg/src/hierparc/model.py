"""Per-voxel MLP with a score head and a clamped log-variance head.

The network sees the intensities of a cubic neighbourhood around each voxel
(``(2 * radius + 1) ** 3`` inputs), passes them through a shared stack of
dense layers and then through two linear heads. Forward and backward passes
are written out by hand.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, MissingCache, NonFiniteGradient, ShapeMismatch, ValidationError
from .losses import S_MAX, S_MIN

CHECKPOINT_MAGIC = b"HPCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_scores: int
    n_uncertainty: int = 0
    radius: int = 2
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "relu"
    seed: int = 0
    input_shift: float = 0.0
    input_scale: float = 1.0
    s_min: float = S_MIN
    s_max: float = S_MAX
    dtype: str = "float32"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")
        if self.n_scores < 1 or self.n_uncertainty < 0 or self.radius < 0:
            raise ValidationError("head sizes and radius must be non-negative (n_scores >= 1)")

    @property
    def n_inputs(self) -> int:
        return (2 * self.radius + 1) ** 3


def _relu(x):
    return np.maximum(x, 0)


def _relu_grad(pre, post):
    return (pre > 0).astype(post.dtype)


def _tanh_grad(pre, post):
    return 1 - post * post


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def clamp(s, s_min=S_MIN, s_max=S_MAX):
    return np.clip(s, s_min, s_max)


def clamp_grad(raw, s_min=S_MIN, s_max=S_MAX):
    """1 strictly inside the rails, 0 on or outside them."""
    return ((raw > s_min) & (raw < s_max)).astype(raw.dtype)


# ---- features -------------------------------------------------------------------


def neighbourhood_offsets(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def pad_volume(data: np.ndarray, radius: int) -> np.ndarray:
    return np.pad(data, radius, mode="reflect") if radius else data


def extract_features(padded: np.ndarray, coords: np.ndarray, radius: int) -> np.ndarray:
    """Gather ``(N, (2r+1)^3)`` neighbourhood intensities from a padded volume."""
    coords = np.asarray(coords, dtype=np.intp)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ShapeMismatch(f"coords must be (N, 3), got {coords.shape}")
    shape = np.array(padded.shape) - 2 * radius
    if coords.size and ((coords < 0).any() or (coords >= shape).any()):
        raise ShapeMismatch("voxel coordinates out of bounds")
    off = neighbourhood_offsets(radius) + radius
    return padded[
        coords[:, 0, None] + off[:, 0],
        coords[:, 1, None] + off[:, 1],
        coords[:, 2, None] + off[:, 2],
    ]


# ---- model -------------------------------------------------------------------------


@dataclass
class ForwardCache:
    x: np.ndarray
    pre: list = field(default_factory=list)
    post: list = field(default_factory=list)
    raw_s: np.ndarray | None = None


class VoxelClassifier:
    """Shared encoder plus ``score`` and ``unc`` linear heads.

    ``params`` maps names to arrays: ``W{i}``/``b{i}`` for hidden layers,
    ``score_W``/``score_b`` and (if ``n_uncertainty > 0``) ``unc_W``/``unc_b``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = params if params is not None else self.init_params(config)
        self.dtype = np.dtype(config.dtype)

    @staticmethod
    def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
        rng = np.random.default_rng(config.seed)
        dtype = np.dtype(config.dtype)
        params = {}
        fan_in = config.n_inputs
        for i, width in enumerate(config.hidden):
            limit = np.sqrt(6.0 / fan_in)
            params[f"W{i}"] = rng.uniform(-limit, limit, (fan_in, width)).astype(dtype)
            params[f"b{i}"] = np.zeros(width, dtype)
            fan_in = width
        params["score_W"] = np.zeros((fan_in, config.n_scores), dtype)
        params["score_b"] = np.zeros(config.n_scores, dtype)
        if config.n_uncertainty:
            params["unc_W"] = np.zeros((fan_in, config.n_uncertainty), dtype)
            params["unc_b"] = np.zeros(config.n_uncertainty, dtype)
        return params

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, features: np.ndarray, keep_cache: bool = True):
        """Return ``(scores, s, cache)``; ``s`` is ``None`` without an uncertainty head."""
        cfg = self.config
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != cfg.n_inputs:
            raise ShapeMismatch(f"features must be (N, {cfg.n_inputs}), got {features.shape}")
        act, _ = _ACTIVATIONS[cfg.activation]
        h = ((features - cfg.input_shift) * cfg.input_scale).astype(self.dtype, copy=False)
        cache = ForwardCache(h) if keep_cache else None
        for i in range(len(cfg.hidden)):
            pre = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = act(pre)
            if cache is not None:
                cache.pre.append(pre)
                cache.post.append(h)
        scores = h @ self.params["score_W"] + self.params["score_b"]
        s = None
        if cfg.n_uncertainty:
            raw = h @ self.params["unc_W"] + self.params["unc_b"]
            s = clamp(raw, cfg.s_min, cfg.s_max)
            if cache is not None:
                cache.raw_s = raw
        return scores, s, cache

    def forward_volume(self, padded: np.ndarray, coords: np.ndarray, keep_cache: bool = True):
        return self.forward(extract_features(padded, coords, self.config.radius), keep_cache)

    def backward(self, cache: ForwardCache | None, grad_scores: np.ndarray, grad_s: np.ndarray | None = None):
        """Parameter gradients given loss gradients w.r.t. the head outputs."""
        if cache is None:
            raise MissingCache("backward needs the cache from forward(keep_cache=True)")
        cfg = self.config
        _, act_grad = _ACTIVATIONS[cfg.activation]
        last = cache.post[-1] if cache.post else cache.x
        grads = {
            "score_W": last.T @ grad_scores,
            "score_b": grad_scores.sum(axis=0),
        }
        dh = grad_scores @ self.params["score_W"].T
        if cfg.n_uncertainty:
            if grad_s is None:
                grad_s = np.zeros_like(cache.raw_s)
            g_raw = grad_s * clamp_grad(cache.raw_s, cfg.s_min, cfg.s_max)
            grads["unc_W"] = last.T @ g_raw
            grads["unc_b"] = g_raw.sum(axis=0)
            dh = dh + g_raw @ self.params["unc_W"].T
        for i in reversed(range(len(cfg.hidden))):
            dpre = dh * act_grad(cache.pre[i], cache.post[i])
            inp = cache.post[i - 1] if i > 0 else cache.x
            grads[f"W{i}"] = inp.T @ dpre
            grads[f"b{i}"] = dpre.sum(axis=0)
            if i > 0:
                dh = dpre @ self.params[f"W{i}"].T
        return {k: grads[k].astype(self.params[k].dtype, copy=False) for k in self.params}

    def copy(self) -> "VoxelClassifier":
        return VoxelClassifier(self.config, {k: v.copy() for k, v in self.params.items()})


def parameter_count(n_inputs: int, hidden, n_scores: int, n_uncertainty: int) -> int:
    total = 0
    fan_in = n_inputs
    for width in hidden:
        total += fan_in * width + width
        fan_in = width
    total += fan_in * n_scores + n_scores
    if n_uncertainty:
        total += fan_in * n_uncertainty + n_uncertainty
    return total


# ---- optimizer -----------------------------------------------------------------------


def adam_step(param, grad, m, v, t, lr=4e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, lr=4e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place. Raises before touching anything if a gradient is not finite."""
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for {k!r} at step {self.t + 1}")
        self.t += 1
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            new, self.m[k], self.v[k] = adam_step(
                p, grads[k], self.m[k], self.v[k], self.t, self.lr, self.betas, self.eps
            )
            params[k] = new.astype(p.dtype, copy=False)


# ---- checkpoints ------------------------------------------------------------------------


def save_checkpoint(path, model: VoxelClassifier, meta: dict | None = None) -> None:
    """Write ``magic | version | header length | JSON header | float32 LE params | crc32``."""
    names = list(model.params)
    header = {
        "config": asdict(model.config),
        "params": [[k, list(model.params[k].shape)] for k in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in names)
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)) + hbytes + blob
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[VoxelClassifier, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(body[12 : 12 + hlen].decode("utf-8"))
    config = ModelConfig(**header["config"])
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = arr.astype(config.dtype)
        offset += 4 * n
    if offset != len(body):
        raise FormatError(f"{path}: trailing bytes in parameter blob")
    return VoxelClassifier(config, params), header["meta"]
