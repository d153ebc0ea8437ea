"""Dataset ingestion, the training loop, Adam, and checkpoint persistence."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from . import autodiff as ad
from .binarizer import NoiseSource
from .models import ModelConfig, ResidualChainModel, build_model, run_chain

log = logging.getLogger("nntc.training")

SCALE_LO = -0.9
SCALE_HI = 0.9


# ---------------------------------------------------------------------------
# value scaling and patch tiling
# ---------------------------------------------------------------------------

def scale_to_network(img) -> np.ndarray:
    """Map 8-bit channel values linearly onto [-0.9, 0.9] (tanh-compatible)."""
    return np.asarray(img, dtype=np.float64) / 255.0 * (SCALE_HI - SCALE_LO) + SCALE_LO


def unscale_from_network(x) -> np.ndarray:
    """Invert scale_to_network: clamp to [0, 255] and round half to even."""
    v = (np.asarray(x, dtype=np.float64) - SCALE_LO) / (SCALE_HI - SCALE_LO) * 255.0
    return np.rint(np.clip(v, 0.0, 255.0)).astype(np.uint8)


def extract_patches(img: np.ndarray, patch: int) -> list[np.ndarray]:
    """Non-overlapping row-major tiles of a (C, H, W) image."""
    c, h, w = img.shape
    if h % patch != 0 or w % patch != 0:
        raise ValueError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    return [img[:, i:i + patch, j:j + patch]
            for i in range(0, h, patch) for j in range(0, w, patch)]


def stitch_patches(patches, grid_hw: tuple[int, int]) -> np.ndarray:
    """Inverse of extract_patches given the (rows, cols) patch grid."""
    rows, cols = grid_hw
    if len(patches) != rows * cols:
        raise ValueError(f"{len(patches)} patches do not fill a {rows}x{cols} grid")
    bands = [np.concatenate(patches[r * cols:(r + 1) * cols], axis=2) for r in range(rows)]
    return np.concatenate(bands, axis=1)


# ---------------------------------------------------------------------------
# dataset ingestion
# ---------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    """Where the images come from and how they are split."""

    source_dir: str
    target_size: int = 32
    channels: int = 3
    train_fraction: float = 0.9
    eval_fraction: float = 0.1
    shuffle_seed: int = 0

    def __post_init__(self):
        if abs(self.train_fraction + self.eval_fraction - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got "
                             f"{self.train_fraction} + {self.eval_fraction}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.target_size < 1:
            raise ValueError(f"target_size must be positive, got {self.target_size}")


@dataclass
class Dataset:
    """Uint8 samples (N, C, S, S) plus ingestion counts."""

    train: np.ndarray
    eval: np.ndarray
    accepted: int
    rejected: int
    unreadable: int

    @property
    def all_samples(self) -> np.ndarray:
        if self.eval.size == 0:
            return self.train
        return np.concatenate([self.train, self.eval], axis=0)


def ingest_images(spec: DatasetSpec) -> Dataset:
    """Load PNGs, keep those with both axes strictly larger than the target,
    box-downsample to target size ignoring aspect ratio, and split."""
    src = Path(spec.source_dir)
    if not src.is_dir():
        raise ValueError(f"dataset source {src} is not a directory")
    mode = "RGB" if spec.channels == 3 else "L"
    samples = []
    rejected = unreadable = 0
    for path in sorted(src.iterdir()):
        if path.suffix.lower() != ".png":
            continue
        try:
            with Image.open(path) as im:
                w, h = im.size
                if w <= spec.target_size or h <= spec.target_size:
                    rejected += 1
                    continue
                small = im.convert(mode).resize(
                    (spec.target_size, spec.target_size), Image.Resampling.BOX)
                arr = np.asarray(small, dtype=np.uint8)
        except OSError:
            log.warning("skipping unreadable image %s", path)
            unreadable += 1
            continue
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        samples.append(arr)
    if not samples:
        raise ValueError(f"no usable images in {src} "
                         f"(rejected {rejected}, unreadable {unreadable})")
    stackd = np.stack(samples)
    order = np.random.default_rng(spec.shuffle_seed).permutation(len(stackd))
    stackd = stackd[order]
    n_train = int(round(len(stackd) * spec.train_fraction))
    ds = Dataset(train=stackd[:n_train], eval=stackd[n_train:],
                 accepted=len(stackd), rejected=rejected, unreadable=unreadable)
    log.info("ingested %d images (%d rejected, %d unreadable) from %s",
             ds.accepted, rejected, unreadable, src)
    return ds


def save_dataset_pngs(dataset: Dataset, out_dir) -> int:
    """Write every sample losslessly as PNG; returns the file count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i, arr in enumerate(dataset.all_samples):
        img = arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)
        Image.fromarray(img).save(out / f"sample_{i:06d}.png")
        count += 1
    return count


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    steps: int = 1000
    n_iterations: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be positive")
        if not 1 <= self.n_iterations <= 64:
            raise ValueError(f"n_iterations must be in [1, 64], got {self.n_iterations}")


class AdamState:
    """First/second moment estimates per parameter, plus the step counter."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0


def adam_update(adam: AdamState, params, grads, lr: float) -> None:
    """One Adam step with bias correction; mutates parameters in place."""
    if len(params) != len(adam.params) or any(a is not b for a, b in zip(params, adam.params)):
        raise ValueError("adam_update: parameter list does not match optimizer state")
    adam.step_count += 1
    t = adam.step_count
    b1, b2 = adam.beta1, adam.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"adam_update: gradient {g.shape} vs parameter {p.data.shape}")
        adam.m[i] = b1 * adam.m[i] + (1 - b1) * g
        adam.v[i] = b2 * adam.v[i] + (1 - b2) * g * g
        m_hat = adam.m[i] / (1 - b1 ** t)
        v_hat = adam.v[i] / (1 - b2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + adam.eps)


def chain_loss(model: ResidualChainModel, outputs, batch: int):
    """Sum over stages of |r_t|^2 / (pixels * n_iterations), averaged over the batch."""
    cfg = model.config
    n = len(outputs)
    acc = None
    for out in outputs:
        term = ad.scale(ad.sum_squares(out.residual), 1.0 / (cfg.patch_dim * n))
        acc = term if acc is None else ad.add(acc, term)
    return ad.scale(acc, 1.0 / batch)


def train_step(model: ResidualChainModel, patches, config: TrainConfig, adam: AdamState,
               noise: NoiseSource, patch_indices=None) -> float:
    """One optimization step on a batch of scaled patches (B, C, P, P)."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 3:
        patches = patches[None]
    batch = patches.shape[0]
    outputs = run_chain(model, patches, config.n_iterations, mode="train", noise=noise,
                        patch_indices=patch_indices, step=adam.step_count)
    loss = chain_loss(model, outputs, batch)
    value = float(loss.data)
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite loss {value} at step {adam.step_count} "
                           f"(lr={config.learning_rate})")
    grads = backward_grads(loss, model.parameters())
    adam_update(adam, model.parameters(), grads, config.learning_rate)
    model.fingerprint = None
    return value


def backward_grads(loss, params) -> list[np.ndarray]:
    """Gradients aligned with ``params`` (zeros for unreached parameters)."""
    grad_map = ad.backward(loss)
    return [grad_map.get(p, np.zeros_like(p.data)) for p in params]


def train_loop(model: ResidualChainModel, patches: np.ndarray, config: TrainConfig,
               log_fn=None) -> list[float]:
    """Run ``config.steps`` Adam steps over a patch set (already scaled).

    Batches cycle deterministically through a seed-shuffled order; the
    per-patch noise coordinates are the patch's dataset index.
    """
    if config.n_iterations > model.config.max_iterations:
        raise ValueError(f"n_iterations {config.n_iterations} exceeds model max_iterations "
                         f"{model.config.max_iterations}")
    n = patches.shape[0]
    order = np.random.default_rng(config.seed).permutation(n)
    noise = NoiseSource(config.seed)
    adam = AdamState(model.parameters())
    losses = []
    cursor = 0
    for step in range(config.steps):
        idx = order[np.arange(cursor, cursor + config.batch_size) % n]
        cursor = (cursor + config.batch_size) % n
        loss = train_step(model, patches[idx], config, adam, noise, patch_indices=idx)
        losses.append(loss)
        if log_fn is not None:
            log_fn(step, loss, config.learning_rate)
    return losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"NNCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _model_section(model: ResidualChainModel, precision: str = "f64") -> bytes:
    if precision not in ("f64", "f32"):
        raise ValueError(f"precision must be 'f64' or 'f32', got {precision!r}")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BB", CHECKPOINT_VERSION, 1 if precision == "f32" else 0))
    buf.write(struct.pack("<Q", model.seed & 0xFFFFFFFFFFFFFFFF))
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    params = model.parameters()
    buf.write(struct.pack("<I", len(params)))
    dtype = "<f4" if precision == "f32" else "<f8"
    for p in params:
        buf.write(struct.pack("<B", p.data.ndim))
        for d in p.data.shape:
            buf.write(struct.pack("<I", d))
        buf.write(np.ascontiguousarray(p.data, dtype=dtype).tobytes())
    return buf.getvalue()


def model_fingerprint(model: ResidualChainModel) -> bytes:
    """8-byte digest of the serialized parameters; identifies a checkpoint."""
    return hashlib.sha256(_model_section(model)).digest()[:8]


def save_checkpoint(model: ResidualChainModel, adam: Optional[AdamState], path,
                    precision: str = "f64") -> bytes:
    """Write model (and optionally optimizer) state; returns the fingerprint."""
    section = _model_section(model, precision)
    with open(path, "wb") as fh:
        fh.write(section)
        if adam is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Qddd", adam.step_count, adam.beta1, adam.beta2, adam.eps))
            for m, v in zip(adam.m, adam.v):
                fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return hashlib.sha256(section).digest()[:8]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None):
    """Read a checkpoint; returns (model, adam_or_None, fingerprint)."""
    raw = Path(path).read_bytes()
    r = _Reader(raw)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, prec_flag = r.unpack("<BB")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    (seed,) = r.unpack("<Q")
    (cfg_len,) = r.unpack("<I")
    try:
        cfg_dict = json.loads(r.take(cfg_len).decode("utf-8"))
        config = ModelConfig(**cfg_dict)
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad embedded config: {exc}") from exc
    if expect_config is not None and asdict(config) != asdict(expect_config):
        raise ConfigMismatchError(f"{path}: checkpoint config does not match the expected "
                                  f"model config")
    model = build_model(config, seed=seed)
    params = model.parameters()
    (n_params,) = r.unpack("<I")
    if n_params != len(params):
        raise ConfigMismatchError(f"{path}: checkpoint has {n_params} parameters, "
                                  f"model defines {len(params)}")
    dtype = "<f4" if prec_flag else "<f8"
    itemsize = 4 if prec_flag else 8
    for p in params:
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}I")) if ndim else ()
        if shape != p.data.shape:
            raise ConfigMismatchError(f"{path}: parameter shape {shape} does not match "
                                      f"model shape {p.data.shape}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        blob = r.take(count * itemsize)
        p.data[...] = np.frombuffer(blob, dtype=dtype).reshape(shape)
    fingerprint = hashlib.sha256(raw[:r.pos]).digest()[:8]
    (has_adam,) = r.unpack("<B")
    adam = None
    if has_adam:
        adam = AdamState(params)
        step_count, adam.beta1, adam.beta2, adam.eps = r.unpack("<Qddd")
        adam.step_count = step_count
        for i, p in enumerate(params):
            adam.m[i] = np.frombuffer(r.take(p.data.size * 8), dtype="<f8").reshape(p.data.shape).copy()
            adam.v[i] = np.frombuffer(r.take(p.data.size * 8), dtype="<f8").reshape(p.data.shape).copy()
    model.fingerprint = fingerprint
    return model, adam, fingerprint
