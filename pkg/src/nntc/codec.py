"""Image-level encoding and decoding with a bit-exact progressive bitstream.

Wire format (all integers little-endian):

    magic "NNTC" | version u8 | model fingerprint 8B | width u16 | height u16
    | patch size u8 | bits-per-iteration u16 | mode u8 (0 uniform, 1 dynamic)
    | uniform: iteration count u8  /  dynamic: one u8 count per patch, row-major
    | payload

The payload packs each patch's bits in row-major patch order, iterations
concatenated in order, most-significant-bit first, +1 as bit 1 and -1 as
bit 0, zero-padded to a byte boundary per patch.  Headers are excluded
from all rate metrics.
"""

from __future__ import annotations

from dataclasses import dataclass
import math
import struct

import numpy as np

from .models import ModelConfig, ResidualChainModel, decode_only, reconstruct, run_chain, stage_bits_flat
from .training import model_fingerprint, scale_to_network, unscale_from_network, extract_patches, stitch_patches

MAGIC = b"NNTC"
FORMAT_VERSION = 1
MODE_UNIFORM = 0
MODE_DYNAMIC = 1


class CodecError(ValueError):
    pass


class BadMagicError(CodecError):
    pass


class UnsupportedVersionError(CodecError):
    pass


class HeaderError(CodecError):
    pass


class ShortPayloadError(CodecError):
    pass


class ModelMismatchError(CodecError):
    pass


@dataclass
class BitstreamHeader:
    fingerprint: bytes
    width: int
    height: int
    patch_size: int
    bits_per_iteration: int
    mode: int
    iteration_counts: tuple[int, ...]  # one per patch, row-major

    def __post_init__(self):
        if len(self.fingerprint) != 8:
            raise HeaderError(f"fingerprint must be 8 bytes, got {len(self.fingerprint)}")
        if self.mode not in (MODE_UNIFORM, MODE_DYNAMIC):
            raise HeaderError(f"unknown mode {self.mode}")
        if not 1 <= self.patch_size <= 255:
            raise HeaderError(f"patch size {self.patch_size} out of range")
        if self.width % self.patch_size or self.height % self.patch_size:
            raise HeaderError(f"image {self.width}x{self.height} not divisible by "
                              f"patch size {self.patch_size}")
        if not 1 <= self.bits_per_iteration <= 0xFFFF:
            raise HeaderError(f"bits_per_iteration {self.bits_per_iteration} out of range")
        counts = tuple(int(c) for c in self.iteration_counts)
        if len(counts) != self.patch_count:
            raise HeaderError(f"{len(counts)} iteration counts for {self.patch_count} patches")
        if any(not 1 <= c <= 255 for c in counts):
            raise HeaderError("iteration counts must be in [1, 255]")
        if self.mode == MODE_UNIFORM and len(set(counts)) > 1:
            raise HeaderError("uniform mode requires equal iteration counts")
        self.iteration_counts = counts

    @property
    def patch_count(self) -> int:
        return (self.width // self.patch_size) * (self.height // self.patch_size)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return self.height // self.patch_size, self.width // self.patch_size

    def patch_payload_bytes(self, patch_index: int) -> int:
        return (self.iteration_counts[patch_index] * self.bits_per_iteration + 7) // 8

    @property
    def payload_bytes(self) -> int:
        return sum(self.patch_payload_bytes(i) for i in range(self.patch_count))


@dataclass
class Bitstream:
    header: BitstreamHeader
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != self.header.payload_bytes:
            raise ShortPayloadError(f"payload is {len(self.payload)} bytes, header implies "
                                    f"{self.header.payload_bytes}")


@dataclass
class QualityTarget:
    """Per-patch stopping rule for dynamic bit assignment."""

    metric: str = "psnr"
    threshold: float = 30.0
    min_iterations: int = 1
    max_iterations: int = 16

    def __post_init__(self):
        if self.metric not in ("psnr", "ssim"):
            raise ValueError(f"metric must be 'psnr' or 'ssim', got {self.metric!r}")
        if not 1 <= self.min_iterations <= self.max_iterations:
            raise ValueError(f"need 1 <= min {self.min_iterations} <= max {self.max_iterations}")


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_patch_bits(planes: np.ndarray) -> bytes:
    """planes: (iterations, bits) of +-1; packed MSB-first, +1 -> 1."""
    flat = planes.reshape(-1)
    return np.packbits((flat > 0).astype(np.uint8), bitorder="big").tobytes()


def unpack_patch_bits(blob: bytes, iterations: int, bits_per_iteration: int) -> np.ndarray:
    n = iterations * bits_per_iteration
    got = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=n, bitorder="big")
    return np.where(got > 0, 1.0, -1.0).reshape(iterations, bits_per_iteration)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def serialize(stream: Bitstream) -> bytes:
    h = stream.header
    out = bytearray()
    out += MAGIC
    out += struct.pack("<B", FORMAT_VERSION)
    out += h.fingerprint
    out += struct.pack("<HHBHB", h.width, h.height, h.patch_size, h.bits_per_iteration, h.mode)
    if h.mode == MODE_UNIFORM:
        out += struct.pack("<B", h.iteration_counts[0])
    else:
        out += bytes(h.iteration_counts)
    out += stream.payload
    return bytes(out)


def deserialize(data: bytes) -> Bitstream:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("bad magic: not an NNTC bitstream")
    pos = 4
    if len(data) < pos + 1:
        raise HeaderError("header ends before version byte")
    version = data[pos]
    pos += 1
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported bitstream version {version}")
    if len(data) < pos + 8 + 8:
        raise HeaderError("header ends inside the fixed fields")
    fingerprint = data[pos:pos + 8]
    pos += 8
    width, height, patch_size, bits_per_iteration, mode = struct.unpack_from("<HHBHB", data, pos)
    pos += 8
    if patch_size == 0 or width % patch_size or height % patch_size:
        raise HeaderError(f"image {width}x{height} not divisible by patch size {patch_size}")
    n_patches = (width // patch_size) * (height // patch_size)
    if mode == MODE_UNIFORM:
        if len(data) < pos + 1:
            raise HeaderError("header ends before the iteration count")
        counts = (data[pos],) * n_patches
        pos += 1
    elif mode == MODE_DYNAMIC:
        if len(data) < pos + n_patches:
            raise HeaderError(f"header ends inside the {n_patches} per-patch counts")
        counts = tuple(data[pos:pos + n_patches])
        pos += n_patches
    else:
        raise HeaderError(f"unknown mode byte {mode}")
    header = BitstreamHeader(fingerprint=fingerprint, width=width, height=height,
                             patch_size=patch_size, bits_per_iteration=bits_per_iteration,
                             mode=mode, iteration_counts=counts)
    payload = data[pos:]
    want = header.payload_bytes
    if len(payload) < want:
        short = _first_short_patch(header, len(payload))
        raise ShortPayloadError(f"payload is {len(payload)} bytes, expected {want} "
                                f"(short at patch {short})")
    if len(payload) > want:
        raise HeaderError(f"{len(payload) - want} trailing bytes after the payload")
    return Bitstream(header=header, payload=payload)


def _first_short_patch(header: BitstreamHeader, have: int) -> int:
    used = 0
    for i in range(header.patch_count):
        used += header.patch_payload_bytes(i)
        if used > have:
            return i
    return header.patch_count - 1


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def _fingerprint(model: ResidualChainModel) -> bytes:
    if model.fingerprint is None:
        model.fingerprint = model_fingerprint(model)
    return model.fingerprint


def _check_image(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] != cfg.channels:
        raise CodecError(f"image shape {img.shape} does not match model channels {cfg.channels}")
    p = cfg.patch_size
    if img.shape[1] % p or img.shape[2] % p:
        raise CodecError(f"image {img.shape[1]}x{img.shape[2]} not divisible into "
                         f"{p}x{p} patches")
    return img


def _encode_patch_planes(model: ResidualChainModel, img: np.ndarray, iterations: int):
    """Run the chain over all patches at once; returns (planes, patch grid).

    planes[p] is an (iterations, bits) array for patch p in row-major order.
    """
    cfg = model.config
    patches = extract_patches(img, cfg.patch_size)
    scaled = np.stack([scale_to_network(p) for p in patches])
    outputs = run_chain(model, scaled, iterations, mode="infer")
    per_stage = [stage_bits_flat(o) for o in outputs]  # each (P, bits)
    planes = [np.stack([per_stage[t][p] for t in range(iterations)])
              for p in range(len(patches))]
    return planes, outputs


def encode_image(model: ResidualChainModel, img: np.ndarray, iterations: int) -> Bitstream:
    """Uniform-rate encoding: every patch gets the same iteration count."""
    cfg = model.config
    img = _check_image(img, cfg)
    if not 1 <= iterations <= cfg.max_iterations:
        raise CodecError(f"iterations must be in [1, {cfg.max_iterations}], got {iterations}")
    planes, _ = _encode_patch_planes(model, img, iterations)
    header = BitstreamHeader(fingerprint=_fingerprint(model),
                             width=img.shape[2], height=img.shape[1],
                             patch_size=cfg.patch_size,
                             bits_per_iteration=cfg.bits_per_iteration,
                             mode=MODE_UNIFORM,
                             iteration_counts=(iterations,) * len(planes))
    payload = b"".join(pack_patch_bits(p) for p in planes)
    return Bitstream(header=header, payload=payload)


def uniform_payload_bytes(cfg: ModelConfig, width: int, height: int, iterations: int) -> int:
    patches = (width // cfg.patch_size) * (height // cfg.patch_size)
    return patches * ((iterations * cfg.bits_per_iteration + 7) // 8)


def encode_with_budget(model: ResidualChainModel, img: np.ndarray, byte_budget: int) -> Bitstream:
    """Largest uniform iteration count whose payload fits the budget (floor rule).

    The header is not counted against the budget.
    """
    cfg = model.config
    img = _check_image(img, cfg)
    h, w = img.shape[1], img.shape[2]
    minimum = uniform_payload_bytes(cfg, w, h, 1)
    if byte_budget < minimum:
        raise CodecError(f"byte budget {byte_budget} is below the minimum payload "
                         f"of {minimum} bytes (one iteration)")
    best = max(t for t in range(1, cfg.max_iterations + 1)
               if uniform_payload_bytes(cfg, w, h, t) <= byte_budget)
    return encode_image(model, img, best)


def _patch_quality(metric: str, original: np.ndarray, recon: np.ndarray) -> float:
    """Quality of one patch on 8-bit values; higher is better for both metrics."""
    a = unscale_from_network(original).astype(np.float64)
    b = unscale_from_network(recon).astype(np.float64)
    if metric == "psnr":
        mse = float(np.mean((a - b) ** 2))
        return math.inf if mse == 0.0 else 10.0 * math.log10(255.0 ** 2 / mse)
    from .metrics import ssim_patch
    scores = [ssim_patch(a[c], b[c]) for c in range(a.shape[0])]
    return float(np.mean(scores))


def encode_dynamic(model: ResidualChainModel, img: np.ndarray, target: QualityTarget) -> Bitstream:
    """Per-patch rate: stop at the first iteration meeting the quality target."""
    cfg = model.config
    img = _check_image(img, cfg)
    if target.max_iterations > cfg.max_iterations:
        raise CodecError(f"target max_iterations {target.max_iterations} exceeds model "
                         f"max_iterations {cfg.max_iterations}")
    planes, outputs = _encode_patch_planes(model, img, target.max_iterations)
    preds = [o.prediction.data for o in outputs]
    patches = extract_patches(img, cfg.patch_size)
    counts = []
    kept = []
    for p, patch in enumerate(patches):
        scaled = scale_to_network(patch)
        chosen = target.max_iterations
        for t in range(target.min_iterations, target.max_iterations + 1):
            recon = _combine_prefix(cfg, preds, p, t)
            if _patch_quality(target.metric, scaled, recon) >= target.threshold:
                chosen = t
                break
        counts.append(chosen)
        kept.append(planes[p][:chosen])
    header = BitstreamHeader(fingerprint=_fingerprint(model),
                             width=img.shape[2], height=img.shape[1],
                             patch_size=cfg.patch_size,
                             bits_per_iteration=cfg.bits_per_iteration,
                             mode=MODE_DYNAMIC,
                             iteration_counts=tuple(counts))
    payload = b"".join(pack_patch_bits(k) for k in kept)
    return Bitstream(header=header, payload=payload)


def _combine_prefix(cfg: ModelConfig, preds, patch_index: int, t: int) -> np.ndarray:
    """Reconstruction of one patch from the first t stage predictions."""
    if cfg.is_recurrent:
        return preds[t - 1][patch_index]
    acc = preds[0][patch_index].copy()
    for s in range(1, t):
        if s % 2 == 1:
            acc -= preds[s][patch_index]
        else:
            acc += preds[s][patch_index]
    return acc


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _split_payload(stream: Bitstream) -> list[bytes]:
    blobs = []
    pos = 0
    for p in range(stream.header.patch_count):
        n = stream.header.patch_payload_bytes(p)
        blobs.append(stream.payload[pos:pos + n])
        pos += n
    return blobs


def _check_model(model: ResidualChainModel, header: BitstreamHeader):
    cfg = model.config
    if header.fingerprint != _fingerprint(model):
        raise ModelMismatchError("bitstream was produced by a different model checkpoint")
    if header.patch_size != cfg.patch_size or header.bits_per_iteration != cfg.bits_per_iteration:
        raise ModelMismatchError(f"stream geometry (patch {header.patch_size}, "
                                 f"{header.bits_per_iteration} bits/iter) does not match model")
    if max(header.iteration_counts) > cfg.max_iterations:
        raise ModelMismatchError(f"stream uses {max(header.iteration_counts)} iterations, "
                                 f"model allows {cfg.max_iterations}")


def _decode_patches(model: ResidualChainModel, stream: Bitstream, cap: int | None = None):
    """Per-patch reconstructions (scaled domain), optionally capped at t planes."""
    header = stream.header
    blobs = _split_payload(stream)
    recons = [None] * header.patch_count
    by_count: dict[int, list[int]] = {}
    for p in range(header.patch_count):
        t = header.iteration_counts[p]
        if cap is not None:
            t = min(t, cap)
        by_count.setdefault(t, []).append(p)
    for t, indices in sorted(by_count.items()):
        unpacked = [unpack_patch_bits(blobs[p], header.iteration_counts[p],
                                      header.bits_per_iteration) for p in indices]
        planes_batched = [np.stack([u[s] for u in unpacked]) for s in range(t)]
        out = decode_only(model, planes_batched)
        for row, p in enumerate(indices):
            recons[p] = out[row]
    return recons


def decode_image(model: ResidualChainModel, stream: Bitstream) -> np.ndarray:
    """Full decode to an 8-bit (C, H, W) image."""
    _check_model(model, stream.header)
    recons = _decode_patches(model, stream)
    stitched = stitch_patches(recons, stream.header.grid_hw)
    return unscale_from_network(stitched)


def decode_progressive(model: ResidualChainModel, stream: Bitstream) -> list[np.ndarray]:
    """One 8-bit image per iteration prefix 1..max(iteration counts).

    Patches with fewer iterations than the prefix hold their final
    reconstruction; prefix t of a uniform stream equals decoding the same
    stream truncated to t iterations.
    """
    _check_model(model, stream.header)
    out = []
    for t in range(1, max(stream.header.iteration_counts) + 1):
        recons = _decode_patches(model, stream, cap=t)
        out.append(unscale_from_network(stitch_patches(recons, stream.header.grid_hw)))
    return out


def truncate_stream(stream: Bitstream, t: int) -> Bitstream:
    """Re-serializable stream holding only the first t iterations per patch."""
    header = stream.header
    blobs = _split_payload(stream)
    new_counts = tuple(min(c, t) for c in header.iteration_counts)
    new_blobs = []
    for p, blob in enumerate(blobs):
        planes = unpack_patch_bits(blob, header.iteration_counts[p], header.bits_per_iteration)
        new_blobs.append(pack_patch_bits(planes[:new_counts[p]]))
    new_header = BitstreamHeader(fingerprint=header.fingerprint, width=header.width,
                                 height=header.height, patch_size=header.patch_size,
                                 bits_per_iteration=header.bits_per_iteration,
                                 mode=header.mode, iteration_counts=new_counts)
    return Bitstream(header=new_header, payload=b"".join(new_blobs))
