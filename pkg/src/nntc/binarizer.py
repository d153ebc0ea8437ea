"""Binary bottleneck: tanh projection plus {-1,+1} quantization.

Training quantizes stochastically (+1 with probability (1+x)/2, so the
binarized value is an unbiased estimate of x) and backpropagates through
the quantizer as the identity.  Inference keeps only the most likely
outcome: -1 for negative pre-activations, +1 otherwise, including at
exactly zero, so encodings are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _splitmix64(z):
    z = (z + _GOLDEN).astype(np.uint64)
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class NoiseSource:
    """Counter-based keyed uniform generator.

    Draws are a pure function of (seed, step, stage, patch, unit), so
    training is reproducible and independent of batch composition or
    evaluation order.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    def uniforms(self, stage: int, patch: int, count: int, step: int = 0) -> np.ndarray:
        """count uniforms in [0, 1), one per unit index 0..count-1."""
        h = _splitmix64(np.full(count, self.seed, dtype=np.uint64))
        for coord in (step, stage, patch):
            h = _splitmix64(h ^ _U64(int(coord) & 0xFFFFFFFFFFFFFFFF))
        h = _splitmix64(h ^ np.arange(count, dtype=np.uint64))
        return (h >> _U64(11)).astype(np.float64) * 2.0 ** -53


def binarize_stochastic(x, uniforms) -> np.ndarray:
    """Map x in [-1,1] to +1 with probability (1+x)/2, else -1."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(uniforms, dtype=np.float64)
    if x.shape != u.shape:
        raise ValueError(f"binarize_stochastic: values {x.shape} vs uniforms {u.shape}")
    if np.any(np.abs(x) > 1.0):
        worst = float(np.max(np.abs(x)))
        raise ValueError(f"binarize_stochastic: input outside [-1, 1] (max |x| = {worst}); "
                         "upstream tanh should bound it")
    return np.where(u < (1.0 + x) / 2.0, 1.0, -1.0)


def binarize_inference(x) -> np.ndarray:
    """Deterministic rule: -1 where x < 0, +1 otherwise (ties go to +1)."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x < 0.0, -1.0, 1.0)


def straight_through(t: Tensor, mode: str, uniforms=None) -> Tensor:
    """Quantize a tanh activation to {-1,+1} on the graph.

    The backward contribution is exactly the identity map: upstream
    gradients pass through the quantizer unchanged.
    """
    if mode == "train":
        if uniforms is None:
            raise ValueError("straight_through: train mode needs uniforms")
        bits = binarize_stochastic(t.data, uniforms)
    elif mode == "infer":
        bits = binarize_inference(t.data)
    else:
        raise ValueError(f"straight_through: unknown mode {mode!r}")
    return Tensor(bits, op="straight_through", parents=(t,), vjp=lambda g: (g,))


class BinarizerLayer:
    """tanh(W x + b) followed by binarization.

    ``dense`` flavor maps a feature vector to ``bit_count`` bits; the
    ``conv1x1`` flavor applies the same per-position projection across a
    feature map, emitting bit_channels * H * W bits per sample.
    """

    def __init__(self, w: Tensor, b: Tensor, kind: str = "dense"):
        if kind not in ("dense", "conv1x1"):
            raise ValueError(f"BinarizerLayer: unknown kind {kind!r}")
        self.kind = kind
        self.w = w
        self.b = b
        self._last: tuple[Tensor, Tensor] | None = None
        if kind == "dense":
            if w.data.ndim != 2:
                raise ValueError(f"BinarizerLayer dense: weight must be 2-d, got {w.data.shape}")
            self.bit_channels = w.data.shape[0]
        else:
            if w.data.ndim != 4 or w.data.shape[2:] != (1, 1):
                raise ValueError(f"BinarizerLayer conv1x1: weight must be (bits, in, 1, 1), got {w.data.shape}")
            self.bit_channels = w.data.shape[0]

    def parameters(self):
        return [self.w, self.b]

    def pre_activation(self, x: Tensor) -> Tensor:
        if self.kind == "dense":
            return ad.tanh(ad.affine(self.w, x, self.b))
        spec = ConvSpec(1, 1, self.w.data.shape[1], self.bit_channels, stride=1)
        return ad.tanh(ad.channel_bias(ad.conv2d(self.w, x, spec), self.b))

    def forward(self, x: Tensor, mode: str, uniforms=None) -> Tensor:
        """Emit the bit tensor; retains the forward nodes so backward() can reuse them."""
        t = self.pre_activation(x)
        if mode == "train" and uniforms is not None:
            uniforms = np.asarray(uniforms, dtype=np.float64).reshape(t.data.shape)
        bits = straight_through(t, mode, uniforms)
        self._last = (x, bits) if mode == "train" else None
        return bits

    def backward(self, upstream_grad):
        """Gradients of the last train-mode forward w.r.t. (input, W, b).

        The quantizer contributes an identity factor; tanh and the affine
        part differentiate normally.
        """
        if self._last is None:
            raise ValueError("BinarizerLayer.backward: no train-mode forward recorded")
        x, bits = self._last
        was_param = x.is_param
        x.is_param = True
        try:
            grads = ad.backward(bits, seed_grad=upstream_grad)
        finally:
            x.is_param = was_param
        return (grads.get(x, np.zeros_like(x.data)),
                grads.get(self.w, np.zeros_like(self.w.data)),
                grads.get(self.b, np.zeros_like(self.b.data)))
