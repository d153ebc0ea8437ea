"""The four codec architectures and the residual-chaining semantics.

A model is a chain of stages F_t(r) = D_t(B(E_t(r))).  Feed-forward
variants (fc-residual, conv-residual) are memoryless: each stage predicts
its own input, the next input is prediction - input, and the image is
recovered by an alternating sum of stage predictions.  LSTM variants
carry state across stages, predict the original patch every time, and the
final prediction is the reconstruction.  The binarizer is a single layer
shared by all stages in every variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor
from .binarizer import BinarizerLayer, NoiseSource
from .cells import ConvLstmCell, DeconvLstmCell, FcLstmCell, LstmState

VARIANTS = ("fc-residual", "fc-lstm", "conv-residual", "conv-lstm")
_FC_DEFAULT_PATCH = 8
_CONV_DEFAULT_PATCH = 32
_FC_DEFAULT_BITS = 8          # bits per stage for an 8x8 patch
_CONV_BITS_PER_PIXEL = 2      # at the bottleneck resolution


@dataclass
class ModelConfig:
    """Architecture hyperparameters; zeros mean per-variant defaults."""

    variant: str
    weight_policy: str = "shared"
    patch_size: int = 0
    channels: int = 3
    bits_per_iteration: int = 0
    max_iterations: int = 16
    hidden_width: int = 512
    fc_depth: int = 2
    conv_filters: tuple[int, int, int] = (64, 256, 512)
    recurrent_kernel: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.weight_policy not in ("shared", "distinct"):
            raise ValueError(f"weight_policy must be 'shared' or 'distinct', got {self.weight_policy!r}")
        if self.is_recurrent and self.weight_policy != "shared":
            raise ValueError("LSTM variants share weights across iterations; "
                             "weight_policy must be 'shared'")
        if self.patch_size == 0:
            self.patch_size = _CONV_DEFAULT_PATCH if self.is_conv else _FC_DEFAULT_PATCH
        if self.patch_size < 8 or self.patch_size % 8 != 0:
            raise ValueError(f"patch_size must be a positive multiple of 8 "
                             f"(codec and SSIM tile in 8x8 blocks), got {self.patch_size}")
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if not 1 <= self.max_iterations <= 64:
            raise ValueError(f"max_iterations must be in [1, 64], got {self.max_iterations}")
        if self.bits_per_iteration == 0:
            self.bits_per_iteration = (_CONV_BITS_PER_PIXEL * self.bottleneck_size ** 2
                                       if self.is_conv else _FC_DEFAULT_BITS)
        if self.bits_per_iteration < 1:
            raise ValueError(f"bits_per_iteration must be positive, got {self.bits_per_iteration}")
        if self.is_conv and self.bits_per_iteration % self.bottleneck_size ** 2 != 0:
            raise ValueError(f"conv variants need bits_per_iteration divisible by the "
                             f"{self.bottleneck_size}x{self.bottleneck_size} bottleneck area, "
                             f"got {self.bits_per_iteration}")
        if self.hidden_width < 1 or self.fc_depth < 1:
            raise ValueError("hidden_width and fc_depth must be positive")
        self.conv_filters = tuple(int(f) for f in self.conv_filters)
        if len(self.conv_filters) != 3 or min(self.conv_filters) < 1:
            raise ValueError(f"conv_filters must be three positive ints, got {self.conv_filters}")
        if self.recurrent_kernel < 1 or self.recurrent_kernel % 2 == 0:
            raise ValueError(f"recurrent_kernel must be odd, got {self.recurrent_kernel}")

    @property
    def is_conv(self) -> bool:
        return self.variant.startswith("conv")

    @property
    def is_recurrent(self) -> bool:
        return self.variant.endswith("lstm")

    @property
    def bottleneck_size(self) -> int:
        """Spatial side length after the two stride-2 encoder convs."""
        return self.patch_size // 4

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def total_bit_budget(self) -> int:
        return self.bits_per_iteration * self.max_iterations


@dataclass
class StageOutput:
    """One chain stage: emitted bits, prediction, and the new residual."""

    bits: Tensor
    prediction: Tensor
    residual: Tensor


class AffineLayer:
    def __init__(self, w, b, activation="tanh"):
        self.w, self.b, self.activation = w, b, activation

    def parameters(self):
        return [self.w, self.b]

    def forward(self, x):
        y = ad.affine(self.w, x, self.b)
        return ad.tanh(y) if self.activation == "tanh" else y


class ConvLayer:
    def __init__(self, w, b, spec: ConvSpec, activation="tanh"):
        self.w, self.b, self.spec, self.activation = w, b, spec, activation

    def parameters(self):
        return [self.w, self.b]

    def forward(self, x):
        y = ad.channel_bias(ad.conv2d(self.w, x, self.spec), self.b)
        return ad.tanh(y) if self.activation == "tanh" else y


class DeconvLayer(ConvLayer):
    def forward(self, x):
        y = ad.channel_bias(ad.deconv2d(self.w, x, self.spec), self.b)
        return ad.tanh(y) if self.activation == "tanh" else y


def _is_cell(item) -> bool:
    return isinstance(item, (FcLstmCell, ConvLstmCell))


class Stack:
    """A sequence of layers and cells; cells consume per-session state."""

    def __init__(self, items):
        self.items = list(items)

    def parameters(self):
        out = []
        for item in self.items:
            out.extend(item.parameters())
        return out

    def cell_state_shapes(self, batch: int):
        shapes = []
        for item in self.items:
            if isinstance(item, ConvLstmCell):
                shapes.append((batch, item.features) + item.state_hw)
            elif isinstance(item, FcLstmCell):
                shapes.append((batch, item.units))
        return shapes

    def initial_state(self, batch: int) -> Optional[LstmState]:
        shapes = self.cell_state_shapes(batch)
        return LstmState.zeros(shapes) if shapes else None

    def forward(self, x: Tensor, state: Optional[LstmState] = None):
        pairs = iter(state.layers) if state is not None else iter(())
        new_pairs = []
        for item in self.items:
            if _is_cell(item):
                h_prev, c_prev = next(pairs)
                h, c = item.step(x, h_prev, c_prev)
                new_pairs.append((h, c))
                x = h
            else:
                x = item.forward(x)
        return x, (LstmState(new_pairs) if new_pairs else None)


class ResidualChainModel:
    """Per-stage encoders/decoders plus the shared binary bottleneck."""

    def __init__(self, config: ModelConfig, encoders, decoders, binarizer: BinarizerLayer, seed: int):
        self.config = config
        self.encoders = list(encoders)
        self.decoders = list(decoders)
        self.binarizer = binarizer
        self.seed = seed
        self.fingerprint: bytes | None = None  # cached by the codec, cleared on update

    def encoder_for(self, stage: int) -> Stack:
        return self.encoders[0] if len(self.encoders) == 1 else self.encoders[stage]

    def decoder_for(self, stage: int) -> Stack:
        return self.decoders[0] if len(self.decoders) == 1 else self.decoders[stage]

    def parameters(self):
        out = []
        for enc in self.encoders:
            out.extend(enc.parameters())
        out.extend(self.binarizer.parameters())
        for dec in self.decoders:
            out.extend(dec.parameters())
        return out

    def initial_encoder_state(self, batch: int):
        return self.encoder_for(0).initial_state(batch)

    def initial_decoder_state(self, batch: int):
        return self.decoder_for(0).initial_state(batch)


def _uniform_init(rng, shape, fan_in):
    s = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-s, s, size=shape)


class _ParamFactory:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def affine(self, out_dim, in_dim, name):
        w = ad.parameter(_uniform_init(self.rng, (out_dim, in_dim), in_dim), name=f"{name}.w")
        b = ad.parameter(_uniform_init(self.rng, (out_dim,), in_dim), name=f"{name}.b")
        return w, b

    def conv(self, out_ch, in_ch, k, name):
        fan_in = in_ch * k * k
        w = ad.parameter(_uniform_init(self.rng, (out_ch, in_ch, k, k), fan_in), name=f"{name}.w")
        b = ad.parameter(_uniform_init(self.rng, (out_ch,), fan_in), name=f"{name}.b")
        return w, b


def _build_fc_encoder(cfg: ModelConfig, make: _ParamFactory, tag: str) -> Stack:
    items = []
    in_dim = cfg.patch_dim
    if cfg.variant == "fc-residual":
        for i in range(cfg.fc_depth):
            w, b = make.affine(cfg.hidden_width, in_dim, f"{tag}.fc{i}")
            items.append(AffineLayer(w, b))
            in_dim = cfg.hidden_width
    else:  # fc-lstm: one dense layer, then two stacked LSTM layers
        w, b = make.affine(cfg.hidden_width, in_dim, f"{tag}.fc0")
        items.append(AffineLayer(w, b))
        for i in range(2):
            wc, bc = make.affine(4 * cfg.hidden_width, 2 * cfg.hidden_width, f"{tag}.lstm{i}")
            items.append(FcLstmCell(wc, bc, cfg.hidden_width))
    return Stack(items)


def _build_fc_decoder(cfg: ModelConfig, make: _ParamFactory, tag: str) -> Stack:
    items = []
    if cfg.variant == "fc-residual":
        in_dim = cfg.bits_per_iteration
        for i in range(cfg.fc_depth):
            w, b = make.affine(cfg.hidden_width, in_dim, f"{tag}.fc{i}")
            items.append(AffineLayer(w, b))
            in_dim = cfg.hidden_width
        w, b = make.affine(cfg.patch_dim, in_dim, f"{tag}.head")
        items.append(AffineLayer(w, b))
    else:  # fc-lstm: two stacked LSTM layers, then the dense output head
        n = cfg.hidden_width
        w0, b0 = make.affine(4 * n, cfg.bits_per_iteration + n, f"{tag}.lstm0")
        items.append(FcLstmCell(w0, b0, n))
        w1, b1 = make.affine(4 * n, 2 * n, f"{tag}.lstm1")
        items.append(FcLstmCell(w1, b1, n))
        w, b = make.affine(cfg.patch_dim, n, f"{tag}.head")
        items.append(AffineLayer(w, b))
    return Stack(items)


def _build_conv_encoder(cfg: ModelConfig, make: _ParamFactory, tag: str) -> Stack:
    f1, f2, f3 = cfg.conv_filters
    quarter = cfg.bottleneck_size
    w, b = make.conv(f1, cfg.channels, 3, f"{tag}.conv0")
    items = [ConvLayer(w, b, ConvSpec(3, 3, cfg.channels, f1, stride=2, pad_h=1, pad_w=1))]
    if cfg.variant == "conv-residual":
        w, b = make.conv(f2, f1, 3, f"{tag}.conv1")
        items.append(ConvLayer(w, b, ConvSpec(3, 3, f1, f2, stride=2, pad_h=1, pad_w=1)))
        w, b = make.conv(f3, f2, 3, f"{tag}.conv2")
        items.append(ConvLayer(w, b, ConvSpec(3, 3, f2, f3, stride=1, pad_h=1, pad_w=1)))
    else:  # conv-lstm: the 2nd and 3rd layers become convolutional LSTM
        rk = cfg.recurrent_kernel
        w_in, b1 = make.conv(4 * f2, f1, 3, f"{tag}.clstm1.in")
        w_rec = ad.parameter(_uniform_init(make.rng, (4 * f2, f2, rk, rk), f2 * rk * rk),
                             name=f"{tag}.clstm1.rec")
        cell = ConvLstmCell(w_in, w_rec, b1, f2,
                            ConvSpec(3, 3, f1, 4 * f2, stride=2, pad_h=1, pad_w=1))
        cell.state_hw = (quarter, quarter)
        items.append(cell)
        w_in, b2 = make.conv(4 * f3, f2, 3, f"{tag}.clstm2.in")
        w_rec = ad.parameter(_uniform_init(make.rng, (4 * f3, f3, rk, rk), f3 * rk * rk),
                             name=f"{tag}.clstm2.rec")
        cell = ConvLstmCell(w_in, w_rec, b2, f3,
                            ConvSpec(3, 3, f2, 4 * f3, stride=1, pad_h=1, pad_w=1))
        cell.state_hw = (quarter, quarter)
        items.append(cell)
    return Stack(items)


def _build_conv_decoder(cfg: ModelConfig, make: _ParamFactory, tag: str) -> Stack:
    f1, f2, f3 = cfg.conv_filters
    bits_ch = cfg.bits_per_iteration // cfg.bottleneck_size ** 2
    half = cfg.patch_size // 2
    w, b = make.conv(f3, bits_ch, 1, f"{tag}.conv0")
    items = [ConvLayer(w, b, ConvSpec(1, 1, bits_ch, f3, stride=1))]
    if cfg.variant == "conv-residual":
        w, b = make.conv(f2, f3, 3, f"{tag}.deconv1")
        items.append(DeconvLayer(w, b, ConvSpec(3, 3, f3, f2, stride=2, pad_h=1, pad_w=1)))
        w, b = make.conv(f1, f2, 3, f"{tag}.deconv2")
        items.append(DeconvLayer(w, b, ConvSpec(3, 3, f2, f1, stride=2, pad_h=1, pad_w=1)))
    else:  # conv-lstm: the 2nd and 3rd layers become deconvolutional LSTM
        rk = cfg.recurrent_kernel
        w_in, b1 = make.conv(4 * f2, f3, 3, f"{tag}.dlstm1.in")
        w_rec = ad.parameter(_uniform_init(make.rng, (4 * f2, f2, rk, rk), f2 * rk * rk),
                             name=f"{tag}.dlstm1.rec")
        cell = DeconvLstmCell(w_in, w_rec, b1, f2,
                              ConvSpec(3, 3, f3, 4 * f2, stride=2, pad_h=1, pad_w=1))
        cell.state_hw = (half, half)
        items.append(cell)
        w_in, b2 = make.conv(4 * f1, f2, 3, f"{tag}.dlstm2.in")
        w_rec = ad.parameter(_uniform_init(make.rng, (4 * f1, f1, rk, rk), f1 * rk * rk),
                             name=f"{tag}.dlstm2.rec")
        cell = DeconvLstmCell(w_in, w_rec, b2, f1,
                              ConvSpec(3, 3, f2, 4 * f1, stride=2, pad_h=1, pad_w=1))
        cell.state_hw = (cfg.patch_size, cfg.patch_size)
        items.append(cell)
    w, b = make.conv(cfg.channels, f1, 1, f"{tag}.head")
    items.append(ConvLayer(w, b, ConvSpec(1, 1, f1, cfg.channels, stride=1)))
    return Stack(items)


def build_model(config: ModelConfig, seed: int = 0) -> ResidualChainModel:
    """Instantiate a model with uniform(-1/sqrt(fan_in)) initialization."""
    make = _ParamFactory(seed)
    n_stages = config.max_iterations if config.weight_policy == "distinct" else 1
    build_enc = _build_conv_encoder if config.is_conv else _build_fc_encoder
    build_dec = _build_conv_decoder if config.is_conv else _build_fc_decoder

    encoders = [build_enc(config, make, f"enc{t}") for t in range(n_stages)]
    if config.is_conv:
        f3 = config.conv_filters[2]
        bits_ch = config.bits_per_iteration // config.bottleneck_size ** 2
        w, b = make.conv(bits_ch, f3, 1, "bin")
        binarizer = BinarizerLayer(w, b, kind="conv1x1")
    else:
        w, b = make.affine(config.bits_per_iteration, config.hidden_width, "bin")
        binarizer = BinarizerLayer(w, b, kind="dense")
    decoders = [build_dec(config, make, f"dec{t}") for t in range(n_stages)]
    return ResidualChainModel(config, encoders, decoders, binarizer, seed)


# ---------------------------------------------------------------------------
# chain execution
# ---------------------------------------------------------------------------

def _as_patch_batch(patch, cfg: ModelConfig) -> Tensor:
    t = patch if isinstance(patch, Tensor) else ad.constant(patch)
    if t.data.ndim == 3:
        t = ad.reshape(t, (1,) + t.data.shape)
    if t.data.ndim != 4 or t.data.shape[1:] != (cfg.channels, cfg.patch_size, cfg.patch_size):
        raise ValueError(f"patch shape {t.data.shape} does not match "
                         f"({cfg.channels}, {cfg.patch_size}, {cfg.patch_size})")
    return t


def _stage_uniforms(noise: NoiseSource, stage: int, patch_indices, nbits: int, step: int):
    return np.stack([noise.uniforms(stage, int(p), nbits, step=step) for p in patch_indices])


def run_chain(model: ResidualChainModel, patch, n_iters: int, mode: str = "infer",
              noise: Optional[NoiseSource] = None, patch_indices=None, step: int = 0):
    """Run the residual chain; returns one StageOutput per iteration.

    ``patch`` is in network range, shaped (channels, P, P) or batched
    (B, channels, P, P).  In train mode the binarizer draws stochastic
    bits from ``noise`` at coordinates (step, stage, patch index, unit).
    """
    cfg = model.config
    if not 1 <= n_iters <= cfg.max_iterations:
        raise ValueError(f"n_iters must be in [1, {cfg.max_iterations}], got {n_iters}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "train" and noise is None:
        raise ValueError("train mode requires a NoiseSource")

    x = _as_patch_batch(patch, cfg)
    batch = x.data.shape[0]
    if patch_indices is None:
        patch_indices = np.arange(batch)
    enc_state = model.initial_encoder_state(batch)
    dec_state = model.initial_decoder_state(batch)
    bottleneck = cfg.bottleneck_size

    outputs = []
    r_prev = x
    for t in range(n_iters):
        inp = ad.reshape(r_prev, (batch, cfg.patch_dim)) if not cfg.is_conv else r_prev
        z, enc_state = model.encoder_for(t).forward(inp, enc_state)
        uniforms = None
        if mode == "train":
            u = _stage_uniforms(noise, t, patch_indices, cfg.bits_per_iteration, step)
            uniforms = u if not cfg.is_conv else u.reshape(
                batch, -1, bottleneck, bottleneck)
        bits = model.binarizer.forward(z, mode, uniforms)
        d, dec_state = model.decoder_for(t).forward(bits, dec_state)
        pred = ad.reshape(d, x.data.shape) if not cfg.is_conv else d
        target = x if cfg.is_recurrent else r_prev
        residual = ad.sub(pred, target)
        outputs.append(StageOutput(bits=bits, prediction=pred, residual=residual))
        r_prev = residual
    return outputs


def _combine_predictions(cfg: ModelConfig, preds) -> np.ndarray:
    """Merge stage predictions into a reconstruction (network range)."""
    if cfg.is_recurrent:
        return np.array(preds[-1], copy=True)
    acc = np.array(preds[0], copy=True)
    for t in range(1, len(preds)):
        if t % 2 == 1:
            acc -= preds[t]
        else:
            acc += preds[t]
    return acc


def reconstruct(model: ResidualChainModel, outputs) -> np.ndarray:
    """Encoder-side reconstruction from chain outputs.

    Feed-forward chains telescope: the alternating sum of predictions
    satisfies r_0 - x_hat_N = (-1)^N r_N exactly.  LSTM chains predict the
    patch directly, so the last prediction is the reconstruction.
    """
    if not outputs:
        raise ValueError("reconstruct: empty output list")
    return _combine_predictions(model.config, [o.prediction.data for o in outputs])


def decode_only(model: ResidualChainModel, bit_planes) -> np.ndarray:
    """Decoder-side reconstruction from raw {-1,+1} bit planes.

    Never evaluates any encoder stage; bit-identical to the encoder-side
    reconstruction for the same bits.
    """
    cfg = model.config
    if not bit_planes:
        raise ValueError("decode_only: empty bit plane list")
    if len(bit_planes) > cfg.max_iterations:
        raise ValueError(f"decode_only: {len(bit_planes)} planes exceed max_iterations "
                         f"{cfg.max_iterations}")
    planes = []
    for i, plane in enumerate(bit_planes):
        arr = np.asarray(plane, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None]
        if arr.shape[-1] != cfg.bits_per_iteration or arr.ndim != 2:
            raise ValueError(f"decode_only: plane {i} has shape {arr.shape}, expected "
                             f"(batch, {cfg.bits_per_iteration})")
        if not np.all(np.abs(arr) == 1.0):
            raise ValueError(f"decode_only: plane {i} contains values outside {{-1, +1}}")
        planes.append(arr)
    batch = planes[0].shape[0]
    bottleneck = cfg.bottleneck_size
    dec_state = model.initial_decoder_state(batch)
    preds = []
    for t, plane in enumerate(planes):
        bits = ad.constant(plane if not cfg.is_conv else
                           plane.reshape(batch, -1, bottleneck, bottleneck))
        d, dec_state = model.decoder_for(t).forward(bits, dec_state)
        pred = d.data.reshape(batch, cfg.channels, cfg.patch_size, cfg.patch_size) \
            if not cfg.is_conv else d.data
        preds.append(pred)
    return _combine_predictions(cfg, preds)


def stage_bits_flat(output: StageOutput) -> np.ndarray:
    """Stage bits as (batch, bits_per_iteration), row-major over channels."""
    bits = output.bits.data
    if bits.ndim == 1:
        return bits[None]
    return bits.reshape(bits.shape[0], -1)
