"""LSTM cell variants: fully-connected, convolutional, deconvolutional.

All three share the same gate math.  The 4n-wide pre-activation is split
in gate order (i, f, o, g), squashed by (sigmoid, sigmoid, sigmoid, tanh),
then

    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)

They differ only in how the pre-activation is formed: a dense affine map
of concat(x, h_prev) for the fully-connected cell, or a strided (de)conv
of the input plus a stride-1 convolution of the recurrent state.  The
recurrent term never changes spatial size.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConvSpec, Tensor


class LstmState:
    """Per-layer (hidden, cell) tensors for one encoding session."""

    def __init__(self, pairs):
        self.layers: list[tuple[Tensor, Tensor]] = list(pairs)

    @classmethod
    def zeros(cls, shapes):
        """shapes: one (h-shape) per layer; h and c share it."""
        return cls((ad.constant(np.zeros(s)), ad.constant(np.zeros(s))) for s in shapes)

    def reset(self) -> "LstmState":
        """Fresh all-zero state with the same shapes (idempotent)."""
        return LstmState.zeros([h.data.shape for h, _ in self.layers])


def reset_state(state: LstmState) -> LstmState:
    return state.reset()


def _gate_block(z4: Tensor, c_prev: Tensor, axis: int):
    i, f, o, g = ad.split(z4, 4, axis=axis)
    i, f, o, g = ad.sigmoid(i), ad.sigmoid(f), ad.sigmoid(o), ad.tanh(g)
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, g))
    h = ad.mul(o, ad.tanh(c))
    return h, c


class FcLstmCell:
    """Dense LSTM: one affine map of concat(x, h_prev) to 4n units."""

    def __init__(self, w: Tensor, b: Tensor, units: int):
        if w.data.shape[0] != 4 * units or b.data.shape != (4 * units,):
            raise ValueError(f"FcLstmCell: weight {w.data.shape} / bias {b.data.shape} "
                             f"inconsistent with {units} units")
        self.w = w
        self.b = b
        self.units = units
        self.input_dim = w.data.shape[1] - units

    def parameters(self):
        return [self.w, self.b]

    def state_shape(self, batch=None):
        return (self.units,) if batch is None else (batch, self.units)

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor):
        if x.data.shape[-1] != self.input_dim:
            raise ValueError(f"FcLstmCell: input {x.data.shape} vs expected width {self.input_dim}")
        z = ad.affine(self.w, ad.concat(x, h_prev, axis=-1), self.b)
        return _gate_block(z, c_prev, axis=-1)


class ConvLstmCell:
    """Convolutional LSTM: strided input conv + stride-1 recurrent conv."""

    def __init__(self, w_in: Tensor, w_rec: Tensor, b: Tensor, features: int, spec_in: ConvSpec):
        if spec_in.out_channels != 4 * features:
            raise ValueError(f"ConvLstmCell: input conv emits {spec_in.out_channels} channels, "
                             f"need 4*{features}")
        if w_rec.data.shape[0] != 4 * features or w_rec.data.shape[1] != features:
            raise ValueError(f"ConvLstmCell: recurrent weight {w_rec.data.shape} vs {features} features")
        self.w_in = w_in
        self.w_rec = w_rec
        self.b = b
        self.features = features
        self.spec_in = spec_in
        rk = w_rec.data.shape[2]
        self.spec_rec = ConvSpec(rk, rk, features, 4 * features, stride=1,
                                 pad_h=(rk - 1) // 2, pad_w=(rk - 1) // 2)

    def parameters(self):
        return [self.w_in, self.w_rec, self.b]

    def _input_term(self, x: Tensor) -> Tensor:
        return ad.conv2d(self.w_in, x, self.spec_in)

    def step(self, x: Tensor, h_prev: Tensor, c_prev: Tensor):
        zx = self._input_term(x)
        if zx.data.shape[-2:] != h_prev.data.shape[-2:]:
            raise ValueError(f"ConvLstmCell: input term spatial {zx.data.shape[-2:]} vs "
                             f"state {h_prev.data.shape[-2:]}")
        zh = ad.conv2d(self.w_rec, h_prev, self.spec_rec)
        z = ad.channel_bias(ad.add(zx, zh), self.b)
        return _gate_block(z, c_prev, axis=-3)


class DeconvLstmCell(ConvLstmCell):
    """As ConvLstmCell, but the input term is a strided deconvolution."""

    def _input_term(self, x: Tensor) -> Tensor:
        return ad.deconv2d(self.w_in, x, self.spec_in)
