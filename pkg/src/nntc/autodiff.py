"""Minimal dense-tensor reverse-mode autodiff.

Covers exactly the primitives the codec architectures need: affine maps,
tanh/sigmoid, elementwise arithmetic, concat/split/reshape, strided
convolution, zero-inflation, deconvolution, and a sum-of-squares loss.
Values are float64 throughout.  The compute graph is built implicitly:
each Tensor records its parents and a vector-Jacobian closure, and
``backward`` walks the graph once in reverse topological order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A node in the compute graph: float64 values plus backward plumbing."""

    __slots__ = ("data", "grad", "op", "parents", "vjp", "is_param", "name")

    def __init__(self, data, *, op="leaf", parents=(), vjp=None, is_param=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.vjp: Callable[[np.ndarray], tuple] | None = vjp
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape})"


def parameter(data, name=None):
    """A trainable leaf; ``backward`` reports gradients only for these."""
    return Tensor(np.array(data, dtype=np.float64), is_param=True, name=name)


def constant(data):
    """A non-trainable leaf (inputs, targets)."""
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _require_same_shape(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")
    return Tensor(a.data + b.data, op="add", parents=(a, b),
                  vjp=lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "sub")
    return Tensor(a.data - b.data, op="sub", parents=(a, b),
                  vjp=lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    return Tensor(a.data * b.data, op="mul", parents=(a, b),
                  vjp=lambda g: (g * b.data, g * a.data))


def scale(a, s: float):
    a = _as_tensor(a)
    s = float(s)
    return Tensor(a.data * s, op="scale", parents=(a,),
                  vjp=lambda g: (g * s,))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, op="tanh", parents=(a,),
                  vjp=lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return Tensor(out, op="sigmoid", parents=(a,),
                  vjp=lambda g: (g * out * (1.0 - out),))


def concat(a, b, axis=-1):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != b.data.ndim:
        raise ValueError(f"concat: rank mismatch {a.data.shape} vs {b.data.shape}")
    ax = axis % a.data.ndim
    lead_a = a.data.shape[:ax] + a.data.shape[ax + 1:]
    lead_b = b.data.shape[:ax] + b.data.shape[ax + 1:]
    if lead_a != lead_b:
        raise ValueError(f"concat: shape mismatch {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[ax]

    def vjp(g):
        ga, gb = np.split(g, [na], axis=ax)
        return ga, gb

    return Tensor(np.concatenate([a.data, b.data], axis=ax), op="concat",
                  parents=(a, b), vjp=vjp)


def split(a, sections: int, axis=-1):
    """Split into equal sections along an axis; each piece is its own node."""
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    n = a.data.shape[ax]
    if n % sections != 0:
        raise ValueError(f"split: axis size {n} not divisible by {sections}")
    width = n // sections
    pieces = []
    for s in range(sections):
        sl = [slice(None)] * a.data.ndim
        sl[ax] = slice(s * width, (s + 1) * width)
        sl = tuple(sl)

        def vjp(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        pieces.append(Tensor(a.data[sl], op="split", parents=(a,), vjp=vjp))
    return pieces


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return Tensor(a.data.reshape(shape), op="reshape", parents=(a,),
                  vjp=lambda g: (g.reshape(old),))


def affine(w, x, b):
    """w (out, in) @ x (..., in) + b (out,).  Leading axes are batch."""
    w, x, b = _as_tensor(w), _as_tensor(x), _as_tensor(b)
    if w.data.ndim != 2 or b.data.ndim != 1:
        raise ValueError(f"affine: weight must be 2-d and bias 1-d, got {w.data.shape} / {b.data.shape}")
    if w.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"affine: weight rows {w.data.shape} vs bias {b.data.shape}")
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"affine: input {x.data.shape} vs weight {w.data.shape}")
    out = x.data @ w.data.T + b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.data.shape[-1])
        gw = g2.T @ x2
        gx = (g2 @ w.data).reshape(x.data.shape)
        gb = g2.sum(axis=0)
        return gw, gx, gb

    return Tensor(out, op="affine", parents=(w, x, b), vjp=vjp)


def channel_bias(x, b):
    """Add a per-channel bias b (C,) to x (..., C, H, W)."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.data.ndim != 1 or x.data.shape[-3] != b.data.shape[0]:
        raise ValueError(f"channel_bias: input {x.data.shape} vs bias {b.data.shape}")
    out = x.data + b.data[..., :, None, None]

    def vjp(g):
        axes = tuple(i for i in range(g.ndim) if i != g.ndim - 3)
        return g, g.sum(axis=axes)

    return Tensor(out, op="channel_bias", parents=(x, b), vjp=vjp)


def sum_squares(a):
    """Scalar sum of squared entries."""
    a = _as_tensor(a)
    return Tensor(np.sum(a.data * a.data), op="sum_squares", parents=(a,),
                  vjp=lambda g: (2.0 * g * a.data,))


def l2_loss(pred, target, pixel_count: int, step_count: int):
    """Sum of squared errors over all entries, divided by pixel_count*step_count.

    pixel_count counts every stored value of the patch (H*W*channels).
    """
    if pixel_count <= 0 or step_count <= 0:
        raise ValueError(f"l2_loss: counts must be positive, got {pixel_count}, {step_count}")
    pred, target = _as_tensor(pred), _as_tensor(target)
    _require_same_shape(pred, target, "l2_loss")
    return scale(sum_squares(sub(pred, target)), 1.0 / (pixel_count * step_count))


_PRIMITIVES = {
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "concat": concat,
    "affine": affine,
}


def apply_primitive(kind: str, *inputs, **kwargs):
    """Dispatch a primitive by name; used by the gradient sweep in the tests."""
    if kind not in _PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}; known: {sorted(_PRIMITIVES)}")
    return _PRIMITIVES[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a strided convolution.

    Padding is symmetric: pad_h rows above and below, pad_w columns left
    and right.  Output spatial size per axis is
    floor((in + 2*pad - kernel) / stride) + 1 and must be >= 1.
    """

    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad_h: int = 0
    pad_w: int = 0

    def __post_init__(self):
        for field in ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride"):
            if getattr(self, field) < 1:
                raise ValueError(f"ConvSpec: {field} must be positive, got {getattr(self, field)}")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("ConvSpec: padding must be non-negative")

    def out_size(self, h: int, w: int):
        oh = (h + 2 * self.pad_h - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.pad_w - self.kernel_w) // self.stride + 1
        if oh < 1 or ow < 1:
            raise ValueError(
                f"ConvSpec: non-positive output size {oh}x{ow} for input {h}x{w} "
                f"(kernel {self.kernel_h}x{self.kernel_w}, stride {self.stride}, "
                f"pad {self.pad_h}/{self.pad_w})")
        return oh, ow


def _conv_value(x, w, stride, pad_h, pad_w):
    """Strided cross-correlation on raw arrays; x (B,C,H,W), w (O,C,kh,kw)."""
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    bsz, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * oh * ow, c * kh * kw)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.reshape(bsz, oh, ow, w.shape[0]).transpose(0, 3, 1, 2)


def _conv_grad_w(g, x, w_shape, stride, pad_h, pad_w):
    oc, ic, kh, kw = w_shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    bsz, c, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * oh * ow, c * kh * kw)
    g2 = g.transpose(0, 2, 3, 1).reshape(bsz * oh * ow, oc)
    return (g2.T @ cols).reshape(oc, ic, kh, kw)


def _conv_grad_x(g, w, x_shape, stride, pad_h, pad_w):
    bsz, c, h, w_in = x_shape
    kh, kw = w.shape[2], w.shape[3]
    full_h = h + 2 * pad_h - kh + 1
    full_w = w_in + 2 * pad_w - kw + 1
    gd = np.zeros((bsz, w.shape[0], full_h, full_w))
    gd[:, :, ::stride, ::stride] = g
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gxp = _conv_value(gd, wt, 1, kh - 1, kw - 1)
    return gxp[:, :, pad_h:pad_h + h, pad_w:pad_w + w_in]


def _with_batch(data):
    """View (C,H,W) as (1,C,H,W); report whether a batch axis was added."""
    if data.ndim == 3:
        return data[None], True
    if data.ndim == 4:
        return data, False
    raise ValueError(f"expected 3-d (C,H,W) or 4-d (B,C,H,W) input, got shape {data.shape}")


def conv2d(weights, x, spec: ConvSpec):
    """Strided convolution: stride-1 cross-correlation then subsampling.

    Only the subsampled positions are evaluated, which is elementwise
    identical to computing the full stride-1 output and striding it.
    """
    weights, x = _as_tensor(weights), _as_tensor(x)
    if weights.data.shape != (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w):
        raise ValueError(f"conv2d: weights {weights.data.shape} do not match spec "
                         f"{(spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)}")
    xb, squeezed = _with_batch(x.data)
    if xb.shape[1] != spec.in_channels:
        raise ValueError(f"conv2d: input {x.data.shape} vs spec in_channels {spec.in_channels}")
    spec.out_size(xb.shape[2], xb.shape[3])
    out = _conv_value(xb, weights.data, spec.stride, spec.pad_h, spec.pad_w)

    def vjp(g):
        gb = g[None] if squeezed else g
        gw = _conv_grad_w(gb, xb, weights.data.shape, spec.stride, spec.pad_h, spec.pad_w)
        gx = _conv_grad_x(gb, weights.data, xb.shape, spec.stride, spec.pad_h, spec.pad_w)
        return gw, gx[0] if squeezed else gx

    return Tensor(out[0] if squeezed else out, op="conv2d", parents=(weights, x), vjp=vjp)


def inflate(x, k: int):
    """Zero insertion: sample (i,j) lands at (k*i, k*j) in a (kH, kW) grid."""
    if k < 1:
        raise ValueError(f"inflate: k must be >= 1, got {k}")
    x = _as_tensor(x)
    xb, squeezed = _with_batch(x.data)
    bsz, c, h, w = xb.shape
    out = np.zeros((bsz, c, k * h, k * w))
    out[:, :, ::k, ::k] = xb

    def vjp(g):
        gb = g[None] if squeezed else g
        gx = gb[:, :, ::k, ::k]
        return (gx[0] if squeezed else gx,)

    return Tensor(out[0] if squeezed else out, op="inflate", parents=(x,), vjp=vjp)


def deconv2d(weights, x, spec: ConvSpec):
    """Deconvolution: zero-inflate by the stride, then stride-1 convolution."""
    inflated = inflate(x, spec.stride)
    spec1 = ConvSpec(spec.kernel_h, spec.kernel_w, spec.in_channels, spec.out_channels,
                     stride=1, pad_h=spec.pad_h, pad_w=spec.pad_w)
    return conv2d(weights, inflated, spec1)


def flip_transpose_kernel(w: np.ndarray) -> np.ndarray:
    """Spatially flip a kernel and swap its channel axes (conv adjoint helper)."""
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, seed_grad=None):
    """Reverse-mode pass from ``loss``; returns {parameter: gradient array}.

    Without an explicit seed the loss must be scalar.  Each parameter's
    ``.grad`` is replaced (not accumulated) by this call; fan-out inside
    the graph still accumulates additively, as it must.
    """
    if seed_grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
        seed_grad = np.ones_like(loss.data)
    else:
        seed_grad = np.asarray(seed_grad, dtype=np.float64)
        if seed_grad.shape != loss.data.shape:
            raise ValueError(f"backward: seed gradient {seed_grad.shape} vs loss {loss.data.shape}")

    grads: dict[int, np.ndarray] = {id(loss): seed_grad}
    order = _toposort(loss)
    result: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_param:
            node.grad = g
            result[id(node)] = (node, g)
        if node.vjp is None:
            continue
        for p, pg in zip(node.parents, node.vjp(g)):
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return {t: g for t, g in result.values()}


def finite_diff_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                      h: float = 1e-5) -> float:
    """Worst relative error between analytic gradients and central differences.

    ``build_loss`` re-runs the forward pass from the live parameter values,
    so perturbing a parameter element and calling it again yields the
    perturbed loss.  Relative error uses max(|analytic|, |numeric|, 1e-8)
    as denominator.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: h must be positive, got {h}")
    grads = backward(build_loss())
    worst = 0.0
    for p in params:
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        aflat = analytic.reshape(-1)
        for i in range(p.data.size):
            keep = p.data.flat[i]
            p.data.flat[i] = keep + h
            up = float(build_loss().data)
            p.data.flat[i] = keep - h
            down = float(build_loss().data)
            p.data.flat[i] = keep
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
    return worst
