"""Layer primitives: 3x3 convolution, channel concat, pixel shuffle, dense block.

All image tensors are channel-major, either ``[C, H, W]`` or batched
``[N, C, H, W]``; the channel axis is always ``-3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, grad_enabled, make_result, relu

KERNEL = 3
PAD = 1


def _as_batched(x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return x
    if x.ndim == 3:
        return x[None]
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


# Convolution works on a flattened, zero-padded buffer ``[C, N*(H+2)*(W+2) + slack]``.
# In that layout every kernel tap is a contiguous slice, so no patch matrix is
# ever built. Outputs land on the padded grid; the two rightmost columns and
# the bottom two rows of each image are junk and get cropped.
#
# Two equivalent evaluation orders are used. With at least as many output as
# input channels, each tap is one matmul over a shifted slice of the input.
# With fewer outputs (dense-block layers, the final layer) or a near-empty
# input (the first layer), the taps are stacked along the output axis so the
# input is read by a single GEMM and only the narrow results get shifted.

TAPS = [(dy, dx) for dy in range(KERNEL) for dx in range(KERNEL)]


def _geometry(shape) -> tuple[int, int]:
    n, _, h, w = shape
    pw = w + 2 * PAD
    return pw, n * (h + 2 * PAD) * pw


def _pad_flat(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    pw, m = _geometry(x.shape)
    buf = np.zeros((c, m + 2 * pw + 2), dtype=x.dtype)
    buf[:, :m].reshape(c, n, h + 2 * PAD, pw)[:, :, PAD:-PAD, PAD:-PAD] = x.transpose(1, 0, 2, 3)
    return buf


def _stack_taps(o: int, c: int) -> bool:
    return o < c or c < 4


def _conv_flat(xp: np.ndarray, weight: np.ndarray, bias: np.ndarray, shape) -> np.ndarray:
    n, c, h, w = shape
    pw, m = _geometry(shape)
    o = weight.shape[0]
    if _stack_taps(o, c):
        y = (weight.transpose(2, 3, 0, 1).reshape(KERNEL * KERNEL * o, c) @ xp).reshape(KERNEL * KERNEL, o, -1)
        acc = y[0, :, :m].copy()
        for t, (dy, dx) in enumerate(TAPS[1:], start=1):
            off = dy * pw + dx
            acc += y[t, :, off : off + m]
    else:
        taps = np.ascontiguousarray(weight.transpose(2, 3, 0, 1))
        acc = np.empty((o, m), dtype=xp.dtype)
        tmp = np.empty_like(acc)
        for t, (dy, dx) in enumerate(TAPS):
            off = dy * pw + dx
            np.matmul(taps[dy, dx], xp[:, off : off + m], out=tmp if t else acc)
            if t:
                acc += tmp
    acc += bias[:, None]
    return acc.reshape(o, n, h + 2 * PAD, pw)[:, :, :h, :w].transpose(1, 0, 2, 3)


def conv2d_backward(g, xp, x_shape, weight):
    """Gradients of a 3x3/pad-1 convolution w.r.t. input, weight and bias.

    ``xp`` is the padded flat input buffer kept from the forward pass.
    """
    n, c, h, w = x_shape
    pw, m = _geometry(x_shape)
    o = weight.shape[0]
    gp = np.zeros((o, n, h + 2 * PAD, pw), dtype=g.dtype)
    gp[:, :, :h, :w] = g.transpose(1, 0, 2, 3)
    gp = gp.reshape(o, m)
    g_b = gp.sum(axis=1)
    if _stack_taps(o, c):
        # shifted[t, :, p] = gp[:, p - off_t], so both products become single GEMMs
        shifted = np.zeros((KERNEL * KERNEL, o, xp.shape[1]), dtype=g.dtype)
        for t, (dy, dx) in enumerate(TAPS):
            off = dy * pw + dx
            shifted[t, :, off : off + m] = gp
        shifted = shifted.reshape(KERNEL * KERNEL * o, -1)
        g_xp = weight.transpose(1, 2, 3, 0).reshape(c, KERNEL * KERNEL * o) @ shifted
        g_w = (shifted @ xp.T).reshape(KERNEL, KERNEL, o, c)
    else:
        taps_t = np.ascontiguousarray(weight.transpose(2, 3, 1, 0))
        g_xp = np.zeros_like(xp)
        g_w = np.empty((KERNEL, KERNEL, o, c), dtype=g.dtype)
        for dy, dx in TAPS:
            off = dy * pw + dx
            g_w[dy, dx] = gp @ xp[:, off : off + m].T
            g_xp[:, off : off + m] += taps_t[dy, dx] @ gp
    g_x = g_xp[:, :m].reshape(c, n, h + 2 * PAD, pw)[:, :, PAD:-PAD, PAD:-PAD].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(g_x), np.ascontiguousarray(g_w.transpose(2, 3, 0, 1)), g_b


# Largest padded buffer (in elements, input plus output) built at once when no
# graph is recorded; bigger inputs are convolved in horizontal bands.
INFERENCE_COLS_LIMIT = 1 << 24


def _conv2d_chunked(xb: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Forward-only convolution over row bands with a one-row halo."""
    n, c, h, w = xb.shape
    o = weight.shape[0]
    rows = max(1, INFERENCE_COLS_LIMIT // ((w + 2) * (c + o)) - 2)
    out = np.empty((n, o, h, w), dtype=xb.dtype)
    for i in range(n):
        for y0 in range(0, h, rows):
            y1 = min(h, y0 + rows)
            lo, hi = max(0, y0 - 1), min(h, y1 + 1)
            band = xb[i : i + 1, :, lo:hi]
            res = _conv_flat(_pad_flat(band), weight, bias, band.shape)
            out[i, :, y0:y1] = res[0, :, y0 - lo : y1 - lo]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 3x3 convolution (cross-correlation) with one pixel of zero padding."""
    unbatched = x.ndim == 3
    xb = _as_batched(x.data)
    n, c, h, w = xb.shape
    if weight.ndim != 4 or weight.shape[2:] != (KERNEL, KERNEL):
        raise ShapeError(f"weight must be [out, in, 3, 3], got {weight.shape}")
    o, cin = weight.shape[:2]
    if c != cin:
        raise ShapeError(f"conv2d: input has {c} channels, layer expects {cin}")
    if bias.shape != (o,):
        raise ShapeError(f"bias must have shape ({o},), got {bias.shape}")

    if not grad_enabled() and n * (h + 2) * (w + 2) * (c + o) > INFERENCE_COLS_LIMIT:
        out = _conv2d_chunked(xb, weight.data, bias.data)
        return make_result(out[0] if unbatched else out, (x, weight, bias), None, "conv2d")

    xp = _pad_flat(xb)
    out = np.ascontiguousarray(_conv_flat(xp, weight.data, bias.data, xb.shape))
    if unbatched:
        out = out[0]

    def _backward(g):
        gb = g[None] if unbatched else g
        g_x, g_w, g_b = conv2d_backward(gb, xp, (n, c, h, w), weight.data)
        if unbatched:
            g_x = g_x[0]
        return g_x, g_w, g_b

    return make_result(out, (x, weight, bias), _backward, "conv2d")


class Conv2dLayer:
    """3x3, stride 1, zero-pad 1 convolution with bias."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        if in_channels < 1 or out_channels < 1:
            raise ConfigError("channel counts must be >= 1")
        self.in_channels = in_channels
        self.out_channels = out_channels
        fan_in = in_channels * KERNEL * KERNEL
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, KERNEL, KERNEL))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @property
    def num_parameters(self) -> int:
        return self.weight.size + self.bias.size

    def __repr__(self) -> str:
        return f"Conv2dLayer({self.in_channels}->{self.out_channels})"


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Stack tensors along the channel axis in list order."""
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[:-3] != ref[:-3] or t.shape[-2:] != ref[-2:]:
            raise ShapeError(f"concat_channels: {t.shape} is not aligned with {ref}")
    if len(xs) == 1:
        return make_result(xs[0].data.copy(), xs, lambda g: (g,), "concat")
    bounds = np.cumsum([0] + [t.shape[-3] for t in xs])
    out = np.concatenate([t.data for t in xs], axis=-3)

    def _backward(g):
        return tuple(g[..., bounds[i] : bounds[i + 1], :, :] for i in range(len(xs)))

    return make_result(out, xs, _backward, "concat")


@dataclass(frozen=True)
class ShuffleSpec:
    r: int
    c: int

    def __post_init__(self):
        if self.r < 1 or self.c < 1:
            raise ConfigError(f"invalid shuffle spec {self}")

    @property
    def in_channels(self) -> int:
        return self.c * self.r * self.r


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    *lead, cr2, h, w = x.shape
    c = cr2 // (r * r)
    nl = len(lead)
    y = x.reshape(*lead, c, r, r, h, w)
    axes = tuple(range(nl)) + (nl, nl + 3, nl + 1, nl + 4, nl + 2)
    return y.transpose(axes).reshape(*lead, c, h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    *lead, c, hr, wr = x.shape
    h, w = hr // r, wr // r
    nl = len(lead)
    y = x.reshape(*lead, c, h, r, w, r)
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 4, nl + 1, nl + 3)
    return y.transpose(axes).reshape(*lead, c * r * r, h, w)


def pixel_shuffle(x: Tensor, spec: ShuffleSpec | int) -> Tensor:
    """``[c*r^2, h, w] -> [c, h*r, w*r]`` with out(ch, i*r+dy, j*r+dx) = x(ch*r^2+dy*r+dx, i, j)."""
    r = spec.r if isinstance(spec, ShuffleSpec) else int(spec)
    if x.ndim < 3:
        raise ShapeError(f"pixel_shuffle needs a channel axis, got shape {x.shape}")
    channels = x.shape[-3]
    if r < 1 or channels % (r * r):
        raise ShapeError(f"pixel_shuffle: {channels} channels not divisible by r^2={r * r}")
    if isinstance(spec, ShuffleSpec) and channels != spec.in_channels:
        raise ShapeError(f"pixel_shuffle: expected {spec.in_channels} channels, got {channels}")
    out = np.ascontiguousarray(_shuffle(x.data, r))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(_unshuffle(g, r)),), "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    if x.ndim < 3 or x.shape[-1] % r or x.shape[-2] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[-2:]} not divisible by {r}")
    out = np.ascontiguousarray(_unshuffle(x.data, r))
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(_shuffle(g, r)),), "pixel_unshuffle")


@dataclass(frozen=True)
class DenseBlockConfig:
    m: int
    k: int
    in_channels: int

    def __post_init__(self):
        if self.m < 1 or self.k < 1 or self.in_channels < 1:
            raise ConfigError(f"dense block needs m, k, in_channels >= 1, got {self}")

    @property
    def out_channels(self) -> int:
        return self.m * self.k

    def layer_in_channels(self, i: int) -> int:
        """Input channel count of layer ``i`` (1-based)."""
        return self.in_channels + (i - 1) * self.k


def dense_block_forward(cfg: DenseBlockConfig, layers: Sequence[Conv2dLayer], x: Tensor) -> Tensor:
    """Each layer sees the block input plus every earlier layer output; the block emits only the layer outputs."""
    if len(layers) != cfg.m:
        raise ShapeError(f"dense block expects {cfg.m} layers, got {len(layers)}")
    for i, layer in enumerate(layers, start=1):
        if layer.in_channels != cfg.layer_in_channels(i) or layer.out_channels != cfg.k:
            raise ShapeError(
                f"dense layer {i} is {layer.in_channels}->{layer.out_channels}, "
                f"expected {cfg.layer_in_channels(i)}->{cfg.k}"
            )
    features = [x]
    outputs = []
    for layer in layers:
        inp = features[0] if len(features) == 1 else concat_channels(features)
        out = relu(layer(inp))
        features.append(out)
        outputs.append(out)
    return outputs[0] if len(outputs) == 1 else concat_channels(outputs)


class DenseBlock:
    def __init__(self, cfg: DenseBlockConfig, rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.layers = [Conv2dLayer(cfg.layer_in_channels(i), cfg.k, rng, dtype) for i in range(1, cfg.m + 1)]
        for i, layer in enumerate(self.layers, start=1):
            assert layer.in_channels == cfg.in_channels + (i - 1) * cfg.k

    def __call__(self, x: Tensor) -> Tensor:
        return dense_block_forward(self.cfg, self.layers, x)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]
