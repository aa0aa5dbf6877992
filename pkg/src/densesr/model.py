"""The dense super-resolution network and its binary checkpoint format.

Layout, in order::

    conv(1 -> low0) + relu -> conv(low0 -> low1) + relu
    -> dense block x num_blocks            (trunk channels in and out)
    -> [conv(trunk -> 4*trunk) -> pixel_shuffle(2) -> relu] x log2(scale)
    -> conv(trunk -> 1) -> sigmoid

Blocks are chained directly; there is no global residual path.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CheckpointError,
    ConfigError,
    ShapeError,
    TruncatedRecordError,
    VersionMismatchError,
    WeightShapeMismatchError,
)
from .ops import Conv2dLayer, DenseBlock, DenseBlockConfig, pixel_shuffle
from .tensor import DEFAULT_DTYPE, Tensor, no_grad, relu, sigmoid

SUPPORTED_SCALES = (1, 2, 4, 8, 16)


@dataclass(frozen=True)
class NetworkConfig:
    scale: int = 4
    num_blocks: int = 12
    m: int = 8
    k: int = 16
    low_feat_channels: tuple[int, int] = (64, 128)
    trunk_channels: int = 128

    def __post_init__(self):
        object.__setattr__(self, "low_feat_channels", tuple(int(c) for c in self.low_feat_channels))
        if self.scale not in SUPPORTED_SCALES:
            raise ConfigError(f"scale must be a power of two, got {self.scale}")
        if self.num_blocks < 1 or self.m < 1 or self.k < 1:
            raise ConfigError("num_blocks, m and k must be >= 1")
        if len(self.low_feat_channels) != 2 or min(self.low_feat_channels) < 1:
            raise ConfigError(f"low_feat_channels must be two positive counts, got {self.low_feat_channels}")
        if self.trunk_channels != self.m * self.k:
            raise ConfigError(f"trunk_channels ({self.trunk_channels}) must equal m*k ({self.m * self.k})")
        if self.low_feat_channels[1] != self.trunk_channels:
            raise ConfigError("second low-level layer must produce trunk_channels feature maps")

    @property
    def num_upsample_stages(self) -> int:
        return self.scale.bit_length() - 1

    @classmethod
    def full(cls, scale: int = 4) -> NetworkConfig:
        return cls(scale=scale)

    @classmethod
    def small(cls, scale: int = 2) -> NetworkConfig:
        return cls(scale=scale, num_blocks=3, m=4, k=8, low_feat_channels=(16, 32), trunk_channels=32)

    @classmethod
    def tiny(cls, scale: int = 2) -> NetworkConfig:
        return cls(scale=scale, num_blocks=2, m=2, k=4, low_feat_channels=(4, 8), trunk_channels=8)

    @classmethod
    def preset(cls, name: str, scale: int) -> NetworkConfig:
        try:
            factory = {"full": cls.full, "small": cls.small, "tiny": cls.tiny}[name]
        except KeyError:
            raise ConfigError(f"unknown model preset {name!r}") from None
        return factory(scale)


class Network:
    """Dense-block super-resolution network. Call it on ``[1,h,w]`` or ``[N,1,h,w]``."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c0, c1 = cfg.low_feat_channels
        trunk = cfg.trunk_channels
        self.low = [Conv2dLayer(1, c0, rng, dtype), Conv2dLayer(c0, c1, rng, dtype)]
        self.blocks = [DenseBlock(DenseBlockConfig(cfg.m, cfg.k, trunk), rng, dtype) for _ in range(cfg.num_blocks)]
        self.up = [Conv2dLayer(trunk, trunk * 4, rng, dtype) for _ in range(cfg.num_upsample_stages)]
        self.integrate = Conv2dLayer(trunk, 1, rng, dtype)

    def __call__(self, x) -> Tensor:
        return self.forward(x)

    def forward(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim not in (3, 4) or x.shape[-3] != 1:
            raise ShapeError(f"network input must be [1,h,w] or [N,1,h,w], got {x.shape}")
        h = x
        for layer in self.low:
            h = relu(layer(h))
        for block in self.blocks:
            h = block(h)
        for layer in self.up:
            h = relu(pixel_shuffle(layer(h), 2))
        return sigmoid(self.integrate(h))

    def predict(self, lr: np.ndarray) -> np.ndarray:
        """Inference on a raw ``[h,w]``, ``[1,h,w]`` or ``[N,1,h,w]`` array; no graph is kept."""
        arr = np.asarray(lr, dtype=self.dtype)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[None]
        with no_grad():
            out = self.forward(Tensor(arr)).data
        return out[0] if squeeze else out

    @property
    def dtype(self):
        return self.integrate.weight.dtype

    def conv_layers(self) -> list[tuple[str, Conv2dLayer]]:
        layers = [(f"low.{i}", layer) for i, layer in enumerate(self.low)]
        for b, block in enumerate(self.blocks):
            layers += [(f"blocks.{b}.{i}", layer) for i, layer in enumerate(block.layers)]
        layers += [(f"up.{i}", layer) for i, layer in enumerate(self.up)]
        layers.append(("integrate", self.integrate))
        return layers

    def named_parameters(self) -> OrderedDict[str, Tensor]:
        params = OrderedDict()
        for name, layer in self.conv_layers():
            params[f"{name}.weight"] = layer.weight
            params[f"{name}.bias"] = layer.bias
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(tensors)
        if missing:
            raise WeightShapeMismatchError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
        for name, p in params.items():
            value = np.asarray(tensors[name])
            if value.shape != p.shape:
                raise WeightShapeMismatchError(f"{name}: checkpoint shape {value.shape}, network expects {p.shape}")
            p.data = value.astype(p.dtype).copy()

    def astype(self, dtype) -> Network:
        """Copy of this network with parameters cast to ``dtype``."""
        clone = Network.__new__(Network)
        clone.cfg = self.cfg
        clone.low = [_cast_layer(layer, dtype) for layer in self.low]
        clone.blocks = []
        for block in self.blocks:
            nb = DenseBlock.__new__(DenseBlock)
            nb.cfg = block.cfg
            nb.layers = [_cast_layer(layer, dtype) for layer in block.layers]
            clone.blocks.append(nb)
        clone.up = [_cast_layer(layer, dtype) for layer in self.up]
        clone.integrate = _cast_layer(self.integrate, dtype)
        return clone


def _cast_layer(layer: Conv2dLayer, dtype) -> Conv2dLayer:
    new = Conv2dLayer.__new__(Conv2dLayer)
    new.in_channels, new.out_channels = layer.in_channels, layer.out_channels
    new.weight = Tensor(layer.weight.data.astype(dtype), requires_grad=True)
    new.bias = Tensor(layer.bias.data.astype(dtype), requires_grad=True)
    return new


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> Network:
    return Network(cfg, seed, dtype)


# -- checkpoint format ------------------------------------------------------
#
#   magic     4 bytes  b"DSRN"
#   version   u32
#   config    7 x i32  scale, num_blocks, m, k, low0, low1, trunk
#   epoch     u32
#   has_opt   u8, then u64 step count when set
#   n_tensors u32
#   records   u16 name length, utf-8 name, u8 rank, rank x u32 extents, f32 data
#
# Everything little-endian. Optimizer moments are stored as tensors named
# "adam.m.<param>" and "adam.v.<param>".

MAGIC = b"DSRN"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    tensors: "OrderedDict[str, np.ndarray]"
    epoch: int = 0
    step: int | None = None
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def network(self) -> Network:
        net = Network(self.config, seed=0)
        net.load_state(self.tensors)
        return net


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    records = list(ckpt.tensors.items())
    for name, (m, v) in ckpt.moments.items():
        records += [(f"adam.m.{name}", m), (f"adam.v.{name}", v)]
    names = [n for n, _ in records]
    if len(set(names)) != len(names):
        raise CheckpointError("tensor names must be unique")
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<7i", cfg.scale, cfg.num_blocks, cfg.m, cfg.k, *cfg.low_feat_channels, cfg.trunk_channels))
    out.append(struct.pack("<I", ckpt.epoch))
    if ckpt.step is None:
        out.append(struct.pack("<B", 0))
    else:
        out.append(struct.pack("<BQ", 1, ckpt.step))
    out.append(struct.pack("<I", len(records)))
    out += [_pack_tensor(n, a) for n, a in records]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedRecordError(f"file ends inside {what} (offset {self.pos}, need {n} bytes)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads version {VERSION}")
    scale, nb, m, k, c0, c1, trunk = r.unpack("<7i", "config block")
    try:
        cfg = NetworkConfig(scale=scale, num_blocks=nb, m=m, k=k, low_feat_channels=(c0, c1), trunk_channels=trunk)
    except ConfigError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    (epoch,) = r.unpack("<I", "epoch")
    (has_opt,) = r.unpack("<B", "optimizer flag")
    step = r.unpack("<Q", "step count")[0] if has_opt else None
    (count,) = r.unpack("<I", "tensor count")

    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor record")
        name = r.take(name_len, "tensor name").decode("utf-8")
        (rank,) = r.unpack("<B", f"tensor {name}")
        shape = r.unpack(f"<{rank}I", f"tensor {name} extents")
        n = int(np.prod(shape)) if rank else 1
        raw = r.take(4 * n, f"tensor {name} data")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last tensor record")

    moments = {}
    for name in [n for n in tensors if n.startswith("adam.m.")]:
        pname = name[len("adam.m.") :]
        moments[pname] = (tensors.pop(name), tensors.pop(f"adam.v.{pname}"))
    ckpt = Checkpoint(cfg, tensors, epoch, step, moments)
    _validate_shapes(ckpt)
    return ckpt


def _validate_shapes(ckpt: Checkpoint) -> None:
    expected = parameter_shapes(ckpt.config)
    got = {name: a.shape for name, a in ckpt.tensors.items()}
    if set(expected) != set(got):
        extra, missing = set(got) - set(expected), set(expected) - set(got)
        raise WeightShapeMismatchError(f"tensor set disagrees with config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if got[name] != shape:
            raise WeightShapeMismatchError(f"{name}: stored {got[name]}, config implies {shape}")
    for name, (m, v) in ckpt.moments.items():
        if name not in expected or m.shape != expected[name] or v.shape != expected[name]:
            raise WeightShapeMismatchError(f"optimizer moments for {name} do not match its parameter")


def parameter_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, derived from the config alone."""
    c0, c1 = cfg.low_feat_channels
    trunk = cfg.trunk_channels
    convs = [("low.0", 1, c0), ("low.1", c0, c1)]
    for b in range(cfg.num_blocks):
        convs += [(f"blocks.{b}.{i}", trunk + i * cfg.k, cfg.k) for i in range(cfg.m)]
    convs += [(f"up.{i}", trunk, 4 * trunk) for i in range(cfg.num_upsample_stages)]
    convs.append(("integrate", trunk, 1))
    shapes = {}
    for name, cin, cout in convs:
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
    return shapes


def save_checkpoint(net: Network, path, epoch: int = 0, optimizer=None) -> None:
    tensors = OrderedDict((n, p.data) for n, p in net.named_parameters().items())
    step, moments = None, {}
    if optimizer is not None:
        step = optimizer.t
        moments = optimizer.moments_by_name(net)
    data = encode_checkpoint(Checkpoint(net.cfg, tensors, epoch, step, moments))
    Path(path).write_bytes(data)


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path) -> Network:
    return read_checkpoint(path).network()


def config_dict(cfg: NetworkConfig) -> dict:
    d = asdict(cfg)
    d["low_feat_channels"] = list(cfg.low_feat_channels)
    return d
