"""CNN adapters for conv blocks, Houlsby bottleneck adapters, and the layer weighted-sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, channel_norm
from .tensor import ConfigError, DimensionError, Tensor

PLACEMENTS = ("ff", "attn+ff")


@dataclass(frozen=True)
class CnnAdapterSpec:
    host_block_index: int
    compression_n: int = 1
    kernel: int | None = None
    stride: int | None = None
    alpha: float = 1.0

    def resolve(self, config: BackboneConfig) -> "CnnAdapterSpec":
        """Fill kernel/stride from the host block and check channel divisibility."""
        blocks = config.conv_blocks
        if not 0 <= self.host_block_index < len(blocks):
            raise ConfigError(f"host block {self.host_block_index} out of range for {len(blocks)} blocks")
        host = blocks[self.host_block_index]
        if self.compression_n < 1 or host.out_channels % self.compression_n:
            raise ConfigError(
                f"compression {self.compression_n} does not divide {host.out_channels} output channels")
        return CnnAdapterSpec(self.host_block_index, self.compression_n,
                              self.kernel or host.kernel, self.stride or host.stride, self.alpha)


class CnnAdapter:
    """``GELU(LN(conv1d(x)))`` on ``C_out / n`` channels, tiled ``n`` times to ``C_out``."""

    def __init__(self, spec: CnnAdapterSpec, config: BackboneConfig, prefix: str = ""):
        self.spec = spec.resolve(config)
        host = config.conv_blocks[self.spec.host_block_index]
        self.out_channels = host.out_channels
        narrow = host.out_channels // self.spec.compression_n
        prefix = prefix or f"cnn.{self.spec.host_block_index}."
        dt = T.get_dtype()
        self.params = {
            prefix + "conv.w": Tensor(np.zeros((narrow, host.in_channels, self.spec.kernel), dt), True, prefix + "conv.w"),
            prefix + "conv.b": Tensor(np.zeros(narrow, dt), True, prefix + "conv.b"),
            prefix + "ln.g": Tensor(np.ones(narrow, dt), True, prefix + "ln.g"),
            prefix + "ln.b": Tensor(np.zeros(narrow, dt), True, prefix + "ln.b"),
        }
        self._prefix = prefix

    @property
    def alpha(self) -> float:
        return self.spec.alpha

    def __getitem__(self, leaf: str) -> Tensor:
        return self.params[self._prefix + leaf]

    def narrow(self, x: Tensor) -> Tensor:
        y = T.conv1d(x, self["conv.w"], self["conv.b"], self.spec.stride)
        return T.gelu(channel_norm(y, self["ln.g"], self["ln.b"]))

    def __call__(self, x: Tensor) -> Tensor:
        return compress_concat(self.narrow(x), self.spec.compression_n)


def cnn_adapter_forward(x_in: Tensor, adapter: CnnAdapter) -> Tensor:
    return adapter(x_in)


def compress_concat(y: Tensor, n: int) -> Tensor:
    """Concatenate ``n`` copies of ``[..., C/n, L]`` on the channel axis."""
    if n < 1:
        raise ConfigError(f"compression factor must be >= 1, got {n}")
    return T.tile_channels(y, n, axis=-2)


@dataclass(frozen=True)
class HoulsbySpec:
    bottleneck: int = 32
    placement: str = "ff"

    def __post_init__(self):
        if self.bottleneck < 1:
            raise ConfigError(f"bottleneck must be >= 1, got {self.bottleneck}")
        if self.placement not in PLACEMENTS:
            raise ConfigError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")


class HoulsbyAdapter:
    def __init__(self, hidden: int, bottleneck: int, prefix: str):
        dt = T.get_dtype()
        self.prefix = prefix
        self.params = {
            prefix + "down.w": Tensor(np.zeros((hidden, bottleneck), dt), True, prefix + "down.w"),
            prefix + "down.b": Tensor(np.zeros(bottleneck, dt), True, prefix + "down.b"),
            prefix + "up.w": Tensor(np.zeros((bottleneck, hidden), dt), True, prefix + "up.w"),
            prefix + "up.b": Tensor(np.zeros(hidden, dt), True, prefix + "up.b"),
        }

    def __getitem__(self, leaf: str) -> Tensor:
        return self.params[self.prefix + leaf]

    def __call__(self, h: Tensor) -> Tensor:
        z = T.gelu(T.linear(h, self["down.w"], self["down.b"]))
        return T.add(h, T.linear(z, self["up.w"], self["up.b"]))


def houlsby_forward(h: Tensor, adapter: HoulsbyAdapter) -> Tensor:
    return adapter(h)


@dataclass
class HoulsbySlot:
    """Adapters living inside one transformer layer."""
    ff: HoulsbyAdapter | None = None
    attn: HoulsbyAdapter | None = None

    def adapters(self):
        return [a for a in (self.attn, self.ff) if a is not None]


def make_houlsby(layer: int, hidden: int, spec: HoulsbySpec) -> HoulsbySlot:
    slot = HoulsbySlot(ff=HoulsbyAdapter(hidden, spec.bottleneck, f"houlsby.{layer}.ff."))
    if spec.placement == "attn+ff":
        slot.attn = HoulsbyAdapter(hidden, spec.bottleneck, f"houlsby.{layer}.attn.")
    return slot


class WeightedSum:
    def __init__(self, n_taps: int):
        if n_taps < 1:
            raise ConfigError("weighted sum needs at least one layer")
        self.weights = Tensor(np.zeros(n_taps, T.get_dtype()), True, "wsum.w")
        self.params = {"wsum.w": self.weights}

    def __call__(self, layers: Sequence[Tensor]) -> Tensor:
        return weighted_sum(layers, self.weights)


def weighted_sum(layer_outputs: Sequence[Tensor], weights: Tensor) -> Tensor:
    """``sum_k softmax(w)_k * layer_k``."""
    if len(layer_outputs) != weights.size:
        raise ConfigError(f"{weights.size} weights for {len(layer_outputs)} layers")
    shape = layer_outputs[0].shape
    if any(l.shape != shape for l in layer_outputs):
        raise DimensionError("weighted_sum layers differ in shape")
    s = T.softmax(weights)
    out = None
    for k, layer in enumerate(layer_outputs):
        term = T.mul(layer, T.getitem(s, k))
        out = term if out is None else T.add(out, term)
    return out


def init_near_identity(adapter, seed: int | np.random.Generator = 0, scale: float = 1e-2) -> None:
    """Reset adapter params so the host network's function is unchanged.

    Houlsby: small normal down-projection, zero up-projection.
    CNN: zero conv weight and bias, unit LN gain, zero shift.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if isinstance(adapter, HoulsbySlot):
        for a in adapter.adapters():
            init_near_identity(a, rng, scale)
    elif isinstance(adapter, HoulsbyAdapter):
        w = adapter["down.w"]
        w.data[...] = rng.standard_normal(w.shape) * scale
        adapter["down.b"].data[...] = 0.0
        adapter["up.w"].data[...] = 0.0
        adapter["up.b"].data[...] = 0.0
    elif isinstance(adapter, CnnAdapter):
        adapter["conv.w"].data[...] = 0.0
        adapter["conv.b"].data[...] = 0.0
        adapter["ln.g"].data[...] = 1.0
        adapter["ln.b"].data[...] = 0.0
    elif isinstance(adapter, WeightedSum):
        adapter.weights.data[...] = 0.0
    else:
        raise TypeError(f"not an adapter: {type(adapter).__name__}")


def param_role(name: str) -> str:
    leaf = name.rsplit(".", 2)
    if name.startswith("wsum"):
        return "mix"
    if ".ln." in name:
        return "norm"
    return "weight" if leaf[-1] == "w" else "bias"
