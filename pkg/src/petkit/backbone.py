"""HuBERT-shaped backbone: strided conv feature extractor plus a pre-LN transformer encoder."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ConfigError, EmptyOutputError, Tensor


@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    has_norm: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"conv block {name} must be positive, got {getattr(self, name)}")


@dataclass(frozen=True)
class BackboneConfig:
    conv_blocks: tuple[ConvBlockSpec, ...]
    n_layers: int
    hidden: int
    n_heads: int
    ff_dim: int

    def __post_init__(self):
        object.__setattr__(self, "conv_blocks", tuple(self.conv_blocks))
        if not self.conv_blocks:
            raise ConfigError("backbone needs at least one conv block")
        for i, (a, b) in enumerate(zip(self.conv_blocks, self.conv_blocks[1:])):
            if a.out_channels != b.in_channels:
                raise ConfigError(
                    f"conv block {i} emits {a.out_channels} channels but block {i + 1} expects {b.in_channels}")
        if min(self.n_layers, self.hidden, self.n_heads, self.ff_dim) < 1:
            raise ConfigError("n_layers, hidden, n_heads and ff_dim must be positive")
        if self.hidden % self.n_heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")

    @property
    def conv_channels(self) -> int:
        return self.conv_blocks[-1].out_channels


def _blocks(*triples, c_in=1, channels=512):
    out = []
    for k, s in triples:
        out.append(ConvBlockSpec(c_in, channels, k, s))
        c_in = channels
    return tuple(out)


PRESETS: dict[str, BackboneConfig] = {
    "hubert-base-shape": BackboneConfig(
        conv_blocks=_blocks((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2), channels=512),
        n_layers=12, hidden=768, n_heads=12, ff_dim=3072),
    "mini": BackboneConfig(
        conv_blocks=_blocks((10, 5), (3, 2), (2, 2), channels=16),
        n_layers=2, hidden=32, n_heads=4, ff_dim=64),
}


def get_preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown backbone preset {name!r}; known: {sorted(PRESETS)}") from None


def output_length(conv_blocks: Sequence[ConvBlockSpec], length: int) -> int:
    """Frame count after chaining valid convolutions; 0 if any stage underflows."""
    for b in conv_blocks:
        if length < b.kernel:
            return 0
        length = (length - b.kernel) // b.stride + 1
    return length


def param_shapes(config: BackboneConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every backbone parameter."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i, b in enumerate(config.conv_blocks):
        shapes[f"fe.{i}.conv.w"] = (b.out_channels, b.in_channels, b.kernel)
        if b.has_norm:
            shapes[f"fe.{i}.ln.g"] = (b.out_channels,)
            shapes[f"fe.{i}.ln.b"] = (b.out_channels,)
    c, h, f = config.conv_channels, config.hidden, config.ff_dim
    shapes["proj.ln.g"] = (c,)
    shapes["proj.ln.b"] = (c,)
    shapes["proj.w"] = (c, h)
    shapes["proj.b"] = (h,)
    for j in range(config.n_layers):
        p = f"enc.{j}."
        shapes[p + "ln1.g"] = (h,)
        shapes[p + "ln1.b"] = (h,)
        for m in "qkvo":
            shapes[p + f"attn.{m}_w"] = (h, h)
            shapes[p + f"attn.{m}_b"] = (h,)
        shapes[p + "ln2.g"] = (h,)
        shapes[p + "ln2.b"] = (h,)
        shapes[p + "ff1.w"] = (h, f)
        shapes[p + "ff1.b"] = (f,)
        shapes[p + "ff2.w"] = (f, h)
        shapes[p + "ff2.b"] = (h,)
    return shapes


def param_role(name: str) -> str:
    """``weight`` for conv/linear matrices, ``bias`` or ``norm`` otherwise."""
    leaf = name.rsplit(".", 1)[-1]
    if ".ln" in name or name.startswith("proj.ln"):
        return "norm"
    if leaf in ("w",) or leaf.endswith("_w"):
        return "weight"
    return "bias"


def _init(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    role = param_role(name)
    if role == "norm":
        return np.ones(shape) if name.endswith(".g") else np.zeros(shape)
    if role == "bias":
        return np.zeros(shape)
    fan_in = shape[0] if len(shape) == 2 else shape[1] * shape[2]
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Backbone:
    """Parameters of the frozen upstream model and its forward passes.

    ``materialize=False`` builds zero-cost read-only placeholders with the right
    shapes, which is all parameter accounting needs for the large preset.
    """

    def __init__(self, config: BackboneConfig, params: dict[str, Tensor], materialized: bool = True):
        self.config = config
        self.params = params
        self.materialized = materialized

    def named_parameters(self):
        return self.params.items()

    def total(self, role_filter: set[str] | None = None) -> int:
        return sum(t.size for n, t in self.params.items()
                   if role_filter is None or param_role(n) in role_filter)

    def clone(self, trainable: bool) -> "Backbone":
        params = {}
        for n, t in self.params.items():
            data = np.array(t.data, copy=True) if self.materialized else t.data
            params[n] = Tensor(data, trainable=trainable, name=n)
        return Backbone(self.config, params, self.materialized)

    def astype(self, dtype) -> "Backbone":
        params = {n: Tensor(t.data.astype(dtype), trainable=t.trainable, name=n) for n, t in self.params.items()}
        return Backbone(self.config, params, self.materialized)

    # ------------------------------------------------------------ forward

    def conv_block(self, i: int, x: Tensor) -> Tensor:
        b = self.config.conv_blocks[i]
        p = self.params
        if x.shape[-1] < b.kernel:
            raise EmptyOutputError(
                f"input of length {x.shape[-1]} too short for conv block {i} (kernel {b.kernel})")
        y = T.conv1d(x, p[f"fe.{i}.conv.w"], None, b.stride)
        if b.has_norm:
            y = channel_norm(y, p[f"fe.{i}.ln.g"], p[f"fe.{i}.ln.b"])
        return T.gelu(y)

    def feature_extract(self, wave: Tensor, adapters: Mapping[int, object] | None = None,
                        taps: list | None = None) -> Tensor:
        """Run the conv stack on ``[1, L]`` (or ``[B, 1, L]``) samples, returning ``[..., C, T]``.

        Block ``i`` with an attached adapter outputs ``block(x) + alpha * adapter(x)``.
        """
        adapters = adapters or {}
        x = wave
        for i in range(len(self.config.conv_blocks)):
            host = self.conv_block(i, x)
            a = adapters.get(i)
            if a is not None:
                branch = a(x)
                if branch.shape != host.shape:
                    raise RuntimeError(f"adapter on block {i} produced {branch.shape}, host {host.shape}")
                host = T.add(host, T.mul(branch, a.alpha))
            x = host
            if taps is not None:
                taps.append(x)
        return x

    def project(self, frames: Tensor) -> Tensor:
        p = self.params
        nd = frames.data.ndim
        x = T.transpose(frames, (*range(nd - 2), nd - 1, nd - 2))
        x = T.layer_norm(x, p["proj.ln.g"], p["proj.ln.b"])
        return T.linear(x, p["proj.w"], p["proj.b"])

    def layer(self, j: int, x: Tensor, houlsby=None) -> Tensor:
        p = self.params
        pre = f"enc.{j}."
        attn = {m: p[pre + f"attn.{m}"] for m in
                ("q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "o_w", "o_b")}
        a = T.multi_head_self_attention(T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]),
                                        attn, self.config.n_heads)
        if houlsby is not None and houlsby.attn is not None:
            a = houlsby.attn(a)
        h = T.add(x, a)
        u = T.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = T.linear(T.gelu(T.linear(u, p[pre + "ff1.w"], p[pre + "ff1.b"])), p[pre + "ff2.w"], p[pre + "ff2.b"])
        if houlsby is not None and houlsby.ff is not None:
            f = houlsby.ff(f)
        return T.add(h, f)

    def encode(self, frames: Tensor, houlsby: Mapping[int, object] | None = None) -> list[Tensor]:
        """Project ``[..., C, T]`` frames and return every transformer layer's ``[..., T, hidden]`` output."""
        houlsby = houlsby or {}
        x = self.project(frames)
        outs = []
        for j in range(self.config.n_layers):
            x = self.layer(j, x, houlsby.get(j))
            outs.append(x)
        return outs


def channel_norm(y: Tensor, g: Tensor, b: Tensor) -> Tensor:
    """Layer norm over the channel axis of a ``[..., C, T]`` activation."""
    nd = y.data.ndim
    perm = (*range(nd - 2), nd - 1, nd - 2)
    return T.transpose(T.layer_norm(T.transpose(y, perm), g, b), perm)


def build_backbone(config: BackboneConfig | str, seed: int = 0, materialize: bool = True) -> Backbone:
    """All parameters frozen. Same ``(config, seed)`` gives identical bytes."""
    if isinstance(config, str):
        config = get_preset(config)
    dtype = T.get_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if materialize:
            data = _init(name, shape, rng).astype(dtype)
        else:
            data = np.broadcast_to(np.zeros((), dtype=dtype), shape)
        params[name] = Tensor(data, trainable=False, name=name)
    return Backbone(config, params, materialize)


def feature_extract(backbone: Backbone, wave: Tensor, adapters=None) -> Tensor:
    return backbone.feature_extract(wave, adapters)


def encode(backbone: Backbone, frames: Tensor, houlsby=None) -> list[Tensor]:
    return backbone.encode(frames, houlsby)
