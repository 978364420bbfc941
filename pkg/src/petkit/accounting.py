"""PET strategies: inject adapters into a backbone, assign trainability, count parameters."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import adapters as A
from . import backbone as B
from .tensor import ConfigError, Tensor

KINDS = ("finetune", "frozen", "weighted_sum", "houlsby", "cnn_adapter", "chapter")
CONVENTIONS = ("weights-only", "all")


@dataclass(frozen=True)
class CnnFields:
    top_n: int | None = None  # None: every conv block
    compression: int = 1
    alpha: float = 1.0


@dataclass(frozen=True)
class PetStrategy:
    kind: str
    cnn: CnnFields | None = None
    houlsby: A.HoulsbySpec | None = None
    include_conv_tap: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown strategy kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in ("cnn_adapter", "chapter") and self.cnn is None:
            object.__setattr__(self, "cnn", CnnFields())
        if self.kind in ("houlsby", "chapter") and self.houlsby is None:
            object.__setattr__(self, "houlsby", A.HoulsbySpec())

    @property
    def label(self) -> str:
        parts = [self.kind]
        if self.cnn is not None and self.kind in ("cnn_adapter", "chapter"):
            top = "all" if self.cnn.top_n is None else self.cnn.top_n
            parts.append(f"top{top}-n{self.cnn.compression}")
        if self.houlsby is not None and self.kind in ("houlsby", "chapter"):
            parts.append(f"b{self.houlsby.bottleneck}-{self.houlsby.placement}")
        return ":".join(parts)

    @classmethod
    def finetune(cls):
        return cls("finetune")

    @classmethod
    def frozen(cls):
        return cls("frozen")

    @classmethod
    def weighted_sum(cls, include_conv_tap: bool = False):
        return cls("weighted_sum", include_conv_tap=include_conv_tap)

    @classmethod
    def houlsby_only(cls, bottleneck: int = 32, placement: str = "ff"):
        return cls("houlsby", houlsby=A.HoulsbySpec(bottleneck, placement))

    @classmethod
    def cnn_adapter(cls, top_n: int | None = None, compression: int = 1, alpha: float = 1.0):
        return cls("cnn_adapter", cnn=CnnFields(top_n, compression, alpha))

    @classmethod
    def chapter(cls, top_n: int | None = None, compression: int = 1, alpha: float = 1.0,
                bottleneck: int = 32, placement: str = "ff"):
        return cls("chapter", cnn=CnnFields(top_n, compression, alpha),
                   houlsby=A.HoulsbySpec(bottleneck, placement))


@dataclass
class PetModel:
    """A backbone plus the adapters one strategy attaches to it."""
    backbone: B.Backbone
    strategy: PetStrategy
    cnn: dict[int, A.CnnAdapter] = field(default_factory=dict)
    houlsby: dict[int, A.HoulsbySlot] = field(default_factory=dict)
    wsum: A.WeightedSum | None = None

    def representation(self, wave: Tensor) -> Tensor:
        """``[..., T, hidden]`` features handed to the downstream head."""
        frames = self.backbone.feature_extract(wave, self.cnn)
        layers = self.backbone.encode(frames, self.houlsby)
        if self.wsum is None:
            return layers[-1]
        if self.strategy.include_conv_tap:
            layers = [self.backbone.project(frames)] + layers
        return self.wsum(layers)

    def named_parameters(self) -> Iterator[tuple[str, Tensor, str, str]]:
        """Yield ``(name, tensor, component, role)`` for every parameter."""
        for name, t in self.backbone.named_parameters():
            yield name, t, "backbone", B.param_role(name)
        for i, a in sorted(self.cnn.items()):
            for name, t in a.params.items():
                yield name, t, f"cnn.block{i}", A.param_role(name)
        for j, slot in sorted(self.houlsby.items()):
            for a in slot.adapters():
                for name, t in a.params.items():
                    yield name, t, f"houlsby.layer{j}", A.param_role(name)
        if self.wsum is not None:
            for name, t in self.wsum.params.items():
                yield name, t, "weighted_sum", "mix"

    def parameters(self) -> list[Tensor]:
        return [t for _, t, _, _ in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.parameters() if t.trainable]

    def freeze_mask(self) -> dict[str, bool]:
        return {name: t.trainable for name, t, _, _ in self.named_parameters()}


def derive_rng(seed: int, purpose: str) -> np.random.Generator:
    """Independent stream per ``(seed, purpose)``."""
    return np.random.default_rng([int(seed), zlib.crc32(purpose.encode())])


def _cnn_hosts(n_blocks: int, top_n: int | None) -> range:
    if top_n is None:
        return range(n_blocks)
    if not 1 <= top_n <= n_blocks:
        raise ConfigError(f"top_n must be in [1, {n_blocks}], got {top_n}")
    return range(n_blocks - top_n, n_blocks)


def apply_strategy(backbone: B.Backbone, strategy: PetStrategy, seed: int = 0) -> tuple[PetModel, dict[str, bool]]:
    """Attach adapters (near-identity init) and set trainability; returns the model and its freeze mask.

    The shared backbone is never mutated: FineTune trains a private copy.
    """
    cfg = backbone.config
    if strategy.kind == "finetune":
        backbone = backbone.clone(trainable=True)
    model = PetModel(backbone, strategy)
    rng = derive_rng(seed, "adapters")
    if strategy.kind in ("cnn_adapter", "chapter"):
        c = strategy.cnn
        for i in _cnn_hosts(len(cfg.conv_blocks), c.top_n):
            a = A.CnnAdapter(A.CnnAdapterSpec(i, c.compression, alpha=c.alpha), cfg)
            A.init_near_identity(a, rng)
            model.cnn[i] = a
    if strategy.kind in ("houlsby", "chapter"):
        for j in range(cfg.n_layers):
            slot = A.make_houlsby(j, cfg.hidden, strategy.houlsby)
            A.init_near_identity(slot, rng)
            model.houlsby[j] = slot
    if strategy.kind == "weighted_sum":
        model.wsum = A.WeightedSum(cfg.n_layers + int(strategy.include_conv_tap))
    return model, model.freeze_mask()


# ---------------------------------------------------------------- reports

@dataclass(frozen=True)
class ParamReport:
    convention: str
    components: dict[str, int]
    frozen_backbone: int
    backbone_total: int
    head: int = 0

    @property
    def trainable_total(self) -> int:
        return sum(self.components.values())

    @property
    def trainable_ratio(self) -> float:
        return trainable_ratio(self, self.backbone_total)

    def records(self) -> list[dict]:
        rows = [{"component": k, "convention": self.convention, "count": v} for k, v in self.components.items()]
        rows.append({"component": "trainable_total", "convention": self.convention, "count": self.trainable_total})
        rows.append({"component": "head", "convention": self.convention, "count": self.head})
        rows.append({"component": "frozen_backbone", "convention": self.convention, "count": self.frozen_backbone})
        rows.append({"component": "backbone_total", "convention": self.convention, "count": self.backbone_total})
        return rows


def _counted(role: str, convention: str) -> bool:
    return convention == "all" or role in ("weight", "mix")


def count_params(model: PetModel, convention: str = "all", head_params=()) -> ParamReport:
    """Exact counts of upstream trainable parameters, grouped by component.

    ``weights-only`` counts conv/linear weight tensors (and weighted-sum
    scalars), skipping biases and norm affines. The downstream head is reported
    on its own and kept out of ``trainable_total``.
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"convention must be one of {CONVENTIONS}, got {convention!r}")
    components: dict[str, int] = {}
    frozen = 0
    backbone_total = 0
    for name, t, comp, role in model.named_parameters():
        if not _counted(role, convention):
            continue
        if comp == "backbone":
            backbone_total += t.size
            if not t.trainable:
                frozen += t.size
                continue
        elif not t.trainable:
            continue
        components[comp] = components.get(comp, 0) + t.size
    head = sum(t.size for t in head_params if convention == "all" or t.data.ndim >= 2)
    return ParamReport(convention, components, frozen, backbone_total, head)


def trainable_ratio(report: ParamReport, backbone_total: int) -> float:
    if backbone_total <= 0:
        raise ConfigError("backbone_total must be positive")
    return report.trainable_total / backbone_total


@dataclass(frozen=True)
class ReportDelta:
    convention: str
    components: dict[str, int]
    trainable_total: int
    head: int
    frozen_backbone: int

    def is_zero(self) -> bool:
        return (not any(self.components.values()) and self.trainable_total == 0
                and self.head == 0 and self.frozen_backbone == 0)


def diff_reports(a: ParamReport, b: ParamReport) -> ReportDelta:
    """Fieldwise ``a - b``."""
    if a.convention != b.convention:
        raise ConfigError(f"cannot diff {a.convention} against {b.convention}")
    keys = list(dict.fromkeys([*a.components, *b.components]))
    comps = {k: a.components.get(k, 0) - b.components.get(k, 0) for k in keys}
    return ReportDelta(a.convention, comps, a.trainable_total - b.trainable_total,
                       a.head - b.head, a.frozen_backbone - b.frozen_backbone)


def strategy_report(backbone: B.Backbone | str, strategy: PetStrategy, convention: str = "all",
                    seed: int = 0) -> ParamReport:
    """Convenience: count a strategy on a preset without materializing weights."""
    if isinstance(backbone, str):
        backbone = B.build_backbone(backbone, seed, materialize=False)
    model, _ = apply_strategy(backbone, strategy, seed)
    return count_params(model, convention)
