"""Strict TOML run configs.

Every table accepts a fixed key set; anything else is a :class:`ConfigError`
raised before any computation starts.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .accounting import CnnFields, PetStrategy
from .adapters import HoulsbySpec
from .backbone import BackboneConfig, ConvBlockSpec, get_preset
from .harness import TrainConfig
from .synth import SyntheticTaskSpec
from .tensor import ConfigError

MODES = ("verify-64bit", "train-32bit")


@dataclass
class SweepSpec:
    strategies: list[PetStrategy]
    fractions: tuple[float, ...] = (1.0, 0.5, 0.25, 0.1)
    seeds: tuple[int, ...] = (0, 1, 2)
    jobs: int = 1


@dataclass
class RunConfig:
    backbone: BackboneConfig
    backbone_name: str
    backbone_seed: int
    strategy: PetStrategy
    task: SyntheticTaskSpec
    train: TrainConfig
    sweep: SweepSpec | None = None
    out: str = "runs"
    mode: str = "train-32bit"
    seed: int = 0
    source: dict = field(default_factory=dict, repr=False)


def _check_keys(table: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")


def _int(v, where: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where} must be an integer, got {v!r}")
    if minimum is not None and v < minimum:
        raise ConfigError(f"{where} must be >= {minimum}, got {v}")
    return v


def _float(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{where} must be a number, got {v!r}")
    return float(v)


def _str(v, where: str, choices=None) -> str:
    if not isinstance(v, str):
        raise ConfigError(f"{where} must be a string, got {v!r}")
    if choices is not None and v not in choices:
        raise ConfigError(f"{where} must be one of {list(choices)}, got {v!r}")
    return v


def _bool(v, where: str) -> bool:
    if not isinstance(v, bool):
        raise ConfigError(f"{where} must be true or false, got {v!r}")
    return v


def _table(raw: dict, key: str, where: str) -> dict:
    v = raw.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"[{where}] must be a table")
    return v


def parse_backbone(raw: dict) -> tuple[BackboneConfig, str, int]:
    _check_keys(raw, {"preset", "seed", "conv_blocks", "n_layers", "hidden", "n_heads", "ff_dim"}, "backbone")
    seed = _int(raw.get("seed", 0), "backbone.seed")
    if "preset" in raw:
        extra = set(raw) - {"preset", "seed"}
        if extra:
            raise ConfigError(f"[backbone] preset cannot be combined with inline keys: {sorted(extra)}")
        name = _str(raw["preset"], "backbone.preset")
        return get_preset(name), name, seed
    if "conv_blocks" not in raw:
        return get_preset("mini"), "mini", seed
    blocks = []
    for i, b in enumerate(raw["conv_blocks"]):
        where = f"backbone.conv_blocks[{i}]"
        if not isinstance(b, dict):
            raise ConfigError(f"{where} must be a table")
        _check_keys(b, {"in_channels", "out_channels", "kernel", "stride", "has_norm"}, where)
        try:
            blocks.append(ConvBlockSpec(
                _int(b["in_channels"], where + ".in_channels"), _int(b["out_channels"], where + ".out_channels"),
                _int(b["kernel"], where + ".kernel"), _int(b["stride"], where + ".stride"),
                _bool(b.get("has_norm", True), where + ".has_norm")))
        except KeyError as e:
            raise ConfigError(f"{where} is missing {e.args[0]}") from None
    try:
        cfg = BackboneConfig(blocks, _int(raw["n_layers"], "backbone.n_layers"), _int(raw["hidden"], "backbone.hidden"),
                             _int(raw["n_heads"], "backbone.n_heads"), _int(raw["ff_dim"], "backbone.ff_dim"))
    except KeyError as e:
        raise ConfigError(f"[backbone] inline spec is missing {e.args[0]}") from None
    return cfg, "inline", seed


def parse_strategy(raw: dict, where: str = "strategy") -> PetStrategy:
    _check_keys(raw, {"kind", "cnn", "houlsby", "include_conv_tap"}, where)
    kind = _str(raw.get("kind", "chapter"), f"{where}.kind")
    cnn = houlsby = None
    if "cnn" in raw:
        c = _table(raw, "cnn", f"{where}.cnn")
        _check_keys(c, {"top_n", "compression", "alpha"}, f"{where}.cnn")
        top = c.get("top_n", "all")
        top = None if top == "all" else _int(top, f"{where}.cnn.top_n", 1)
        cnn = CnnFields(top, _int(c.get("compression", 1), f"{where}.cnn.compression", 1),
                        _float(c.get("alpha", 1.0), f"{where}.cnn.alpha"))
    if "houlsby" in raw:
        h = _table(raw, "houlsby", f"{where}.houlsby")
        _check_keys(h, {"bottleneck", "placement"}, f"{where}.houlsby")
        houlsby = HoulsbySpec(_int(h.get("bottleneck", 32), f"{where}.houlsby.bottleneck", 1),
                              _str(h.get("placement", "ff"), f"{where}.houlsby.placement"))
    return PetStrategy(kind, cnn, houlsby, _bool(raw.get("include_conv_tap", False), f"{where}.include_conv_tap"))


def parse_task(raw: dict) -> SyntheticTaskSpec:
    _check_keys(raw, {"n_classes", "samples_per_class", "wave_length", "snr_db", "seed"}, "task")
    d = SyntheticTaskSpec()
    return SyntheticTaskSpec(
        n_classes=_int(raw.get("n_classes", d.n_classes), "task.n_classes", 2),
        samples_per_class=_int(raw.get("samples_per_class", d.samples_per_class), "task.samples_per_class", 10),
        wave_length=_int(raw.get("wave_length", d.wave_length), "task.wave_length", 1),
        snr_db=_float(raw.get("snr_db", d.snr_db), "task.snr_db"),
        seed=_int(raw.get("seed", d.seed), "task.seed"))


def parse_train(raw: dict, seed: int, mode: str) -> TrainConfig:
    _check_keys(raw, {"lr_grid", "epochs", "batch_size", "optimizer", "subset_fraction"}, "train")
    d = TrainConfig()
    grid = raw.get("lr_grid", list(d.lr_grid))
    if not isinstance(grid, list):
        raise ConfigError("train.lr_grid must be a list")
    return TrainConfig(
        lr_grid=tuple(_float(x, "train.lr_grid[]") for x in grid),
        epochs=_int(raw.get("epochs", d.epochs), "train.epochs", 0),
        batch_size=_int(raw.get("batch_size", d.batch_size), "train.batch_size", 1),
        optimizer=_str(raw.get("optimizer", d.optimizer), "train.optimizer"),
        seed=seed, subset_fraction=_float(raw.get("subset_fraction", 1.0), "train.subset_fraction"),
        mode=mode)


def parse_sweep(raw: dict) -> SweepSpec:
    _check_keys(raw, {"strategy", "fractions", "seeds", "jobs"}, "sweep")
    strategies = raw.get("strategy", [])
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError("[sweep] needs at least one [[sweep.strategy]] table")
    fracs = tuple(_float(f, "sweep.fractions[]") for f in raw.get("fractions", [1.0, 0.5, 0.25, 0.1]))
    for f in fracs:
        if not 0 < f <= 1:
            raise ConfigError(f"sweep fraction {f} outside (0, 1]")
    seeds = tuple(_int(s, "sweep.seeds[]") for s in raw.get("seeds", [0, 1, 2]))
    if not fracs or not seeds:
        raise ConfigError("sweep.fractions and sweep.seeds must be non-empty")
    return SweepSpec([parse_strategy(s, f"sweep.strategy[{i}]") for i, s in enumerate(strategies)],
                     fracs, seeds, _int(raw.get("jobs", 1), "sweep.jobs", 1))


def parse_config(raw: dict) -> RunConfig:
    _check_keys(raw, {"backbone", "strategy", "task", "train", "sweep", "out", "mode", "seed"}, "top level")
    mode = _str(raw.get("mode", "train-32bit"), "mode", MODES)
    seed = _int(raw.get("seed", 0), "seed")
    backbone, name, bseed = parse_backbone(_table(raw, "backbone", "backbone"))
    sweep = parse_sweep(_table(raw, "sweep", "sweep")) if "sweep" in raw else None
    return RunConfig(
        backbone=backbone, backbone_name=name, backbone_seed=bseed,
        strategy=parse_strategy(_table(raw, "strategy", "strategy")),
        task=parse_task(_table(raw, "task", "task")),
        train=parse_train(_table(raw, "train", "train"), seed, mode),
        sweep=sweep, out=_str(raw.get("out", "runs"), "out"), mode=mode, seed=seed, source=raw)


def load_config(path: str | Path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    return parse_config(raw)
