"""Flat ``key = value`` run configuration files.

Keys are namespaced by section::

    # comment
    data.seed = 3
    data.n_emotion_train = 300
    arch.preset = micro
    train.total_steps = 800
    weights.lambda4 = 0.1
    flags.disable_coherence = false
    suite.name = table4
    suite.seeds = 0, 1, 2

Values are parsed as int, float, bool (true/false), comma lists, or strings.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .data import DataConfig
from .errors import ConfigError
from .losses import AblationFlags, LossWeights
from .model import FULL, MICRO, ArchitectureConfig
from .trainer import TrainConfig

SECTIONS = ("data", "arch", "train", "weights", "flags", "suite")


def _scalar(text: str):
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_scalar(p.strip()) for p in text.split(",") if p.strip())
    return _scalar(text)


def parse_config(text: str) -> dict[str, dict]:
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        out[section][name] = parse_value(value)
    return out


def load_config(path: str | Path | None) -> dict[str, dict]:
    if path is None:
        return {s: {} for s in SECTIONS}
    return parse_config(Path(path).read_text())


def _check_keys(section: str, given: dict, allowed) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown config key {section}.{unknown[0]}")


def check_keys(cfg: dict) -> None:
    """Raise ConfigError naming the first unknown key in any section."""
    _check_keys("data", cfg.get("data", {}), {f.name for f in fields(DataConfig)})
    _check_keys("arch", cfg.get("arch", {}), {f.name for f in fields(ArchitectureConfig)} | {"preset"})
    _check_keys("train", cfg.get("train", {}), {f.name for f in fields(TrainConfig)} - {"weights", "flags"})
    _check_keys("weights", cfg.get("weights", {}), {f.name for f in fields(LossWeights)})
    _check_keys("flags", cfg.get("flags", {}), {f.name for f in fields(AblationFlags)} | {"consensus"})
    _check_keys("suite", cfg.get("suite", {}), {"name", "seeds"})


def data_config(cfg: dict, **overrides) -> DataConfig:
    given = {**cfg.get("data", {}), **overrides}
    _check_keys("data", given, {f.name for f in fields(DataConfig)})
    dc = DataConfig(**given)
    dc.validate()
    return dc


def arch_config(cfg: dict) -> ArchitectureConfig:
    given = dict(cfg.get("arch", {}))
    preset = given.pop("preset", MICRO)
    _check_keys("arch", given, {f.name for f in fields(ArchitectureConfig)} - {"preset"})
    for key in ("widths", "residual_units"):
        if key in given and not isinstance(given[key], tuple):
            given[key] = (given[key],)
    if preset == FULL:
        return ArchitectureConfig.full(**given)
    if preset == MICRO:
        return ArchitectureConfig.micro(**given)
    raise ConfigError(f"unknown arch.preset {preset!r}")


def train_config(cfg: dict, **overrides) -> TrainConfig:
    given = dict(cfg.get("train", {}))
    _check_keys("train", given, {f.name for f in fields(TrainConfig)} - {"weights", "flags"})
    w = dict(cfg.get("weights", {}))
    _check_keys("weights", w, {f.name for f in fields(LossWeights)})
    fl = dict(cfg.get("flags", {}))
    _check_keys("flags", fl, {f.name for f in fields(AblationFlags)} | {"consensus"})
    if "consensus" in fl:
        given["consensus"] = fl.pop("consensus")
    if "decay_steps" in given and isinstance(given["decay_steps"], int):
        given["decay_steps"] = (given["decay_steps"],)
    tc = TrainConfig(weights=LossWeights(**w), flags=AblationFlags(**fl), **given)
    return replace(tc, **overrides) if overrides else tc


def dump_config(data: DataConfig | None = None, arch: ArchitectureConfig | None = None,
                train: TrainConfig | None = None) -> str:
    """Render configs back into the flat format."""
    lines = []

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ", ".join(fmt(x) for x in v)
        return "none" if v is None else str(v)

    if data is not None:
        lines += [f"data.{f.name} = {fmt(getattr(data, f.name))}" for f in fields(data)]
    if arch is not None:
        lines += [f"arch.{f.name} = {fmt(getattr(arch, f.name))}" for f in fields(arch)]
    if train is not None:
        for f in fields(train):
            if f.name == "weights":
                lines += [f"weights.{g.name} = {fmt(getattr(train.weights, g.name))}"
                          for g in fields(train.weights)]
            elif f.name == "flags":
                lines += [f"flags.{g.name} = {fmt(getattr(train.flags, g.name))}"
                          for g in fields(train.flags)]
            elif f.name == "decay_steps":
                lines.append(f"train.decay_steps = {fmt(train.milestones())}")
            else:
                lines.append(f"train.{f.name} = {fmt(getattr(train, f.name))}")
    return "\n".join(lines) + "\n"
