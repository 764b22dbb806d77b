"""INI-style run configuration mapped onto the module config dataclasses."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .errors import ParseError, SchemaError
from .evaluation import RegressorConfig
from .equivariant import ProjectorConfig
from .geometry import TransformPolicy
from .invariant import PretrainConfig


@dataclass
class DataConfig:
    n: int = 256
    height: int = 96
    width: int = 96
    seed: int = 0
    test_fraction: float = 0.2


@dataclass
class FeatureConfig:
    blocks: tuple = (2, 3, 4, 5)
    grid: int = 48


@dataclass
class AnalysisConfig:
    images: int = 32
    nmf_k: int = 6
    nmf_iters: int = 200
    pca_k: int = 4
    probe_epochs: int = 50


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    augment: TransformPolicy = field(default_factory=TransformPolicy)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    projector: ProjectorConfig = field(default_factory=ProjectorConfig)
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def to_dict(self):
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(raw, default, where):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            if "/" in text:
                num, den = text.split("/", 1)
                return float(num) / float(den)
            return float(text)
        if isinstance(default, (tuple, list)):
            items = [t.strip() for t in text.replace(" ", ",").split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return text
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _apply(section_obj, items, section):
    names = {f.name for f in dataclasses.fields(section_obj)}
    for key, raw in items:
        if key not in names:
            raise SchemaError(f"[{section}] unknown key {key!r}")
        setattr(section_obj, key, _coerce(raw, getattr(section_obj, key), f"[{section}] {key}"))


def parse_config(text):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else 0
        raise ParseError(str(exc).splitlines()[0], lineno) from exc
    except configparser.Error as exc:
        raise ParseError(str(exc).splitlines()[0], getattr(exc, "lineno", 0) or 0) from exc
    cfg = RunConfig()
    sections = {f.name for f in dataclasses.fields(cfg)}
    for section in cp.sections():
        if section not in sections:
            raise SchemaError(f"unknown section [{section}]")
        _apply(getattr(cfg, section), cp.items(section), section)
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    lines = []
    for name, values in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


__all__ = ["RunConfig", "DataConfig", "FeatureConfig", "AnalysisConfig", "parse_config",
           "load_config", "dump_config"]
