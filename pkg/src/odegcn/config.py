"""INI run configuration for the command-line tool.

Sections and keys mirror the library dataclasses::

    [run]       model, loss, single_beta, maml, maml_tasks
    [synth]     SynthConfig fields
    [train]     TrainConfig fields
    [maml]      MamlConfig fields
    [split]     SplitSpec fields (windows "8,12"; train_days an int or "all")
    [theory]    TheoryConfig fields; ``source_<field>`` sets the source domain
    [sweep]     SweepConfig fields; ``source_<field>`` as above
    [gradcheck] instances, max_n, step, tolerance, seed, corrupt
    [paths]     data, series, edges, populations, checkpoint

Values are resolved as built-in defaults, then the file, then command-line
flags. Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SplitSpec, SynthConfig
from .optimize import MamlConfig, TrainConfig
from .rdgcn import LOSS_KINDS
from .theory import SweepConfig, TheoryConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class GradcheckConfig:
    instances: int = 100
    max_n: int = 8
    step: float = 1e-5
    tolerance: float = 1e-5
    seed: int = 0
    corrupt: float = 0.0  # test hook: added to one analytic gradient coordinate


@dataclass
class PathsConfig:
    data: str = ""
    series: str = ""
    edges: str = ""
    populations: str = ""
    checkpoint: str = ""

    def resolve(self, name: str, default_file: str) -> Path | None:
        explicit = getattr(self, name)
        if explicit:
            return Path(explicit)
        if self.data:
            return Path(self.data) / default_file
        return None


@dataclass
class RunConfig:
    model: str = "rd"
    loss: str = "mse"
    single_beta: bool = False
    maml: bool = False
    maml_tasks: int = 10
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    maml_cfg: MamlConfig = field(default_factory=MamlConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    theory: TheoryConfig = field(default_factory=TheoryConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    split_ratios: tuple | None = None  # None: 3,1 for rd and 5,2 for sir

    def effective_split(self) -> SplitSpec:
        """Split settings with the mode implied by the model family."""
        mode = "traffic-weekday-weekend" if self.model == "rd" else "ili-season"
        return replace(self.split, mode=mode, ratios=self.split_ratios)

    def validate(self) -> "RunConfig":
        if self.model not in ("rd", "sir"):
            raise ConfigError(f"run.model must be 'rd' or 'sir', got {self.model!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"run.loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.maml_tasks < 1:
            raise ConfigError("run.maml_tasks must be at least 1")
        return self


_RUN_KEYS = ("model", "loss", "single_beta", "maml", "maml_tasks")
_SKIP = {"synth": {"rd_params", "sir_params"}, "train": {"loss_kind"}, "split": {"mode", "ratios"}, "theory": {"source", "train", "losses"},
         "sweep": {"source"}}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_tuple(s: str) -> tuple:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    out = []
    for p in parts:
        f = float(p)
        out.append(int(f) if f.is_integer() and "." not in p and "e" not in p.lower() else f)
    return tuple(out)


def _convert(section: str, key: str, raw: str, current):
    try:
        if section == "split" and key == "train_days":
            return None if raw.strip().lower() == "all" else int(raw)
        if key in ("num_edges", "target_noise_sd") and raw.strip().lower() in ("none", ""):
            return None
        if key == "num_edges":
            return int(raw)
        if key == "target_noise_sd":
            return float(raw)
        if isinstance(current, bool):
            return _parse_bool(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple) or current is None:
            return _parse_tuple(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _field_names(obj, section: str) -> list:
    return [f.name for f in fields(obj) if f.name not in _SKIP.get(section, ())]


def _apply_section(obj, section: str, items: dict):
    """Return ``obj`` with ``items`` applied; handles ``source_`` keys for nested domains."""
    names = set(_field_names(obj, section))
    updates, source_updates = {}, {}
    nested = getattr(obj, "source", None)
    for key, raw in items.items():
        if key in names:
            updates[key] = _convert(section, key, raw, getattr(obj, key))
        elif nested is not None and key.startswith("source_") and key[7:] in _field_names(nested, "synth"):
            k = key[7:]
            source_updates[k] = _convert("synth", k, raw, getattr(nested, k))
        elif section == "theory" and key == "losses":
            updates[key] = tuple(v.strip() for v in raw.split(",") if v.strip())
        elif section == "theory" and key.startswith("train_") and key[6:] in _field_names(obj.train, "train"):
            k = key[6:]
            updates.setdefault("train", obj.train)
            updates["train"] = replace(updates["train"], **{k: _convert("train", k, raw, getattr(obj.train, k))})
        else:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
    if source_updates:
        updates["source"] = replace(nested, **source_updates)
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


_SECTIONS = {"synth": "synth", "train": "train", "maml": "maml_cfg", "split": "split",
             "theory": "theory", "sweep": "sweep", "gradcheck": "gradcheck", "paths": "paths"}


def load_config(path=None, base: RunConfig | None = None) -> RunConfig:
    """Defaults (or ``base``) overlaid with the INI file at ``path``."""
    cfg = base if base is not None else RunConfig()
    if path is None:
        return cfg.validate()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"{p}: {exc}") from None
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "run":
            unknown = set(items) - set(_RUN_KEYS)
            if unknown:
                raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section [run]")
            upd = {k: _convert("run", k, v, getattr(cfg, k)) for k, v in items.items()}
            cfg = replace(cfg, **upd)
        elif section in _SECTIONS:
            attr = _SECTIONS[section]
            if section == "split" and "ratios" in items:
                raw = items.pop("ratios")
                ratios = None if raw.strip().lower() == "auto" else _convert("split", "ratios", raw, None)
                if ratios is not None and (len(ratios) != 2 or min(ratios) <= 0):
                    raise ConfigError("[split] ratios must be two positive numbers or 'auto'")
                cfg = replace(cfg, split_ratios=ratios)
            cfg = replace(cfg, **{attr: _apply_section(getattr(cfg, attr), section, items)})
        else:
            raise ConfigError(f"unknown section [{section}]")
    return cfg.validate()


def apply_overrides(cfg: RunConfig, seed=None, model=None, loss=None, maml=None) -> RunConfig:
    """Command-line flag overrides. ``seed`` reseeds every stochastic component."""
    if model is not None:
        cfg = replace(cfg, model=model)
    if loss is not None:
        cfg = replace(cfg, loss=loss, train=replace(cfg.train, loss_kind=loss))
    if maml:
        cfg = replace(cfg, maml=True)
    if seed is not None:
        cfg = replace(
            cfg,
            synth=replace(cfg.synth, seed=seed),
            train=replace(cfg.train, seed=seed),
            split=replace(cfg.split, seed=seed),
            gradcheck=replace(cfg.gradcheck, seed=seed),
            theory=replace(cfg.theory, source=replace(cfg.theory.source, seed=seed)),
            sweep=replace(cfg.sweep, source=replace(cfg.sweep.source, seed=seed)),
        )
    return cfg.validate()


def to_sections(cfg: RunConfig, include_paths: bool = True) -> dict:
    """Resolved configuration as ``{section: {key: text}}``."""
    out = {"run": {k: _format(getattr(cfg, k)) for k in _RUN_KEYS}}
    for section, attr in _SECTIONS.items():
        if section == "paths" and not include_paths:
            continue
        obj = getattr(cfg, attr)
        sec = {k: _format(getattr(obj, k)) for k in _field_names(obj, section)}
        if section == "split":
            if obj.train_days is None:
                sec["train_days"] = "all"
            sec["ratios"] = "auto" if cfg.split_ratios is None else _format(cfg.split_ratios)
        if hasattr(obj, "source"):
            for k in _field_names(obj.source, "synth"):
                sec["source_" + k] = _format(getattr(obj.source, k))
        if section == "theory":
            sec["losses"] = ",".join(obj.losses)
            for k in _field_names(obj.train, "train"):
                sec["train_" + k] = _format(getattr(obj.train, k))
        out[section] = sec
    return out


def write_snapshot(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_dict(to_sections(cfg))
    with Path(path).open("w") as fh:
        parser.write(fh)


def config_hash(cfg: RunConfig) -> str:
    """Digest of the resolved settings; file paths are excluded so relocated runs hash alike."""
    blob = json.dumps(to_sections(cfg, include_paths=False), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()
