"""Run configuration as a flat ``key = value`` text file.

Recognised keys (defaults in :class:`RunConfig`)::

    seed, manifest, out_dir, n_train, n_test, checkpoint_precision
    generator.<field of GeneratorConfig>     e.g. generator.n_vol = 2048
    sweep.<field of SweepRanges>             e.g. sweep.angle_deg = 3, 12
    inr.<field of InrArchitecture>           applies to every INR
    inr.<tag>.<field of InrArchitecture>     per-field override, tag in d n vx vy p nut
    inr.hyper_scale / inr.<tag>.hyper_scale
    meta.<field of MetaConfig>               meta.<tag>.<key> overrides per field
    processor.<field of ProcessorConfig>

Blank lines and ``#`` comments are ignored. Paths may be overridden by the
``INFINITY_MANIFEST`` and ``INFINITY_OUT_DIR`` environment variables.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dataset import GeneratorConfig, SweepRanges
from .inr import FIELDS, InrArchitecture
from .meta import MetaConfig
from .processor import ProcessorConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    manifest: str = "manifest.txt"
    out_dir: str = "run"
    n_train: int = 200
    n_test: int = 50
    checkpoint_precision: str = "f64"
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    sweep: SweepRanges = field(default_factory=SweepRanges)
    inr: dict = field(default_factory=dict)
    inr_overrides: dict = field(default_factory=dict)
    meta: MetaConfig = field(default_factory=MetaConfig)
    meta_overrides: dict = field(default_factory=dict)
    processor: ProcessorConfig = field(default_factory=ProcessorConfig)

    def architecture(self, tag: str) -> InrArchitecture:
        kw = {k: v for k, v in self.inr.items() if k != "hyper_scale"}
        kw.update({k: v for k, v in self.inr_overrides.get(tag, {}).items() if k != "hyper_scale"})
        return InrArchitecture.for_field(tag, **kw)

    def hyper_scale(self, tag: str) -> float:
        return float(self.inr_overrides.get(tag, {}).get("hyper_scale", self.inr.get("hyper_scale", 1.0)))

    def meta_config(self, tag: str) -> MetaConfig:
        return replace(self.meta, **self.meta_overrides.get(tag, {}))

    def validate(self, need_manifest: bool = False) -> "RunConfig":
        if self.checkpoint_precision not in ("f32", "f64"):
            raise ConfigError("checkpoint_precision must be f32 or f64")
        for tag in FIELDS:
            try:
                self.architecture(tag)
            except ValueError as exc:
                raise ConfigError(f"inr.{tag}: {exc}") from exc
        if need_manifest and not Path(self.manifest).is_file():
            raise ConfigError(f"manifest {self.manifest} does not exist")
        return self

    def with_env(self, environ=None) -> "RunConfig":
        env = os.environ if environ is None else environ
        cfg = self
        if env.get("INFINITY_MANIFEST"):
            cfg = replace(cfg, manifest=env["INFINITY_MANIFEST"])
        if env.get("INFINITY_OUT_DIR"):
            cfg = replace(cfg, out_dir=env["INFINITY_OUT_DIR"])
        return cfg

    def to_text(self, paths: bool = True) -> str:
        """Config file text; ``paths=False`` leaves out the run-specific paths."""
        lines = [f"seed = {self.seed}"]
        if paths:
            lines += [f"manifest = {self.manifest}", f"out_dir = {self.out_dir}"]
        lines += [
            f"n_train = {self.n_train}",
            f"n_test = {self.n_test}",
            f"checkpoint_precision = {self.checkpoint_precision}",
        ]
        for prefix, obj in (("generator", self.generator), ("sweep", self.sweep), ("meta", self.meta), ("processor", self.processor)):
            for f in fields(obj):
                lines.append(f"{prefix}.{f.name} = {_fmt(getattr(obj, f.name))}")
        for k, v in sorted(self.inr.items()):
            lines.append(f"inr.{k} = {_fmt(v)}")
        for tag, kv in sorted(self.inr_overrides.items()):
            for k, v in sorted(kv.items()):
                lines.append(f"inr.{tag}.{k} = {_fmt(v)}")
        for tag, kv in sorted(self.meta_overrides.items()):
            for k, v in sorted(kv.items()):
                lines.append(f"meta.{tag}.{k} = {_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(float(v)) if isinstance(v, float) else str(v)


def _field_types(cls) -> dict:
    hints = {f.name: f for f in fields(cls)}
    return {name: f.default for name, f in hints.items()}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            return None
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if default is None:
            # optional numeric settings such as points_per_case or batch_size
            return int(raw) if raw.lstrip("-").isdigit() else float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc


_INR_DEFAULTS = {**_field_types(InrArchitecture), "hyper_scale": 1.0}


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    top = {f.name: getattr(cfg, f.name) for f in fields(cfg) if not dataclasses.is_dataclass(getattr(cfg, f.name)) and not isinstance(getattr(cfg, f.name), dict)}
    groups = {"generator": {}, "sweep": {}, "meta": {}, "processor": {}}
    inr, inr_over, meta_over = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if len(parts) == 1:
            if key not in top:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            top[key] = _coerce(raw, top[key], key)
        elif parts[0] == "inr":
            name = parts[-1]
            if name not in _INR_DEFAULTS:
                raise ConfigError(f"line {lineno}: unknown INR key {name!r}")
            value = _coerce(raw, _INR_DEFAULTS[name], key)
            if len(parts) == 2:
                inr[name] = value
            elif len(parts) == 3 and parts[1] in FIELDS:
                inr_over.setdefault(parts[1], {})[name] = value
            else:
                raise ConfigError(f"line {lineno}: bad key {key!r}")
        elif parts[0] == "meta" and len(parts) == 3:
            if parts[1] not in FIELDS:
                raise ConfigError(f"line {lineno}: unknown field {parts[1]!r}")
            defaults = _field_types(MetaConfig)
            if parts[2] not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            meta_over.setdefault(parts[1], {})[parts[2]] = _coerce(raw, defaults[parts[2]], key)
        elif parts[0] in groups and len(parts) == 2:
            cls = {"generator": GeneratorConfig, "sweep": SweepRanges, "meta": MetaConfig, "processor": ProcessorConfig}[parts[0]]
            defaults = _field_types(cls)
            if parts[1] not in defaults:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            groups[parts[0]][parts[1]] = _coerce(raw, defaults[parts[1]], key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return RunConfig(
            **top,
            generator=GeneratorConfig(**groups["generator"]),
            sweep=SweepRanges(**groups["sweep"]),
            inr=inr,
            inr_overrides=inr_over,
            meta=MetaConfig(**groups["meta"]),
            meta_overrides=meta_over,
            processor=ProcessorConfig(**groups["processor"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
