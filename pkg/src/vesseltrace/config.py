"""Run configuration: one versioned YAML file plus layered overrides.

Precedence, lowest to highest: built-in defaults, config file, environment
variables, command-line flags. Environment overrides use the prefix
``VESSELTRACE_`` followed by the upper-cased field name (for CI); values are
parsed as YAML scalars, so ``VESSELTRACE_QUANTILE=0.98`` and
``VESSELTRACE_SCALES="[1.0, 0.5]"`` both work. Unknown keys are rejected,
and every validation error names the offending field.

The defaults below are the tuned acceptance profile, not the library
signature defaults: they are what the benchmark volumes are scored with.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .filtering import _check_scales
from .kernels import Dictionary, KernelConfig, default_dictionary

__all__ = [
    "CONFIG_VERSION",
    "ConfigError",
    "PipelineConfig",
    "load_config",
    "default_config_yaml",
]

CONFIG_VERSION = 1

ENV_PREFIX = "VESSELTRACE_"


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""

    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        super().__init__("%s: %s" % (field_name, message))


def _tuplify(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuplify(v) for v in value)
    return value


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the phantom / filter / extract / eval chain."""

    config_version: int = CONFIG_VERSION
    scales: tuple = (1.0, 0.71)
    quantile: float = 0.995
    icosphere_level: int = 1
    block_edge: int = 32
    kernels: dict = field(default_factory=dict)
    use_delta: bool = True
    use_flat: bool = True
    epsilon_factor: float = 1e-3
    rho: float = 2.0
    rng_seed: int = 1
    workers: int = 1
    input_path: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if self.config_version != CONFIG_VERSION:
            raise ConfigError(
                "config_version",
                "expected %d, got %r" % (CONFIG_VERSION, self.config_version),
            )
        try:
            object.__setattr__(self, "scales", _check_scales(self.scales))
        except (TypeError, ValueError) as exc:
            raise ConfigError("scales", str(exc)) from None
        if not isinstance(self.quantile, float) or not 0.0 < self.quantile < 1.0:
            raise ConfigError(
                "quantile", "expected a float in (0, 1), got %r" % (self.quantile,)
            )
        if self.icosphere_level not in (0, 1, 2, 3):
            raise ConfigError(
                "icosphere_level",
                "expected 0, 1, 2, or 3, got %r" % (self.icosphere_level,),
            )
        if not isinstance(self.block_edge, int) or self.block_edge % 2:
            raise ConfigError(
                "block_edge", "expected an even integer, got %r" % (self.block_edge,)
            )
        kc = self._kernel_config()
        if self.block_edge < 2 * kc.support:
            raise ConfigError(
                "block_edge",
                "%d is below twice the kernel support %d"
                % (self.block_edge, kc.support),
            )
        for name in ("use_delta", "use_flat"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(
                    name, "expected a bool, got %r" % (getattr(self, name),)
                )
        if not isinstance(self.epsilon_factor, float) or not (
            0.0 < self.epsilon_factor < np.inf
        ):
            raise ConfigError(
                "epsilon_factor",
                "expected a positive float, got %r" % (self.epsilon_factor,),
            )
        if not isinstance(self.rho, float) or not 0.0 < self.rho < np.inf:
            raise ConfigError(
                "rho", "expected a positive float, got %r" % (self.rho,)
            )
        if not isinstance(self.rng_seed, int) or self.rng_seed < 0:
            raise ConfigError(
                "rng_seed",
                "expected a non-negative integer, got %r" % (self.rng_seed,),
            )
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(
                "workers", "expected a positive integer, got %r" % (self.workers,)
            )
        for name in ("input_path", "output_dir"):
            value = getattr(self, name)
            if value is not None and not isinstance(value, str):
                raise ConfigError(
                    name, "expected a path string, got %r" % (value,)
                )

    def _kernel_config(self) -> KernelConfig:
        if not isinstance(self.kernels, dict):
            raise ConfigError(
                "kernels", "expected a mapping, got %r" % (self.kernels,)
            )
        known = {f.name for f in fields(KernelConfig)}
        for key in self.kernels:
            if key not in known:
                raise ConfigError(
                    "kernels.%s" % key, "unknown kernel override"
                )
        try:
            return KernelConfig(
                **{k: _tuplify(v) for k, v in self.kernels.items()}
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError("kernels", str(exc)) from None

    def build_dictionary(self) -> Dictionary:
        """The filtering dictionary this configuration describes.

        A disabled degenerate kernel is replaced by one with a zero response
        patch, which contributes nothing anywhere it would have entered.
        """
        d = default_dictionary(self._kernel_config())
        for name, enabled in (("delta", self.use_delta), ("flat", self.use_flat)):
            if not enabled:
                kern = getattr(d, name)
                muted = dataclasses.replace(
                    kern, k_patch=np.zeros_like(kern.k_patch)
                )
                d = dataclasses.replace(d, **{name: muted})
        return d

    def to_mapping(self) -> dict:
        """Plain mapping round-trippable through load_config."""
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = [
                    list(v) if isinstance(v, tuple) else v for v in value
                ]
            out[f.name] = value
        return out


_FLOAT_FIELDS = ("quantile", "epsilon_factor", "rho")


def _coerce(name: str, value):
    # YAML reads 2 as int; the float fields accept that spelling.
    if name in _FLOAT_FIELDS and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if name == "scales" and isinstance(value, list):
        return tuple(value)
    if name == "kernels" and isinstance(value, dict):
        return {k: _tuplify(v) for k, v in value.items()}
    return value


def _merge(target: dict, source: dict, origin: str) -> None:
    known = {f.name for f in fields(PipelineConfig)}
    for key, value in source.items():
        if key not in known:
            raise ConfigError(key, "unknown configuration key (from %s)" % origin)
        target[key] = _coerce(key, value)


def _env_overrides(env) -> dict:
    out = {}
    for f in fields(PipelineConfig):
        raw = env.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        try:
            out[f.name] = yaml.safe_load(raw)
        except yaml.YAMLError:
            raise ConfigError(
                f.name, "unparsable environment override %r" % raw
            ) from None
    return out


def load_config(path=None, env=None, flag_overrides=None) -> PipelineConfig:
    """Assemble a validated configuration from all override layers."""
    merged: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(str(path))
        with open(path, "r", encoding="utf-8") as fh:
            try:
                loaded = yaml.safe_load(fh)
            except yaml.YAMLError as exc:
                raise ConfigError("config", "unparsable YAML: %s" % exc) from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(
                "config", "top level must be a mapping, got %r" % type(loaded)
            )
        _merge(merged, loaded, str(path))
    _merge(merged, _env_overrides(env if env is not None else os.environ),
           "environment")
    if flag_overrides:
        _merge(merged, flag_overrides, "command line")
    return PipelineConfig(**merged)


def default_config_yaml() -> str:
    """The reference config file: all defaults, spelled out and commented."""
    cfg = PipelineConfig()
    return (
        "# vesseltrace run configuration (version %d)\n"
        "config_version: %d\n"
        "\n"
        "# filterbank synthesis\n"
        "scales: %s            # resampling factors, descending from 1.0\n"
        "quantile: %s                       # seed detection quantile in (0, 1)\n"
        "icosphere_level: %d                   # orientation sampling density, 0..3\n"
        "block_edge: %d                       # overlap-add block size, even\n"
        "kernels: {}                          # dictionary overrides, e.g. {support: 9}\n"
        "use_delta: %s                      # peak background kernel on/off\n"
        "use_flat: %s                       # flat background kernel on/off\n"
        "\n"
        "# tree extraction\n"
        "epsilon_factor: %s               # metric floor, fraction of the CVM peak\n"
        "\n"
        "# evaluation\n"
        "rho: %s                             # match tolerance in voxels\n"
        "\n"
        "# run plumbing\n"
        "rng_seed: %d\n"
        "workers: %d\n"
        "input_path: null\n"
        "output_dir: null\n"
        % (
            CONFIG_VERSION,
            CONFIG_VERSION,
            list(cfg.scales),
            cfg.quantile,
            cfg.icosphere_level,
            cfg.block_edge,
            str(cfg.use_delta).lower(),
            str(cfg.use_flat).lower(),
            cfg.epsilon_factor,
            cfg.rho,
            cfg.rng_seed,
            cfg.workers,
        )
    )
