"""Run configuration: INI file with section.key=value overrides.

One file describes a complete measurement setup.  Sections and units:

    [material]   bulk silicon parameters (cm^-3, eV, K, F/cm, ...)
    [laser]      beam power [W], wavelength [m], reflectivity, spot [um]
    [geometry]   crystal dimensions [mm], probe grid size, load [Ohm]
    [doping]     sampling ranges for the random profiles (cm^-3, um)
    [solver]     Newton/mesh controls of the forward solver
    [noise]      measurement-noise transform controls

Defaults reproduce the reference device; a config file only needs the keys
it changes.  Any value can also be overridden on the command line with
`--set section.key=value`, applied after the file.  The canonical text
rendering of a resolved configuration feeds the run manifests, so equal
digests mean equal physics.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math

from .datagen import NoiseParams
from .device import (DeviceGeometry, LaserParams, MaterialParams,
                     default_laser, silicon)
from .solver import SolverOptions

__all__ = ["ConfigError", "DopingSampling", "RunConfig", "default_config",
           "load_config", "apply_overrides", "config_text", "config_digest"]


class ConfigError(ValueError):
    """Unusable run configuration (unknown key, bad value, bad file)."""


@dataclasses.dataclass(frozen=True)
class DopingSampling:
    """Ranges for sample_doping_spec when generating datasets.

    c0 [cm^-3]; term_count sine terms, each zeroed with zero_probability;
    amplitudes uniform on [amplitude_min, amplitude_max]; wavelengths
    log-uniform on [wavelength_min_um, wavelength_max_um] [um].
    """

    c0: float = 1e16
    term_count: int = 5
    zero_probability: float = 0.2
    amplitude_min: float = 0.05
    amplitude_max: float = 0.2
    wavelength_min_um: float = 10.0
    wavelength_max_um: float = 1000.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.c0) and self.c0 != 0.0):
            raise ConfigError("c0 must be finite and nonzero")
        if self.term_count < 0:
            raise ConfigError("term_count must be nonnegative")
        if not 0.0 <= self.zero_probability <= 1.0:
            raise ConfigError("zero_probability must lie in [0, 1]")
        if not 0.0 < self.amplitude_min <= self.amplitude_max:
            raise ConfigError("amplitude range must be positive and ordered")
        if not 0.0 < self.wavelength_min_um <= self.wavelength_max_um:
            raise ConfigError("wavelength range must be positive and "
                              "ordered")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """A fully resolved run configuration."""

    material: MaterialParams
    laser: LaserParams
    geometry: DeviceGeometry
    doping: DopingSampling
    solver: SolverOptions
    noise: NoiseParams


def default_config() -> RunConfig:
    """The reference device with default solver and noise settings."""
    return RunConfig(material=silicon(), laser=default_laser(),
                     geometry=DeviceGeometry(), doping=DopingSampling(),
                     solver=SolverOptions(), noise=NoiseParams())


# keys not exposed to the file format (runtime-only plumbing)
_HIDDEN = {("solver", "trace")}

_SECTIONS = ("material", "laser", "geometry", "doping", "solver", "noise")

_TRUE = {"1", "yes", "true", "on"}
_FALSE = {"0", "no", "false", "off"}


def _section_fields(section: str):
    cls = {
        "material": MaterialParams, "laser": LaserParams,
        "geometry": DeviceGeometry, "doping": DopingSampling,
        "solver": SolverOptions, "noise": NoiseParams,
    }[section]
    return [f for f in dataclasses.fields(cls)
            if (section, f.name) not in _HIDDEN]


def _parse_value(section: str, key: str, text: str, current):
    kind = type(current)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            value = float(text)
            if not math.isfinite(value):
                raise ValueError("must be finite")
            return value
        return text
    except ValueError as exc:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {text!r} ({exc})") from exc


def _values_by_section(config: RunConfig) -> dict[str, dict[str, object]]:
    out = {}
    for section in _SECTIONS:
        block = getattr(config, section)
        out[section] = {f.name: getattr(block, f.name)
                        for f in _section_fields(section)}
    return out


def _rebuild(values: dict[str, dict[str, object]]) -> RunConfig:
    try:
        return RunConfig(
            material=MaterialParams(**values["material"]),
            laser=LaserParams(**values["laser"]),
            geometry=DeviceGeometry(**values["geometry"]),
            doping=DopingSampling(**values["doping"]),
            solver=SolverOptions(**values["solver"]),
            noise=NoiseParams(**values["noise"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, then the INI file, then --set overrides."""
    values = _values_by_section(default_config())
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keys like N_c are case-sensitive
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file: {exc}") from exc
        for section in parser.sections():
            if section not in values:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                if key not in values[section]:
                    raise ConfigError(f"unknown key [{section}] {key}")
                values[section][key] = _parse_value(
                    section, key, text, values[section][key])
    config = _rebuild(values)
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply `section.key=value` strings on top of a configuration."""
    values = _values_by_section(config)
    for item in overrides:
        head, sep, text = item.partition("=")
        section, dot, key = head.strip().partition(".")
        if not sep or not dot or section not in values:
            raise ConfigError(
                f"override must look like section.key=value, got {item!r}")
        key = key.strip()
        if key not in values[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        values[section][key] = _parse_value(section, key, text,
                                            values[section][key])
    return _rebuild(values)


def config_text(config: RunConfig) -> str:
    """Canonical INI rendering (fixed key order, repr-exact floats)."""
    out = io.StringIO()
    for section in _SECTIONS:
        out.write(f"[{section}]\n")
        block = getattr(config, section)
        for field in _section_fields(section):
            value = getattr(block, field.name)
            if isinstance(value, float):
                rendered = repr(value)
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = str(value)
            out.write(f"{field.name} = {rendered}\n")
        out.write("\n")
    return out.getvalue()


def config_digest(config: RunConfig) -> str:
    """SHA-256 of the canonical text; equal digests, equal setup."""
    return hashlib.sha256(config_text(config).encode()).hexdigest()
