"""Plain key-value experiment configuration.

Grammar::

    file     := { blank | comment | header | entry }
    comment  := '#' text
    header   := '[' ( 'kernel' | 'sim' | 'experiment' ) ']'
    entry    := key '=' value            (key: [a-z][a-z0-9_]*)
    value    := number | word | list     (list: comma-separated items)

Numbers are decimal (``1e-3`` allowed).  Every key belongs to a section,
unknown keys are errors, and a key may appear once.  Parsing materialises
every default, so ``render`` followed by ``parse_config`` is the identity.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import ConfigError
from .kernels import KERNEL_NAMES, KernelSpec, builtin, kernel_parameter_keys
from .sde_engine import InitialLaw, SimConfig

SECTIONS = ("kernel", "sim", "experiment")
_KEY = re.compile(r"[a-z][a-z0-9_]*\Z")
_NUMBER = re.compile(r"[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?\Z")


def _float(text: str) -> float:
    if not _NUMBER.match(text):
        raise ValueError(f"expected a decimal number, got {text!r}")
    return float(text)


def _int(text: str) -> int:
    if not re.fullmatch(r"[+-]?\d+", text):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(text)


def _opt_float(text: str) -> float | None:
    return None if text == "none" else _float(text)


def _word(text: str) -> str:
    if not re.fullmatch(r"[a-z0-9][a-z0-9_.\-]*", text):
        raise ValueError(f"expected a lowercase word, got {text!r}")
    return text


def _list(item: Callable) -> Callable:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",")]
        if any(p == "" for p in parts):
            raise ValueError("empty list item")
        return tuple(item(p) for p in parts)

    parse.__name__ = f"list of {item.__name__.strip('_')}"
    return parse


_floats = _list(_float)
_ints = _list(_int)

# (parser, default); a default of ... marks a required key
SIM_KEYS: dict[str, tuple[Callable, Any]] = {
    "n": (_int, ...),
    "d": (_int, ...),
    "t": (_float, ...),
    "dt": (_float, ...),
    "seed": (_int, ...),
    "sigma": (_float, math.sqrt(2.0)),
    "taming": (_opt_float, None),
    "partial_r": (_int, 0),
    "record_every": (_int, 1),
    "runs": (_int, 1),
    "initial": (_word, "gaussian"),
    "initial_mean": (_floats, (0.0,)),
    "initial_scale": (_floats, (1.0,)),
}

EXPERIMENT_KEYS: dict[str, tuple[Callable, Any]] = {
    # shared sweeps
    "n_list": (_ints, (8, 16, 32, 64)),
    "times": (_floats, (0.25, 0.5, 1.0)),
    "n_paths": (_int, 200),
    # girsanov
    "r_list": (_ints, (0, 1)),
    "alpha": (_floats, (0.5,)),
    # meanfield
    "iterations": (_int, 6),
    "n_ref": (_int, 4000),
    "bandwidth": (_opt_float, None),
    "grid_min": (_float, -6.0),
    "grid_max": (_float, 6.0),
    "grid_cells": (_int, 481),
    "decay_r": (_floats, (1.5, 2.0, 4.0)),
    # chaos
    "method": (_word, "exact-w1-1d"),
    "n_slices": (_int, 64),
    "test_function": (_word, "cos"),
    "phi": (_word, "inverse-quadratic"),
    "g_window": (_floats, (0.5, 1.0)),
    "gaps": (_floats, (0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5)),
    "covariance_function": (_word, "tanh"),
    # bound-oracle
    "t1": (_float, 0.0),
    "windows": (_floats, (0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5)),
    "shifts": (_floats, (0.0,)),
    "conditioning_kappa": (_float, 1.0),
    "conditioning_alpha": (_float, 1.0),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully resolved configuration (every default materialised)."""

    kernel_name: str
    kernel_params: dict[str, float] = field(default_factory=dict)
    sim: dict[str, Any] = field(default_factory=dict)
    experiment: dict[str, Any] = field(default_factory=dict)

    def kernel(self) -> KernelSpec:
        return builtin(self.kernel_name, {**self.kernel_params, "d": self.sim["d"]})

    def initial_law(self) -> InitialLaw:
        s = self.sim
        return InitialLaw(s["initial"], tuple(s["initial_mean"]), tuple(s["initial_scale"]))

    def sim_config(self, **overrides) -> SimConfig:
        s = {**self.sim, **overrides}
        return SimConfig(
            n_particles=s["n"], dim=s["d"], horizon=s["t"], dt=s["dt"], kernel=self.kernel(),
            initial_law=self.initial_law(), seed=s["seed"], diffusion=s["sigma"],
            taming=s["taming"], partial_r=s["partial_r"],
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(self.kernel_name, dict(self.kernel_params), {**self.sim, "seed": int(seed)},
                                dict(self.experiment))

    def render(self) -> str:
        lines = ["[kernel]", f"name = {self.kernel_name}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in sorted(self.kernel_params.items())]
        lines += ["", "[sim]"] + [f"{k} = {_fmt(self.sim[k])}" for k in SIM_KEYS]
        lines += ["", "[experiment]"] + [f"{k} = {_fmt(self.experiment[k])}" for k in EXPERIMENT_KEYS]
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        """64-bit content hash (16 hex digits) of the rendered config."""
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:16]


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, seed_override: int | None = None) -> ExperimentConfig:
    """Parse and fully resolve a config.

    Raises :class:`ConfigError` (with line and column) for syntax problems,
    unknown or duplicate keys, and missing required keys; domain problems
    surface as :class:`ConstraintViolation` from the component that owns the
    rule.
    """
    section = None
    seen: dict[tuple[str, str], int] = {}
    raw: dict[str, dict[str, tuple[str, int, int]]] = {s: {} for s in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        col0 = len(line) - len(line.lstrip()) + 1
        if stripped.startswith("["):
            m = re.fullmatch(r"\[\s*([a-z]+)\s*\]", stripped)
            if not m or m.group(1) not in SECTIONS:
                raise ConfigError(f"unknown section header {stripped!r}; expected one of "
                                  + ", ".join(f"[{s}]" for s in SECTIONS), lineno, col0)
            section = m.group(1)
            continue
        if "=" not in line:
            raise ConfigError("expected 'key = value'", lineno, col0)
        key_part, value_part = line.split("=", 1)
        key = key_part.strip()
        if not _KEY.match(key):
            raise ConfigError(f"invalid key {key!r} (keys are lowercase identifiers)", lineno, col0)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any section header", lineno, col0)
        if (section, key) in seen:
            raise ConfigError(f"duplicate key {key!r} in [{section}] (first defined on line "
                              f"{seen[section, key]}, repeated on line {lineno})", lineno, col0)
        seen[section, key] = lineno
        value = value_part.split("#", 1)[0].strip()
        vcol = len(key_part) + 2 + (len(value_part) - len(value_part.lstrip()))
        if value == "":
            raise ConfigError(f"missing value for {key!r}", lineno, vcol)
        raw[section][key] = (value, lineno, vcol)

    def convert(section, schema, key, entry):
        value, lineno, col = entry
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{section}]; allowed: {', '.join(schema)}", lineno, 1)
        parser = schema[key][0]
        try:
            return parser(value)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno, col) from None

    def resolve(section, schema):
        out = {}
        for key, entry in raw[section].items():
            out[key] = convert(section, schema, key, entry)
        for key, (_, default) in schema.items():
            if key not in out:
                if default is ...:
                    raise ConfigError(f"missing required key {key!r} in [{section}]")
                out[key] = default
        return {k: out[k] for k in schema}

    sim = resolve("sim", SIM_KEYS)
    if seed_override is not None:
        sim["seed"] = int(seed_override)
    experiment = resolve("experiment", EXPERIMENT_KEYS)

    kraw = raw["kernel"]
    if "name" not in kraw:
        raise ConfigError("missing required key 'name' in [kernel]")
    name_value, lineno, col = kraw["name"]
    if name_value not in KERNEL_NAMES:
        raise ConfigError(f"unknown kernel {name_value!r}; choose from {', '.join(KERNEL_NAMES)}", lineno, col)
    allowed = {k: (_float, None) for k in kernel_parameter_keys(name_value) if k != "d"}
    params = {}
    for key, entry in kraw.items():
        if key == "name":
            continue
        params[key] = convert("kernel", allowed, key, entry)
    spec = builtin(name_value, {**params, "d": sim["d"]})
    params = {k: float(v) for k, v in spec.params.items() if k != "d"}
    cfg = ExperimentConfig(name_value, params, sim, experiment)
    cfg.sim_config()  # validate every domain constraint now
    return cfg
