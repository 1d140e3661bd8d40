"""Declarative run configuration: JSON schema checking with field-path
diagnostics, dotted-path overrides, and geometry construction."""

from __future__ import annotations

import json

from .geometry import (CavitySpec, DumbbellSpec, ResonatorSpec, build_resonator,
                       cavity_from_config, resonator_from_config)


class ConfigError(ValueError):
    """Invalid configuration; message carries the offending field path."""


_NUM = (int, float)

# field path -> (type tuple, required)
_SCHEMA = {
    "domain": (dict, True),
    "domain.kind": (str, True),
    "mesh": (dict, False),
    "mesh.h": (_NUM, False),
    "mesh.neck_layers": (int, False),
    "mesh.order": (int, False),
    "mesh.seed": (int, False),
    "mesh.h_exterior": (_NUM, False),
    "eigs": (dict, False),
    "eigs.count": (int, False),
    "eigs.shift": (_NUM, False),
    "eigs.probe": (list, False),
    "sweep": (dict, False),
    "sweep.eps_list": (list, False),
    "sweep.sigma0": (_NUM, False),
    "sweep.L_values": (list, False),
    "nodal": (dict, False),
    "nodal.mode_index": (int, False),
    "nodal.eps_list": (list, False),
    "nodal.delta_factor": (_NUM, False),
    "gluing": (dict, False),
    "gluing.eps_list": (list, False),
    "gluing.n_probes": (int, False),
    "wave": (dict, False),
    "wave.eps": (_NUM, False),
    "wave.T": (_NUM, False),
    "wave.sample_every": (int, False),
    "wave.sponge_strength": (_NUM, False),
}

_DOMAIN_KINDS = ("rectangle", "disc", "cavity", "resonator", "dumbbell")


def _get(cfg, path):
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return None
        node = node[part]
    return node


def validate_config(cfg: dict) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("top level: expected an object")
    for path, (typ, required) in _SCHEMA.items():
        val = _get(cfg, path)
        if val is None:
            if required:
                raise ConfigError(f"{path}: required field missing")
            continue
        if typ is int and isinstance(val, bool):
            raise ConfigError(f"{path}: expected integer, got bool")
        if not isinstance(val, typ):
            raise ConfigError(f"{path}: expected {getattr(typ, '__name__', typ)}, "
                              f"got {type(val).__name__}")
    kind = cfg["domain"].get("kind")
    if kind not in _DOMAIN_KINDS:
        raise ConfigError(f"domain.kind: must be one of {_DOMAIN_KINDS}, got {kind!r}")
    if kind == "rectangle":
        for fld in ("width", "height"):
            if not isinstance(cfg["domain"].get(fld), _NUM):
                raise ConfigError(f"domain.{fld}: required number for rectangles")
    if kind in ("resonator", "dumbbell"):
        if "cavity" not in cfg["domain"]:
            raise ConfigError("domain.cavity: required for resonator/dumbbell")
        if not isinstance(cfg["domain"].get("L"), _NUM):
            raise ConfigError("domain.L: required number")
    eps_list = _get(cfg, "sweep.eps_list")
    if eps_list is not None and not all(isinstance(e, _NUM) and e > 0
                                        for e in eps_list):
        raise ConfigError("sweep.eps_list: entries must be positive numbers")
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return validate_config(cfg)


def apply_overrides(cfg: dict, overrides) -> dict:
    """--set key.path=value with JSON-parsed values."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key}: {p} is not an object")
        node[parts[-1]] = val
    return validate_config(cfg)


def domain_spec(cfg: dict, eps: float = None):
    """Geometry object for the configured domain (eps optionally overridden)."""
    dom = cfg["domain"]
    kind = dom["kind"]
    if kind == "rectangle":
        return ("rectangle", float(dom["width"]), float(dom["height"]))
    if kind in ("disc", "cavity"):
        return cavity_from_config(dom.get("cavity", dom))
    if kind == "resonator":
        sub = dict(dom)
        if eps is not None:
            sub["eps"] = eps
        return resonator_from_config(sub)
    if kind == "dumbbell":
        cavity = cavity_from_config(dom["cavity"])
        e = eps if eps is not None else dom.get("eps")
        if e is None:
            raise ConfigError("domain.eps: required for a dumbbell build")
        return DumbbellSpec(cavity, float(dom["L"]), float(e))
    raise ConfigError(f"domain.kind: unsupported {kind!r}")
