"""Run configuration: sectioned ``key = value`` files (or JSON) checked against a schema.

Grammar of the INI form::

    [section]
    key = value          ; one setting per line, '#' or ';' starts a comment line

Vectors are comma separated (``mean = 1, 0``), matrices use ``;`` between
rows (``cov = 1.9, 0.8; 0.8, 1.3``) and mixture parts use ``|``.  JSON input
is an object of sections holding objects of keys.  Unknown sections or keys
are errors; every key has a documented default except the seed of training
subcommands.
"""

from __future__ import annotations

import configparser
import json
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .densities import Categorical, Density, Gaussian, Mixture

__all__ = ["ConfigError", "load_config", "parse_density", "SCHEMAS", "TRAINING_COMMANDS"]

TRAINING_COMMANDS = ("descent", "gan", "seqgen", "ssl")


class ConfigError(ValueError):
    pass


def _vector(v) -> list[float]:
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    return [float(x) for x in str(v).replace(",", " ").split()]


def _matrix(v) -> list[list[float]]:
    if isinstance(v, (list, tuple)):
        return [_vector(r) for r in v]
    return [_vector(r) for r in str(v).split(";")]


def _ints(v) -> tuple[int, ...]:
    return tuple(int(x) for x in _vector(v))


def _str_list(v) -> list[str]:
    if isinstance(v, (list, tuple)):
        return [str(x).strip() for x in v]
    return [s.strip() for s in str(v).split(",") if s.strip()]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _choice(*options) -> Callable[[Any], str]:
    def parse(v):
        s = str(v).strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s
    return parse


def _seed(v) -> int:
    s = int(v)
    if not 0 <= s < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return s


_DENSITY_KEYS = {
    "kind": (_choice("gaussian", "mixture", "categorical"), "gaussian"),
    "mean": (_vector, None),
    "cov": (_matrix, None),
    "means": (str, None),
    "covs": (str, None),
    "weights": (_vector, None),
    "atoms": (_vector, None),
    "probs": (_vector, None),
}

_MU_KEYS = {"rule": (_choice("average", "uniform"), "average"), "level": (float, 1.0)}
_RUN_KEYS = {"seed": (_seed, None), "out": (str, None)}

SCHEMAS: dict[str, dict[str, dict[str, tuple]]] = {
    "ipm": {
        "run": _RUN_KEYS,
        "P": _DENSITY_KEYS,
        "Q": _DENSITY_KEYS,
        "mu": _MU_KEYS,
        "grid": {"n": (int, 256)},
        "ipm": {"methods": (_str_list, None)},
    },
    "pde": {
        "run": _RUN_KEYS,
        "P": _DENSITY_KEYS,
        "Q": _DENSITY_KEYS,
        "mu": _MU_KEYS,
        "grid": {"n": (int, 256)},
        "pde": {"with_cdf_form": (_bool, True), "arrows": (int, 20)},
    },
    "descent": {
        "run": _RUN_KEYS,
        "target": _DENSITY_KEYS,
        "init": _DENSITY_KEYS,
        "grid": {"n": (int, None)},
        "descent": {
            "particles": (int, 512),
            "steps": (int, 200),
            "dt": (float, 0.1),
            "critic_source": (_choice("pde", "restricted"), "pde"),
            "features": (int, 0),
            "keep_every": (int, 1),
        },
    },
    "gan": {
        "run": _RUN_KEYS,
        "target": _DENSITY_KEYS,
        "gan": {
            "kind": (_choice("sobolev", "fisher", "wgan_gp"), "sobolev"),
            "rule": (_choice("average", "gp", "smoothed"), "average"),
            "iters": (int, 20000),
            "lr": (float, 1e-4),
            "rho": (float, 1e-5),
            "n_critic": (int, 5),
            "batch": (int, 256),
            "noise_dim": (int, 8),
            "gen_widths": (_ints, (32, 32)),
            "critic_widths": (_ints, (32, 32)),
            "activation": (_choice("tanh", "softplus", "relu"), "tanh"),
            "lambda_gp": (float, 10.0),
            "sigma0": (float, 0.0),
            "log_every": (int, 10),
            "samples": (int, 1000),
        },
    },
    "seqgen": {
        "run": _RUN_KEYS,
        "seqgen": {
            "kind": (_choice("sobolev", "fisher", "wgan_gp"), "sobolev"),
            "rule": (_choice("average", "gp", "smoothed_annealed"), "smoothed_annealed"),
            "vocab": (int, 5),
            "length": (int, 8),
            "corpus_size": (int, 10000),
            "corpus_seed": (int, None),
            "iters": (int, 10000),
            "sigma0": (float, 1.5),
            "lr": (float, 1e-4),
            "rho": (float, 1e-5),
            "n_critic": (int, 5),
            "batch": (int, 64),
            "noise_dim": (int, 16),
            "width": (int, 32),
            "layers": (int, 2),
            "eval_every": (int, 1000),
            "eval_samples": (int, 2000),
            "debug_copy": (_bool, False),
        },
    },
    "ssl": {
        "run": _RUN_KEYS,
        "ssl": {
            "preset": (_choice("toy", "appendix_d"), "toy"),
            "formulation": (_choice("fisher_only", "fisher_plus_sobolev"), "fisher_plus_sobolev"),
            "lambda_ce": (float, None),
            "rho_f": (float, None),
            "rho_s": (float, None),
            "lr": (float, None),
            "steps": (int, None),
            "n_classes": (int, None),
            "n_labeled": (int, None),
            "n_unlabeled": (int, None),
            "n_test": (int, None),
            "baseline": (_bool, True),
        },
    },
    "selftest": {"run": _RUN_KEYS},
}


def _read_raw(path: Path) -> dict[str, dict[str, Any]]:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json" or text.lstrip().startswith("{"):
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(raw, dict) or not all(isinstance(v, dict) for v in raw.values()):
            raise ConfigError(f"{path}: JSON config must map sections to objects")
        return raw
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=None, default_section="\x00")
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return {s: dict(parser[s]) for s in parser.sections()}


def load_config(command: str, path: str | Path | None) -> dict[str, dict[str, Any]]:
    """Parse and validate; returns every section of the schema with defaults filled in."""
    schema = SCHEMAS[command]
    raw = _read_raw(Path(path)) if path is not None else {}
    out: dict[str, dict[str, Any]] = {}
    for section in raw:
        if section not in schema:
            raise ConfigError(f"unknown section [{section}] for '{command}' "
                              f"(allowed: {', '.join(schema)})")
    for section, keys in schema.items():
        given = raw.get(section, {})
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key '{key}' in [{section}] (allowed: {', '.join(keys)})")
        sec = {}
        for key, (parse, default) in keys.items():
            if key in given:
                try:
                    sec[key] = parse(given[key])
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            else:
                sec[key] = default
        out[section] = sec
    return out


def parse_density(spec: dict[str, Any], where: str) -> Density:
    """Build a density from a validated section."""
    kind = spec["kind"]
    try:
        if kind == "gaussian":
            if spec["mean"] is None or spec["cov"] is None:
                raise ValueError("gaussian needs mean and cov")
            return Gaussian(spec["mean"], spec["cov"])
        if kind == "mixture":
            if spec["means"] is None or spec["covs"] is None:
                raise ValueError("mixture needs means and covs")
            means = [_vector(m) for m in spec["means"].split("|")]
            covs = [_matrix(c) for c in spec["covs"].split("|")]
            if len(means) != len(covs):
                raise ValueError("means and covs list different numbers of components")
            return Mixture([Gaussian(m, c) for m, c in zip(means, covs)], spec["weights"])
        if spec["atoms"] is None or spec["probs"] is None:
            raise ValueError("categorical needs atoms and probs")
        return Categorical(spec["atoms"], spec["probs"])
    except ValueError as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def echo(cfg: dict[str, dict[str, Any]]) -> dict:
    """JSON-safe copy of a parsed config."""
    def conv(v):
        if isinstance(v, tuple):
            return list(v)
        if isinstance(v, np.generic):
            return v.item()
        return v
    return {s: {k: conv(v) for k, v in sec.items()} for s, sec in cfg.items()}
