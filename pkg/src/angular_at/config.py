"""Flat ``key = value`` run configuration, overridable from the command line."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Mapping, Optional

from .attacks import train_pgd
from .training import TrainSpec


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _float_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _objective(text: str) -> str:
    return str(text).strip().replace("-", "_")


# key -> parser. Every key is also a CLI flag (--key-with-dashes).
KEYS: Dict[str, Callable[[str], Any]] = {
    "objective": _objective,
    "alpha": float,
    "beta": float,
    "s": float,
    "m": float,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "lr_decay_points": _float_list,
    "seed": int,
    "hidden": _int_list,
    "feature_dim": int,
    "attack_epsilon": float,
    "attack_step_size": float,
    "attack_iterations": int,
    "attack_random_start": _bool,
    "train_data": str,
    "test_data": str,
    "out": str,
    "attacks": str,
    "workers": int,
}

DEFAULTS: Dict[str, Any] = {
    "objective": "angular_at",
    "hidden": (128, 64),
    "feature_dim": 32,
    "workers": 1,
    "attacks": "pgd20",
}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = KEYS[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path) -> Dict[str, Any]:
    return parse_config_text(Path(path).read_text(), str(path))


def merge(file_values: Optional[Mapping[str, Any]], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Defaults, then config file, then non-None command-line values."""
    merged = dict(DEFAULTS)
    merged.update(file_values or {})
    for k, v in overrides.items():
        if v is None:
            continue
        if k not in KEYS:
            raise ConfigError(f"unknown key {k!r}")
        merged[k] = KEYS[k](v) if isinstance(v, str) and KEYS[k] is not str else v
    return merged


def require(values: Mapping[str, Any], keys: Iterable[str]) -> None:
    missing = [k for k in keys if values.get(k) in (None, "")]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))


_TRAIN_FIELDS = ("alpha", "beta", "s", "m", "epochs", "batch_size", "lr", "momentum",
                 "weight_decay", "lr_decay_points", "seed")


def train_spec(values: Mapping[str, Any], n_samples: int) -> TrainSpec:
    """Build a TrainSpec; per-objective published constants fill unset keys."""
    from .training import default_batch_size, spec_for_objective

    kwargs = {k: values[k] for k in _TRAIN_FIELDS if values.get(k) is not None}
    kwargs.setdefault("batch_size", default_batch_size(n_samples))
    seed = kwargs.get("seed", 0)
    attack = train_pgd(seed)
    changes = {}
    for key, fld in (("attack_epsilon", "epsilon"), ("attack_step_size", "step_size"),
                     ("attack_iterations", "iterations"), ("attack_random_start", "random_start")):
        if values.get(key) is not None:
            changes[fld] = values[key]
    try:
        if changes:
            attack = attack.replace(**changes)
        return spec_for_objective(values.get("objective", "angular_at"), attack=attack, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def dump_config(values: Mapping[str, Any]) -> str:
    lines = []
    for k in KEYS:
        if k in values and values[k] is not None:
            v = values[k]
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
