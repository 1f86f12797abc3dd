"""Plain-text ``key=value`` run configuration.

One key per line; blank lines and ``#`` comments are ignored; unknown keys
are rejected. Integer lists are comma separated. Every key has a default,
so an empty file is a valid configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

from .embedding import DgrConfig
from .errors import DataFormatError
from .network import NetConfig


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 1
    batch_size: int = 1
    max_steps: int | None = None
    augment_hflip: bool = False


def _parse_int_list(raw: str) -> tuple:
    return tuple(int(part) for part in raw.split(","))


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_opt_int(raw: str):
    return None if raw == "" or raw.lower() == "none" else int(raw)


_NET_KEYS = {
    "color_widths": _parse_int_list,
    "geometry_widths": _parse_int_list,
    "decoder_widths": _parse_int_list,
    "dgr_dims": _parse_int_list,
    "k": int,
    "embed_dim": int,
    "loss_reduction": str,
    "sampling": str,
    "sample_count": int,
    "guidance": str,
    "eval_point_cap": _parse_opt_int,
}

_TRAIN_KEYS = {
    "lr": float,
    "beta1": float,
    "beta2": float,
    "epochs": int,
    "batch_size": int,
    "max_steps": _parse_opt_int,
    "augment_hflip": _parse_bool,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        if not sep:
            raise DataFormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        parser = _NET_KEYS.get(key) or _TRAIN_KEYS.get(key)
        if parser is None:
            raise DataFormatError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise DataFormatError(f"{source}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = parser(raw)
        except ValueError as exc:
            raise DataFormatError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def build_configs(values: dict) -> tuple[NetConfig, TrainConfig]:
    dgr_kwargs = {}
    if "dgr_dims" in values:
        dgr_kwargs["layer_dims"] = values.pop("dgr_dims")
    if "k" in values:
        dgr_kwargs["k"] = values.pop("k")
    if "embed_dim" in values:
        dgr_kwargs["embed_dim"] = values.pop("embed_dim")
    net_kwargs = {k: values.pop(k) for k in list(values) if k in _NET_KEYS}
    train_kwargs = {k: values.pop(k) for k in list(values) if k in _TRAIN_KEYS}
    net = NetConfig(dgr=DgrConfig(**dgr_kwargs), **net_kwargs)
    return net, TrainConfig(**train_kwargs)


def load_config(path) -> tuple[NetConfig, TrainConfig]:
    """Read a config file; missing keys fall back to the documented defaults."""
    with open(path) as fh:
        text = fh.read()
    return build_configs(parse_config_text(text, source=str(path)))


def default_configs() -> tuple[NetConfig, TrainConfig]:
    return NetConfig(), TrainConfig()
