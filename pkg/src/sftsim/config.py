"""Simulator configuration: a ``key = value`` text file."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .chainsim import BufferConfig
from .engine import ScuConfig

_SCU = {"frequency_hz": float, "pif": int, "pof": int, "rho": float,
        "preu_fill": int, "postu_fill": int}
_BUF = {"num_banks": int, "activation_bits": int, "weight_bits": int,
        "dram_word_bytes": int, "bank_capacity": int}


class ConfigError(ValueError):
    pass


def parse_sim_config(text: str, source: str = "<config>"
                     ) -> tuple[ScuConfig, BufferConfig]:
    scu, buf = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        table = scu if key in _SCU else buf if key in _BUF else None
        if table is None:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        conv = _SCU.get(key) or _BUF[key]
        try:
            table[key] = conv(float(val)) if conv is int and "e" in val.lower() \
                else conv(val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: "
                              f"{val!r}") from None
    try:
        return ScuConfig(**scu), BufferConfig(**buf)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_sim_config(path: str | Path | None) -> tuple[ScuConfig, BufferConfig]:
    if path is None:
        return ScuConfig(), BufferConfig()
    return parse_sim_config(Path(path).read_text(), str(path))


def config_dict(scu: ScuConfig, buf: BufferConfig) -> dict:
    out = {f.name: getattr(scu, f.name) for f in fields(scu)}
    out.update({f.name: getattr(buf, f.name) for f in fields(buf)})
    return out
