"""Run configuration: defaults < key=value file < command-line flags."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError

FAMILIES = ("sn-ts2vec", "ts2vec", "sn-byol", "ts-byol")
STATISTICS = ("cos", "mmd")
OUT_ENV = "SNCPD_OUT"


@dataclass(frozen=True)
class RunConfig:
    data: str = "synthetic"
    gen_channels: int = 5
    gen_length: int = 5000
    gen_cps: int = 10
    gen_delta: float = 1.5
    gen_min_gap: int = 300
    sphere: bool = False
    split: tuple[float, float, float] = (0.4, 0.2, 0.4)
    family: str = "sn-ts2vec"
    window: int = 50
    code_size: int = 16
    hidden: int = 128
    depth: int = 8
    kernel_size: int = 3
    dropout: float = 0.1
    activation: str = "tanh"
    cap_c: float = 0.9
    statistic: str = "cos"
    margins: tuple[int, ...] = (50,)
    epochs: int = 3
    batch_size: int = 8
    lr: float = 1e-3
    max_steps: int = 0
    train_stride: int = 5
    stride: int = 1
    seed: int = 0
    out: str = ""
    certify_pairs: int = 1000
    certify_steps: int = 8
    power_trials: int = 200
    power_sizes: tuple[int, ...] = (25, 50, 100, 200)
    alpha: float = 0.05
    extra: dict = field(default_factory=dict, compare=False, hash=False)

    # -- derived ---------------------------------------------------------
    @property
    def sn(self) -> bool:
        return self.family.startswith("sn-")

    @property
    def byol(self) -> bool:
        return self.family.endswith("byol")

    @property
    def out_dir(self) -> Path:
        return Path(self.out or os.environ.get(OUT_ENV, "") or "sncpd_out")

    def validate(self) -> "RunConfig":
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {', '.join(FAMILIES)}, got {self.family!r}")
        if self.statistic not in STATISTICS:
            raise ConfigError(f"statistic must be cos or mmd, got {self.statistic!r}")
        if self.statistic == "mmd" and self.byol:
            raise ConfigError("the mmd statistic needs per-timestamp embeddings; BYOL encoders are vector-mode")
        if self.window < 1 or self.stride < 1 or self.train_stride < 1:
            raise ConfigError("window and strides must be positive")
        if not self.margins or any(m <= 0 for m in self.margins):
            raise ConfigError("margins must be positive")
        if self.cap_c <= 0:
            raise ConfigError("cap_c must be positive")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must be three fractions summing to 1, got {self.split}")
        return self

    def canonical(self) -> str:
        """Stable text form used for hashing and manifests (``out`` excluded)."""
        lines = []
        for f in fields(self):
            if f.name in ("out", "extra"):
                continue
            lines.append(f"{f.name}={_render(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(name: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(template, tuple):
            kind = type(template[0]) if template else float
            return tuple(kind(p) for p in raw.split(",") if p.strip())
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {exc}") from None


_DEFAULTS = RunConfig()
KEYS = {f.name for f in fields(RunConfig)} - {"extra"}


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _parse(key, raw, getattr(_DEFAULTS, key))
    return values


def build_config(file_path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if file_path:
        path = Path(file_path)
        if not path.is_file():
            raise ConfigError(f"config file {file_path} not found")
        values.update(parse_config_text(path.read_text(encoding="utf-8")))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in KEYS:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = _parse(key, val, getattr(_DEFAULTS, key)) if isinstance(val, str) else val
    if values.get("family") == "ts-byol" or values.get("family") == "sn-byol":
        values.setdefault("depth", 4)
        values.setdefault("activation", "relu")
    return replace(_DEFAULTS, **values).validate()
