"""Pipeline configuration: ``[section]`` / ``key = value`` files or one JSON object.

Both spellings map onto the same dotted keys (``grid.nx``, ``augment.seed``,
...). In the key/value form a key may also be written fully dotted outside
any section. Unknown keys are rejected with the offending line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .lct import DEFAULT_ALPHA
from .rescan import ScanOrder
from .synth import AugmentConfig
from .volumes import GridSpec


class ConfigError(ValueError):
    """Invalid configuration; the message names the file, line and key when known."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int(text) -> int:
    if isinstance(text, bool):
        raise ValueError("expected an integer")
    if isinstance(text, int):
        return text
    if isinstance(text, float):
        if not text.is_integer():
            raise ValueError(f"not an integer: {text!r}")
        return int(text)
    return int(str(text).strip(), 0)


def _parse_float(text) -> float:
    if isinstance(text, bool):
        raise ValueError("expected a number")
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f"not a finite number: {text!r}")
    return value


def _parse_floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        items = list(text)
    else:
        items = [s for s in str(text).replace(";", ",").split(",") if s.strip()]
    return tuple(_parse_float(s) for s in items)


def _parse_str(text) -> str:
    if not isinstance(text, str):
        raise ValueError("expected a string")
    return text.strip()


def _coerce_bool(v):
    return v if isinstance(v, bool) else _parse_bool(str(v))


# dotted key -> parser
SCHEMA: dict[str, Callable[[Any], Any]] = {
    "grid.nx": _parse_int,
    "grid.ny": _parse_int,
    "grid.nt": _parse_int,
    "grid.nz": _parse_int,
    "grid.wall_width_m": _parse_float,
    "grid.bin_width_s": _parse_float,
    "augment.albedo": _parse_float,
    "augment.fwhm_ps": _parse_float,
    "augment.shift_levels": _parse_floats,
    "augment.poisson": _coerce_bool,
    "augment.seed": _parse_int,
    "lct.alpha": _parse_float,
    "lct.correction": _parse_str,
    "rescan.scan_rate": _parse_float,
    "rescan.order": _parse_str,
    "io.input_dir": _parse_str,
    "io.output_dir": _parse_str,
    "io.meters_per_unit": _parse_float,
}


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridSpec
    augment: AugmentConfig = AugmentConfig()
    alpha: float = DEFAULT_ALPHA
    correction: str | None = None
    scan_rate: float = 4.0
    order: ScanOrder = ScanOrder.ROW_MAJOR
    input_dir: str | None = None
    output_dir: str | None = None
    meters_per_unit: float = 1e-3

    def canonical(self) -> dict:
        """Plain-data view with every field spelled out (used for hashing and manifests)."""
        g = self.grid
        return {
            "grid": {"nx": g.nx, "ny": g.ny, "nt": g.nt, "nz": g.nz,
                     "wall_width_m": g.wall_width_m, "bin_width_s": g.bin_width_s},
            "augment": {**dataclasses.asdict(self.augment),
                        "shift_levels": list(self.augment.shift_levels)},
            "lct": {"alpha": self.alpha, "correction": self.correction},
            "rescan": {"scan_rate": self.scan_rate, "order": self.order.value},
            "io": {"input_dir": self.input_dir, "output_dir": self.output_dir,
                   "meters_per_unit": self.meters_per_unit},
        }

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


def _parse_kv(text: str, source: str) -> dict[str, tuple[str, int]]:
    """Return ``{dotted_key: (raw_value, line_number)}``."""
    out: dict[str, tuple[str, int]] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ConfigError(f"{source}:{lineno}: malformed section header {line!r}")
            section = line[1:-1].strip()
            continue
        key, sep, value = line.partition("=")
        if not sep:
            key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key = key.strip()
        dotted = f"{section}.{key}" if section else key
        if dotted in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {dotted!r} "
                              f"(first set on line {out[dotted][1]})")
        out[dotted] = (value.strip(), lineno)
    return out


def _flatten_json(obj: dict, source: str) -> dict[str, tuple[Any, int | None]]:
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: JSON config must be an object")
    out: dict[str, tuple[Any, int | None]] = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            for sub, val in v.items():
                out[f"{k}.{sub}"] = (val, None)
        else:
            out[k] = (v, None)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into validated ``{dotted_key: value}``."""
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            entries = _flatten_json(json.loads(text), source)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    else:
        entries = _parse_kv(text, source)

    values: dict[str, Any] = {}
    for key, (raw, lineno) in entries.items():
        where = f"{source}:{lineno}" if lineno is not None else source
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key](raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    return values


def build_config(values: dict[str, Any], source: str = "<config>",
                 seed: int | None = None) -> PipelineConfig:
    def section(prefix: str) -> dict[str, Any]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in values.items() if k.startswith(prefix + ".")}

    grid_kw = section("grid")
    for required in ("wall_width_m", "bin_width_s"):
        if required not in grid_kw:
            raise ConfigError(f"{source}: missing required key 'grid.{required}'")
    try:
        grid = GridSpec(**grid_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: grid: {exc}") from None

    aug_kw = section("augment")
    if seed is not None:
        aug_kw["seed"] = seed
    try:
        augment = AugmentConfig(**aug_kw)
    except ValueError as exc:
        raise ConfigError(f"{source}: augment: {exc}") from None

    lct = section("lct")
    rescan = section("rescan")
    io = section("io")
    alpha = lct.get("alpha", DEFAULT_ALPHA)
    if not alpha > 0:
        raise ConfigError(f"{source}: lct.alpha must be > 0 (got {alpha})")
    scan_rate = rescan.get("scan_rate", 4.0)
    if not scan_rate > 0:
        raise ConfigError(f"{source}: rescan.scan_rate must be > 0 (got {scan_rate})")
    try:
        order = ScanOrder(rescan.get("order", ScanOrder.ROW_MAJOR.value))
    except ValueError:
        choices = ", ".join(o.value for o in ScanOrder)
        raise ConfigError(f"{source}: rescan.order must be one of {choices}") from None
    mpu = io.get("meters_per_unit", 1e-3)
    if not mpu > 0:
        raise ConfigError(f"{source}: io.meters_per_unit must be > 0 (got {mpu})")
    return PipelineConfig(grid=grid, augment=augment, alpha=alpha, correction=lct.get("correction"),
                          scan_rate=scan_rate, order=order, input_dir=io.get("input_dir"),
                          output_dir=io.get("output_dir"), meters_per_unit=mpu)


def load_config(path, seed: int | None = None) -> PipelineConfig:
    source = str(path)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {source!r}: {exc.strerror or exc}") from None
    return build_config(parse_config_text(text, source), source, seed)
