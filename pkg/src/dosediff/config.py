"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .ctsim import DOSE_MENU, FAMILIES, PHOTON_FLOOR, SEEN_DOSES, UNSEEN_DOSES, fraction_key, parse_fraction


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _fractions(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass
class RunConfig:
    seed: int = 0
    # simulation
    size: int = 64
    n0: float = 1e4
    families: tuple[str, ...] = FAMILIES
    dose_menu: tuple[float, ...] = DOSE_MENU
    train_doses: tuple[float, ...] = SEEN_DOSES
    unseen_doses: tuple[float, ...] = UNSEEN_DOSES
    n_per_cell: int = 40
    test_per_cell: int = 5
    # perception
    d_e: int = 32
    tau: float = 0.1
    perception_epochs: int = 30
    perception_batch: int = 16
    perception_lr: float = 1e-2
    perception_lr_min: float = 1e-5
    crop_fraction: float = 0.75
    # denoiser
    widths: tuple[int, ...] = (16, 32, 64)
    n_state: int = 4
    scan_directions: int = 4
    use_dose: bool = True
    use_anatomy: bool = True
    T: int = 100
    eta: float = 0.2
    denoiser_steps: int = 2000
    denoiser_batch: int = 4
    patch: int = 32
    denoiser_lr: float = 1e-3
    denoiser_lr_min: float = 1e-5
    checkpoint_every: int = 250
    sample_steps: int = 2
    stochastic_init: bool = False
    dtype: str = "float32"
    # paths, relative to the output directory unless absolute
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    perception_ckpt: str = "perception.ckpt"
    denoiser_ckpt: str = "denoiser.ckpt"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.size < 16 or self.size % 4:
            raise ConfigError("must be a multiple of 4 and at least 16", "size")
        if not self.families or any(f not in FAMILIES for f in self.families):
            raise ConfigError(f"entries must come from {FAMILIES}", "families")
        for key in ("dose_menu", "train_doses", "unseen_doses"):
            vals = getattr(self, key)
            if not vals or any(not 0 < v <= 1 for v in vals):
                raise ConfigError("dose fractions must lie in (0, 1]", key)
            if any(self.n0 * v < PHOTON_FLOOR for v in vals):
                raise ConfigError(f"n0 * fraction falls below the photon floor {PHOTON_FLOOR:g}", key)
        menu = {fraction_key(v) for v in self.dose_menu}
        for key in ("train_doses", "unseen_doses"):
            if not {fraction_key(v) for v in getattr(self, key)} <= menu:
                raise ConfigError("must be a subset of dose_menu", key)
        if {fraction_key(v) for v in self.train_doses} & {fraction_key(v) for v in self.unseen_doses}:
            raise ConfigError("must not overlap train_doses", "unseen_doses")
        positive = ("n0", "n_per_cell", "test_per_cell", "d_e", "tau", "perception_epochs", "perception_batch",
                    "perception_lr", "n_state", "T", "denoiser_steps", "denoiser_batch", "patch", "denoiser_lr",
                    "sample_steps", "checkpoint_every")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError("must be positive", key)
        if self.eta < 0:
            raise ConfigError("must be non-negative", "eta")
        if not 0 < self.crop_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", "crop_fraction")
        if self.sample_steps > self.T:
            raise ConfigError("cannot exceed T", "sample_steps")
        if self.patch > self.size or self.patch % 4:
            raise ConfigError("must be a multiple of 4 no larger than size", "patch")
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("must be positive integers", "widths")
        if self.scan_directions not in (1, 2, 4):
            raise ConfigError("must be 1, 2 or 4", "scan_directions")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("must be float32 or float64", "dtype")

    def path(self, key: str, out_dir: str | Path) -> Path:
        p = Path(getattr(self, key))
        return p if p.is_absolute() else Path(out_dir) / p

    # -------------------------------------------------------------- text form

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def loads(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError("unknown key", key)
            values[key] = value
        values.update(overrides or {})
        parsed = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigError("unknown key", key)
            parsed[key] = _parse(key, value, getattr(cls, key, None) if key in cls.__dict__ else _default(known[key]))
        return cls(**parsed)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text() if path is not None else ""
        return cls.loads(text, overrides)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())


def _default(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], int) and not isinstance(default[0], bool):
                return tuple(int(s) for s in items)
            return _fractions(parse_fraction(s) for s in items)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(parse_fraction(text)) if "/" in text else float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} ({exc})", key) from exc
