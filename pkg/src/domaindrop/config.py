"""Flat ``key = value`` run configuration with typed validation.

Blank lines and ``#`` comments are ignored.  Unknown keys are errors.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError

VARIANT_NAMES = ("baseline", "dd", "dd+lt", "dd+cl", "full")


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text, str(path))


def parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_layers(value) -> tuple[int, ...] | None:
    if value is None:
        return None
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    v = str(value).strip().lower()
    if v in ("", "all"):
        return None
    return tuple(int(p) for p in v.split(",") if p.strip())


def _optional_float(value) -> float | None:
    if value is None or str(value).strip().lower() in ("none", "off"):
        return None
    return float(value)


@dataclass
class TrainConfig:
    dataset: str = ""
    target_domain: str = "0"
    backbone: str = "auto"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.002
    momentum: float = 0.9
    weight_decay: float = 5e-4
    p_drop: float = 0.33
    p_active: float = 0.8
    all_layers_p_active: float = 0.5
    grl_lambda: float = 0.25
    consistency_weight: float = 1.5
    temperature: float = 5.0
    candidate_layers: tuple[int, ...] | None = None
    rescale: bool = True
    clip_grad_norm: float | None = 5.0
    seed: int = 0
    variant: str = "full"
    val_fraction: float = 0.1
    out: str = "run"

    def validate(self) -> "TrainConfig":
        checks = [
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr > 0, "lr must be > 0"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (self.weight_decay >= 0, "weight_decay must be >= 0"),
            (0 <= self.p_drop < 1, "p_drop must lie in [0, 1)"),
            (0 <= self.p_active <= 1, "p_active must lie in [0, 1]"),
            (0 <= self.all_layers_p_active <= 1, "all_layers_p_active must lie in [0, 1]"),
            (self.grl_lambda >= 0, "grl_lambda must be >= 0"),
            (self.consistency_weight >= 0, "consistency_weight must be >= 0"),
            (self.temperature > 0, "temperature must be > 0"),
            (self.clip_grad_norm is None or self.clip_grad_norm > 0, "clip_grad_norm must be > 0 or none"),
            (self.seed >= 0, "seed must be >= 0"),
            (self.variant in VARIANT_NAMES, f"variant must be one of {', '.join(VARIANT_NAMES)}"),
            (0 <= self.val_fraction < 1, "val_fraction must lie in [0, 1)"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        if self.candidate_layers is not None and not self.candidate_layers:
            raise ConfigError("candidate_layers must not be empty")
        return self

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        defaults = cls()
        kw: dict[str, Any] = {}
        for key, value in raw.items():
            try:
                if key == "candidate_layers":
                    kw[key] = parse_layers(value)
                elif key == "rescale":
                    kw[key] = value if isinstance(value, bool) else parse_bool(value)
                elif key == "clip_grad_norm":
                    kw[key] = _optional_float(value)
                else:
                    kw[key] = type(getattr(defaults, key))(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {value!r} ({exc})") from None
        return cls(**kw).validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_kv(path))

    def estimator_params(self) -> dict[str, Any]:
        keep = ("backbone", "epochs", "batch_size", "lr", "momentum", "weight_decay", "p_drop", "p_active",
                "all_layers_p_active", "grl_lambda", "consistency_weight", "temperature", "candidate_layers",
                "rescale", "clip_grad_norm", "variant")
        params = {k: getattr(self, k) for k in keep}
        params["random_state"] = self.seed
        return params

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        if d["candidate_layers"] is not None:
            d["candidate_layers"] = list(d["candidate_layers"])
        return d
