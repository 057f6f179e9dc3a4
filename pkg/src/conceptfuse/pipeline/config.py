from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..adapters import ADAPTER_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # adapter
    adapter: str = "krona_wed"
    factor: int = 16
    rank: int = 4
    detach_norm: bool = False
    # losses
    lambda_attn: float = 0.001
    lambda_w: float = 0.01
    lambda_con: float = 0.001
    swap_masks: bool = False
    # single-concept training
    train_steps: int = 50
    lr: float = 3e-3
    allow_mask_fallback: bool = False
    # sampling
    sampler_steps: int = 20
    # matching attention
    sama: bool = True
    sama_window: list[float] = field(default_factory=lambda: [0.2, 0.8])
    sama_layer: str = "up16.attn1"
    # layout guidance
    guidance: bool = True
    guidance_lambda: float = 0.1
    guidance_tau: float = 0.3
    phi0: float = 10.0
    guidance_order: str = "guidance_first"
    # fusion
    fusion_mu: float | None = None
    probe_timesteps: int = 4
    # base model
    base_seed: int = 0
    base_steps: int = 800
    base_cache: str | None = None
    # run
    seed: int = 0
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.adapter not in ADAPTER_KINDS:
            raise ConfigError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        if self.factor < 1 or self.rank < 1:
            raise ConfigError("factor and rank must be >= 1")
        for name in ("lambda_attn", "lambda_w", "lambda_con", "lr", "phi0", "guidance_lambda"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.train_steps < 0 or self.sampler_steps < 1 or self.probe_timesteps < 1 or self.base_steps < 0:
            raise ConfigError("step counts out of range")
        if len(self.sama_window) != 2 or not 0.0 <= self.sama_window[0] <= self.sama_window[1] <= 1.0:
            raise ConfigError(f"sama_window must be [start, end] within [0, 1], got {self.sama_window}")
        if not 0.0 <= self.guidance_tau <= 1.0:
            raise ConfigError("guidance_tau must lie in [0, 1]")
        if self.guidance_order not in ("guidance_first", "denoise_first"):
            raise ConfigError(f"unknown guidance_order {self.guidance_order!r}")
        if self.fusion_mu is not None and self.fusion_mu < 0:
            raise ConfigError("fusion_mu must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        data = dict(data)
        if "sama_window" in data:
            data["sama_window"] = [float(v) for v in data["sama_window"]]
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        _check_types(cfg)
        return cfg.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _check_types(cfg: RunConfig) -> None:
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if value is None or default is None:
            continue
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            if ok:
                setattr(cfg, f.name, float(value))
        else:
            ok = isinstance(value, type(default))
        if not ok:
            raise ConfigError(f"{f.name} has wrong type {type(value).__name__}")
