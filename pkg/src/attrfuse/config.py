"""Run configuration and its flat ``key = value`` file format."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .distill import CONTRASTIVE_MODES, POOL_MODES
from .errors import ConfigurationError
from .primitives import ACTIVATIONS

ABLATION_ROWS = {
    "baseline": dict(afm_enabled=False, ckdm_enabled=False, ckdm_loss_enabled=False),
    "+CKDM": dict(afm_enabled=False, ckdm_enabled=True, ckdm_loss_enabled=True),
    "+AFM": dict(afm_enabled=True, ckdm_enabled=False, ckdm_loss_enabled=False),
    "+AFM+CKDM": dict(afm_enabled=True, ckdm_enabled=True, ckdm_loss_enabled=True),
}


@dataclass
class TrainConfig:
    # data
    train_manifest: str = ""
    eval_manifest: str = ""
    knowledge_streams: tuple[str, ...] = ("synthetic",)
    # model widths; defaults are the full-size preset
    d_v: int = 768
    d_e: int = 300
    d_t: int = 768
    d: int = 512
    d_h: int = 512
    d_a: int = 512
    d_b: int = 512
    heads: int = 8
    g_att_layers: int = 5
    ffn_mult: int = 2
    fusion_rounds: int = 1
    activation: str = "relu"
    attention_activation: str = "relu"  # hidden layer of the top-down scorers
    pool: str = "mean"
    # optimisation
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 100
    batch_size: int = 16
    seed: int = 0
    shuffle_seed: int | None = None
    # objective
    contrastive_mode: str = "paper_literal"
    temperature: float = 1.0
    cl_weight: float = 1.0
    afm_enabled: bool = True
    ckdm_enabled: bool = True
    ckdm_loss_enabled: bool = True
    precision: str = "f64"
    # evaluation / verification
    soft_score_scale: float = 1.0
    grad_eps: float = 1e-5
    grad_tol: float = 1e-4

    @property
    def data_seed(self) -> int:
        return self.seed if self.shuffle_seed is None else self.shuffle_seed

    @property
    def contrastive_active(self) -> bool:
        return self.ckdm_enabled and self.ckdm_loss_enabled and self.cl_weight > 0

    def validate(self) -> "TrainConfig":
        for key in ("d_v", "d_e", "d_t", "d", "d_h", "d_a", "d_b", "heads",
                    "g_att_layers", "ffn_mult", "fusion_rounds", "batch_size"):
            if getattr(self, key) < 1:
                raise ConfigurationError(f"{key} must be >= 1")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.d % 2 or (self.d // 2) % self.heads:
            raise ConfigurationError(f"d={self.d} must be even with d/2 divisible by heads={self.heads}")
        if self.contrastive_active and self.batch_size < 2:
            raise ConfigurationError("the contrastive loss needs batch_size >= 2 for negatives")
        if self.contrastive_mode not in CONTRASTIVE_MODES:
            raise ConfigurationError(f"contrastive_mode must be one of {CONTRASTIVE_MODES}")
        if self.pool not in POOL_MODES:
            raise ConfigurationError(f"pool must be one of {POOL_MODES}")
        for key in ("activation", "attention_activation"):
            if getattr(self, key) not in ACTIVATIONS:
                raise ConfigurationError(f"{key} must be one of {ACTIVATIONS}")
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError("precision must be f32 or f64")
        if self.cl_weight < 0 or self.temperature <= 0:
            raise ConfigurationError("cl_weight must be >= 0 and temperature > 0")
        if not self.knowledge_streams:
            raise ConfigurationError("at least one knowledge stream is required")
        return self

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    def with_overrides(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(name: str, text: str):
    if name == "betas":
        parts = tuple(float(p) for p in text.split(","))
        if len(parts) != 2:
            raise ValueError("betas needs two comma-separated values")
        return parts
    if name == "knowledge_streams":
        return tuple(p.strip() for p in text.split(",") if p.strip())
    if name == "shuffle_seed":
        return None if text.lower() == "none" else int(text)
    default = TrainConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Relative data paths
    resolve against ``base_dir``."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        if key not in known:
            raise ConfigurationError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from None
    if base_dir is not None:
        for key in ("train_manifest", "eval_manifest"):
            if values.get(key) and not os.path.isabs(values[key]):
                values[key] = str(Path(base_dir) / values[key])
    return TrainConfig(**values).validate()


def load_config(path: str | os.PathLike) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


DESK_PRESET = dict(d_v=32, d_e=32, d_t=32, d=32, d_h=32, d_a=32, d_b=32, heads=4,
                   g_att_layers=2, batch_size=16)


def desk_config(**overrides) -> TrainConfig:
    """The small reference configuration used throughout the test-suite."""
    return TrainConfig(**{**DESK_PRESET, **overrides}).validate()


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
