"""Training configuration and its flat ``key = value`` file format.

Example::

    preset = toy          # base architecture: toy | micro | full
    seed = 42
    epochs = 60
    embed_dims = 16, 32, 64, 128
    share_projection = true

Keys are the field names of :class:`TrainConfig` and :class:`SACNetConfig`;
``preset`` may appear first to pick the architecture defaults. Unknown keys
are rejected.
"""
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .losses import CTLossConfig
from .model import SACNetConfig

PRESETS = {"toy": SACNetConfig.toy, "micro": SACNetConfig.micro, "full": SACNetConfig.full}


@dataclass
class TrainConfig:
    model: SACNetConfig = field(default_factory=SACNetConfig.toy)
    batch_size: int = 8
    base_lr: float = 3e-4
    epochs: int = 60
    seed: int = 42
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kappa_max: float = 32.0
    kappa_init: Optional[float] = None
    adaptive_kappa: bool = True
    gamma: float = 0.6
    precision: str = "float64"
    data_dir: Optional[str] = None
    data_seed: Optional[int] = None
    data_count: int = 250
    train_fraction: float = 0.8
    checkpoint_dir: str = "checkpoints"
    log_dir: str = "logs"
    eval_batch_size: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.base_lr < 0:
            raise ValueError("base_lr must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.precision not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {self.precision!r}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")

    @property
    def loss(self) -> CTLossConfig:
        return CTLossConfig(num_classes=self.model.num_classes, gamma=self.gamma)

    @property
    def initial_kappa(self) -> float:
        return self.kappa_max / 2.0 if self.kappa_init is None else self.kappa_init

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        model = SACNetConfig(**d.pop("model"))
        return cls(model=model, **d)


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig) if f.name != "model"}
_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(SACNetConfig)}


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace("x", ",").split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        entries.append((lineno, key, value))

    preset = "toy"
    model_kw, train_kw = {}, {}
    base_train = TrainConfig()
    for lineno, key, value in entries:
        if key == "preset":
            if value not in PRESETS:
                raise ValueError(f"{source}:{lineno}: unknown preset {value!r}")
            preset = value
    base_model = PRESETS[preset]()
    for lineno, key, value in entries:
        if key == "preset":
            continue
        try:
            if key in _MODEL_FIELDS:
                model_kw[key] = _parse_value(key, value, getattr(base_model, key))
            elif key in _TRAIN_FIELDS:
                default = getattr(base_train, key)
                if default is None:
                    default = {"kappa_init": 0.0, "data_seed": 0}.get(key, "")
                train_kw[key] = _parse_value(key, value, default)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    model = PRESETS[preset](**model_kw)
    return TrainConfig(model=model, **train_kw)


def load_config(path) -> TrainConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {p}: {exc.strerror}") from exc
    return parse_config_text(text, str(p))


def format_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config_text` (modulo comments)."""
    lines = []
    for name in _MODEL_FIELDS:
        v = getattr(cfg.model, name)
        lines.append(f"{name} = {_fmt(v)}")
    for name in _TRAIN_FIELDS:
        lines.append(f"{name} = {_fmt(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)
