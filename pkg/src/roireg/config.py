"""Flat key-value run configuration (TOML syntax)."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import ConfigurationError
from .segnet import SegConfig
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class PipelineConfig:
    seed: int = 0
    # preprocessing
    spacing: float = 0.8
    size: int = 128
    # registration network and losses
    grid: int = 128
    channels: tuple = (16, 32, 32, 32)
    roi_margin: int = 8
    use_rigid: bool = True
    use_cmsa: bool = True
    srml_mode: str = "full"
    lr: float = 1e-4
    batch_size: int = 1
    epochs: int = 300
    lam: float = 0.4
    gland_weight: float = 0.1
    landmark_weight: float = 0.3
    class_weights: dict = field(default_factory=dict)
    mi_bins: int = 32
    mi_sigma: float = 1.0  # Parzen width in bins; sharper kernels give noisy training gradients
    val_fraction: float = 0.2
    # segmentation
    seg_base_channels: int = 16
    seg_levels: int = 4
    seg_lr: float = 1e-3
    seg_batch_size: int = 5
    seg_epochs: int = 20
    seg_threshold: float = 0.5
    # use annotation gland masks instead of segmentation networks (phantom studies)
    oracle_masks: bool = False

    def __post_init__(self):
        self.class_weights = {int(k): float(v) for k, v in self.class_weights.items()}
        if not isinstance(self.channels, str):
            self.channels = tuple(self.channels)
        self.train_config()

    def train_config(self):
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, lam=self.lam,
                           gland_weight=self.gland_weight, landmark_weight=self.landmark_weight,
                           class_weights=dict(self.class_weights), mi_bins=self.mi_bins,
                           mi_sigma=self.mi_sigma, grid=self.grid, channels=self.channels,
                           roi_margin=self.roi_margin, seed=self.seed, use_rigid=self.use_rigid,
                           use_cmsa=self.use_cmsa, srml_mode=self.srml_mode,
                           val_fraction=self.val_fraction)

    def seg_config(self):
        return SegConfig(self.size, self.seg_base_channels, self.seg_levels, self.seg_lr,
                         self.seg_batch_size, self.seg_epochs, None, self.seed)

    def update(self, **overrides):
        overrides = {k: v for k, v in overrides.items() if v is not None}
        _check_keys(overrides)
        return replace(self, **overrides)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(d["channels"]) if not isinstance(d["channels"], str) else d["channels"]
        d["class_weights"] = {str(k): v for k, v in d["class_weights"].items()}
        return d


def _check_keys(d):
    names = {f.name for f in fields(PipelineConfig)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigurationError(f"unknown configuration keys: {unknown}")


def load_config(path=None, **overrides):
    """Read a flat TOML file (if given) and apply non-None ``overrides``."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        nested = [k for k, v in data.items() if isinstance(v, dict) and k != "class_weights"]
        if nested:
            raise ConfigurationError(f"configuration must be flat; found tables {nested}")
    _check_keys(data)
    return PipelineConfig(**data).update(**overrides)


def dump_config(cfg):
    """TOML text for ``cfg`` (round-trips through ``load_config``)."""
    lines = []
    for k, v in cfg.to_dict().items():
        if k == "class_weights":
            continue
        lines.append(f"{k} = {_toml_value(v)}")
    if cfg.class_weights:
        inner = ", ".join(f'"{k}" = {float(v)!r}' for k, v in cfg.class_weights.items())
        lines.append(f"class_weights = {{ {inner} }}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
