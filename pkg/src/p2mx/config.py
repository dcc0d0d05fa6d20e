"""Run configuration: a flat `key = value` text file.

Unknown keys are errors.  Lists are comma-separated; booleans are
true/false.  Blank lines and #-comments are ignored.
"""

from dataclasses import dataclass, fields

from .errors import ConfigError


@dataclass
class RunConfig:
    seed: int = 0
    epochs_phase1: int = 30
    epochs_phase2: int = 20
    epoch_scale: float = 1.0          # scales the 30/20 split for desk runs
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    weight_decay: float = 1e-5
    views_per_step: int = 3
    weight_chamfer: float = 1.0
    weight_edge: float = 0.1
    weight_laplacian: float = 0.5
    weight_normal: float = 1.6e-4
    iterations: int = 3
    hypothesis_scale: tuple = (0.02,)
    view_limit: int = 0                  # 0 = use all views at inference
    backbone_channels: tuple = (16, 32, 64)
    scoring_width: int = 192
    coarse_width: int = 192
    coarse_level: int = 2
    coarse_radius: float = 0.9
    in_channels: int = 1
    resample_count: int = 4000
    chamfer_squared: bool = True
    dataset_root: str = ""
    train_scenes: tuple = ()
    test_scenes: tuple = ()
    checkpoint_out: str = "model.ckpt"
    loss_csv: str = "loss.csv"
    resume: str = ""

    def __post_init__(self):
        if self.lr_phase1 <= 0 or self.lr_phase2 <= 0:
            raise ConfigError("learning rates must be positive")
        if self.views_per_step < 1:
            raise ConfigError("views_per_step must be >= 1")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.epoch_scale <= 0:
            raise ConfigError("epoch_scale must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if len(self.backbone_channels) != 3:
            raise ConfigError("backbone_channels needs exactly 3 widths")
        if any(s <= 0 for s in self.hypothesis_scale):
            raise ConfigError("hypothesis_scale entries must be positive")


_INT = ("seed", "epochs_phase1", "epochs_phase2", "views_per_step", "iterations",
        "view_limit", "scoring_width", "coarse_width", "coarse_level",
        "in_channels", "resample_count")
_FLOAT = ("epoch_scale", "lr_phase1", "lr_phase2", "weight_decay", "weight_chamfer", "weight_edge",
          "weight_laplacian", "weight_normal", "coarse_radius")
_STR = ("dataset_root", "checkpoint_out", "loss_csv", "resume")
_BOOL = ("chamfer_squared",)
_INT_TUPLE = ("backbone_channels",)
_FLOAT_TUPLE = ("hypothesis_scale",)
_STR_TUPLE = ("train_scenes", "test_scenes")


def _convert(key, raw):
    raw = raw.strip()
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _BOOL:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if key in _INT_TUPLE:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key in _FLOAT_TUPLE:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if key in _STR_TUPLE:
            return tuple(v.strip() for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"key '{key}': cannot parse value {raw!r}") from None


def parse_config(path):
    known = {f.name for f in fields(RunConfig)}
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {stripped!r}")
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{line_no}: unknown key '{key}'")
            if key in values:
                raise ConfigError(f"{path}:{line_no}: duplicate key '{key}'")
            values[key] = _convert(key, raw)
    return RunConfig(**values)


def write_config(path, config: RunConfig):
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
