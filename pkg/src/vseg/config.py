"""Human-readable key = value run configuration.

One flat namespace covers the architecture, training loop, optimizer,
loss class-set, smoothing constants and evaluation regions.  Every key
has a default; unknown keys are rejected.  Region keys use the
``region_<name>`` prefix and hold comma-separated class codes.
"""

from dataclasses import dataclass, field

from .losses import SMOOTH_EPS
from .network import ArchSpec
from .optim import AdamConfig, TrainConfig

REGION_PREFIX = "region_"


def _parse_bool(raw):
    if raw in ("true", "false"):
        return raw == "true"
    raise ValueError(f"expected true or false, got {raw!r}")


def _parse_int_tuple(raw):
    return tuple(int(v.strip()) for v in raw.split(",") if v.strip())


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> parser; definition order is the canonical file order
KEY_PARSERS = {
    "in_channels": int,
    "class_count": int,
    "contracting_features": _parse_int_tuple,
    "expanding_features": _parse_int_tuple,
    "skip_mode": str,
    "head_count": int,
    "init": str,
    "init_sigma": float,
    "bn_momentum": float,
    "bn_epsilon": float,
    "bn_running_mean_init": float,
    "bn_running_std_init": float,
    "max_epochs": int,
    "patience": int,
    "tolerance": float,
    "augment": str,
    "loss": str,
    "loss_classes": str,
    "aux_weight_half": float,
    "aux_weight_quarter": float,
    "seed": int,
    "lr": float,
    "beta1": float,
    "beta2": float,
    "adam_eps": float,
    "smooth_eps": float,
}

ARCH_KEYS = (
    "in_channels", "class_count", "contracting_features", "expanding_features",
    "skip_mode", "head_count", "init", "init_sigma", "bn_momentum",
    "bn_epsilon", "bn_running_mean_init", "bn_running_std_init",
)


@dataclass
class RunConfig:
    in_channels: int = 1
    class_count: int = 5
    contracting_features: tuple = (8, 8, 16, 32, 32, 64, 64)
    expanding_features: tuple = (32, 64, 16, 32, 8, 16)
    skip_mode: str = "concat"
    head_count: int = 3
    init: str = "gaussian"
    init_sigma: float = 0.01
    bn_momentum: float = 0.5
    bn_epsilon: float = 1e-5
    bn_running_mean_init: float = 1.0
    bn_running_std_init: float = 0.0
    max_epochs: int = 600
    patience: int = 100
    tolerance: float = 1e-6
    augment: str = "full"
    loss: str = "jaccard"
    loss_classes: str = "foreground"
    aux_weight_half: float = 0.0
    aux_weight_quarter: float = 0.0
    seed: int = 0
    lr: float = 5e-5
    beta1: float = 0.1
    beta2: float = 0.001
    adam_eps: float = 1e-8
    smooth_eps: float = SMOOTH_EPS
    regions: dict = field(default_factory=dict)  # name -> tuple of class codes

    def arch_spec(self):
        return ArchSpec(**{k: getattr(self, k) for k in ARCH_KEYS})

    def train_config(self):
        return TrainConfig(
            max_epochs=self.max_epochs,
            patience=self.patience,
            tolerance=self.tolerance,
            augment=self.augment,
            loss=self.loss,
            loss_classes=None if self.loss_classes == "foreground" else loss_class_set(self),
            aux_weights=(self.aux_weight_half, self.aux_weight_quarter),
            smooth_eps=self.smooth_eps,
            seed=self.seed,
        )

    def adam_config(self):
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    def region_map(self):
        if self.regions:
            return dict(self.regions)
        from .metrics import default_region_map

        return default_region_map(self.class_count)


def parse_config(text):
    """Parse key = value lines; '#' starts a comment, blanks ignored."""
    cfg = RunConfig()
    seen = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw_line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        if key.startswith(REGION_PREFIX):
            name = key[len(REGION_PREFIX):]
            if not name:
                raise ValueError(f"line {lineno}: empty region name")
            cfg.regions[name] = _parse_int_tuple(raw)
            continue
        if key not in KEY_PARSERS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            value = KEY_PARSERS[key](raw)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key!r}: {exc}") from exc
        setattr(cfg, key, value)
    cfg.arch_spec()  # surface invalid combinations early
    cfg.train_config()
    cfg.adam_config()
    return cfg


def format_config(cfg):
    """Canonical text form; parse(format(cfg)) reproduces cfg."""
    lines = [f"{key} = {format_value(getattr(cfg, key))}" for key in KEY_PARSERS]
    for name, classes in cfg.regions.items():
        lines.append(f"{REGION_PREFIX}{name} = {format_value(tuple(classes))}")
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def loss_class_set(cfg):
    """The class codes entering the training loss.

    "foreground" (the default) means every class except background;
    "all" includes background; otherwise comma-separated class codes.
    """
    raw = cfg.loss_classes
    if raw == "foreground":
        return tuple(range(1, cfg.class_count))
    if raw == "all":
        return tuple(range(cfg.class_count))
    return _parse_int_tuple(raw)
