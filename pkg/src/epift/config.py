"""Run configuration: flat key = value files, defaults, and validation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .nn import ConfigError

PRESETS = ("synthetic", "environmental", "speech", "music")

# class-count splits (train/val/test) for the real-dataset presets
PRESET_SPLITS = {
    "environmental": (35, 5, 10),
    "speech": (25, 7, 8),
    "music": (4, 0, 4),
}

# inner learning rate per preset; speech uses the smaller rate
PRESET_ALPHA = {"environmental": 0.2, "speech": 0.02, "music": 0.2,
                "synthetic": 0.2}


@dataclass
class RunConfig:
    preset: str = "synthetic"
    manifest: str = ""                # dataset manifest path (real presets)
    cache_dir: str = ""               # feature cache location
    way: int = 5
    shot: int = 5
    queries: int = 5
    head: str = "pn"                  # pn | mn | can
    backbone: str = "conv4"           # conv4 | resnet12-lite
    scheme: str = "adft"              # none | rdft | idft | adft
    augment: str = "none"             # none | noise | equalizer | pitch | random
    meta: str = "mc"                  # maml | mc
    curvature_mode: str = "diagonal"  # diagonal | factored
    alpha: float = -1.0               # <0 means "use preset default"
    beta: float = 1e-3
    rounds: int = 8
    second_order: bool = False
    distance: str = "sqeuclidean"
    tau: float = 0.1
    global_weight: float = 1.0
    train_episodes: int = 2000
    eval_episodes: int = 1000
    seed: int = 0
    output_dir: str = "runs/default"
    # synthetic task knobs
    synth_train_classes: int = 20
    synth_test_classes: int = 8
    synth_per_class: int = 12
    mel_bins: int = 20
    frames: int = 16
    widths: str = "8,12,16,20"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if self.head not in ("pn", "mn", "can"):
            raise ConfigError(f"head must be pn|mn|can, got {self.head!r}")
        if self.backbone not in ("conv4", "resnet12-lite"):
            raise ConfigError(f"backbone must be conv4|resnet12-lite, got {self.backbone!r}")
        if self.scheme not in ("none", "rdft", "idft", "adft"):
            raise ConfigError(f"scheme must be none|rdft|idft|adft, got {self.scheme!r}")
        if self.augment not in ("none", "noise", "equalizer", "pitch", "random"):
            raise ConfigError(f"unknown augment {self.augment!r}")
        if self.meta not in ("maml", "mc"):
            raise ConfigError(f"meta must be maml|mc, got {self.meta!r}")
        if self.scheme != "none" and self.shot < 2:
            raise ConfigError(
                f"scheme {self.scheme} requires shot >= 2, got {self.shot}")
        if self.augment != "none" and self.scheme != "adft":
            raise ConfigError(
                "augmentation exists only inside ADFT replication; "
                f"augment={self.augment!r} needs scheme=adft, got {self.scheme!r}")
        if self.way < 2 or self.queries < 1:
            raise ConfigError(f"need way >= 2 and queries >= 1")
        if self.alpha < 0:
            self.alpha = PRESET_ALPHA[self.preset]

    def width_list(self):
        return tuple(int(w) for w in self.widths.split(","))


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def parse_config_text(text, overrides=None):
    """Parse `key = value` lines (# comments allowed); overrides win."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key] = val
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return make_config(values)


def make_config(values):
    kwargs = {}
    by_name = {f.name: f for f in fields(RunConfig)}
    for key, val in values.items():
        if key not in by_name:
            raise ConfigError(f"unknown config key: {key}")
        f = by_name[key]
        if isinstance(val, str):
            if f.type == "bool":
                if val.lower() not in _BOOL:
                    raise ConfigError(f"{key}: expected a boolean, got {val!r}")
                val = _BOOL[val.lower()]
            elif f.type == "int":
                val = int(val)
            elif f.type == "float":
                val = float(val)
        kwargs[key] = val
    return RunConfig(**kwargs)


def config_to_text(cfg: RunConfig):
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"
