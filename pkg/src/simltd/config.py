"""Run configuration: dataclasses plus the INI-style config file format.

Every tunable constant appears in the file (sections [data], [stage1],
[stage2], [stage3], [semi], [eval]); command-line flags override file values,
and the effective config is snapshotted verbatim into each run directory.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .errors import ConfigError

STAGES = ("pretrain", "transfer", "finetune")


@dataclass(frozen=True)
class DataConfig:
    train_path: str = ""
    val_path: str = ""
    unlabeled_path: str = ""
    images_root: str = ""
    partition_m: int = 30          # head/tail image-count threshold
    bin_common_max: int = 100      # rare bin tops out at partition_m
    rfs_t: float = 0.05            # desk-scale repeat-factor threshold
    k: int = 30
    seeds: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class SemiConfig:
    enabled: bool = False
    tau: float = 0.7
    momentum: float = 0.999
    alpha: float = 1.0
    unlabeled_ratio: float = 1.0   # unlabeled:labeled batch ratio
    paste_enabled: bool = True     # stage-2 rare-instance paste
    paste_count_lo: int = 1
    paste_count_hi: int = 3


@dataclass(frozen=True)
class StageConfig:
    stage: str
    iterations: int
    base_lr: float
    batch_size: int = 8
    lr_factor: float = 1.0
    freeze_policy: str = "all"     # all | head_only
    scp: bool = True
    rfs: bool = True
    semi_enabled: bool = False
    momentum: float = 0.9
    warmup_frac: float = 0.05

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.stage == "finetune" and not self.lr_factor < 1:
            raise ConfigError("finetune lr_factor must be < 1")
        if self.stage in ("transfer", "finetune") and self.freeze_policy != "head_only":
            raise ConfigError(f"{self.stage} must freeze the representation "
                              "(freeze_policy = head_only)")

    @property
    def effective_lr(self) -> float:
        return self.base_lr * self.lr_factor


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "standard"
    score_thresh: float = 0.05
    nms_iou: float = 0.6
    max_dets: int = 300

    def __post_init__(self):
        if self.protocol not in ("standard", "fixed"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: StageConfig = field(default_factory=lambda: StageConfig(
        stage="pretrain", iterations=3000, base_lr=0.02))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(
        stage="transfer", iterations=500, base_lr=0.02, freeze_policy="head_only"))
    stage3: StageConfig = field(default_factory=lambda: StageConfig(
        stage="finetune", iterations=1000, base_lr=0.02, lr_factor=0.1,
        freeze_policy="head_only", scp=False, rfs=True))
    semi: SemiConfig = field(default_factory=SemiConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    regressor_source: str = "head"   # head | tail | average
    skip_stage2: bool = False
    seed: int = 1

    def __post_init__(self):
        if self.regressor_source not in ("head", "tail", "average"):
            raise ConfigError(f"unknown regressor_source {self.regressor_source!r}")

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)


def default_config() -> RunConfig:
    return RunConfig()


_SECTION_TYPES = {
    "data": DataConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "stage3": StageConfig,
    "semi": SemiConfig,
    "eval": EvalConfig,
}
_TOP_LEVEL = ("regressor_source", "skip_stage2", "seed")


def _coerce(value: str, template):
    if isinstance(template, bool):
        lowered = value.strip().lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(template, int):
        return int(value)
    if isinstance(template, float):
        return float(value)
    if isinstance(template, tuple):
        parts = [p for p in value.replace(",", " ").split() if p]
        return tuple(int(p) for p in parts)
    return value


def config_to_text(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {name: str(getattr(cfg, name)) for name in _TOP_LEVEL}
    for section, sub in (("data", cfg.data), ("stage1", cfg.stage1),
                         ("stage2", cfg.stage2), ("stage3", cfg.stage3),
                         ("semi", cfg.semi), ("eval", cfg.eval)):
        values = asdict(sub)
        parser[section] = {
            k: (" ".join(str(x) for x in v) if isinstance(v, tuple) else str(v))
            for k, v in values.items()}
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def config_from_text(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    cfg = default_config()
    kwargs = {}
    for section, template in (("data", cfg.data), ("stage1", cfg.stage1),
                              ("stage2", cfg.stage2), ("stage3", cfg.stage3),
                              ("semi", cfg.semi), ("eval", cfg.eval)):
        if not parser.has_section(section):
            kwargs[section if section != "eval" else "eval"] = template
            continue
        values = {}
        for key, raw in parser.items(section):
            if not hasattr(template, key):
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = _coerce(raw, getattr(template, key))
        kwargs[section] = replace(template, **values)
    top = {}
    if parser.has_section("run"):
        defaults = default_config()
        for key, raw in parser.items("run"):
            if key not in _TOP_LEVEL:
                raise ConfigError(f"unknown key {key!r} in section [run]")
            top[key] = _coerce(raw, getattr(defaults, key))
    return RunConfig(data=kwargs["data"], stage1=kwargs["stage1"],
                     stage2=kwargs["stage2"], stage3=kwargs["stage3"],
                     semi=kwargs["semi"], eval=kwargs["eval"], **top)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return config_from_text(path.read_text())


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(config_to_text(cfg))


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:10]


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "run": {name: getattr(cfg, name) for name in _TOP_LEVEL},
        "data": asdict(cfg.data),
        "stage1": asdict(cfg.stage1),
        "stage2": asdict(cfg.stage2),
        "stage3": asdict(cfg.stage3),
        "semi": asdict(cfg.semi),
        "eval": asdict(cfg.eval),
    }
