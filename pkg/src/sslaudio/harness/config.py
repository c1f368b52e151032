"""Experiment configuration and its flat INI file form."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..audio import FeatureConfig
from ..errors import ConfigurationError
from ..trainers import TrainerConfig


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (32, 64, 128)
    repeats: int = 4


@dataclass
class ExperimentConfig:
    manifest_path: Path | None = None
    features: FeatureConfig = field(default_factory=FeatureConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    output_dir: Path | None = None
    labeled_fraction: float = 0.1
    test_fold: int | None = None        # default: highest fold index
    eval_every: int = 1                 # epochs
    checkpoint_every: int = 1           # epochs; keeps last 2 plus best
    eval_teacher: bool = True           # MT: evaluate the EMA weights
    stop_after_steps: int | None = None  # early stop for resume tests
    resume_from: Path | None = None

    def __post_init__(self):
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ConfigurationError("labeled_fraction must be in (0, 1]")

    def echo(self) -> dict:
        """Fully resolved configuration for reports."""
        return {
            "manifest": str(self.manifest_path) if self.manifest_path else None,
            "features": asdict(self.features),
            "trainer": asdict(self.trainer),
            "model": {"widths": list(self.model.widths), "repeats": self.model.repeats},
            "seed": self.seed,
            "labeled_fraction": self.labeled_fraction,
            "test_fold": self.test_fold,
            "eval_every": self.eval_every,
            "checkpoint_every": self.checkpoint_every,
            "eval_teacher": self.eval_teacher,
        }


_SECTIONS = ("features", "trainer", "model", "run")


def _parse_value(raw: str, kind):
    if kind is bool:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        return tuple(int(v) for v in raw.replace("(", "").replace(")", "").split(",") if v.strip())
    return raw


def write_ini(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["features"] = {k: str(v) for k, v in asdict(cfg.features).items()}
    parser["trainer"] = {k: str(v) for k, v in asdict(cfg.trainer).items()}
    parser["model"] = {"widths": ",".join(str(w) for w in cfg.model.widths),
                       "repeats": str(cfg.model.repeats)}
    parser["run"] = {
        "manifest_path": str(cfg.manifest_path or ""),
        "seed": str(cfg.seed),
        "labeled_fraction": str(cfg.labeled_fraction),
        "test_fold": "" if cfg.test_fold is None else str(cfg.test_fold),
        "eval_every": str(cfg.eval_every),
        "checkpoint_every": str(cfg.checkpoint_every),
        "eval_teacher": str(cfg.eval_teacher),
    }
    with open(path, "w") as fh:
        parser.write(fh)


def read_ini(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"no such config file: {path}")
    parser = configparser.ConfigParser()
    parser.read(path)
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]")

    feat_kwargs = {}
    if parser.has_section("features"):
        types = {f.name: type(getattr(FeatureConfig(), f.name)) for f in fields(FeatureConfig)}
        for key, raw in parser["features"].items():
            if key not in types:
                raise ConfigurationError(f"unknown feature option {key!r}")
            feat_kwargs[key] = _parse_value(raw, types[key])
    trainer_kwargs = {}
    if parser.has_section("trainer"):
        defaults = TrainerConfig()
        types = {f.name: type(getattr(defaults, f.name)) for f in fields(TrainerConfig)}
        for key, raw in parser["trainer"].items():
            if key not in types:
                raise ConfigurationError(f"unknown trainer option {key!r}")
            trainer_kwargs[key] = _parse_value(raw, types[key])
    model_kwargs = {}
    if parser.has_section("model"):
        if parser.has_option("model", "widths"):
            model_kwargs["widths"] = _parse_value(parser["model"]["widths"], tuple)
        if parser.has_option("model", "repeats"):
            model_kwargs["repeats"] = int(parser["model"]["repeats"])

    cfg = ExperimentConfig(
        features=FeatureConfig(**feat_kwargs),
        trainer=TrainerConfig(**trainer_kwargs),
        model=ModelConfig(**model_kwargs),
    )
    if parser.has_section("run"):
        run = parser["run"]
        if run.get("manifest_path"):
            cfg.manifest_path = Path(run["manifest_path"])
        cfg.seed = int(run.get("seed", cfg.seed))
        cfg.labeled_fraction = float(run.get("labeled_fraction", cfg.labeled_fraction))
        if run.get("test_fold"):
            cfg.test_fold = int(run["test_fold"])
        cfg.eval_every = int(run.get("eval_every", cfg.eval_every))
        cfg.checkpoint_every = int(run.get("checkpoint_every", cfg.checkpoint_every))
        cfg.eval_teacher = _parse_value(run.get("eval_teacher", "true"), bool)
    return cfg
