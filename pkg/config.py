"""
Configuration d'expérience : config.json par défaut, fichiers JSON ou
key=value (clés pointées pour les sections), surcharges CLI.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from attacks import AttackConfig
from certify import CertifyConfig
from errors import ConfigError
from runtime import derive_seed
from tensor_net import TrainConfig

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.json"
STAGES = ("data", "train", "attack", "superimpose", "evaluate", "certify", "report")
TRAINING_MODES = ("partitioned", "shared")

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    class_count: int = 10
    per_class: int = 200
    dim: int = 16
    spread: float = 0.08
    images: str = ""
    labels: str = ""
    limit: int = None

    def __post_init__(self):
        if self.kind not in ("blobs", "idx"):
            raise ConfigError(f"jeu de données inconnu : {self.kind}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("un jeu IDX demande dataset.images et dataset.labels")


@dataclass(frozen=True)
class ArchitectureSpec:
    kind: str = "dense"
    hidden: tuple = (32, 32)
    channels: int = 8

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ConfigError(f"architecture inconnue : {self.kind}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    architecture: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    certify: CertifyConfig = field(default_factory=CertifyConfig)
    members: int = 7
    temperature_base: float = 10.0
    training_mode: str = "partitioned"
    part_size: int = 200
    validation_size: int = 500
    noise_sigma: float = 0.1
    rv_alpha: float = 0.05
    noisy_crafting: bool = False
    sample_count: int = 10
    si_sample_count: int = 10
    targets: list = None
    bin_count: int = 40
    certify_count: int = 10
    robustness_n: int = 200
    out: str = "output"
    seed: int = 0

    def __post_init__(self):
        if self.members < 1:
            raise ConfigError(f"members doit être >= 1 (reçu {self.members})")
        if self.bin_count < 1:
            raise ConfigError(f"bin_count doit être >= 1 (reçu {self.bin_count})")
        if self.training_mode not in TRAINING_MODES:
            raise ConfigError(f"training_mode inconnu : {self.training_mode}")
        if not self.temperature_base > 0:
            raise ConfigError("temperature_base doit être > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma doit être >= 0")
        if self.rv_alpha is not None and not 0 < self.rv_alpha < 1:
            raise ConfigError(f"rv_alpha hors de (0,1) : {self.rv_alpha}")
        for name in ("sample_count", "si_sample_count", "certify_count", "part_size", "validation_size"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} doit être >= 0")

    def stage_seed(self, stage):
        return derive_seed(self.seed, STAGES.index(stage))

    def temperatures(self):
        return [self.temperature_base * (l + 1) for l in range(self.members)]

    def to_dict(self):
        return asdict(self)


SECTIONS = {
    "dataset": DatasetSpec,
    "architecture": ArchitectureSpec,
    "train": TrainConfig,
    "attack": AttackConfig,
    "certify": CertifyConfig,
}


def _scalar(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _strip_comment(line):
    """Coupe au premier # hors d'une chaîne entre guillemets."""
    quoted = False
    for i, char in enumerate(line):
        if char == '"' and (i == 0 or line[i - 1] != "\\"):
            quoted = not quoted
        elif char == "#" and not quoted:
            return line[:i]
    return line


def parse_assignments(lines):
    """Lignes key=value (clés pointées) vers un dictionnaire imbriqué."""
    doc = {}
    for number, raw in enumerate(lines, 1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"ligne {number} : '{raw.strip()}' n'est pas de la forme key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        node = doc
        *parents, leaf = key.split(".")
        for name in parents:
            node = node.setdefault(name, {})
        node[leaf] = _scalar(value)
    return doc


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"fichier de configuration introuvable : {path}")
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return parse_assignments(text.splitlines())
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} : un objet JSON est attendu")
    return doc


def merge(base, updates):
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _build(cls, values, where):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"{where} : clés inconnues {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where} : {e}")


def experiment_config(doc):
    values = dict(doc)
    for name, cls in SECTIONS.items():
        section = values.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"la section '{name}' doit être un objet")
        values[name] = _build(cls, section, name)
    return _build(ExperimentConfig, values, "configuration")


def load_config(path=None, overrides=None):
    """Défauts du code, puis config.json, puis `path`, puis `overrides` (clés pointées)."""
    doc = {}
    if DEFAULT_CONFIG_PATH.exists():
        doc = read_config_file(DEFAULT_CONFIG_PATH)
    if path is not None:
        doc = merge(doc, read_config_file(path))
    if overrides:
        doc = merge(doc, parse_assignments(f"{k}={json.dumps(v)}" for k, v in overrides.items()))
    cfg = experiment_config(doc)
    logger.debug("🔧 configuration : %s", json.dumps(cfg.to_dict(), default=list))
    return cfg
