import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from dotenv import load_dotenv

from src.utils.errors import ConfigurationError

load_dotenv()


class Config:
    DATABASE_URL = os.getenv("DATABASE_URL", "sqlite:///beamsep.db")
    WORK_DIR = os.getenv("BEAMSEP_WORK_DIR", "work")
    LOG_LEVEL = os.getenv("BEAMSEP_LOG_LEVEL", "INFO")
    WORKERS = int(os.getenv("BEAMSEP_WORKERS", "1"))

    # Artifact file format versions
    BANK_FORMAT_VERSION = 1
    CHECKPOINT_FORMAT_VERSION = 2


@dataclass(frozen=True)
class StftSettings:
    frame_len: int = 256
    hop: int = 64
    window: str = "hann"
    sample_rate: int = 8000
    log_floor: float = 1e-8


@dataclass(frozen=True)
class ArraySettings:
    layout: str = "circular7"
    radius: float = 0.0425
    speed_of_sound: float = 343.0
    reference_mic: int = 0


@dataclass(frozen=True)
class BankSettings:
    num_beams: int = 12
    num_freqs: int = 64
    f_min: float = 100.0
    f_max: float = 3900.0
    angle_step_deg: float = 5.0
    wng_floor_db: float = -15.0
    target: str = "cardioid"
    diagonal_load: float = 1e-6


@dataclass(frozen=True)
class ModelSettings:
    embedding_dim: int = 20
    num_anchors: int = 6
    hidden: int = 64
    layers: int = 2
    recurrent: bool = True
    salient: int = 2


@dataclass(frozen=True)
class TrainingSettings:
    steps: int = 2000
    step_size: float = 1e-3
    seed: int = 0
    batch_size: int = 1
    clip_norm: float = 5.0
    optimizer: str = "adam"
    log_every: int = 50


@dataclass(frozen=True)
class CorpusSettings:
    num_speakers: int = 2
    count: int = 20
    seed: int = 0
    duration_s: float = 2.0
    rir_len: int = 4096
    max_image_order: int = 6
    pool_size: int = 16
    min_separation_deg: float = 0.0
    source_dir: Optional[str] = None


@dataclass(frozen=True)
class SelectionSettings:
    log_affinity: bool = False
    kmeans_restarts: int = 20
    cluster_seed: int = 0
    oracle_strategy: str = "greedy"


@dataclass(frozen=True)
class PathSettings:
    work_dir: str = Config.WORK_DIR
    corpus_dir: str = "corpus"
    bank_path: str = "bank.npz"
    checkpoint_path: str = "model.npz"
    dan_checkpoint_path: str = "dan_model.npz"
    eval_dir: str = "eval"
    separate_dir: str = "separated"


# Corpus fields that change what a model hears; seeds, counts and source pools do not.
ACOUSTIC_CORPUS_FIELDS = ("rir_len", "max_image_order")

_SECTIONS = {
    "stft": StftSettings,
    "array": ArraySettings,
    "bank": BankSettings,
    "model": ModelSettings,
    "training": TrainingSettings,
    "corpus": CorpusSettings,
    "selection": SelectionSettings,
    "paths": PathSettings,
}


@dataclass(frozen=True)
class PipelineConfig:
    stft: StftSettings = field(default_factory=StftSettings)
    array: ArraySettings = field(default_factory=ArraySettings)
    bank: BankSettings = field(default_factory=BankSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    training: TrainingSettings = field(default_factory=TrainingSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    selection: SelectionSettings = field(default_factory=SelectionSettings)
    paths: PathSettings = field(default_factory=PathSettings)

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        unknown = set(data) - set(_SECTIONS)
        if unknown:
            raise ConfigurationError(f"Unknown config sections: {sorted(unknown)}")
        sections = {}
        for name, section_cls in _SECTIONS.items():
            values = data.get(name, {}) or {}
            known = {f.name for f in dataclasses.fields(section_cls)}
            bad = set(values) - known
            if bad:
                raise ConfigurationError(f"Unknown keys in '{name}': {sorted(bad)}")
            sections[name] = section_cls(**values)
        return cls(**sections)

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Iterable[str] = ()) -> "PipelineConfig":
        """Load a JSON config file (or defaults) and apply `section.key=value` overrides."""
        data = {}
        if path:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    data = json.load(fh)
            except FileNotFoundError:
                raise ConfigurationError(f"Config file not found: {path}")
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {path} is not valid JSON: {e}")
        for item in overrides:
            section, key, value = _parse_override(item)
            data.setdefault(section, {})[key] = value
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def section_hash(self, *sections: str) -> str:
        payload = {name: dataclasses.asdict(getattr(self, name)) for name in sorted(sections)}
        return _digest(payload)

    @property
    def corpus_hash(self) -> str:
        return self.section_hash("stft", "array", "corpus")

    @property
    def acoustic_hash(self) -> str:
        """Front-end and room-simulation settings; equal for held-out corpora drawn with other seeds."""
        corpus = dataclasses.asdict(self.corpus)
        payload = {"stft": dataclasses.asdict(self.stft), "array": dataclasses.asdict(self.array),
                   "corpus": {k: corpus[k] for k in ACOUSTIC_CORPUS_FIELDS}}
        return _digest(payload)

    @property
    def frontend_hash(self) -> str:
        return self.section_hash("stft", "array", "bank")

    @property
    def model_hash(self) -> str:
        return self.section_hash("stft", "array", "bank", "model")

    def resolve(self, name: str) -> Path:
        """Absolute-or-work-dir-relative path for one of the `paths` entries."""
        value = Path(getattr(self.paths, name))
        if value.is_absolute():
            return value
        return Path(self.paths.work_dir) / value

    def validate(self):
        s, a, b, m, t, c, sel = (self.stft, self.array, self.bank, self.model,
                                 self.training, self.corpus, self.selection)
        checks = [
            (s.frame_len > 0 and s.frame_len % 2 == 0, "stft.frame_len must be a positive even integer"),
            (0 < s.hop <= s.frame_len, "stft.hop must satisfy 0 < hop <= frame_len"),
            (s.frame_len % s.hop == 0, "stft.frame_len must be a multiple of stft.hop"),
            (s.sample_rate > 0, "stft.sample_rate must be positive"),
            (s.log_floor > 0, "stft.log_floor must be positive"),
            (a.layout == "circular7", "array.layout must be 'circular7'"),
            (a.radius > 0, "array.radius must be positive"),
            (a.speed_of_sound > 0, "array.speed_of_sound must be positive"),
            (0 <= a.reference_mic < 7, "array.reference_mic must index one of the 7 microphones"),
            (b.num_beams >= 2, "bank.num_beams must be at least 2"),
            (b.num_freqs >= 1, "bank.num_freqs must be at least 1"),
            (0 < b.f_min <= b.f_max <= s.sample_rate / 2, "bank design band must lie in (0, fs/2]"),
            (0 < b.angle_step_deg <= 90, "bank.angle_step_deg must be in (0, 90]"),
            (b.target in ("cardioid", "hypercardioid"), "bank.target is not a known pattern"),
            (b.diagonal_load > 0, "bank.diagonal_load must be positive"),
            (m.embedding_dim >= 2, "model.embedding_dim must be at least 2"),
            (m.salient >= 1, "model.salient must be at least 1"),
            (m.num_anchors >= m.salient + 1, "model.num_anchors must cover salient + 1 outputs"),
            (m.hidden >= 1 and m.layers >= 0, "model.hidden/layers out of range"),
            (t.steps >= 0 and t.batch_size >= 1, "training.steps/batch_size out of range"),
            (t.step_size >= 0, "training.step_size must be non-negative"),
            (t.clip_norm > 0, "training.clip_norm must be positive"),
            (t.optimizer in ("sgd", "adam"), "training.optimizer must be 'sgd' or 'adam'"),
            (c.num_speakers >= 1, "corpus.num_speakers must be at least 1"),
            (c.count >= 0, "corpus.count must be non-negative"),
            (c.duration_s > 0, "corpus.duration_s must be positive"),
            (c.rir_len > 0 and c.max_image_order >= 0, "corpus.rir_len/max_image_order out of range"),
            (c.pool_size >= c.num_speakers, "corpus.pool_size must be at least num_speakers"),
            (0 <= c.min_separation_deg <= 180, "corpus.min_separation_deg must be in [0, 180]"),
            (sel.kmeans_restarts >= 1, "selection.kmeans_restarts must be at least 1"),
            (sel.oracle_strategy in ("greedy", "optimal"), "selection.oracle_strategy must be 'greedy' or 'optimal'"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigurationError(message)


def _digest(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _parse_override(item: str):
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigurationError(f"Override '{item}' must look like section.key=value")
    dotted, raw = item.split("=", 1)
    section, key = dotted.split(".", 1)
    if section not in _SECTIONS:
        raise ConfigurationError(f"Unknown config section '{section}' in override '{item}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return section, key, value
