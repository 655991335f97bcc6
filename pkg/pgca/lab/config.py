# ExperimentConfig is the single source of truth for a run. The experiment
# file and the environment are read here and nowhere else; every other module
# receives the resolved dataclasses.

import configparser
import io
import os
from dataclasses import dataclass, field, fields, replace

from dotenv import load_dotenv

from pgca.core.errors import ConfigError
from pgca.corpus.synth import CorpusConfig, LanguageConfig
from pgca.lab.optim import STAGE1_DESK, STAGE1_PUBLISHED, STAGE2_DESK, STAGE2_PUBLISHED, TrainHyper
from pgca.model.config import FUSION_MODES, GATED_MODES, ModelConfig

load_dotenv()

PRESETS = ("baseline", "ablation", "sweep", "selection", "noise")
BUDGETS = {"desk": (STAGE1_DESK, STAGE2_DESK), "published": (STAGE1_PUBLISHED, STAGE2_PUBLISHED)}
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")

# Keys owned by [experiment] or derived from it, never set per section.
_CORPUS_SKIP = {"languages", "seed", "workers"}
_MODEL_SKIP = {"fusion_mode", "aux_languages"}
_HYPER_SKIP = {"seed", "stage"}


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    out_dir: str = "runs"
    seed: int = 0
    preset: str = "baseline"
    budget: str = "desk"
    fusion_mode: str = "full_pgca"
    languages: tuple = ()
    pivot: str = ""
    noise_language: str = ""
    noise_rates: tuple = (0.0, 0.3, 0.6, 0.9)
    workers: int = 1
    log_level: str = "INFO"
    debug: bool = False
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainHyper = STAGE1_DESK
    stage2: TrainHyper = STAGE2_DESK

    @property
    def aux_languages(self):
        """Selected languages in configured order (all when none selected)."""
        return tuple(self.languages) or self.corpus.lang_ids

    def corpus_config(self):
        return replace(self.corpus, seed=self.seed, workers=self.workers)

    def model_config(self):
        return replace(self.model, fusion_mode="none", aux_languages=())

    def stage1_hyper(self):
        return replace(self.stage1, seed=self.seed, stage=1)

    def stage2_hyper(self):
        return replace(self.stage2, seed=self.seed, stage=2)

    def validate(self, strict=True):
        problems = []
        if not self.name:
            problems.append("experiment.name is required")
        if self.preset not in PRESETS:
            problems.append(f"unknown preset {self.preset!r} (expected one of {PRESETS})")
        if self.budget not in BUDGETS:
            problems.append(f"unknown budget {self.budget!r} (expected one of {tuple(BUDGETS)})")
        if self.fusion_mode not in FUSION_MODES:
            problems.append(f"Unknown fusion mode: {self.fusion_mode!r}")
        elif self.fusion_mode == "none" and self.preset != "ablation":
            problems.append(f"preset {self.preset!r} trains fusion layers, fusion_mode must not be 'none'")
        elif self.preset == "selection" and self.fusion_mode not in GATED_MODES:
            problems.append("the selection preset ranks by gates and needs a gated fusion mode")
        if self.workers < 1:
            problems.append(f"workers={self.workers} must be positive")
        if self.log_level not in LOG_LEVELS:
            problems.append(f"log_level {self.log_level!r} not in {LOG_LEVELS}")

        known = self.corpus.lang_ids
        if not known:
            problems.append("at least one auxiliary language must be configured")
        unknown = [lang for lang in self.languages if lang not in known]
        if unknown:
            problems.append(f"experiment.languages names unconfigured languages {unknown}")
        if len(set(self.languages)) != len(self.languages):
            problems.append(f"duplicate entries in experiment.languages {list(self.languages)}")
        for key in ("pivot", "noise_language"):
            value = getattr(self, key)
            if value and value not in known:
                problems.append(f"experiment.{key}={value!r} is not a configured language")
        if any(not 0.0 <= rate <= 1.0 for rate in self.noise_rates):
            problems.append(f"experiment.noise_rates {list(self.noise_rates)} must lie in [0, 1]")

        problems += self.corpus_config().validate(strict=False)
        problems += self.model_config().validate(strict=False)
        problems += self.stage1_hyper().validate(strict=False)
        problems += self.stage2_hyper().validate(strict=False)

        corpus, model = self.corpus, self.model
        if model.vocab_tgt != corpus.vocab_size + 2:
            problems.append(f"model.vocab_tgt={model.vocab_tgt} must equal corpus.vocab_size + 2 = {corpus.vocab_size + 2}")
        if model.n_features != corpus.n_features:
            problems.append(f"model.n_features={model.n_features} != corpus.n_features={corpus.n_features}")
        if model.d != corpus.d_embed:
            problems.append(f"model.d={model.d} != corpus.d_embed={corpus.d_embed}")
        if model.max_target_len < corpus.max_len + 1:
            problems.append(f"model.max_target_len={model.max_target_len} < corpus.max_len + 1")
        if model.max_source_len < corpus.max_len * corpus.frames_per_token:
            problems.append(f"model.max_source_len={model.max_source_len} < corpus.max_len * frames_per_token")

        if problems and strict:
            raise ConfigError("Invalid experiment configuration: " + "; ".join(problems))
        return problems


_EXPERIMENT_KEYS = {
    "name": str,
    "out_dir": str,
    "seed": int,
    "preset": str,
    "budget": str,
    "fusion_mode": str,
    "languages": tuple,
    "pivot": str,
    "noise_language": str,
    "noise_rates": "floats",
    "workers": int,
    "log_level": str,
    "debug": bool,
}


def _schema(cls, skip):
    return {f.name: f.type for f in fields(cls) if f.name not in skip}


_SECTIONS = {
    "corpus": (CorpusConfig, _schema(CorpusConfig, _CORPUS_SKIP)),
    "model": (ModelConfig, _schema(ModelConfig, _MODEL_SKIP)),
    "stage1": (TrainHyper, _schema(TrainHyper, _HYPER_SKIP)),
    "stage2": (TrainHyper, _schema(TrainHyper, _HYPER_SKIP)),
}
_ALLOWED_SECTIONS = ("experiment", "corpus", "languages", "model", "stage1", "stage2")


def _convert(where, raw, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
        if kind == "floats":
            return tuple(float(part) for part in raw.split(",") if part.strip())
        return raw
    except ValueError:
        expected = kind if isinstance(kind, str) else kind.__name__
        raise ConfigError(f"{where}: cannot read {raw!r} as {expected}") from None


def _read_section(parser, section, schema):
    values = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key} (expected one of {sorted(schema)})")
        values[key] = _convert(f"{section}.{key}", raw, schema[key])
    return values


def _read_languages(parser):
    languages = []
    for lang_id, raw in parser.items("languages"):
        parts = [part.strip() for part in raw.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"languages.{lang_id}: expected '<noise_rate>, <offset_scale>', got {raw!r}")
        noise = _convert(f"languages.{lang_id}", parts[0], float)
        offset = _convert(f"languages.{lang_id}", parts[1], float)
        languages.append(LanguageConfig(lang_id, noise, offset))
    return tuple(languages)


def parse_config_text(text, source="<string>"):
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None

    unknown = [s for s in parser.sections() if s not in _ALLOWED_SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown} in {source} (expected {list(_ALLOWED_SECTIONS)})")
    if not parser.has_section("experiment"):
        raise ConfigError(f"{source} has no [experiment] section")

    experiment = _read_section(parser, "experiment", _EXPERIMENT_KEYS)
    if "name" not in experiment:
        raise ConfigError(f"missing required key experiment.name in {source}")
    budget = experiment.get("budget", "desk")
    if budget not in BUDGETS:
        raise ConfigError(f"unknown budget {budget!r} (expected one of {tuple(BUDGETS)})")

    defaults = {"corpus": CorpusConfig(), "model": ModelConfig(), "stage1": BUDGETS[budget][0], "stage2": BUDGETS[budget][1]}
    sections = {}
    for section, (_, schema) in _SECTIONS.items():
        values = _read_section(parser, section, schema) if parser.has_section(section) else {}
        sections[section] = replace(defaults[section], **values)
    if parser.has_section("languages"):
        sections["corpus"] = replace(sections["corpus"], languages=_read_languages(parser))

    config = ExperimentConfig(**experiment, **sections)
    return apply_env(config)


def parse_config(path):
    """Strict reader: unknown sections or keys and unreadable values raise
    ConfigError naming them."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e.strerror}") from None
    return parse_config_text(text, source=path)


def _env(name, kind):
    raw = os.getenv(name)
    if raw is None or raw == "":
        return None
    return _convert(name, raw, kind)


def apply_env(config):
    """PGCA_OUT_DIR / PGCA_SEED / PGCA_LOG_LEVEL / PGCA_WORKERS override the file."""
    overrides = {
        "out_dir": _env("PGCA_OUT_DIR", str),
        "seed": _env("PGCA_SEED", int),
        "log_level": _env("PGCA_LOG_LEVEL", str),
        "workers": _env("PGCA_WORKERS", int),
    }
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def dump_config(config):
    """Every effective value, in the file format parse_config reads."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    parser.optionxform = str
    parser["experiment"] = {key: _fmt(getattr(config, key)) for key in _EXPERIMENT_KEYS}
    parser["corpus"] = {key: _fmt(getattr(config.corpus, key)) for key in _SECTIONS["corpus"][1]}
    parser["languages"] = {lang.lang_id: f"{lang.noise_rate!r}, {lang.offset_scale!r}" for lang in config.corpus.languages}
    parser["model"] = {key: _fmt(getattr(config.model, key)) for key in _SECTIONS["model"][1]}
    for section in ("stage1", "stage2"):
        hyper = getattr(config, section)
        parser[section] = {key: _fmt(getattr(hyper, key)) for key in _SECTIONS[section][1]}
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_resolved(config, path):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        f.write(dump_config(config))
    return path
