"""Experiment configuration and its ``key=value`` text form.

Keys are dotted paths into :class:`ExperimentConfig` (``joint.epochs=8``,
``seq.kappa=0.1``).  Every key is documented in :data:`KEY_DOCS`; lines
starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelShape

STAGE_NAMES = ("frame", "trace", "asr", "teacher-mmi", "joint", "transfer", "seqdisc")
CRITERIA = ("lf-mmi", "lf-dc-mmi", "lf-bmmi", "lf-dc-bmmi")
OUTDIR_ENV = "PITLAB_OUTDIR"


class ConfigError(ValueError):
    pass


@dataclass
class CorpusSpec:
    dim: int = 16
    senones: int = 21
    inventory_seed: int = 0
    emission_noise: float = 0.3
    train_speakers: int = 8
    valid_speakers: int = 2
    test_speakers: int = 4
    train_utts: int = 200
    valid_fraction: float = 0.1
    test_utts: int = 50
    min_len: int = 12
    max_len: int = 36


@dataclass
class StageConfig:
    epochs: int = 6
    lr: float = 0.05
    batch: int = 1
    momentum: float = 0.9
    clip: float = 5.0


@dataclass
class SeqSettings:
    criterion: str = "lf-dc-bmmi"
    kappa: float = 0.1
    lambda_dc: float = 0.1
    boost_b: float = 0.1
    boost_b_hat: float = 0.2
    ngram_order: int = 3
    augment: bool = True
    alpha: float = 0.4
    beta: int = 10
    gamma: int = 2


@dataclass
class ExperimentConfig:
    seed: int = 0
    stages: tuple[str, ...] = ("frame", "trace", "asr", "joint")
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelShape = field(default_factory=ModelShape)
    frame: StageConfig = field(default_factory=lambda: StageConfig(epochs=4, lr=0.02))
    trace: StageConfig = field(default_factory=lambda: StageConfig(epochs=6, lr=0.02))
    asr: StageConfig = field(default_factory=lambda: StageConfig(epochs=6, lr=0.05))
    teacher_mmi: StageConfig = field(default_factory=lambda: StageConfig(epochs=1, lr=0.01))
    joint: StageConfig = field(default_factory=lambda: StageConfig(epochs=6, lr=0.05))
    transfer: StageConfig = field(default_factory=lambda: StageConfig(epochs=6, lr=0.05))
    seqdisc: StageConfig = field(default_factory=lambda: StageConfig(epochs=1, lr=0.01))
    transfer_weight: float = 0.5
    teachers: tuple[str, ...] = ()
    seq: SeqSettings = field(default_factory=SeqSettings)
    decode_kappa: float = 1.0
    eval_wer: bool = False


_STAGE_DOC = {
    "epochs": "full passes over the training data",
    "lr": "constant learning rate of momentum SGD (gradient is averaged per frame)",
    "batch": "utterances per update (padded, masked batch)",
    "momentum": "SGD momentum",
    "clip": "global gradient-norm clip; 0 disables",
}

KEY_DOCS: dict[str, str] = {
    "seed": "master seed for corpus generation, initialization and shuffling",
    "stages": "comma-separated stage list in execution order: " + ",".join(STAGE_NAMES),
    "corpus.dim": "feature dimension D",
    "corpus.senones": "senone inventory size including silence (index 0)",
    "corpus.inventory_seed": "seed of the speaker-independent senone inventory",
    "corpus.emission_noise": "relative std of linear-domain emission noise",
    "corpus.train_speakers": "speakers in the training pool",
    "corpus.valid_speakers": "speakers in the validation pool (disjoint from training)",
    "corpus.test_speakers": "speakers in the test pool (disjoint from training)",
    "corpus.train_utts": "mixed training utterances",
    "corpus.valid_fraction": "validation utterances as a fraction of training utterances",
    "corpus.test_utts": "mixed test utterances",
    "corpus.min_len": "shortest clean segment in frames",
    "corpus.max_len": "longest clean segment in frames",
    "model.dim": "input/recovered feature dimension (must equal corpus.dim)",
    "model.senones": "output classes (must equal corpus.senones)",
    "model.arity": "output streams N",
    "model.frame_layers": "conv layers in the frame-wise module (first has context, rest are 1x1)",
    "model.frame_width": "channels of the frame-wise module",
    "model.context_radius": "frames of context on each side seen by the frame-wise module",
    "model.trace_layers": "bidirectional GRU layers in the tracing module",
    "model.trace_width": "GRU width per direction in the tracing module",
    "model.recog_layers": "bidirectional GRU layers in the recognition module",
    "model.recog_width": "GRU width per direction in the recognition module",
    "model.share": "share one recognition block across all N streams",
    "transfer_weight": "weight w of the hard-label term in w*CE + (1-w)*KLD",
    "teachers": "comma-separated teacher checkpoints for transfer stages (defaults to the pipeline's asr teacher)",
    "seq.criterion": "sequence criterion: " + ",".join(CRITERIA),
    "seq.kappa": "acoustic scale in sequence training",
    "seq.lambda_dc": "de-correlation weight lambda",
    "seq.boost_b": "boosting factor b",
    "seq.boost_b_hat": "de-correlated boosting factor b_hat",
    "seq.ngram_order": "order of the senone language model",
    "seq.augment": "add artificially swapped copies before estimating the senone LM",
    "seq.alpha": "per-frame swap probability",
    "seq.beta": "frames locked after each swap",
    "seq.gamma": "swapped copies per training pair",
    "decode_kappa": "acoustic scale used in Viterbi decoding",
    "eval_wer": "also decode the validation set after each epoch of stage-e training",
}
for _stage in ("frame", "trace", "asr", "teacher_mmi", "joint", "transfer", "seqdisc"):
    for _k, _doc in _STAGE_DOC.items():
        KEY_DOCS[f"{_stage}.{_k}"] = f"{_stage} stage: {_doc}"


def _coerce(value: str, typ, key: str):
    try:
        if typ is bool or typ == "bool":
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
        if typ in (str, "str"):
            return value.strip()
        return tuple(v.strip() for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _field_types(obj) -> dict[str, object]:
    return {f.name: f.type for f in dataclasses.fields(obj)}


def set_key(config: ExperimentConfig, key: str, value: str) -> ExperimentConfig:
    """Return a copy of ``config`` with one dotted key replaced."""
    if key not in KEY_DOCS:
        raise ConfigError(f"unknown config key {key!r}")
    head, _, rest = key.partition(".")
    head = head.replace("-", "_")
    if rest:
        sub = getattr(config, head)
        typ = _field_types(sub)[rest]
        return dataclasses.replace(config, **{head: dataclasses.replace(sub, **{rest: _coerce(value, typ, key)})})
    typ = _field_types(config)[head]
    return dataclasses.replace(config, **{head: _coerce(value, typ, key)})


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    config = base or ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        config = set_key(config, key, value)
    validate(config)
    return config


def load_config(path: str | os.PathLike | None) -> ExperimentConfig:
    if path is None:
        config = ExperimentConfig()
        validate(config)
        return config
    return parse_config(Path(path).read_text())


def validate_stage_order(stages) -> None:
    """Reject stage lists that break the progressive ordering.

    frame before trace; both before any joint stage; asr before joint and
    transfer; teacher-mmi after asr and before transfer; seqdisc only after
    a CE-initialized joint model (joint or transfer).
    """
    stages = list(stages)
    for s in stages:
        if s not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {s!r}")
    if len(set(stages)) != len(stages):
        raise ConfigError("a stage may appear only once")
    pos = {s: i for i, s in enumerate(stages)}

    def before(a, b):
        if a in pos and b in pos and pos[a] > pos[b]:
            raise ConfigError(f"stage {a} must run before {b}")

    before("frame", "trace")
    for joint in ("joint", "transfer", "seqdisc"):
        before("frame", joint)
        before("trace", joint)
        before("asr", joint)
    before("teacher-mmi", "transfer")
    if "teacher-mmi" in pos and "asr" not in pos:
        raise ConfigError("teacher-mmi needs a preceding asr stage")
    before("asr", "teacher-mmi")
    if "seqdisc" in pos and not any(s in pos and pos[s] < pos["seqdisc"] for s in ("joint", "transfer")):
        raise ConfigError("seqdisc must follow CE initialization (joint or transfer)")


def validate(config: ExperimentConfig) -> None:
    validate_stage_order(config.stages)
    if "transfer" in config.stages and "asr" not in config.stages and not config.teachers:
        raise ConfigError("transfer needs an asr stage or explicit teachers")
    if config.model.dim != config.corpus.dim or config.model.senones != config.corpus.senones:
        raise ConfigError("model.dim/model.senones must match corpus.dim/corpus.senones")
    if config.seq.criterion not in CRITERIA:
        raise ConfigError(f"seq.criterion must be one of {CRITERIA}")
    if not 0.0 <= config.transfer_weight <= 1.0:
        raise ConfigError("transfer_weight must lie in [0, 1]")
    if config.corpus.train_speakers < 2 or config.corpus.test_speakers < 2:
        raise ConfigError("each speaker pool needs at least 2 speakers")
    if config.corpus.min_len < 1 or config.corpus.max_len < config.corpus.min_len:
        raise ConfigError("need 1 <= corpus.min_len <= corpus.max_len")


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for key in KEY_DOCS:
        head, _, rest = key.partition(".")
        obj = getattr(config, head.replace("-", "_"))
        val = getattr(obj, rest) if rest else obj
        if isinstance(val, tuple):
            val = ",".join(val)
        elif isinstance(val, bool):
            val = int(val)
        lines.append(f"{key}={val}")
    return "\n".join(lines) + "\n"
