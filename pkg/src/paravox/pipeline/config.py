"""Pipeline configuration: one JSON document drives every stage.

The document has a fixed set of sections and every field is explicit —
a missing or unknown key is rejected by name, so a config that loads is
a config that fully determines the run. Cross-section dimensions
(feature widths, vocabulary sizes) are derived from the `data` and
`tokenizer` sections at model-build time rather than duplicated.

Two built-in profiles ship with the package: `toy`, sized so the whole
four-stage pipeline trains on one CPU core in minutes, and `paper`, a
reference record of the architecture's large-scale hyperparameters
(kept as a record, not something to train in this repo).
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field

from ..ar import ARConfig
from ..flow import FlowConfig
from ..frontend import N_RESERVED, SyntheticSpec
from ..nar import NARConfig
from ..tokenizer import TokenizerConfig
from .train import STAGES, TrainSchedule


class ConfigError(ValueError):
    """A config document is structurally wrong; the message names fields."""


@dataclass
class ModelSection:
    """Free knobs of one transformer stage (shared by the AR and NAR)."""

    n_layers: int
    model_dim: int
    n_heads: int
    seed: int


@dataclass
class ARSection(ModelSection):
    max_text_len: int
    max_speech_len: int
    top_k: int
    temperature: float


@dataclass
class FlowSection:
    hidden_dim: int
    n_hidden: int
    time_feat_dim: int
    default_steps: int
    seed: int


@dataclass
class TokenizerSection:
    cond_dim: int
    codebook_size: int
    n_quantizer_layers: int
    attn_blocks: int
    n_heads: int
    conv_kernel: int
    seed: int


@dataclass
class AblationSection:
    parallel_streams: bool = True   # False: one merged quantizer stream
    use_refiner: bool = True        # False: AR predicts every layer itself


_SECTION_TYPES = {
    "data": SyntheticSpec,
    "tokenizer": TokenizerSection,
    "ar": ARSection,
    "nar": ModelSection,
    "flow": FlowSection,
    "ablation": AblationSection,
}


@dataclass
class PipelineConfig:
    name: str
    data: SyntheticSpec
    tokenizer: TokenizerSection
    ar: ARSection
    nar: ModelSection
    flow: FlowSection
    schedules: dict            # stage name -> TrainSchedule
    ablation: AblationSection = field(default_factory=AblationSection)

    # ---- (de)serialization ---------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "ablation": asdict(self.ablation),
            "schedules": {k: asdict(v) for k, v in self.schedules.items()},
        }
        for section in ("data", "tokenizer", "ar", "nar", "flow"):
            d = asdict(getattr(self, section))
            for k, v in d.items():
                if isinstance(v, tuple):
                    d[k] = list(v)
            out[section] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
        required = {"name", "data", "tokenizer", "ar", "nar", "flow", "schedules", "ablation"}
        missing = sorted(required - set(doc))
        unknown = sorted(set(doc) - required)
        if missing or unknown:
            raise ConfigError(f"config sections: missing {missing}, unknown {unknown}")
        if not isinstance(doc["name"], str):
            raise ConfigError("config field 'name' must be a string")
        parts = {"name": doc["name"]}
        for section, cls in _SECTION_TYPES.items():
            parts[section] = _build_section(section, cls, doc[section])
        sched_doc = doc["schedules"]
        if not isinstance(sched_doc, dict):
            raise ConfigError("config section 'schedules' must be an object")
        missing = sorted(set(STAGES) - set(sched_doc))
        unknown = sorted(set(sched_doc) - set(STAGES))
        if missing or unknown:
            raise ConfigError(f"schedules: missing {missing}, unknown {unknown}")
        parts["schedules"] = {stage: _build_section(f"schedules.{stage}", TrainSchedule,
                                                    sched_doc[stage])
                              for stage in STAGES}
        cfg = PipelineConfig(**parts)
        cfg.validate()
        return cfg

    @staticmethod
    def from_json(text: str) -> "PipelineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return PipelineConfig.from_dict(doc)

    # ---- validation ----------------------------------------------------------

    def validate(self) -> None:
        self.data.validate()
        self.build_tokenizer_config().validate()
        self.build_ar_config().validate()
        if self.ablation.use_refiner:
            self.build_nar_config().validate()
        self.build_flow_config().validate()
        for stage, sched in self.schedules.items():
            _validate_schedule(stage, sched)
        worst = self.data.symbols_per_utterance[1] * self.data.frames_per_symbol[1]
        if self.ar.max_speech_len < 2 * worst:
            raise ConfigError(f"ar.max_speech_len={self.ar.max_speech_len} cannot hold a reference "
                              f"plus target at the data maximum of {worst} frames each")
        if self.ar.max_text_len < self.data.symbols_per_utterance[1] + 2:
            raise ConfigError(f"ar.max_text_len={self.ar.max_text_len} cannot hold "
                              f"{self.data.symbols_per_utterance[1]} symbols plus the sequence marks")

    # ---- derived model configs ----------------------------------------------

    def stream_spec(self) -> tuple:
        k = self.tokenizer.codebook_size
        if self.ablation.parallel_streams:
            return (("semantic", k), ("acoustic", k))
        return (("merged", k),)

    def build_tokenizer_config(self) -> TokenizerConfig:
        d, t = self.data, self.tokenizer
        return TokenizerConfig(
            semantic_dim=d.semantic_dim, acoustic_dim=d.acoustic_dim,
            speaker_frame_dim=d.speaker_frame_dim, speaker_global_dim=d.speaker_global_dim,
            cond_dim=t.cond_dim, codebook_size=t.codebook_size,
            n_quantizer_layers=t.n_quantizer_layers, attn_blocks=t.attn_blocks,
            n_heads=t.n_heads, conv_kernel=t.conv_kernel, max_frames=d.max_frames,
            merged=not self.ablation.parallel_streams, seed=t.seed)

    def build_ar_config(self) -> ARConfig:
        a = self.ar
        layers = 1 if self.ablation.use_refiner else self.tokenizer.n_quantizer_layers
        return ARConfig(
            text_vocab=N_RESERVED + self.data.vocab_size, streams=self.stream_spec(),
            layers_per_stream=layers, n_layers=a.n_layers, model_dim=a.model_dim,
            n_heads=a.n_heads, max_text_len=a.max_text_len, max_speech_len=a.max_speech_len,
            top_k=a.top_k, temperature=a.temperature, seed=a.seed)

    def build_nar_config(self) -> NARConfig:
        n = self.nar
        return NARConfig(
            streams=self.stream_spec(), n_quant_layers=self.tokenizer.n_quantizer_layers,
            n_layers=n.n_layers, model_dim=n.model_dim, n_heads=n.n_heads,
            max_ref_len=self.data.max_frames, max_target_len=self.data.max_frames, seed=n.seed)

    def build_flow_config(self) -> FlowConfig:
        f = self.flow
        return FlowConfig(
            mel_bins=self.data.mel_bins,
            feature_dim=self.data.semantic_dim + self.data.acoustic_dim,
            speaker_dim=self.tokenizer.cond_dim, hidden_dim=f.hidden_dim,
            n_hidden=f.n_hidden, time_feat_dim=f.time_feat_dim,
            default_steps=f.default_steps)


def _build_section(name: str, cls, doc) -> object:
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    fields = {f for f in cls.__dataclass_fields__}
    missing = sorted(fields - set(doc))
    unknown = sorted(set(doc) - fields)
    if missing or unknown:
        detail = []
        if missing:
            detail.append("missing " + ", ".join(f"{name}.{m}" for m in missing))
        if unknown:
            detail.append("unknown " + ", ".join(f"{name}.{u}" for u in unknown))
        raise ConfigError("config fields: " + "; ".join(detail))
    kwargs = dict(doc)
    for key, val in kwargs.items():
        if isinstance(val, list):
            kwargs[key] = tuple(val)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config section {name!r}: {e}") from e


def _validate_schedule(stage: str, s: TrainSchedule) -> None:
    if stage not in STAGES:
        raise ConfigError(f"unknown schedule stage {stage!r}")
    for f in ("total_steps", "warmup_steps", "batch_size", "seed"):
        if not isinstance(getattr(s, f), int):
            raise ConfigError(f"schedules.{stage}.{f} must be an int")
    try:
        s.validate()
    except ValueError as e:
        raise ConfigError(f"schedules.{stage}: {e}") from e


# ---- built-in profiles -------------------------------------------------------


def toy_profile() -> PipelineConfig:
    """Desk-scale profile: the full pipeline overfits 32 utterances on one core."""
    return PipelineConfig(
        name="toy",
        data=SyntheticSpec(),
        tokenizer=TokenizerSection(cond_dim=64, codebook_size=64, n_quantizer_layers=3,
                                   attn_blocks=2, n_heads=4, conv_kernel=3, seed=11),
        ar=ARSection(n_layers=4, model_dim=128, n_heads=4, seed=22,
                     max_text_len=16, max_speech_len=64, top_k=8, temperature=1.0),
        nar=ModelSection(n_layers=2, model_dim=128, n_heads=4, seed=33),
        flow=FlowSection(hidden_dim=192, n_hidden=2, time_feat_dim=8,
                         default_steps=32, seed=44),
        schedules={
            "tokenizer": TrainSchedule(total_steps=1000, warmup_steps=20, kind="cosine",
                                         base_lr=1e-4, peak_lr=3e-3, final_lr=3e-4,
                                         batch_size=8, seed=101),
            "ar": TrainSchedule(total_steps=1400, warmup_steps=50, kind="cosine",
                                  base_lr=1e-4, peak_lr=3e-3, final_lr=3e-4,
                                  batch_size=8, seed=202),
            "nar": TrainSchedule(total_steps=500, warmup_steps=25, kind="cosine",
                                   base_lr=1e-4, peak_lr=3e-3, final_lr=3e-4,
                                   batch_size=8, seed=303),
            "flow": TrainSchedule(total_steps=600, warmup_steps=25, kind="cosine",
                                    base_lr=1e-4, peak_lr=3e-3, final_lr=5e-4,
                                    batch_size=8, seed=404),
        },
        ablation=AblationSection(),
    )


def paper_profile() -> PipelineConfig:
    """Large-scale reference hyperparameters; not meant to be run here.

    The autoregressive decay endpoints (1e-5 to 1e-4 after a 1e-2 warmup
    start) rise rather than decay; they are recorded unchanged rather
    than corrected. The tokenizer and refiner use fixed rates (2e-4 and
    2e-5), expressed as constant schedules.
    """
    return PipelineConfig(
        name="paper",
        data=SyntheticSpec(vocab_size=4096, n_speakers=1000, n_utterances=100000,
                           symbols_per_utterance=(8, 64), frames_per_symbol=(2, 12),
                           semantic_dim=768, acoustic_dim=768, speaker_frame_dim=512,
                           speaker_global_dim=192, mel_bins=80, prosody_dim=8,
                           max_frames=1500, noise_scale=0.05, seed=0),
        tokenizer=TokenizerSection(cond_dim=512, codebook_size=256, n_quantizer_layers=3,
                                   attn_blocks=4, n_heads=8, conv_kernel=5, seed=1),
        ar=ARSection(n_layers=12, model_dim=1024, n_heads=16, seed=2,
                     max_text_len=128, max_speech_len=3000, top_k=10, temperature=1.0),
        nar=ModelSection(n_layers=6, model_dim=1024, n_heads=16, seed=3),
        flow=FlowSection(hidden_dim=1024, n_hidden=4, time_feat_dim=16,
                         default_steps=32, seed=4),
        schedules={
            "tokenizer": TrainSchedule(total_steps=450000, warmup_steps=0, kind="constant",
                                         base_lr=2e-4, peak_lr=2e-4, final_lr=2e-4,
                                         batch_size=16, seed=10),
            "ar": TrainSchedule(total_steps=800000, warmup_steps=2000, kind="cosine",
                                  base_lr=1e-2, peak_lr=1e-5, final_lr=1e-4,
                                  batch_size=16, seed=20),
            "nar": TrainSchedule(total_steps=200000, warmup_steps=0, kind="constant",
                                   base_lr=2e-5, peak_lr=2e-5, final_lr=2e-5,
                                   batch_size=16, seed=30),
            "flow": TrainSchedule(total_steps=450000, warmup_steps=0, kind="constant",
                                    base_lr=2e-4, peak_lr=2e-4, final_lr=2e-4,
                                    batch_size=16, seed=40),
        },
        ablation=AblationSection(),
    )


PROFILES = {"toy": toy_profile, "paper": paper_profile}


def profile_by_name(name: str) -> PipelineConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; available: {sorted(PROFILES)}")
    return PROFILES[name]()


def config_with_overrides(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    """New config from `base` with dotted-path overrides applied."""
    doc = copy.deepcopy(base.to_dict())
    for path, value in overrides.items():
        node = doc
        *head, leaf = path.split(".")
        for part in head:
            if part not in node:
                raise ConfigError(f"override path {path!r}: no section {part!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"override path {path!r}: no field {leaf!r}")
        node[leaf] = value
    return PipelineConfig.from_dict(doc)
