import re
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CouplingMode = Literal["optimal", "pad_right", "worst_case", "uniform_x0"]
SchedulerKind = Literal["linear", "cubic"]
RateScaling = Literal["linear", "cubic", "reversed_linear", "reversed_cubic"]
ModelKind = Literal["tabular", "featurized"]
Restriction = Literal["substitution_only", "insert_only", "append_only", "mask"]
CfgVariant = Literal["weighted", "fixed", "naive", "off"]
DatasetKind = Literal["empty", "uniform_length", "uniform_upto", "fixed"]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# --- Schedules ---

_POWER_TERM = re.compile(
    r"^\s*(?P<scale>[-+]?\d*\.?\d+(?:e[-+]?\d+)?)?\s*\*?\s*"
    r"(?:t\s*\^\s*(?P<a>[-+]?\d*\.?\d+))?\s*\*?\s*"
    r"(?:\(\s*1\s*-\s*t\s*\)\s*\^\s*(?P<b>[-+]?\d*\.?\d+))?\s*$"
)


class PowerSchedule(StrictModel):
    """c * t^a * (1 - t)^b."""
    scale: float = Field(ge=0.0, description="Multiplier c.")
    a: float = Field(default=0.0, ge=0.0, description="Exponent on t.")
    b: float = Field(default=0.0, ge=0.0, description="Exponent on (1 - t).")

    def __call__(self, t: float) -> float:
        if self.scale == 0.0:
            return 0.0
        return self.scale * (t ** self.a) * ((1.0 - t) ** self.b)

    @classmethod
    def parse(cls, text: str) -> "PowerSchedule":
        """Accepts forms like `10t^0.25(1-t)^0.5`, `5*t^1*(1-t)^0.25` or a bare constant."""
        compact = text.replace(" ", "")
        match = _POWER_TERM.match(compact)
        if not compact or match is None:
            raise ValueError(f"Cannot parse schedule expression {text!r}; expected c*t^a*(1-t)^b")
        scale = match.group("scale")
        if scale is None and match.group("a") is None and match.group("b") is None:
            raise ValueError(f"Cannot parse schedule expression {text!r}")
        return cls(
            scale=float(scale) if scale is not None else 1.0,
            a=float(match.group("a") or 0.0),
            b=float(match.group("b") or 0.0),
        )


# --- Model ---

class ModelSpec(StrictModel):
    kind: ModelKind = Field(default="tabular", description="Rate model parameterization.")
    vocab_size: int = Field(default=2, ge=1, description="Number of content tokens M.")
    max_length: int = Field(default=8, ge=1, description="Maximum number of content tokens in a state.")
    num_buckets: int = Field(default=16, ge=1, description="Time buckets (time knots under rate_scaling) of the tabular model.")
    window: int = Field(default=2, ge=0, description="Token window radius of the featurized model.")
    init_log_rate: float = Field(default=0.0, description="Initial value of every rate logit.")
    init_scale: float = Field(default=0.01, ge=0.0, description="Std-dev of the featurized weight initialization.")
    restriction: Optional[Restriction] = Field(default=None, description="Special-case rate restriction applied to every prediction.")
    mask_token: Optional[int] = Field(default=None, description="Mask token id for the `mask` restriction.")
    rate_scaling: Optional[RateScaling] = Field(
        default=None,
        description="Scheduler whose rate kappa_dot / (1 - kappa) multiplies every lambda; the tabular model then "
                    "interpolates between time knots spaced evenly in logit kappa.",
    )

    @model_validator(mode="after")
    def _check_mask(self):
        if self.restriction == "mask" and self.mask_token is None:
            raise ValueError("restriction=mask requires mask_token")
        if self.mask_token is not None and not 0 <= self.mask_token < self.vocab_size:
            raise ValueError("mask_token must be a content token id")
        return self


# --- Data ---

class DataConfig(StrictModel):
    vocab_size: int = Field(default=2, ge=1, description="Number of content tokens M.")
    token_names: Optional[str] = Field(default=None, description="One character per content token, e.g. 'AB'.")
    target: DatasetKind = Field(default="uniform_length", description="Target distribution q of x1.")
    target_length: int = Field(default=4, ge=0, description="Length (or max length) for generated targets.")
    target_strings: Optional[Tuple[str, ...]] = Field(default=None, description="Strings for the `fixed` target.")
    source: DatasetKind = Field(default="uniform_length", description="Source distribution p of x0.")
    source_length: int = Field(default=4, ge=0, description="Length (or max length) for generated sources.")
    source_strings: Optional[Tuple[str, ...]] = Field(default=None, description="Strings for the `fixed` source.")
    conditioning: bool = Field(default=False, description="Split a c^3 prefix of each target off as conditioning.")

    @field_validator("target_strings", "source_strings", mode="before")
    @classmethod
    def _split_strings(cls, value):
        if isinstance(value, str):
            return tuple(s.strip() for s in value.split(",")) if value.strip() else tuple()
        return value

    @model_validator(mode="after")
    def _check_fixed(self):
        if self.target == "fixed" and not self.target_strings:
            raise ValueError("target=fixed requires target_strings")
        if self.source == "fixed" and self.source_strings is None:
            raise ValueError("source=fixed requires source_strings")
        if self.token_names is not None and len(self.token_names) != self.vocab_size:
            raise ValueError("token_names must have one character per content token")
        return self


# --- Training ---

class TrainConfig(StrictModel):
    coupling: CouplingMode = Field(default="worst_case", description="How (x0, x1) pairs are aligned.")
    scheduler: SchedulerKind = Field(default="cubic", description="Mixture-path scheduler kappa.")
    batch_size: int = Field(default=32, ge=1)
    steps: int = Field(default=1000, ge=0)
    learning_rate: Optional[float] = Field(default=None, ge=0.0, description="Defaults to 1e-2 (tabular) or 1e-3 (featurized).")
    optimizer: Literal["sgd", "adam"] = Field(default="adam")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.95, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    lr_schedule: Literal["constant", "cosine"] = Field(default="constant")
    warmup_steps: int = Field(default=0, ge=0)
    localized: bool = Field(default=False, description="Train on the localized propagation path.")
    lambda_prop: Optional[float] = Field(default=None, ge=0.0, description="Propagation rate; required when localized.")
    cond_drop: float = Field(default=0.1, ge=0.0, le=1.0, description="Probability of dropping the conditioning.")
    num_delete: int = Field(default=0, ge=0, description="Deleted x0 tokens for the uniform_x0 coupling.")
    num_substitute: int = Field(default=0, ge=0, description="Substituted x0 tokens for the uniform_x0 coupling.")
    x0_tokens: Literal["uniform", "empirical"] = Field(default="uniform", description="Token distribution of uniform_x0 sources.")
    seed: int = Field(default=0)
    delta: float = Field(default=1e-3, gt=0.0, lt=1.0, description="t is drawn from [0, 1 - delta].")
    time_sampling: Literal["uniform", "logit_kappa"] = Field(
        default="uniform", description="Draw t uniformly, or with logit kappa(t) uniform."
    )
    log_every: int = Field(default=100, ge=1)

    @model_validator(mode="after")
    def _check_localized(self):
        if self.localized and self.lambda_prop is None:
            raise ValueError("train.lambda_prop is required when train.localized is true")
        return self

    def resolved_learning_rate(self, kind: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-2 if kind == "tabular" else 1e-3


# --- Sampling ---

class SamplerConfig(StrictModel):
    steps: int = Field(default=1000, ge=1)
    guidance_weight: float = Field(default=1.0, description="CFG weight w.")
    cfg_variant: CfgVariant = Field(default="off")
    temperature: float = Field(default=1.0, gt=0.0, description="Temperature at t = 0.")
    temperature_final: Optional[float] = Field(default=None, gt=0.0, description="Temperature at t = 1; linear in between.")
    top_p: float = Field(default=1.0, gt=0.0, le=1.0)
    top_k: Optional[int] = Field(default=None, ge=1)
    alpha: PowerSchedule = Field(default=PowerSchedule(scale=0.0), description="Corrector strength alpha_t.")
    seed: int = Field(default=0)
    max_length: int = Field(default=256, ge=1)
    reverse_guidance_weight: Optional[float] = Field(default=None, description="CFG weight for the reverse rate; defaults to guidance_weight.")
    reverse_temperature: float = Field(default=1.0, gt=0.0)
    reverse_top_p: float = Field(default=1.0, gt=0.0, le=1.0)

    @field_validator("alpha", mode="before")
    @classmethod
    def _parse_alpha(cls, value):
        if isinstance(value, str):
            return PowerSchedule.parse(value)
        if isinstance(value, (int, float)):
            return PowerSchedule(scale=float(value))
        return value

    def temperature_at(self, t: float) -> float:
        if self.temperature_final is None:
            return self.temperature
        return self.temperature_final * t + self.temperature * (1.0 - t)


# --- Run ---

class RunSection(StrictModel):
    output_dir: Optional[str] = Field(default=None, description="Defaults to $EDITFLOW_OUTPUT_DIR or ./output.")
    checkpoint: Optional[str] = Field(default=None, description="Checkpoint path for sample/heatmap.")
    reverse_checkpoint: Optional[str] = Field(default=None, description="Reverse-rate checkpoint for corrector sampling.")
    count: int = Field(default=100, ge=0, description="Number of samples (per source for the heatmap).")
    decode: bool = Field(default=True, description="Add decoded strings to trace records.")
    suites: Optional[Tuple[str, ...]] = Field(default=None, description="Verifier suites to run.")
    max_concurrent_checks: int = Field(default=3, ge=1)
    train_reverse: bool = Field(default=False, description="Also train a reverse-rate model.")

    @field_validator("suites", mode="before")
    @classmethod
    def _split_suites(cls, value):
        if isinstance(value, str):
            return tuple(s.strip() for s in value.split(",") if s.strip())
        return value


class RunConfig(StrictModel):
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelSpec = Field(default_factory=ModelSpec)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    run: RunSection = Field(default_factory=RunSection)

    @model_validator(mode="after")
    def _check_vocab(self):
        if self.model.vocab_size != self.data.vocab_size:
            raise ValueError("model.vocab_size must equal data.vocab_size")
        if self.data.conditioning and self.model.kind == "tabular":
            raise ValueError("data.conditioning requires model.kind=featurized")
        if self.model.rate_scaling is not None and self.model.rate_scaling != self.train.scheduler:
            raise ValueError("model.rate_scaling must name train.scheduler")
        return self


def coupling_toy_preset() -> RunConfig:
    """Uniform length-4 strings over {A, B}, worst-case alignment, tabular model.

    Rates are scaled by the cubic switching rate, which diverges at t = 1, so
    every pending edit still fires before the end.
    """
    return RunConfig(
        data=DataConfig(vocab_size=2, token_names="AB", target="uniform_length", target_length=4,
                        source="uniform_length", source_length=4),
        model=ModelSpec(kind="tabular", vocab_size=2, max_length=8, num_buckets=24, rate_scaling="cubic"),
        train=TrainConfig(coupling="worst_case", scheduler="cubic", batch_size=64, steps=6000,
                          learning_rate=0.03, lr_schedule="cosine", time_sampling="logit_kappa"),
        sampler=SamplerConfig(steps=1000),
    )


PRESETS = {"coupling_toy": coupling_toy_preset}
