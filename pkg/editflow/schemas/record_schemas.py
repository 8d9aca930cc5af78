from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from editflow.schemas.config_schemas import ModelSpec

FORMAT_VERSION = 1


class EditRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["insert", "delete", "substitute"]
    pos: int = Field(description="0-based anchor in the sequence the edit was applied to (BOS at 0).")
    token: Optional[int] = Field(default=None, description="Token id; absent for deletions.")


class HeaderRecord(BaseModel):
    """First record of every output stream."""
    model_config = ConfigDict(extra="forbid")

    type: Literal["header"] = "header"
    kind: Literal["metrics", "traces", "heatmap", "verify"]
    version: str = Field(description="Package version that produced the file.")
    format_version: int = FORMAT_VERSION
    config_hash: str = Field(description="SHA-256 of the resolved run config.")
    seed: int


class MetricsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["metrics"] = "metrics"
    step: int
    loss: float
    term1: float = Field(description="Mean total exit rate.")
    term2: float = Field(description="Mean weighted negative log-rate of the target edits.")
    grad_norm: float
    clamp_warnings: int = Field(description="Target rates clamped before the log, cumulative.")
    learning_rate: float


class TraceStepRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int
    t: float
    edits: List[EditRecord]
    corrector_edits: List[List[EditRecord]] = Field(
        default_factory=list,
        description="Reverse-step edit groups applied after `edits` when a corrector ran.",
    )
    sequence: List[int] = Field(description="Token ids after the step, BOS included.")


class TraceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["trace"] = "trace"
    trace: int
    x0: List[int]
    steps: List[TraceStepRecord]
    final: List[int]
    text: Optional[str] = None
    overflow_drops: int = 0


class HeatmapRow(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x0: str
    x1: str
    count: int
    prob: float


class CheckpointHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    spec: ModelSpec
    num_values: int = Field(ge=0)
    dtype: Literal["<f8"] = "<f8"


class CheckResult(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = Field(default=None, description="Measured statistic, e.g. a max residual or TV distance.")
    threshold: Optional[float] = None
    detail: str = ""


class SuiteReport(BaseModel):
    suite: str
    checks: List[CheckResult] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)


class VerifyReport(BaseModel):
    version: str
    config_hash: str
    seed: int
    suites: List[SuiteReport]

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)
