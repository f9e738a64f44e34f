"""Request and response models for the execution service."""

from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..catalog import Extract
from ..testgen import CommandStep, ExecutableTestCase
from ..tokens import is_variable


class ExtractIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    var: str
    pattern: str
    group: int = Field(1, ge=0)

    @field_validator("var")
    @classmethod
    def _var(cls, v: str) -> str:
        if not is_variable(v):
            raise ValueError(f"{v!r} is not a variable name")
        return v


class StepIn(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: str = Field(min_length=1)
    tool: str = Field(min_length=1)
    requires: list[str] = []
    parameters: list[str] = []
    environment: str = "local"
    duration_s: float = Field(5.0, ge=0, le=3600)
    extract: Optional[ExtractIn] = None


class TestCaseIn(BaseModel):
    """Submission body. ``oracle`` and ``origin`` are accepted and dropped."""

    __test__ = False
    model_config = ConfigDict(extra="forbid")

    id: str = Field(min_length=1)
    sutId: str = Field(min_length=1)
    steps: list[StepIn] = Field(min_length=1)
    oracle: Optional[Any] = None
    origin: Optional[str] = None

    @model_validator(mode="after")
    def _unique_steps(self) -> TestCaseIn:
        names = [s.step for s in self.steps]
        dup = {n for n in names if names.count(n) > 1}
        if dup:
            raise ValueError("duplicate step names: " + ", ".join(sorted(dup)))
        return self

    def to_testcase(self) -> ExecutableTestCase:
        steps = [CommandStep(s.step, s.tool, list(s.parameters), list(s.requires),
                             s.environment, s.duration_s,
                             Extract(s.extract.var, s.extract.pattern, s.extract.group)
                             if s.extract else None)
                 for s in self.steps]
        return ExecutableTestCase(self.id, self.sutId, steps, [], None)


class SubmitResponse(BaseModel):
    executionId: str


class StepResultOut(BaseModel):
    step: str
    status: Literal["OK", "OMITTED", "FAILED"]
    stdout: str
    exitCode: int
    boundVars: dict[str, str]
    startedAt: int
    endedAt: int
    error: Optional[str] = None


class ExecutionOut(BaseModel):
    executionId: str
    status: Literal["pending", "running", "done", "error"]
    testCase: dict[str, Any]
    stepResults: list[StepResultOut]
    bindings: dict[str, str]
    error: Optional[str] = None


class ConfigOut(BaseModel):
    ok: bool = True
    config: dict[str, str]


class SessionOut(BaseModel):
    sessionId: str
    createdByStep: str
    executionId: str


class ErrorOut(BaseModel):
    detail: Any
