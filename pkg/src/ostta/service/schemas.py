"""Request and response bodies for the HTTP service."""

from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, Field

# flat config keys, same names as the CLI flags with underscores
ConfigValues = dict[str, Any]


class RunRequest(BaseModel):
    config: ConfigValues = Field(default_factory=dict)


class Summary(BaseModel):
    auroc: Optional[float]
    fpr95: Optional[float]
    acc_d: Optional[float]
    acc_u: Optional[float]
    hm: Optional[float]
    n_steps: int
    method: str
    seed: int
    config_echo: dict[str, Any]


class RunResponse(BaseModel):
    summary: Summary
    failed_steps: int


class SessionCreate(BaseModel):
    config: ConfigValues = Field(default_factory=dict)
    # explicit prototypes override the scenario-generated ones
    prototypes: Optional[list[list[float]]] = None


class SessionInfo(BaseModel):
    session_id: str
    dim: int
    num_classes: int
    method: str
    identifier: str
    n_steps: int


class SampleIn(BaseModel):
    raw: list[float]
    raw_aug: Optional[list[float]] = None
    gt_class: int = Field(-1, ge=-1, description="-1 marks an undesired sample")
    domain_id: int = Field(0, ge=0)


class LossOut(BaseModel):
    total: float
    active_case: str
    l_re: Optional[float] = None
    l_d: Optional[float] = None
    l_u: Optional[float] = None
    k_plus: int = 0


class StepOut(BaseModel):
    t: int
    s_t: float
    tau_star: Optional[float]
    mu_d: Optional[float]
    mu_u: Optional[float]
    decision: str
    reliability: str
    prediction: int
    gt_class: int
    is_desired: bool
    loss: LossOut
    m_d_size: int
    m_u_size: int
    warmup: bool
    failed: bool


class MetricsOut(BaseModel):
    n_steps: int
    acc_d: Optional[float] = None
    acc_u: Optional[float] = None
    hm: Optional[float] = None
    auroc: Optional[float] = None
    fpr95: Optional[float] = None
    n_desired: int = 0
    n_undesired: int = 0
    n_correct_d: int = 0
    n_rejected_u: int = 0
    failed_steps: int = 0


class GradcheckRequest(BaseModel):
    seed: int = 0
    trials: int = Field(100, ge=1, le=1000)


class GradcheckOut(BaseModel):
    passed: bool
    trials: int
    tolerance: float
    max_errors: dict[str, float]
