"""FastAPI front end over the adaptation engine.

Sessions hold one live engine each and accept samples one at a time, which
is the natural shape of a streaming deployment.  Whole experiments can also
be run in a single request.
"""

from __future__ import annotations

import math
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..engine import Engine, StepRecord
from ..errors import ConfigError, DimensionMismatch, OsttaError, SeparationInfeasible
from ..experiment import build_config, resolve, run_experiment, scenario_prototypes, summary_dict
from ..metrics import summarize
from ..stream import ClassPrototypeSet, StreamSample
from .schemas import (
    GradcheckOut,
    GradcheckRequest,
    LossOut,
    MetricsOut,
    RunRequest,
    RunResponse,
    SampleIn,
    SessionCreate,
    SessionInfo,
    StepOut,
)

app = FastAPI(title="ostta", version=__version__)


@dataclass
class _Session:
    engine: Engine
    records: list[StepRecord] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


_sessions: dict[str, _Session] = {}
_registry_lock = threading.Lock()


def _config(values: dict):
    # the service ignores OSTTA_SEED; requests carry their own seed
    try:
        config = build_config(resolve(overrides=values, env={}))
    except (ConfigError, SeparationInfeasible) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    if config.input is not None:
        # no server-side file reads on behalf of a request
        raise HTTPException(status_code=422, detail="input paths are not accepted over HTTP; use sessions")
    return config


def _get(session_id: str) -> _Session:
    s = _sessions.get(session_id)
    if s is None:
        raise HTTPException(status_code=404, detail=f"no session {session_id}")
    return s


def _opt(x: float) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


def _step_out(r: StepRecord) -> StepOut:
    loss = r.loss
    return StepOut(
        t=r.t,
        s_t=r.s_t,
        tau_star=_opt(r.tau_star),
        mu_d=_opt(r.mu_d),
        mu_u=_opt(r.mu_u),
        decision=r.decision.value,
        reliability=r.reliability.value,
        prediction=r.prediction,
        gt_class=r.gt_class,
        is_desired=r.is_desired,
        loss=LossOut(
            total=float(loss.total), active_case=loss.active_case.value,
            l_re=loss.l_re, l_d=loss.l_d, l_u=loss.l_u, k_plus=loss.k_plus,
        ),
        m_d_size=r.m_d_size,
        m_u_size=r.m_u_size,
        warmup=r.warmup,
        failed=r.failed,
    )


def _info(session_id: str, s: _Session) -> SessionInfo:
    e = s.engine
    return SessionInfo(
        session_id=session_id,
        dim=e.prototypes.dim,
        num_classes=e.prototypes.num_classes,
        method=e.config.method.value,
        identifier=e.config.identifier.value,
        n_steps=len(s.records),
    )


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/experiments/run", response_model=RunResponse)
def run_experiment_endpoint(req: RunRequest):
    config = _config(req.config)
    try:
        result = run_experiment(config)
    except (OSError, OsttaError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))
    return RunResponse(summary=summary_dict(config, result), failed_steps=result.failed_steps)


@app.post("/sessions", response_model=SessionInfo, status_code=201)
def create_session(req: SessionCreate):
    config = _config(req.config)
    try:
        if req.prototypes is not None:
            P = np.asarray(req.prototypes, dtype=np.float64)
            if P.ndim != 2:
                raise ValueError("prototypes must be a list of equal-length rows")
            prototypes = ClassPrototypeSet(P / np.linalg.norm(P, axis=1, keepdims=True))
        else:
            prototypes = scenario_prototypes(config.scenario)
    except (ValueError, OsttaError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    session_id = uuid.uuid4().hex
    session = _Session(Engine(prototypes, config.method))
    with _registry_lock:
        _sessions[session_id] = session
    return _info(session_id, session)


@app.get("/sessions/{session_id}", response_model=SessionInfo)
def get_session(session_id: str):
    return _info(session_id, _get(session_id))


@app.delete("/sessions/{session_id}", status_code=204)
def delete_session(session_id: str):
    with _registry_lock:
        if _sessions.pop(session_id, None) is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")


@app.post("/sessions/{session_id}/samples", response_model=StepOut)
def push_sample(session_id: str, sample: SampleIn):
    s = _get(session_id)
    dim = s.engine.prototypes.dim
    raw = np.asarray(sample.raw, dtype=np.float64)
    aug = raw if sample.raw_aug is None else np.asarray(sample.raw_aug, dtype=np.float64)
    if raw.shape != (dim,) or aug.shape != (dim,):
        raise HTTPException(status_code=422, detail=str(DimensionMismatch(f"expected {dim} values per view")))
    if not (np.isfinite(raw).all() and np.isfinite(aug).all()):
        raise HTTPException(status_code=422, detail="embedding has non-finite entries")
    if sample.gt_class >= s.engine.prototypes.num_classes:
        raise HTTPException(status_code=422, detail=f"gt_class {sample.gt_class} out of range")
    with s.lock:
        t = len(s.records)
        try:
            record = s.engine.step(StreamSample(t, raw, aug, sample.gt_class, sample.domain_id))
        except OsttaError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        s.records.append(record)
    return _step_out(record)


@app.get("/sessions/{session_id}/metrics", response_model=MetricsOut)
def session_metrics(session_id: str):
    s = _get(session_id)
    with s.lock:
        records = list(s.records)
        failed = s.engine.failed_steps
    if not records:
        return MetricsOut(n_steps=0)
    return MetricsOut(n_steps=len(records), failed_steps=failed, **summarize(records).as_dict())


@app.post("/gradcheck", response_model=GradcheckOut)
def gradcheck(req: GradcheckRequest):
    from ..gradcheck import run_gradcheck

    report = run_gradcheck(req.seed, req.trials)
    return GradcheckOut(
        passed=report.passed, trials=report.trials, tolerance=report.tolerance, max_errors=report.max_errors()
    )
