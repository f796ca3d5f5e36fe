"""HTTP surface: batch pipeline jobs plus live streaming decision sessions.

Batch endpoints run synchronously (desk-scale datasets finish in seconds) and
write their artifacts under the config's output directory.  Streaming
sessions hold a trained gate, classifier and calibration pack in memory and
score one window per request within the hop-interval latency budget.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..engine import DecisionRecord
from ..pipeline import DataRootError, PipelineError
from .schemas import (
    DecisionResponse,
    HealthResponse,
    JobRequest,
    JobResponse,
    SessionCreateRequest,
    SessionCreateResponse,
    SessionInfo,
    WindowRequest,
)
from .sessions import SessionStore


def _error_response(status: int, exc: Exception) -> JSONResponse:
    return JSONResponse(
        status_code=status,
        content={"error": {"type": type(exc).__name__, "message": str(exc)}},
    )


def _decision_response(record: DecisionRecord, class_names: list[str]) -> DecisionResponse:
    name = None
    if record.class_index is not None and record.class_index < len(class_names):
        name = class_names[record.class_index]
    return DecisionResponse(
        start_s=record.start_s,
        decision=record.decision,
        class_index=record.class_index,
        class_name=name,
        p_task=record.p_task,
        scores=record.scores,
        history_mature=record.history_mature,
        fault=record.fault,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="oodgate", version=__version__)
    store = SessionStore()

    @app.exception_handler(DataRootError)
    async def _data_root(_, exc: DataRootError):
        return _error_response(404, exc)

    @app.exception_handler(PipelineError)
    async def _pipeline(_, exc: PipelineError):
        return _error_response(409, exc)

    @app.exception_handler(ValueError)
    async def _value(_, exc: ValueError):
        return _error_response(422, exc)

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/pipeline/train", response_model=JobResponse)
    def train(req: JobRequest) -> JobResponse:
        return JobResponse(result=pipeline.cmd_train(req.config))

    @app.post("/pipeline/calibrate", response_model=JobResponse)
    def calibrate(req: JobRequest) -> JobResponse:
        return JobResponse(result=pipeline.cmd_calibrate(req.config))

    @app.post("/pipeline/replay", response_model=JobResponse)
    def replay(req: JobRequest) -> JobResponse:
        return JobResponse(result=pipeline.cmd_replay(req.config))

    @app.post("/pipeline/eval", response_model=JobResponse)
    def evaluate(req: JobRequest) -> JobResponse:
        return JobResponse(result=pipeline.cmd_eval(req.config))

    @app.post("/pipeline/ablate", response_model=JobResponse)
    def ablate(req: JobRequest) -> JobResponse:
        return JobResponse(result=pipeline.cmd_ablate(req.config))

    @app.post("/sessions", response_model=SessionCreateResponse)
    def create_session(req: SessionCreateRequest) -> SessionCreateResponse:
        gate_model, task_model = pipeline.load_models(req.config, req.dataset, req.subject_id)
        pack = pipeline.load_calibration(req.config, req.dataset, req.subject_id)
        session = store.create(gate_model, task_model, pack, pipeline.engine_config(req.config))
        return SessionCreateResponse(
            session_id=session.session_id,
            n_channels=task_model.n_channels,
            feature_dim=task_model.feature_dim,
            n_classes=task_model.n_classes,
            tau=pack.tau,
            gate_threshold=pack.gate_threshold,
        )

    @app.post("/sessions/{session_id}/windows", response_model=DecisionResponse)
    def push_window(session_id: str, req: WindowRequest) -> DecisionResponse:
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        samples = req.to_matrix()
        record = session.process_window(req.start_s, samples)
        return _decision_response(record, session.task_model.class_names)

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def session_info(session_id: str) -> SessionInfo:
        session = store.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return SessionInfo(
            session_id=session_id,
            steps=session.steps,
            last_start_s=session.state.last_start_s,
        )

    @app.delete("/sessions/{session_id}")
    def close_session(session_id: str) -> dict:
        if not store.close(session_id):
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return {"closed": session_id}

    return app


app = create_app()
