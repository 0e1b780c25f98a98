"""FastAPI application exposing each pipeline stage as an endpoint.

Handlers are thin: they rebuild a RunConfig from the validated payload,
call the corresponding stage function, and let the shared exception
handlers turn ValueError into 400 and FileNotFoundError into 404.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..config import RunConfig
from ..pipeline import (
    run_calibrate_stage,
    run_eval_stage,
    run_infer_stage,
    run_pipeline,
    run_probe_stage,
    run_render_stage,
    run_split_stage,
    run_synth_stage,
    run_train_stage,
)
from .schemas import (
    CalibrateResponse,
    EvalRequest,
    HealthResponse,
    InferRequest,
    InferResponse,
    MetricsReport,
    PipelineResponse,
    ProbeRequest,
    ProbeResponse,
    RenderRequest,
    RenderResponse,
    SplitResponse,
    StageRequest,
    SynthResponse,
    TrainResponse,
)


def _config(request: StageRequest) -> RunConfig:
    return RunConfig(**request.config.model_dump())


def create_app() -> FastAPI:
    app = FastAPI(title="nichedistill", version=__version__)

    @app.exception_handler(ValueError)
    async def _bad_request(request: Request, exc: ValueError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.exception_handler(FileNotFoundError)
    async def _not_found(request: Request, exc: FileNotFoundError) -> JSONResponse:
        return JSONResponse(status_code=404, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=SynthResponse)
    def synth(request: StageRequest) -> SynthResponse:
        return SynthResponse(**run_synth_stage(_config(request)))

    @app.post("/split", response_model=SplitResponse)
    def split(request: StageRequest) -> SplitResponse:
        return SplitResponse(**run_split_stage(_config(request)))

    @app.post("/calibrate", response_model=CalibrateResponse)
    def calibrate(request: StageRequest) -> CalibrateResponse:
        return CalibrateResponse(**run_calibrate_stage(_config(request)))

    @app.post("/train", response_model=TrainResponse)
    def train(request: StageRequest) -> TrainResponse:
        return TrainResponse(**run_train_stage(_config(request)))

    @app.post("/infer", response_model=InferResponse)
    def infer(request: InferRequest) -> InferResponse:
        return InferResponse(**run_infer_stage(_config(request), subset=request.subset))

    @app.post("/eval", response_model=MetricsReport)
    def evaluate(request: EvalRequest) -> MetricsReport:
        return MetricsReport(
            **run_eval_stage(
                _config(request),
                table=request.table,
                teacher=request.teacher,
                student=request.student,
            )
        )

    @app.post("/probe", response_model=ProbeResponse)
    def probe(request: ProbeRequest) -> ProbeResponse:
        return ProbeResponse(
            **run_probe_stage(
                _config(request), table=request.table, assignments=request.assignments
            )
        )

    @app.post("/render", response_model=RenderResponse)
    def render(request: RenderRequest) -> RenderResponse:
        return RenderResponse(
            **run_render_stage(
                _config(request),
                assignments=request.assignments,
                out_name=request.out_name,
                overlay=request.overlay,
            )
        )

    @app.post("/pipeline", response_model=PipelineResponse)
    def pipeline(request: StageRequest) -> PipelineResponse:
        result = run_pipeline(_config(request))
        return PipelineResponse(
            out_dir=str(result.out_dir),
            radius_um=result.radius_um,
            metrics=MetricsReport(**result.metrics),
            artifacts={name: str(path) for name, path in result.paths.items()},
        )

    return app
