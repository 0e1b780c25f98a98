"""Request and response bodies for the HTTP service.

Every stage request carries a full RunSettings (the validated mirror of
RunConfig); path fields refer to the server's filesystem, which in the
default in-process deployment is the caller's own.
"""

from typing import Literal, Optional

from pydantic import BaseModel

from ..config import RunSettings


class StageRequest(BaseModel):
    config: RunSettings


class InferRequest(StageRequest):
    subset: Literal["train", "test", "both"] = "both"


class EvalRequest(StageRequest):
    table: Optional[str] = None
    teacher: Optional[str] = None
    student: Optional[str] = None


class ProbeRequest(StageRequest):
    table: Optional[str] = None
    assignments: Optional[str] = None


class RenderRequest(StageRequest):
    assignments: Optional[str] = None
    out_name: Optional[str] = None
    overlay: bool = True


class HealthResponse(BaseModel):
    status: str
    version: str


class SynthResponse(BaseModel):
    table: str
    n_cells: int


class SplitResponse(BaseModel):
    split: str
    n_train: int
    n_test: int
    n_discard: int
    buffer_um: float


class CalibrateResponse(BaseModel):
    radius_um: float
    target_count: int
    n_train: int


class TrainResponse(BaseModel):
    checkpoint: str
    radius_um: float
    final_train_loss: float
    final_test_loss: Optional[float] = None
    n_params: int
    epochs: int


class InferResponse(BaseModel):
    assignments: str
    n_rows: int


class MetricsReport(BaseModel):
    ari: float
    nmi: float
    weighted_mean_jsd: float
    permutation_fraction: float
    macro_f1: Optional[float] = None
    baseline_ari: Optional[float] = None
    baseline_nmi: Optional[float] = None
    K: int
    seed: int
    r: Optional[float] = None


class ProbeResponse(BaseModel):
    macro_f1: float
    n_train: int
    n_test: int


class RenderResponse(BaseModel):
    map: str
    n_cells: int


class PipelineResponse(BaseModel):
    out_dir: str
    radius_um: float
    metrics: MetricsReport
    artifacts: dict[str, str]
