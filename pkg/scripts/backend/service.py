"""HTTP service over the engine runtime.

    uvicorn --factory scripts.backend.service:app_from_env
    python -m scripts.backend.cli serve --config cuem.toml
"""
import logging
from typing import List, Optional, Tuple

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import Response
from pydantic import BaseModel, Field

from scripts.backend.cuem.config import load_settings
from scripts.backend.cuem.errors import BackendUnavailable, PreconditionError, UnknownImage, ValidationError
from scripts.backend.cuem.pipeline import Variant
from scripts.backend.cuem.runtime import build_runtime
from scripts.backend.cuem.utils import canonical_json, configure_logging, to_jsonable

logger = logging.getLogger(__name__)


class QueryRequest(BaseModel):
    text: str = ""
    image_id: Optional[str] = None
    history: List[Tuple[str, str]] = Field(default_factory=list)
    locale: str = "en"
    variant: Variant = Variant.full


class InstanceRequest(BaseModel):
    id: str = Field(..., min_length=1)
    query_text: str = Field(..., min_length=1)
    canned_response: str = Field(..., min_length=1)


def json_response(payload, status_code=200):
    return Response(canonical_json(payload), status_code=status_code, media_type="application/json")


def result_payload(result):
    """Wire form of a PipelineResult; timings stay in the stored trace."""
    return {
        "answer": to_jsonable(result.answer),
        "curated": to_jsonable(result.curated),
        "refined": to_jsonable(result.refined),
        "safety": to_jsonable(result.safety),
        "stages": list(result.trace.stage_names),
        "text": result.text,
        "trace_id": result.trace.trace_id,
        "verdicts": to_jsonable(result.trace.verdicts),
    }


def create_app(settings=None, runtime=None):
    """App factory; `runtime` may be passed in to share stores with the caller."""
    settings = settings or load_settings()
    runtime = runtime or build_runtime(settings)
    # startup probe: unreachable backends keep every engine endpoint at 503
    unreachable = runtime.not_ready()
    if unreachable:
        logger.error("Backends not ready: %s", ", ".join(unreachable))

    app = FastAPI(title="CUE-M", description="Multimodal retrieval-augmented answering", version="1.0.0")

    @app.exception_handler(RequestValidationError)
    async def _invalid_body(request: Request, exc: RequestValidationError):
        return json_response({"detail": "invalid request body", "errors": to_jsonable(exc.errors())}, 400)

    def get_runtime():
        if unreachable:
            raise HTTPException(status_code=503, detail=f"backends not ready: {', '.join(unreachable)}")
        return runtime

    @app.get("/v1/health")
    def health():
        status = "unavailable" if unreachable else "ok"
        return json_response(
            {"backend_mode": settings.backend_mode, "status": status, "unreachable": unreachable},
            503 if unreachable else 200,
        )

    @app.post("/v1/query")
    def query(body: QueryRequest, rt=Depends(get_runtime)):
        try:
            q = rt.make_query(body.text, body.image_id, body.history, body.locale)
            result = rt.run(q, body.variant)
        except (ValidationError, PreconditionError, UnknownImage) as e:
            raise HTTPException(status_code=400, detail=str(e))
        except BackendUnavailable as e:
            logger.error("Query failed, %s backend unavailable: %s", e.kind, e)
            raise HTTPException(status_code=503, detail=str(e))
        return json_response(result_payload(result))

    @app.get("/v1/trace/{trace_id}")
    def trace(trace_id: str, rt=Depends(get_runtime)):
        rec = rt.traces.record(trace_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown trace {trace_id}")
        return json_response(rec)

    @app.post("/v1/safety/instances")
    def add_instance(body: InstanceRequest, rt=Depends(get_runtime)):
        try:
            entry = rt.add_instance(body.id, body.query_text, body.canned_response)
        except ValidationError as e:
            raise HTTPException(status_code=400, detail=str(e))
        except BackendUnavailable as e:
            raise HTTPException(status_code=503, detail=str(e))
        return json_response({"id": entry.id, "total": len(rt.instances.snapshot())}, 201)

    return app


def app_from_env():
    settings = load_settings()
    configure_logging(settings.log_level)
    return create_app(settings)
