"""HTTP front end over :mod:`despeckle.service`.

Short operations answer synchronously. Training, ablations and sweeps are
queued as jobs on a single worker thread and polled via ``GET /jobs/{id}``.
"""

from __future__ import annotations

import threading
import uuid
from contextlib import asynccontextmanager
from concurrent.futures import ThreadPoolExecutor

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse

from .. import __version__, service
from . import schemas

_HTTP_STATUS = {2: 422, 3: 404, 4: 500}

JOB_HANDLERS = {
    "train": (schemas.TrainRequest, service.train),
    "ablate": (schemas.AblateRequest, service.ablate),
    "sweep": (schemas.SweepRequest, service.sweep),
}


class JobRegistry:
    def __init__(self):
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="despeckle-job")
        self._jobs: dict[str, schemas.JobStatus] = {}
        self._lock = threading.Lock()

    def _set(self, job_id: str, **update) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=update)

    def _run(self, job_id: str, fn, req) -> None:
        self._set(job_id, status="running")
        try:
            result = fn(req)
        except service.ServiceError as exc:
            self._set(job_id, status="failed", error=exc.body())
        except Exception as exc:  # surfaced to the poller, never swallowed silently
            self._set(job_id, status="failed", error=schemas.ErrorBody(error="internal", message=repr(exc), exit_code=1))
        else:
            self._set(job_id, status="succeeded", result=result.model_dump(mode="json"))

    def submit(self, kind: str, req) -> schemas.JobStatus:
        job_id = uuid.uuid4().hex
        status = schemas.JobStatus(id=job_id, kind=kind, status="queued")
        with self._lock:
            self._jobs[job_id] = status
        self._pool.submit(self._run, job_id, JOB_HANDLERS[kind][1], req)
        return status

    def get(self, job_id: str) -> schemas.JobStatus | None:
        with self._lock:
            return self._jobs.get(job_id)

    def shutdown(self) -> None:
        self._pool.shutdown(wait=True)


def create_app() -> FastAPI:
    jobs = JobRegistry()

    @asynccontextmanager
    async def lifespan(_):
        yield
        jobs.shutdown()

    app = FastAPI(title="despeckle", version=__version__, lifespan=lifespan)
    app.state.jobs = jobs

    @app.exception_handler(service.ServiceError)
    async def _service_error(_, exc: service.ServiceError):
        return JSONResponse(status_code=_HTTP_STATUS.get(exc.exit_code, 500), content=exc.body().model_dump())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/prepare", response_model=schemas.PrepareResult)
    def prepare(req: schemas.PrepareRequest):
        return service.prepare(req)

    @app.post("/stats", response_model=schemas.StatsResult)
    def stats(req: schemas.StatsRequest):
        return service.stats(req)

    @app.post("/eval", response_model=schemas.EvalResult)
    def evaluate(req: schemas.EvalRequest):
        return service.evaluate_checkpoint(req)

    @app.post("/figure", response_model=schemas.FigureResult)
    def figure(req: schemas.FigureRequest):
        return service.figure(req)

    @app.post("/jobs/train", response_model=schemas.JobStatus, status_code=202)
    def submit_train(req: schemas.TrainRequest):
        return jobs.submit("train", req)

    @app.post("/jobs/ablate", response_model=schemas.JobStatus, status_code=202)
    def submit_ablate(req: schemas.AblateRequest):
        return jobs.submit("ablate", req)

    @app.post("/jobs/sweep", response_model=schemas.JobStatus, status_code=202)
    def submit_sweep(req: schemas.SweepRequest):
        return jobs.submit("sweep", req)

    @app.get("/jobs/{job_id}", response_model=schemas.JobStatus)
    def job(job_id: str):
        status = jobs.get(job_id)
        if status is None:
            raise HTTPException(status_code=404, detail=f"no job {job_id}")
        return status

    return app


app = create_app()
