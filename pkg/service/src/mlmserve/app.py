"""HTTP service exposing the model behind the wire contract of INTERFACE.md.

Scoring endpoints are stateless and deterministic in eval mode; fine-tune
jobs run on a single-writer queue and register one checkpoint per
template, addressable from /v1/mlm-scores via the ``checkpoint`` field.
"""

from __future__ import annotations

import logging
import threading
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import training
from .jobs import BusyError, JobRegistry
from .model import BadPrompt, MaskCountError, PromptTooLong, TinyMaskedLM

log = logging.getLogger(__name__)

MAX_EMBED_BATCH = 256


class ScoreRequest(BaseModel):
    prompt: str
    words: list[str]
    image_slots: Optional[list[list[float]]] = None
    checkpoint: Optional[str] = None


class EmbedRequest(BaseModel):
    texts: list[str]


class ProjectRequest(BaseModel):
    features: list[float]
    n_slots: int = Field(default=1, ge=1)


class CaptionRequest(BaseModel):
    image_ref: str


class FinetunePayload(BaseModel):
    train_path: str
    dev_path: Optional[str] = None
    template_ids: list[str]
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 5e-6
    seed: int = 0
    n_image_slots: int = 1
    n_prompt_tokens: int = 2
    label_space: dict


class ModelService:
    """Base model, named checkpoints, and the fine-tune queue."""

    def __init__(self, seed: int = 0, dim: int = 64, vocab_size: int = 2048,
                 feature_dim: int = 32, max_len: int = 256,
                 captioner: Optional[Callable[[str], str]] = None):
        self.base = TinyMaskedLM(
            vocab_size=vocab_size, dim=dim, feature_dim=feature_dim,
            max_len=max_len, seed=seed,
        )
        self.base.eval()
        self.checkpoints: dict[str, TinyMaskedLM] = {}
        self.jobs = JobRegistry()
        self.captioner = captioner
        self._lock = threading.Lock()

    def resolve(self, checkpoint: Optional[str]) -> TinyMaskedLM:
        if checkpoint in (None, "", "base"):
            return self.base
        with self._lock:
            model = self.checkpoints.get(checkpoint)
        if model is None:
            raise BadPrompt(f"unknown checkpoint {checkpoint!r}")
        return model

    def register(self, tag: str, model: TinyMaskedLM) -> None:
        with self._lock:
            self.checkpoints[tag] = model


def create_app(service: Optional[ModelService] = None, **kwargs) -> FastAPI:
    service = service or ModelService(**kwargs)
    app = FastAPI(title="mlmserve", version="0.1.0")
    app.state.service = service

    @app.get("/v1/healthz")
    def healthz():
        capabilities = ["mlm-scores", "embed", "project", "finetune"]
        if service.captioner is not None:
            capabilities.append("caption")
        return {
            "status": "ok",
            "embed_dim": service.base.dim,
            "feature_dim": service.base.feature_dim,
            "deterministic": True,
            "capabilities": capabilities,
        }

    @app.post("/v1/mlm-scores")
    def mlm_scores(req: ScoreRequest):
        if not req.words:
            raise HTTPException(400, "words must be non-empty")
        model = _catch_bad(lambda: service.resolve(req.checkpoint))
        try:
            logits = model.score_mask(req.prompt, req.words, image_slots=req.image_slots)
        except MaskCountError as exc:
            raise HTTPException(422, str(exc))
        except PromptTooLong as exc:
            raise HTTPException(413, str(exc))
        except BadPrompt as exc:
            raise HTTPException(400, str(exc))
        return {"logits": logits}

    @app.post("/v1/embed")
    def embed(req: EmbedRequest):
        if not req.texts:
            raise HTTPException(400, "texts must be non-empty")
        if len(req.texts) > MAX_EMBED_BATCH:
            raise HTTPException(413, f"batch exceeds {MAX_EMBED_BATCH} texts")
        return {"vectors": service.base.embed_texts(req.texts)}

    @app.post("/v1/project")
    def project(req: ProjectRequest):
        vectors = _catch_bad(lambda: service.base.project_image(req.features, req.n_slots))
        return {"vectors": vectors}

    @app.post("/v1/caption")
    def caption(req: CaptionRequest):
        if service.captioner is None:
            raise HTTPException(501, "no captioner is plugged into this deployment")
        return {"caption": service.captioner(req.image_ref)}

    @app.post("/v1/finetune", status_code=202)
    def finetune(req: FinetunePayload):
        request = training.FinetuneRequest(
            train_path=req.train_path,
            dev_path=req.dev_path,
            template_ids=req.template_ids,
            steps=req.steps,
            batch_size=req.batch_size,
            learning_rate=req.learning_rate,
            seed=req.seed,
            n_image_slots=req.n_image_slots,
            n_prompt_tokens=req.n_prompt_tokens,
            label_space=req.label_space,
        )
        # Validate the split and label space eagerly so obviously bad
        # requests fail with 400 instead of a failed background job.
        try:
            training.load_split(request.train_path)
            training.JobLabelSpace.from_payload(req.label_space)
        except (FileNotFoundError, ValueError, KeyError) as exc:
            raise HTTPException(400, f"bad fine-tune request: {exc}")

        def work(record):
            outcome = training.finetune(service.base, request)
            record.losses = outcome.losses
            for template_id, model in outcome.checkpoints.items():
                tag = f"{record.job_id}/{template_id}"
                service.register(tag, model)
                record.checkpoints[template_id] = tag

        effective = {
            "steps": req.steps,
            "batch_size": req.batch_size,
            "learning_rate": req.learning_rate,
            "template_ids": list(req.template_ids),
            "seed": req.seed,
        }
        try:
            record = service.jobs.submit(work, config=effective)
        except BusyError as exc:
            raise HTTPException(409, str(exc))
        return {"job_id": record.job_id}

    @app.get("/v1/jobs/{job_id}")
    def job_status(job_id: str):
        record = service.jobs.get(job_id)
        if record is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        return record.snapshot()

    return app


def _catch_bad(fn):
    try:
        return fn()
    except BadPrompt as exc:
        raise HTTPException(400, str(exc))
