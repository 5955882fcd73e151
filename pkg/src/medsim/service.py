"""HTTP wrapper around the FAQ matcher: match endpoint, FAQ ingestion with
atomic snapshot publication, and health reporting."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Sequence

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import faqmatch
from .faqmatch import FAQEntry, FAQError, IdfIndex, ReplacementMap
from .model import load_checkpoint, model_version

logger = logging.getLogger(__name__)

MAX_QUESTION_CHARS = 1000


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    model_path: str | None = None
    faq_path: str | None = None
    replacement_path: str | None = None
    filter_threshold: float = faqmatch.DEFAULT_FILTER_THRESHOLD
    decision_threshold: float = faqmatch.DEFAULT_DECISION_THRESHOLD
    max_results: int = 5
    max_tokens: int = 200
    static_dir: str | None = None

    def __post_init__(self) -> None:
        for name in ("filter_threshold", "decision_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.max_results < 1:
            raise ValueError(f"max_results must be >= 1, got {self.max_results}")


def apply_env_overrides(config: ServiceConfig, env=os.environ) -> ServiceConfig:
    """Environment variables win over flag values."""
    if "MEDSIM_PORT" in env:
        config.port = int(env["MEDSIM_PORT"])
    if "MEDSIM_MODEL" in env:
        config.model_path = env["MEDSIM_MODEL"]
    if "MEDSIM_FAQS" in env:
        config.faq_path = env["MEDSIM_FAQS"]
    if "MEDSIM_FILTER_T" in env:
        config.filter_threshold = float(env["MEDSIM_FILTER_T"])
    if "MEDSIM_DECISION_T" in env:
        config.decision_threshold = float(env["MEDSIM_DECISION_T"])
    config.__post_init__()
    return config


@dataclass(frozen=True)
class Snapshot:
    """Immutable view the match path reads: entries, their idf index, and the
    replacement map they were preprocessed under. Published by assignment,
    which readers observe either entirely or not at all."""

    entries: tuple[FAQEntry, ...]
    idx: IdfIndex | None
    rmap: ReplacementMap
    by_id: dict = field(hash=False, default_factory=dict)


def _build_snapshot(entries: Sequence[FAQEntry], rmap: ReplacementMap) -> Snapshot:
    entries = tuple(entries)
    idx = faqmatch.build_idf([e.preprocessed_question for e in entries]) if entries else None
    return Snapshot(entries=entries, idx=idx, rmap=rmap, by_id={e.id: e for e in entries})


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": message})


def _parse_faq_payload(body: bytes) -> list[dict]:
    """Accepts a JSON array or JSONL; malformed input names the line."""
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FAQError(f"body is not UTF-8: {exc}") from None
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError:
        parsed = None
    if isinstance(parsed, list):
        rows = parsed
    elif isinstance(parsed, dict):
        rows = [parsed]
    else:
        rows = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FAQError(f"line {lineno}: invalid JSON: {exc}") from None
    if not rows:
        raise FAQError("empty payload")
    return rows


def _validate_rows(rows: list[dict], rmap: ReplacementMap) -> list[FAQEntry]:
    entries: list[FAQEntry] = []
    seen: set[str] = set()
    for i, row in enumerate(rows, start=1):
        if not isinstance(row, dict):
            raise FAQError(f"entry {i}: expected a JSON object")
        for name in ("id", "question", "answer", "source", "last_updated"):
            if name not in row:
                raise FAQError(f"entry {i}: missing field {name!r}")
        entry = faqmatch.make_entry(
            row["id"], row["question"], row["answer"], row["source"],
            row["last_updated"], rmap,
        )
        if entry.id in seen:
            raise FAQError(f"entry {i}: duplicate id {entry.id!r} within payload")
        seen.add(entry.id)
        entries.append(entry)
    return entries


def create_app(config: ServiceConfig, scorer=None) -> FastAPI:
    """Builds the service. A scorer passed directly takes the place of the
    checkpoint named in the config (the test seam)."""
    app = FastAPI(openapi_url=None, docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    rmap = (
        faqmatch.load_replacement_map(config.replacement_path)
        if config.replacement_path
        else faqmatch.default_replacement_map()
    )
    if scorer is None and config.model_path:
        scorer = load_checkpoint(config.model_path)
    version = "unavailable"
    if scorer is not None:
        try:
            version = model_version(scorer)
        except Exception:
            version = getattr(scorer, "version", "external")

    entries: list[FAQEntry] = []
    if config.faq_path and os.path.exists(config.faq_path):
        entries = faqmatch.load_faq_store(config.faq_path, rmap)

    app.state.config = config
    app.state.scorer = scorer
    app.state.model_version = version
    app.state.snapshot = _build_snapshot(entries, rmap)
    app.state.write_lock = threading.Lock()

    @app.middleware("http")
    async def _request_log(request: Request, call_next):
        start = time.perf_counter()
        response = await call_next(request)
        logger.info(
            json.dumps(
                {
                    "method": request.method,
                    "path": request.url.path,
                    "status": response.status_code,
                    "elapsed_ms": round((time.perf_counter() - start) * 1000, 3),
                }
            )
        )
        return response

    @app.post("/v1/match")
    async def post_match(request: Request) -> Response:
        try:
            body = await request.json()
        except Exception:
            return _error(400, "body must be JSON: {\"question\": string}")
        question = body.get("question") if isinstance(body, dict) else None
        if not isinstance(question, str) or not question.strip():
            return _error(400, "question must be a non-empty string")
        if len(question) > MAX_QUESTION_CHARS:
            return _error(400, f"question exceeds {MAX_QUESTION_CHARS} characters")
        if app.state.scorer is None:
            return _error(503, "model not loaded")
        start = time.perf_counter()
        snap: Snapshot = app.state.snapshot
        cfg: ServiceConfig = app.state.config
        results = faqmatch.match(
            question,
            snap.entries,
            app.state.scorer,
            cfg.filter_threshold,
            cfg.decision_threshold,
            idx=snap.idx,
            rmap=snap.rmap,
            max_tokens=cfg.max_tokens,
        )[: cfg.max_results]
        matches = []
        for r in results:
            e = snap.by_id[r.faq_id]
            matches.append(
                {
                    "question": e.question,
                    "answer": e.answer,
                    "source": e.source,
                    "last_updated": e.last_updated,
                    "score": r.p_positive,
                }
            )
        elapsed_ms = (time.perf_counter() - start) * 1000
        return JSONResponse({"matches": matches, "elapsed_ms": elapsed_ms})

    @app.post("/v1/faqs")
    async def post_faqs(request: Request) -> Response:
        body = await request.body()
        snap: Snapshot = app.state.snapshot
        try:
            rows = _parse_faq_payload(body)
            new_entries = _validate_rows(rows, snap.rmap)
        except FAQError as exc:
            return _error(400, str(exc))
        cfg: ServiceConfig = app.state.config
        with app.state.write_lock:
            current: Snapshot = app.state.snapshot
            merged = {e.id: e for e in current.entries}
            merged.update({e.id: e for e in new_entries})
            ordered = [merged[e.id] for e in current.entries]
            known = {e.id for e in current.entries}
            ordered.extend(e for e in new_entries if e.id not in known)
            if cfg.faq_path:
                faqmatch.save_faq_store(cfg.faq_path, ordered)
            app.state.snapshot = _build_snapshot(ordered, current.rmap)
        return JSONResponse({"ingested": len(new_entries), "rejected": 0})

    @app.get("/v1/healthz")
    async def get_healthz() -> Response:
        snap: Snapshot = app.state.snapshot
        if app.state.scorer is None or snap is None:
            return _error(503, "model not loaded")
        return JSONResponse(
            {
                "status": "ok",
                "faq_count": len(snap.entries),
                "model_version": app.state.model_version,
            }
        )

    if config.static_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="ui")

    return app


def run_service(config: ServiceConfig, scorer=None) -> None:
    import uvicorn

    uvicorn.run(create_app(config, scorer), host=config.host, port=config.port)
