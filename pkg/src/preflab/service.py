"""HTTP facade for human preference labelling.

A running experiment hands each feedback session's query pairs (with 2D render
traces) to the SessionStore and blocks until every pair is resolved. HTTP
handlers only touch the store, which serializes all writes behind one lock;
the experiment thread polls for completion.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .envs import make_env, render_trace
from .teachers import Label

CHOICES = ("first", "second", "equal", "skip")
CHOICE_TO_LABEL = {
    "first": Label.PREFER_FIRST,
    "second": Label.PREFER_SECOND,
    "equal": Label.EQUAL,
    "skip": Label.DISCARD,
}


class UnknownSession(KeyError):
    pass


class UnknownPair(KeyError):
    pass


class AlreadyLabelled(RuntimeError):
    pass


@dataclass
class LabelSession:
    session_id: str
    pairs: dict[str, dict]  # pair_id -> {"trace_a": ..., "trace_b": ...}
    experiment_step: int
    created_at: float
    labels: dict[str, str] = field(default_factory=dict)

    @property
    def pending_ids(self) -> list[str]:
        return [pid for pid in self.pairs if pid not in self.labels]

    @property
    def complete(self) -> bool:
        return not self.pending_ids


class SessionStore:
    """Thread-safe session registry with a single writer lock."""

    def __init__(self):
        self._lock = threading.Lock()
        self._sessions: dict[str, LabelSession] = {}
        self._counter = 0
        self._latest: str | None = None

    def create_session(self, traces: list[tuple[dict, dict]], experiment_step: int) -> str:
        with self._lock:
            self._counter += 1
            sid = f"session-{self._counter}"
            pairs = {
                f"{sid}/pair-{i}": {"trace_a": a, "trace_b": b}
                for i, (a, b) in enumerate(traces)
            }
            self._sessions[sid] = LabelSession(sid, pairs, experiment_step, time.time())
            self._latest = sid
            return sid

    def _get(self, session_id: str) -> LabelSession:
        session = self._sessions.get(session_id)
        if session is None:
            raise UnknownSession(session_id)
        return session

    def latest_summary(self) -> dict:
        with self._lock:
            if self._latest is None:
                return {"status": "idle", "session_id": None, "pending": 0}
            session = self._sessions[self._latest]
            return {
                "status": "complete" if session.complete else "active",
                "session_id": session.session_id,
                "pending": len(session.pending_ids),
                "total": len(session.pairs),
                "experiment_step": session.experiment_step,
            }

    def get_pending(self, session_id: str) -> list[dict]:
        with self._lock:
            session = self._get(session_id)
            return [
                {"pair_id": pid, **session.pairs[pid]}
                for pid in session.pending_ids
            ]

    def submit_label(self, session_id: str, pair_id: str, choice: str) -> dict:
        if choice not in CHOICES:
            raise ValueError(f"choice must be one of {CHOICES}")
        with self._lock:
            session = self._get(session_id)
            if pair_id not in session.pairs:
                raise UnknownPair(pair_id)
            if pair_id in session.labels:
                raise AlreadyLabelled(pair_id)
            session.labels[pair_id] = choice
            return {"ok": True, "pending": len(session.pending_ids)}

    def state(self, session_id: str) -> dict:
        with self._lock:
            session = self._get(session_id)
            return {
                "session_id": session.session_id,
                "pending": len(session.pending_ids),
                "completed": session.complete,
                "labels_collected": len(session.labels),
                "experiment_step": session.experiment_step,
            }

    def wait_complete(self, session_id: str, timeout: float | None = None,
                      poll: float = 0.1) -> dict[str, str]:
        """Block until every pair is labelled; the session survives a timeout."""
        deadline = None if timeout is None else time.time() + timeout
        while True:
            with self._lock:
                session = self._get(session_id)
                if session.complete:
                    # labels in pair order
                    return {pid: session.labels[pid] for pid in session.pairs}
            if deadline is not None and time.time() > deadline:
                raise SessionSuspended(session_id)
            time.sleep(poll)


class SessionSuspended(TimeoutError):
    """The human did not finish in time; the session stays open for resumption."""


class HumanLabeller:
    """Label provider that routes one session's pairs through the store.

    wants_checkpoint makes the experiment write a buffer/ensemble snapshot
    before blocking, so a suspended session can be resumed.
    """

    wants_checkpoint = True

    def __init__(self, store: SessionStore, env_id: str, horizon: int | None = None,
                 timeout: float | None = None, poll: float = 0.1):
        self.store = store
        self.spec = make_env(env_id, horizon).spec
        self.timeout = timeout
        self.poll = poll

    def label(self, pairs, stats, session_index: int) -> list[Label]:
        traces = [
            (render_trace(a, self.spec), render_trace(b, self.spec)) for a, b in pairs
        ]
        sid = self.store.create_session(traces, experiment_step=session_index)
        choices = self.store.wait_complete(sid, timeout=self.timeout, poll=self.poll)
        return [CHOICE_TO_LABEL[choices[pid]] for pid in choices]


class LabelRequest(BaseModel):
    pair_id: str
    choice: str


def create_app(store: SessionStore, static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="preflab labelling service", version="1")

    @app.get("/api/session")
    def latest_session():
        return store.latest_summary()

    @app.get("/api/session/{session_id}/pending")
    def pending(session_id: str):
        try:
            return {"session_id": session_id, "pending": store.get_pending(session_id)}
        except UnknownSession:
            raise HTTPException(status_code=404, detail="unknown session")

    @app.post("/api/session/{session_id}/label")
    def submit(session_id: str, request: LabelRequest):
        try:
            return store.submit_label(session_id, request.pair_id, request.choice)
        except UnknownSession:
            raise HTTPException(status_code=404, detail="unknown session")
        except UnknownPair:
            raise HTTPException(status_code=404, detail="unknown pair")
        except AlreadyLabelled:
            raise HTTPException(status_code=409, detail="pair already labelled")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/api/session/{session_id}/state")
    def state(session_id: str):
        try:
            return store.state(session_id)
        except UnknownSession:
            raise HTTPException(status_code=404, detail="unknown session")

    if static_dir and os.path.isdir(static_dir):
        index = os.path.join(static_dir, "index.html")

        @app.get("/")
        def root():
            return FileResponse(index)

        app.mount("/", StaticFiles(directory=static_dir), name="static")

    return app
