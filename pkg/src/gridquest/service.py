"""Evaluation service: the backend for the browser evaluation form and labeler.

Plain-text HTTP on the standard library server.  State is two append-only
line files in the data directory: ``matchlog.jsonl`` (sampled matches and
rating outcomes, the same records the rating module persists) and
``labels.jsonl`` (frame label assignments).  On startup both are folded
back into memory, so a restarted service serves the same leaderboard it
crashed with.

Endpoints, all JSON unless noted:

    GET  /api/match                    sample a new evaluation form
    GET  /api/replays                  replay catalog (headers only)
    GET  /api/replay/{id}              replay document (text/plain)
    GET  /api/leaderboard?metric=      ratings, best first
    GET  /api/trace?metric=&condition= rating history for one condition
    GET  /api/outcomes                 raw per-metric outcome log
    GET  /api/labels/{replay}/{tick}   stored label set for a frame
    POST /api/labels/{replay}/{tick}   store a label set for a frame
    POST /api/judgment                 record one filled evaluation form
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import rating as ratingmod
from .evalsim import EvalSimError, sample_match
from .perception import LabelError, StateLabelSet
from .replay import ReplayError, ReplayStore

__all__ = ["EvalService", "ServiceError", "make_server", "serve_forever"]

_MAX_BODY = 1 << 20


class ServiceError(ValueError):
    """Client-side request problem; carries the HTTP status to return."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


class EvalService:
    """Application state and operations behind the HTTP handler."""

    def __init__(self, store: ReplayStore, data_dir,
                 rng: np.random.Generator = None,
                 config: ratingmod.RatingConfig = ratingmod.RatingConfig()):
        self.store = store
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.matchlog_path = self.data_dir / "matchlog.jsonl"
        self.labels_path = self.data_dir / "labels.jsonl"
        self.rng = rng if rng is not None else np.random.default_rng()
        self.ratings = ratingmod.RatingStore(config)
        self.labels: dict = {}
        self._lock = threading.Lock()
        self.catalog = store.catalog()
        for by_condition in self.catalog.values():
            self.ratings.participants.update(by_condition)
        self._restore()

    # -- persistence ---------------------------------------------------------

    def _restore(self) -> None:
        if self.matchlog_path.exists():
            for line in self.matchlog_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                if record["kind"] == "match":
                    self.ratings.register_match(record["id"], record["a"],
                                                record["b"])
                elif record["kind"] == "outcome":
                    self.ratings.record(ratingmod.MatchOutcome(
                        record["metric"], record["a"], record["b"],
                        record["result"]))
        if self.labels_path.exists():
            for line in self.labels_path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                self.labels[(record["replay"], record["tick"])] = record["bits"]

    def _append(self, path: Path, record: dict) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- operations ----------------------------------------------------------

    def new_match(self) -> dict:
        with self._lock:
            try:
                match = sample_match(self.store, self.rng,
                                     created=len(self.ratings.matches),
                                     catalog=self.catalog)
            except EvalSimError as exc:
                raise ServiceError(str(exc), status=409)
            header_a = self.store.header(match.replay_a)
            header_b = self.store.header(match.replay_b)
            self.ratings.register_match(match.match_id, header_a["condition"],
                                        header_b["condition"])
            self._append(self.matchlog_path, {
                "kind": "match", "id": match.match_id,
                "a": header_a["condition"], "b": header_b["condition"]})
            return {
                "match_id": match.match_id,
                "task": match.task,
                "created": match.created,
                "replay_a": {"id": match.replay_a, **header_a},
                "replay_b": {"id": match.replay_b, **header_b},
                "questions": list(ratingmod.QUESTIONS),
                "answers": list(ratingmod.ANSWERS),
            }

    def replay_catalog(self) -> list:
        return [{"id": rid, **self.store.header(rid)}
                for rid in self.store.ids()]

    def replay_text(self, replay_id: str) -> str:
        try:
            return self.store.read_text(replay_id)
        except ReplayError as exc:
            raise ServiceError(str(exc), status=404)

    def record_judgment(self, payload: dict) -> dict:
        if not isinstance(payload, dict):
            raise ServiceError("judgment body must be an object")
        try:
            judgment = ratingmod.Judgment(
                match_id=str(payload.get("match", "")),
                evaluator=str(payload.get("evaluator", "")),
                answers=tuple(payload.get("answers", ())))
        except ratingmod.RatingError as exc:
            raise ServiceError(str(exc))
        with self._lock:
            try:
                outcomes = ratingmod.ingest_judgment(self.ratings, judgment)
            except ratingmod.RatingError as exc:
                raise ServiceError(str(exc))
            for outcome in outcomes:
                self._append(self.matchlog_path, {
                    "kind": "outcome", "metric": outcome.metric,
                    "a": outcome.player_a, "b": outcome.player_b,
                    "result": outcome.result})
        return {"match": judgment.match_id,
                "recorded": [o.result for o in outcomes]}

    def leaderboard(self, metric: str) -> dict:
        try:
            with self._lock:
                board = ratingmod.leaderboard(self.ratings, metric)
        except ratingmod.RatingError as exc:
            raise ServiceError(str(exc))
        return {"metric": metric,
                "leaderboard": [{"condition": name, "mu": rt.mu,
                                 "sigma": rt.sigma} for name, rt in board]}

    def trace(self, metric: str, condition: str) -> dict:
        try:
            with self._lock:
                series = ratingmod.rating_trace(self.ratings, metric, condition)
        except ratingmod.RatingError as exc:
            raise ServiceError(str(exc))
        return {"metric": metric, "condition": condition,
                "trace": [{"index": index, "mu": rt.mu, "sigma": rt.sigma}
                          for index, rt in series]}

    def outcomes(self) -> dict:
        with self._lock:
            log = [{"metric": o.metric, "a": o.player_a, "b": o.player_b,
                    "result": o.result} for o in self.ratings.log]
        return {"outcomes": log}

    def _check_frame(self, replay_id: str, tick: str) -> tuple:
        try:
            tick_index = int(tick)
        except ValueError:
            raise ServiceError(f"bad tick {tick!r}")
        if tick_index < 0:
            raise ServiceError(f"bad tick {tick_index}")
        try:
            self.store.header(replay_id)
        except ReplayError as exc:
            raise ServiceError(str(exc), status=404)
        return replay_id, tick_index

    def get_labels(self, replay_id: str, tick: str) -> dict:
        key = self._check_frame(replay_id, tick)
        with self._lock:
            bits = self.labels.get(key)
        labels = (StateLabelSet.from_bits(bits) if bits is not None
                  else StateLabelSet.none_set())
        return {"replay": key[0], "tick": key[1], "stored": bits is not None,
                "labels": list(labels.active()), "none": labels.none}

    def post_labels(self, replay_id: str, tick: str, payload: dict) -> dict:
        key = self._check_frame(replay_id, tick)
        if not isinstance(payload, dict):
            raise ServiceError("label body must be an object")
        active = payload.get("labels", [])
        if not isinstance(active, list):
            raise ServiceError("labels must be a list of label names")
        try:
            labels = StateLabelSet.from_active(active)
        except LabelError as exc:
            raise ServiceError(str(exc))
        with self._lock:
            self.labels[key] = labels.to_bits()
            self._append(self.labels_path, {
                "replay": key[0], "tick": key[1], "bits": labels.to_bits(),
                "labels": list(labels.active())})
        return {"replay": key[0], "tick": key[1],
                "labels": list(labels.active()), "none": labels.none}


class _Handler(BaseHTTPRequestHandler):
    service: EvalService = None
    protocol_version = "HTTP/1.1"

    # -- plumbing -------------------------------------------------------------

    def log_message(self, format, *args):
        pass

    def _cors(self):
        self.send_header("Access-Control-Allow-Origin", "*")
        self.send_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS")
        self.send_header("Access-Control-Allow-Headers", "Content-Type")

    def _send(self, status: int, body: bytes, content_type: str):
        self.send_response(status)
        self._cors()
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, payload: dict, status: int = 200):
        self._send(status, (json.dumps(payload, sort_keys=True) + "\n").encode(),
                   "application/json")

    def _send_error(self, exc: Exception, status: int = 400):
        self._send_json({"error": str(exc)}, status=status)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", 0))
        if length > _MAX_BODY:
            raise ServiceError("request body too large", status=413)
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise ServiceError("empty request body")
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ServiceError(f"bad JSON body: {exc}")

    # -- dispatch -------------------------------------------------------------

    def do_OPTIONS(self):
        self._send(204, b"", "text/plain")

    def do_GET(self):
        try:
            url = urlparse(self.path)
            query = parse_qs(url.query)
            parts = [p for p in url.path.split("/") if p]
            if parts == ["api", "match"]:
                self._send_json(self.service.new_match())
            elif parts == ["api", "replays"]:
                self._send_json({"replays": self.service.replay_catalog()})
            elif len(parts) == 3 and parts[:2] == ["api", "replay"]:
                text = self.service.replay_text(parts[2])
                self._send(200, text.encode(), "text/plain; charset=utf-8")
            elif parts == ["api", "leaderboard"]:
                metric = query.get("metric", ["best"])[0]
                self._send_json(self.service.leaderboard(metric))
            elif parts == ["api", "trace"]:
                metric = query.get("metric", ["best"])[0]
                condition = query.get("condition", [""])[0]
                self._send_json(self.service.trace(metric, condition))
            elif parts == ["api", "outcomes"]:
                self._send_json(self.service.outcomes())
            elif len(parts) == 4 and parts[:2] == ["api", "labels"]:
                self._send_json(self.service.get_labels(parts[2], parts[3]))
            else:
                self._send_json({"error": f"no such endpoint {url.path!r}"},
                                status=404)
        except ServiceError as exc:
            self._send_error(exc, status=exc.status)

    def do_POST(self):
        try:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            if parts == ["api", "judgment"]:
                self._send_json(self.service.record_judgment(self._read_body()))
            elif len(parts) == 4 and parts[:2] == ["api", "labels"]:
                self._send_json(self.service.post_labels(parts[2], parts[3],
                                                         self._read_body()))
            else:
                self._send_json({"error": f"no such endpoint {url.path!r}"},
                                status=404)
        except ServiceError as exc:
            self._send_error(exc, status=exc.status)


def make_server(service: EvalService, host: str = "127.0.0.1",
                port: int = 8008) -> ThreadingHTTPServer:
    """Bind the service; caller drives serve_forever/shutdown."""
    handler = type("BoundHandler", (_Handler,), {"service": service})
    return ThreadingHTTPServer((host, port), handler)


def serve_forever(service: EvalService, host: str = "127.0.0.1",
                  port: int = 8008) -> None:
    server = make_server(service, host, port)
    address = server.server_address
    print(f"serving evaluation API on http://{address[0]}:{address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
