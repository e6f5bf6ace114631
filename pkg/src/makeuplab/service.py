"""Minimal HTTP facade over estimate and render for the web demo.

Routes: ``GET /health``, ``POST /estimate``, ``POST /render``, plus an
optional static bundle under ``GET /``.  Bodies are JSON with base64 image
fields or multipart/form-data; responses are JSON (errors always carry an
``error`` string) except ``/render``, which returns the PNG directly.  The
service is stateless; a bounded in-flight limit protects memory.
"""

from __future__ import annotations

import base64
import binascii
import email.parser
import email.policy
import json
import logging
import mimetypes
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from . import __version__
from .encoder import RegressorModel, estimate, load_model
from .geometry import DEFAULT_CROP_EXPANSION, FaceGeometry, Target, crop_region
from .image import decode_png, encode_png, png_dimensions
from .params import GraphicsParams
from .renderer import RenderRequest, render

logger = logging.getLogger(__name__)

MAX_IMAGE_PIXELS = 4096 * 4096
MAX_BODY_BYTES = 128 * 1024 * 1024


class RequestProblem(Exception):
    """Client-side request problem with an HTTP status."""

    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _parse_body(content_type: str, body: bytes) -> dict:
    """Normalize a JSON or multipart body into one field dict."""
    main_type = (content_type or "").split(";")[0].strip().lower()
    if main_type == "application/json":
        try:
            doc = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise RequestProblem(400, f"malformed JSON body: {exc}") from exc
        if not isinstance(doc, dict):
            raise RequestProblem(400, "JSON body must be an object")
        return doc
    if main_type == "multipart/form-data":
        parser = email.parser.BytesParser(policy=email.policy.HTTP)
        message = parser.parsebytes(
            b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body
        )
        if not message.is_multipart():
            raise RequestProblem(400, "malformed multipart body")
        fields: dict = {}
        for part in message.iter_parts():
            name = part.get_param("name", header="content-disposition")
            if not name:
                continue
            payload = part.get_payload(decode=True)
            if (part.get_content_type() or "").startswith("image/") or name in ("image",):
                fields[name] = payload
            else:
                fields[name] = payload.decode("utf-8")
        return fields
    raise RequestProblem(400, f"unsupported content type {content_type!r}")


def _field_image(fields: dict, name: str) -> bytes:
    value = fields.get(name)
    if value is None:
        raise RequestProblem(400, f"missing field {name!r}")
    if isinstance(value, bytes):
        data = value
    else:
        try:
            data = base64.b64decode(value, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise RequestProblem(400, f"field {name!r} is not valid base64") from exc
    try:
        width, height = png_dimensions(data)
    except Exception as exc:
        raise RequestProblem(400, f"field {name!r} is not a decodable image") from exc
    if width * height > MAX_IMAGE_PIXELS:
        raise RequestProblem(413, f"image {name!r} is {width}x{height}, too large")
    return data


def _field_json(fields: dict, name: str) -> dict:
    value = fields.get(name)
    if value is None:
        raise RequestProblem(400, f"missing field {name!r}")
    if isinstance(value, (dict, list)):
        return value
    try:
        return json.loads(value)
    except (TypeError, json.JSONDecodeError) as exc:
        raise RequestProblem(400, f"field {name!r} is not valid JSON: {exc}") from exc


def _field_target(fields: dict) -> Target:
    raw = fields.get("target", "lips")
    try:
        return Target(raw)
    except ValueError as exc:
        raise RequestProblem(400, f"unknown target {raw!r}") from exc


class MakeupService:
    """Request handlers over one immutable loaded model."""

    def __init__(self, model: RegressorModel):
        self.model = model

    def health(self) -> dict:
        return {
            "status": "ok",
            "version": __version__,
            "model_version": self.model.version,
            "model_input_size": self.model.input_size,
        }

    def handle_estimate(self, fields: dict) -> dict:
        image = decode_png(_field_image(fields, "image"))
        try:
            geometry = FaceGeometry.from_json_dict(_field_json(fields, "geometry"))
        except ValueError as exc:
            raise RequestProblem(400, f"bad geometry: {exc}") from exc
        target = _field_target(fields)
        if not geometry.polygons_for(target):
            raise RequestProblem(400, f"geometry has no {target.value} polygons")
        params = estimate(self.model, image, geometry, target)
        crop = crop_region(
            image, geometry.polygons_for(target), DEFAULT_CROP_EXPANSION, self.model.input_size
        )
        return {
            "params": params.to_json_dict(),
            "crop_png": base64.b64encode(encode_png(crop)).decode("ascii"),
            "model_version": self.model.version,
        }

    def handle_render(self, fields: dict) -> bytes:
        image = decode_png(_field_image(fields, "image"))
        try:
            geometry = FaceGeometry.from_json_dict(_field_json(fields, "geometry"))
            params = GraphicsParams.from_json_dict(_field_json(fields, "params"))
            user_intensity = float(fields.get("user_intensity", 1.0))
            request = RenderRequest(
                source=image,
                geometry=geometry,
                params=params,
                target=_field_target(fields),
                user_intensity=user_intensity,
            )
        except ValueError as exc:
            raise RequestProblem(400, str(exc)) from exc
        return encode_png(render(request))


def _make_handler(service: MakeupService, static_dir: Path | None, gate: threading.BoundedSemaphore):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # routed through logging instead of stderr
            logger.debug(fmt, *args)

        def _send(self, status: int, body: bytes, content_type: str) -> None:
            self.send_response(status)
            self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_json(self, status: int, doc: dict) -> None:
            self._send(status, json.dumps(doc).encode(), "application/json")

        def _log_request(self, status: int, started: float) -> None:
            logger.info(
                "%s %s -> %d (%.1f ms)",
                self.command,
                self.path,
                status,
                (time.perf_counter() - started) * 1e3,
            )

        def do_GET(self) -> None:
            started = time.perf_counter()
            if self.path == "/health":
                self._send_json(200, service.health())
                self._log_request(200, started)
                return
            if static_dir is not None:
                status = self._serve_static()
                self._log_request(status, started)
                return
            self._send_json(404, {"error": f"no route {self.path}"})
            self._log_request(404, started)

        def _serve_static(self) -> int:
            rel = self.path.split("?")[0].lstrip("/") or "index.html"
            root = static_dir.resolve()
            candidate = (root / rel).resolve()
            if not str(candidate).startswith(str(root)) or not candidate.is_file():
                self._send_json(404, {"error": f"no route {self.path}"})
                return 404
            content_type = mimetypes.guess_type(candidate.name)[0] or "application/octet-stream"
            self._send(200, candidate.read_bytes(), content_type)
            return 200

        def do_POST(self) -> None:
            started = time.perf_counter()
            status = 500
            with gate:
                try:
                    length = int(self.headers.get("Content-Length", "0"))
                    if length > MAX_BODY_BYTES:
                        raise RequestProblem(413, "request body too large")
                    body = self.rfile.read(length)
                    fields = _parse_body(self.headers.get("Content-Type", ""), body)
                    if self.path == "/estimate":
                        doc = service.handle_estimate(fields)
                        status = 200
                        self._send_json(200, doc)
                    elif self.path == "/render":
                        png = service.handle_render(fields)
                        status = 200
                        self._send(200, png, "image/png")
                    else:
                        status = 404
                        self._send_json(404, {"error": f"no route {self.path}"})
                except RequestProblem as problem:
                    status = problem.status
                    self._send_json(problem.status, {"error": str(problem)})
                except Exception as exc:  # keep the process alive on internal bugs
                    logger.exception("internal error handling %s", self.path)
                    status = 500
                    self._send_json(500, {"error": f"internal error: {exc}"})
            self._log_request(status, started)

    return Handler


def create_server(
    model_path: str | Path,
    bind: str = "127.0.0.1",
    port: int = 8008,
    static_dir: str | Path | None = None,
    max_inflight: int = 8,
) -> ThreadingHTTPServer:
    """Load the model (failing before any socket is bound) and build a server."""
    model = load_model(model_path)
    service = MakeupService(model)
    static = Path(static_dir) if static_dir else None
    if static is not None and not static.is_dir():
        raise FileNotFoundError(f"static directory {static} does not exist")
    gate = threading.BoundedSemaphore(max_inflight)
    handler = _make_handler(service, static, gate)
    server = ThreadingHTTPServer((bind, port), handler)
    server.daemon_threads = True
    return server


def serve(
    model_path: str | Path,
    bind: str = "127.0.0.1",
    port: int = 8008,
    static_dir: str | Path | None = None,
    max_inflight: int = 8,
) -> None:
    server = create_server(model_path, bind, port, static_dir, max_inflight)
    logger.info("serving on http://%s:%d/ (model %s)", bind, server.server_address[1], model_path)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
