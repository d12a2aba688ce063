"""HTTP client for backends served out of process.

Wire protocol: ``POST /invoke`` with ``{"function", "args", "input_id"}``;
the server answers ``{"output": value, "latency_ms": number}``.
"""

from __future__ import annotations

import json
import socket
import time
import urllib.error
import urllib.request
from typing import NamedTuple

from .backends import BackendSpec, RemoteEndpoint
from .dsl import CallSite


class RemoteError(Exception):
    pass


class RemoteTimeout(RemoteError):
    pass


class RemoteNetworkError(RemoteError):
    pass


class RemoteDecodeError(RemoteError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class RemoteReply(NamedTuple):
    output: object
    latency_ms: float  # server-reported when present, else wall clock


def _jsonable(value):
    if isinstance(value, (str, bool, int, float)) or value is None:
        return value
    input_id = getattr(value, "input_id", None)
    if input_id is not None:
        return input_id
    return str(value)


def invoke_remote(backend: BackendSpec, site: CallSite, dynamic_args, input_id: str = "") -> RemoteReply:
    endpoint = backend.behavior
    if not isinstance(endpoint, RemoteEndpoint):
        raise TypeError(f"backend {backend.id!r} has no remote endpoint")
    body = json.dumps(
        {"function": site.function_id, "args": [_jsonable(a) for a in dynamic_args], "input_id": input_id}
    ).encode()
    url = endpoint.url.rstrip("/") + "/invoke"
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"}, method="POST")
    start = time.perf_counter()
    try:
        with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
            raw = resp.read()
    except (socket.timeout, TimeoutError) as exc:
        raise RemoteTimeout(f"{backend.id}: timed out after {endpoint.timeout}s") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise RemoteTimeout(f"{backend.id}: timed out after {endpoint.timeout}s") from exc
        raise RemoteNetworkError(f"{backend.id}: {exc.reason}") from exc
    except OSError as exc:
        raise RemoteNetworkError(f"{backend.id}: {exc}") from exc
    elapsed_ms = (time.perf_counter() - start) * 1000.0
    try:
        payload = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise RemoteDecodeError(f"{backend.id}: response is not JSON") from exc
    if not isinstance(payload, dict):
        raise RemoteDecodeError(f"{backend.id}: response is not a JSON object")
    if "output" not in payload:
        raise RemoteDecodeError(f"{backend.id}: response missing field 'output'", field="output")
    latency = payload.get("latency_ms", elapsed_ms)
    if not isinstance(latency, (int, float)) or isinstance(latency, bool):
        raise RemoteDecodeError(f"{backend.id}: field 'latency_ms' is not a number", field="latency_ms")
    return RemoteReply(payload["output"], float(latency))
