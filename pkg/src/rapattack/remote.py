"""Forward-only remote classifier over JSON/HTTP, plus a local stub server.

Wire format::

    POST <endpoint>   {"image": "<base64 PNG>"}
    200               {"predictions": [{"label": <str|int>, "score": <float>}, ...]}

Predictions are sorted by descending score. The client keeps the first
``top_k`` entries.
"""
from __future__ import annotations

import base64
import io
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import requests
import torch
from PIL import Image

from .errors import CapabilityError, ProtocolError, TransportError

log = logging.getLogger(__name__)


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """C x H x W in [0, 1] -> H x W x C uint8, rounding to nearest."""
    arr = (x.detach().clamp(0, 1).double() * 255).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def quantize(x: torch.Tensor) -> torch.Tensor:
    """The pixels a receiver sees after an 8-bit PNG round trip."""
    levels = (x.detach().clamp(0, 1).double() * 255).round().to(torch.uint8)
    return (levels.to(torch.float32) / 255).to(x.dtype)


def encode_png(x: torch.Tensor) -> bytes:
    arr = to_uint8(x)
    img = Image.fromarray(arr[..., 0] if arr.shape[-1] == 1 else arr)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> torch.Tensor:
    arr = np.asarray(Image.open(io.BytesIO(data)), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


@dataclass(frozen=True)
class RemoteClassifierSpec:
    endpoint: str
    top_k: int = 10
    timeout: float = 10.0
    max_retries: int = 3
    backoff: float = 0.05
    auth_token_env: str | None = None


class RemoteClassifier:
    """Client for a remote top-k classifier. Has no gradients and no logits."""

    capabilities = frozenset({"top_k"})
    concurrent_safe = True

    def __init__(self, spec: RemoteClassifierSpec, session: requests.Session | None = None):
        self.spec = spec
        self.session = session or requests.Session()
        self.retries = 0

    def forward(self, x):
        raise CapabilityError("remote classifiers only return top-k labels")

    def input_gradient(self, *args, **kwargs):
        raise CapabilityError("remote classifiers do not provide input gradients")

    def _headers(self):
        headers = {"Content-Type": "application/json"}
        if self.spec.auth_token_env:
            token = os.environ.get(self.spec.auth_token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, body: bytes) -> dict:
        last = None
        for attempt in range(self.spec.max_retries + 1):
            if attempt:
                self.retries += 1
                time.sleep(self.spec.backoff * 2 ** (attempt - 1))
            try:
                r = self.session.post(self.spec.endpoint, data=body, headers=self._headers(), timeout=self.spec.timeout)
            except requests.RequestException as e:
                last = e
                continue
            if r.status_code >= 500 or r.status_code == 429:
                last = TransportError(f"HTTP {r.status_code}")
                continue
            if r.status_code != 200:
                raise TransportError(f"HTTP {r.status_code}: {r.text[:200]}")
            try:
                return r.json()
            except ValueError as e:
                raise ProtocolError(f"response is not JSON: {e}") from None
        raise TransportError(f"giving up after {self.spec.max_retries + 1} attempts: {last}")

    def predict_one(self, image: torch.Tensor) -> list[tuple]:
        body = json.dumps({"image": base64.b64encode(encode_png(image)).decode("ascii")}).encode()
        payload = self._post(body)
        preds = payload.get("predictions") if isinstance(payload, dict) else None
        if not isinstance(preds, list):
            raise ProtocolError("response lacks a 'predictions' list")
        out = []
        for p in preds:
            try:
                label, score = p["label"], float(p["score"])
            except (KeyError, TypeError, ValueError):
                raise ProtocolError(f"malformed prediction entry {p!r}") from None
            if not math.isfinite(score):
                raise ProtocolError("non-finite score")
            out.append((label, score))
        if any(a[1] < b[1] for a, b in zip(out, out[1:])):
            raise ProtocolError("predictions are not sorted by descending score")
        return out[: self.spec.top_k]

    def predict(self, x: torch.Tensor) -> list[list[tuple]]:
        return [self.predict_one(img) for img in x]


def remote_predict(spec: RemoteClassifierSpec, x: torch.Tensor, client: RemoteClassifier | None = None):
    """Per-image top-k (label, score) lists from the remote classifier."""
    return (client or RemoteClassifier(spec)).predict(x)


def top_k_classes(logits: torch.Tensor, k: int) -> list[tuple[int, float]]:
    """(class, probability) pairs by descending probability; ties keep ascending class order."""
    probs = torch.softmax(logits.double(), dim=0)
    order = sorted(range(len(probs)), key=lambda c: -float(probs[c]))[:k]
    return [(c, float(probs[c])) for c in order]


# ---------------------------------------------------------------------------
# stub server
# ---------------------------------------------------------------------------

class StubClassifierServer:
    """Serves a local model over the wire format, for tests and dry runs.

    ``fail_first`` makes the first n requests answer 503; ``label_names`` maps
    class indices to the labels put on the wire (default: the index itself).
    """

    def __init__(self, model, top_k: int = 10, fail_first: int = 0, label_names=None, host: str = "127.0.0.1"):
        self.model = model
        self.top_k = top_k
        self.fail_first = fail_first
        self.label_names = label_names
        self.requests = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                with stub._lock:
                    stub.requests += 1
                    fail = stub.requests <= stub.fail_first
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                if fail:
                    return self._send(503, {"error": "injected failure"})
                try:
                    image = decode_png(base64.b64decode(json.loads(raw)["image"]))
                except Exception as e:  # noqa: BLE001 - any decode problem is a client error
                    return self._send(400, {"error": str(e)})
                return self._send(200, {"predictions": stub.classify(image)})

            def _send(self, status, body):
                data = json.dumps(body).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer((host, 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}/predict"

    @torch.no_grad()
    def classify(self, image: torch.Tensor) -> list[dict]:
        ranked = top_k_classes(self.model.forward(image[None])[0], self.top_k)
        name = (lambda c: c) if self.label_names is None else self.label_names.__getitem__
        return [{"label": name(c), "score": p} for c, p in ranked]

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()
