"""HTTP wire protocol for top-k logprob APIs.

Server (wraps a :class:`~llmimage.mock.MockModel`)::

    POST /v1/query          {"context", "logit_bias": {"<id>": b}, "top_logprobs": k,
                             "echo_replica": bool}
                            -> {"model_id", "top_logprobs": [{"token", "logprob"}],
                                "replica_hint"?}
    GET  /v1/capabilities   -> {"v", "k_max", "beta_max", "stochastic"}
    GET  /healthz           -> {"status": "ok"}

Validation failures answer 400 with ``{"error": {"code", "message"}}``.  The
``X-Session-Id`` header selects the replica draw stream on stochastic mocks.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

from .api import ApiSession, Capabilities, TopKResponse, request_key
from .errors import (AuthError, BadRequest, BadTokenId, BiasTooLarge, BindFailure,
                     CapabilityMismatch, KTooLarge, ProtocolError, TransportError,
                     ValidationError)

log = logging.getLogger(__name__)

SESSION_HEADER = "X-Session-Id"
_ERRORS_BY_CODE = {cls.code: cls for cls in (BiasTooLarge, KTooLarge, BadTokenId, BadRequest)}


# -- server -------------------------------------------------------------------------

class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server_version = "llmimage-mock"

    def log_message(self, fmt, *args):
        log.debug("http " + fmt, *args)

    def _reply(self, status, body):
        data = json.dumps(body, separators=(",", ":")).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def _error(self, exc):
        code = getattr(exc, "code", "bad_request")
        self._reply(400, {"error": {"code": code, "message": str(exc)}})

    def do_GET(self):
        if self.path == "/healthz":
            self._reply(200, {"status": "ok"})
        elif self.path == "/v1/capabilities":
            self._reply(200, self.server.model.capabilities.to_dict())
        else:
            self._reply(404, {"error": {"code": "not_found", "message": self.path}})

    def do_POST(self):
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if self.path != "/v1/query":
            self._reply(404, {"error": {"code": "not_found", "message": self.path}})
            return
        try:
            context, bias, k, echo = parse_query(raw)
            self.server.throttle()
            response = self.server.model.api_query(
                context, bias, k, session=self.headers.get(SESSION_HEADER, "default"),
                echo_replica=echo)
        except ValidationError as exc:
            self._error(exc)
            return
        self._reply(200, response.to_wire(self.server.model.spec.model_id))


def parse_query(raw):
    """Decode and type-check a QueryRequest body."""
    try:
        body = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BadRequest(f"body is not JSON: {exc}") from exc
    if not isinstance(body, dict) or not isinstance(body.get("context"), str):
        raise BadRequest("request needs a string 'context'")
    k = body.get("top_logprobs", 1)
    if not isinstance(k, int) or isinstance(k, bool):
        raise BadRequest("top_logprobs must be an integer")
    bias = {}
    for key, value in (body.get("logit_bias") or {}).items():
        try:
            token = int(key)
        except ValueError:
            raise BadTokenId(f"token id {key!r} is not an integer") from None
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise BadRequest(f"bias for token {key} is not a number")
        bias[token] = float(value)
    return body["context"], bias, k, bool(body.get("echo_replica", False))


class MockServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, model, address=("127.0.0.1", 0), rate_limit=None):
        try:
            super().__init__(address, _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
        self.model = model
        self.rate_limit = rate_limit
        self._next_slot = 0.0
        self._rate_lock = threading.Lock()
        self._thread = None

    @property
    def url(self):
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"

    def throttle(self):
        if not self.rate_limit:
            return
        with self._rate_lock:
            now = time.monotonic()
            slot = max(now, self._next_slot)
            self._next_slot = slot + 1.0 / self.rate_limit
        if slot > now:
            time.sleep(slot - now)

    def start(self):
        """Serve from a daemon thread; returns self."""
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def parse_bind(bind):
    host, _, port = bind.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ValidationError(f"bind address must look like host:port, got {bind!r}") from None


def serve(model, bind_address="127.0.0.1:0", rate_limit=None):
    """Start a server in a background thread and return it (``.url``, ``.stop()``)."""
    address = parse_bind(bind_address) if isinstance(bind_address, str) else bind_address
    return MockServer(model, address, rate_limit).start()


# -- client -----------------------------------------------------------------------

def _http(base_url, retries, pool):
    retry = Retry(total=retries, connect=retries, read=retries, status=retries,
                  backoff_factor=0.05, status_forcelist=(429, 500, 502, 503, 504),
                  allowed_methods=None, raise_on_status=False)
    http = requests.Session()
    adapter = HTTPAdapter(max_retries=retry, pool_connections=1, pool_maxsize=max(pool, 1))
    http.mount("http://", adapter)
    http.mount("https://", adapter)
    # Resolve proxy settings once instead of re-reading the environment per call.
    http.proxies.update(requests.utils.get_environ_proxies(base_url))
    http.trust_env = False
    return http


def _raise_for(resp):
    if resp.status_code in (401, 403):
        raise AuthError(f"authentication failed ({resp.status_code}): {resp.text[:200]}")
    if 400 <= resp.status_code < 500:
        try:
            err = resp.json()["error"]
            code, message = err.get("code"), err.get("message", "")
        except (ValueError, KeyError, TypeError, AttributeError):
            code, message = None, resp.text[:200]
        raise _ERRORS_BY_CODE.get(code, BadRequest)(f"{code or resp.status_code}: {message}")
    if resp.status_code >= 300:
        raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")


class HttpSession(ApiSession):
    """Native-protocol session against a server built by :func:`serve`."""

    def __init__(self, base_url, *, capabilities=None, cache=True, concurrency=8, timeout=30.0,
                 retries=5, session_id=None, echo_replica=False, headers=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session_id = session_id
        self.echo_replica = echo_replica
        self.http = _http(self.base_url, retries, concurrency)
        if headers:
            self.http.headers.update(headers)
        if session_id:
            self.http.headers[SESSION_HEADER] = session_id
        advertised = self._capabilities()
        if capabilities is not None:
            if (capabilities.k_max > advertised.k_max or capabilities.beta_max > advertised.beta_max
                    or capabilities.v != advertised.v):
                raise CapabilityMismatch(f"requested {capabilities} exceeds advertised {advertised}")
            advertised = capabilities
        super().__init__(advertised, cache=cache, concurrency=concurrency,
                         model_id=self.base_url)

    def _get(self, path):
        try:
            resp = self.http.get(self.base_url + path, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"GET {path} failed: {exc}") from exc
        _raise_for(resp)
        return resp.json()

    def _capabilities(self):
        return Capabilities.from_dict(self._get("/v1/capabilities"))

    def _send(self, context, bias, k):
        body = request_key(context, bias, k)
        if self.echo_replica:
            body = body[:-1] + ',"echo_replica":true}'
        try:
            resp = self.http.post(self.base_url + "/v1/query", data=body.encode("utf-8"),
                                  headers={"Content-Type": "application/json"},
                                  timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"query failed after retries: {exc}") from exc
        _raise_for(resp)
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"response is not JSON: {resp.text[:200]}") from exc
        if payload.get("model_id"):
            self.model_id = payload["model_id"]
        return TopKResponse.from_wire(payload, raw=resp.text)


class OpenAICompatibleSession(ApiSession):
    """Chat-completions endpoint exposing ``logit_bias`` and ``top_logprobs``.

    Token strings are mapped to ids through ``token_map``; without one they
    must parse as integers.  Capabilities cannot be discovered and must be
    supplied.  Returned ``model`` strings are kept in ``model_versions``.
    """

    def __init__(self, base_url, capabilities, *, model, api_key=None, token_map=None,
                 cache=True, concurrency=8, timeout=60.0, retries=5,
                 api_key_env="OPENAI_API_KEY"):
        if capabilities is None:
            raise ValidationError("the openai_compatible profile needs explicit capabilities")
        super().__init__(capabilities, cache=cache, concurrency=concurrency, model_id=model)
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.timeout = timeout
        self.token_map = token_map
        self.model_versions = set()
        self.http = _http(self.base_url, retries, concurrency)
        key = api_key or os.environ.get(api_key_env)
        if key:
            self.http.headers["Authorization"] = f"Bearer {key}"

    def request_body(self, context, bias, k):
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": context}],
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": int(k),
            "logit_bias": {str(t): b for t, b in bias.items()},
        }

    def _token_id(self, token):
        if self.token_map is not None:
            if token not in self.token_map:
                raise ProtocolError(f"token {token!r} missing from the token map")
            return self.token_map[token]
        try:
            return int(token)
        except ValueError:
            raise ProtocolError(f"token {token!r} is not an id; supply a token_map") from None

    def _send(self, context, bias, k):
        try:
            resp = self.http.post(self.base_url + "/chat/completions",
                                  json=self.request_body(context, bias, k), timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"query failed after retries: {exc}") from exc
        _raise_for(resp)
        payload = resp.json()
        if payload.get("model"):
            self.model_versions.add(payload["model"])
        try:
            entries = payload["choices"][0]["logprobs"]["content"][0]["top_logprobs"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"response lacks top_logprobs: {exc}") from exc
        pairs = [(self._token_id(e["token"]), e["logprob"]) for e in entries]
        pairs.sort(key=lambda p: -p[1])
        return TopKResponse(pairs, raw=resp.text)

    def telemetry(self):
        return {**super().telemetry(), "model_versions": sorted(self.model_versions)}


def connect(base_url, auth=None, profile="native", **kwargs):
    """Open a session; ``profile`` is ``"native"`` or ``"openai_compatible"``."""
    if profile == "native":
        headers = {"Authorization": f"Bearer {auth}"} if auth else None
        return HttpSession(base_url, headers=headers, **kwargs)
    if profile == "openai_compatible":
        capabilities = kwargs.pop("capabilities", None)
        return OpenAICompatibleSession(base_url, capabilities, api_key=auth, **kwargs)
    raise ValidationError(f"unknown profile {profile!r}")
