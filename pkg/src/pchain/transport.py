"""Minimal JSON-over-HTTP routing for the services.

Request and response bodies are JSON; binary values travel as base64 of
their canonical encoding. Errors come back as ``{code, message, detail}``
with a status chosen from the error class.
"""

import base64
import binascii
import json
import logging
import re
import threading
import urllib.error
import urllib.parse
import urllib.request
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from . import errors
from .errors import BadRequest, BindFailure, ChainError, TransportError

logger = logging.getLogger(__name__)

_STATUS = {
    "UnknownChain": 404,
    "OutOfRange": 404,
    "UnknownFingerprint": 404,
    "NotFound": 404,
    "NotAuthorized": 403,
    "AlreadyRegistered": 409,
    "DuplicateExternalRef": 409,
    "HeightGap": 409,
    "LinkMismatch": 409,
    "DestinationNotEmpty": 409,
    "TamperedChain": 409,
    "EmptyQueue": 409,
    "PublishFailed": 503,
    "TransportError": 502,
    "BadRequest": 400,
    "DecodeError": 400,
}


def b64e(data):
    return base64.b64encode(bytes(data)).decode("ascii")


def b64d(text):
    if not isinstance(text, str):
        raise BadRequest("expected a base64 string")
    try:
        return base64.b64decode(text, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise BadRequest("invalid base64") from exc


class Router:
    def __init__(self, name="service"):
        self.name = name
        self._routes = []

    def route(self, method, pattern):
        regex = re.compile("^" + re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", pattern) + "$")

        def register(fn):
            self._routes.append((method, regex, fn))
            return fn

        return register

    def dispatch(self, method, path, query=None, body=b""):
        """Run one request; returns (status, JSON-able body). Never raises."""
        query = query or {}
        try:
            matched_path = False
            for m, regex, fn in self._routes:
                hit = regex.match(path)
                if not hit:
                    continue
                matched_path = True
                if m != method:
                    continue
                payload = {}
                if body:
                    try:
                        payload = json.loads(body)
                    except (ValueError, UnicodeDecodeError) as exc:
                        raise BadRequest("body is not valid JSON") from exc
                    if not isinstance(payload, dict):
                        raise BadRequest("body must be a JSON object")
                return 200, fn(payload=payload, query=query, **hit.groupdict())
            code = "MethodNotAllowed" if matched_path else "NotFound"
            return (405 if matched_path else 404), {"code": code, "message": f"{method} {path}", "detail": {}}
        except ChainError as exc:
            return _STATUS.get(exc.code, 422), exc.to_dict()
        except (ValueError, TypeError, KeyError) as exc:
            return 400, {"code": "BadRequest", "message": str(exc), "detail": {}}
        except Exception as exc:  # noqa: BLE001 - a handler bug must not kill the server
            logger.exception("%s: unhandled error on %s %s", self.name, method, path)
            return 500, {"code": "InternalError", "message": str(exc), "detail": {}}


class _Handler(BaseHTTPRequestHandler):
    router = None

    def _handle(self, method):
        parsed = urllib.parse.urlsplit(self.path)
        query = {k: v[-1] for k, v in urllib.parse.parse_qs(parsed.query, keep_blank_values=True).items()}
        length = int(self.headers.get("Content-Length") or 0)
        body = self.rfile.read(length) if length else b""
        status, payload = self.router.dispatch(method, parsed.path, query, body)
        data = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        self._handle("GET")

    def do_POST(self):
        self._handle("POST")

    def do_PUT(self):
        self._handle("PUT")

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)


class Server:
    def __init__(self, httpd, thread):
        self.httpd = httpd
        self.thread = thread
        host, port = httpd.server_address[:2]
        self.url = f"http://{host}:{port}"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()
        self.thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(router, host="127.0.0.1", port=0):
    handler = type("Handler", (_Handler,), {"router": router})
    try:
        httpd = ThreadingHTTPServer((host, port), handler)
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    httpd.daemon_threads = True
    thread = threading.Thread(target=httpd.serve_forever, args=(0.05,), name=f"{router.name}-http", daemon=True)
    thread.start()
    return Server(httpd, thread)


class JsonClient:
    def __init__(self, base_url, timeout=30):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def request(self, method, path, body=None, query=None):
        url = self.base_url + path
        if query:
            clean = {k: v for k, v in query.items() if v is not None}
            if clean:
                url += "?" + urllib.parse.urlencode(clean)
        data = None if body is None else json.dumps(body).encode("utf-8")
        req = urllib.request.Request(url, data=data, method=method, headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            raw = exc.read()
            try:
                payload = json.loads(raw)
            except ValueError:
                raise TransportError(f"HTTP {exc.code} from {url}") from exc
            raise errors.from_dict(payload) from None
        except (urllib.error.URLError, OSError) as exc:
            raise TransportError(f"cannot reach {url}: {exc}") from exc
        try:
            return json.loads(raw)
        except ValueError as exc:
            raise TransportError(f"garbled response from {url}") from exc

    def get(self, path, **query):
        return self.request("GET", path, query=query)

    def post(self, path, body=None, **query):
        return self.request("POST", path, body=body or {}, query=query)

    def put(self, path, body=None):
        return self.request("PUT", path, body=body or {})
