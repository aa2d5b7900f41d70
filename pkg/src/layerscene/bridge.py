"""Wire protocol for hosting a denoiser out of process.

Messages are length-prefixed binary frames, all little-endian:

    u32  body length
    u16  protocol version (1)
    u8   kind (1=request, 2=reply, 3=error)
    u64  request id
    u32  step t
    u16  c, u16 w, u16 h
    u16  token-label byte length
    ...  UTF-8 label bytes
    ...  c*w*h float32 grid values (C order)

Replies mirror the request header with kind=reply. Error frames carry the
message in the label field and an empty grid. The null (unconditional)
token travels as the empty label, so served tokens need nonempty labels.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

import numpy as np

PROTOCOL_VERSION = 1
KIND_REQUEST = 1
KIND_REPLY = 2
KIND_ERROR = 3

_HEADER = struct.Struct("<HBQIHHHH")
_LEN = struct.Struct("<I")
_MAX_BODY = 64 * 1024 * 1024


class BridgeError(Exception):
    """Transport-level failure; distinct from denoiser math errors."""


class BridgeProtocolError(BridgeError):
    pass


class BridgeTimeoutError(BridgeError):
    pass


@dataclass
class DenoiserRequest:
    t: int
    grid: np.ndarray  # (c, h, w)
    label: str
    request_id: int = 0


@dataclass
class DenoiserResponse:
    grid: np.ndarray
    request_id: int = 0


def encode_frame(kind: int, request_id: int, t: int, shape, label: str,
                 payload: np.ndarray | None) -> bytes:
    c, h, w = shape
    label_bytes = label.encode("utf-8")
    if len(label_bytes) > 0xFFFF:
        raise BridgeProtocolError("token label too long")
    header = _HEADER.pack(
        PROTOCOL_VERSION, kind, request_id, t, c, w, h, len(label_bytes)
    )
    body = header + label_bytes
    if payload is not None:
        body += np.ascontiguousarray(payload, dtype="<f4").tobytes()
    return _LEN.pack(len(body)) + body


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    while n > 0:
        try:
            chunk = sock.recv(n)
        except socket.timeout as exc:
            raise BridgeTimeoutError("timed out waiting for peer") from exc
        if not chunk:
            raise BridgeProtocolError("connection closed mid-frame")
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket):
    """Read one frame; returns (kind, request_id, t, (c, h, w), label, grid)."""
    (body_len,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    if body_len < _HEADER.size or body_len > _MAX_BODY:
        raise BridgeProtocolError(f"implausible frame length {body_len}")
    body = _recv_exact(sock, body_len)
    version, kind, request_id, t, c, w, h, label_len = _HEADER.unpack_from(body)
    if version != PROTOCOL_VERSION:
        raise BridgeProtocolError(
            f"protocol version mismatch: got {version}, want {PROTOCOL_VERSION}"
        )
    offset = _HEADER.size
    label = body[offset : offset + label_len].decode("utf-8")
    offset += label_len
    expect = c * w * h * 4
    payload = body[offset:]
    if len(payload) != expect:
        raise BridgeProtocolError(
            f"payload carries {len(payload)} bytes, header promises {expect}"
        )
    grid = None
    if expect:
        grid = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    return kind, request_id, t, (c, h, w), label, grid


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                kind, rid, t, shape, label, grid = read_frame(self.request)
            except BridgeProtocolError:
                return
            except (ConnectionError, OSError):
                return
            if kind != KIND_REQUEST or grid is None:
                self.request.sendall(
                    encode_frame(KIND_ERROR, rid, t, (0, 0, 0), "expected a request", None)
                )
                continue
            try:
                eps = self.server.predict_fn(grid, t, label)
                eps = np.asarray(eps, dtype=np.float32)
                if eps.shape != grid.shape:
                    raise ValueError(
                        f"denoiser returned shape {eps.shape}, expected {grid.shape}"
                    )
                frame = encode_frame(KIND_REPLY, rid, t, shape, label, eps)
            except Exception as exc:
                frame = encode_frame(KIND_ERROR, rid, t, (0, 0, 0), str(exc), None)
            try:
                self.request.sendall(frame)
            except OSError:
                return


class DenoiserServer(socketserver.ThreadingTCPServer):
    """Hosts predict_fn(grid_f32, t, label) -> grid_f32 over the protocol."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, predict_fn, host: str = "127.0.0.1", port: int = 0):
        super().__init__((host, port), _Handler)
        self.predict_fn = predict_fn
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start(self) -> "DenoiserServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def serve_denoiser(d, s, tokens, host: str = "127.0.0.1", port: int = 0) -> DenoiserServer:
    """Expose a denoiser; tokens are matched by their wire labels."""
    from .denoiser import NULL_TOKEN, UnknownTokenError

    by_label = {}
    for tok in tokens:
        if not tok.label:
            raise BridgeError("served tokens need nonempty labels")
        if tok.label in by_label:
            raise BridgeError(f"duplicate served label {tok.label!r}")
        by_label[tok.label] = tok

    def predict_fn(grid, t, label):
        if label == "":
            token = NULL_TOKEN
        elif label in by_label:
            token = by_label[label]
        else:
            raise UnknownTokenError(f"label {label!r} not served")
        return d.predict(grid, t, token, s)

    return DenoiserServer(predict_fn, host=host, port=port).start()


class BridgeClient:
    """Serial request/reply client; responses are matched by request id."""

    def __init__(self, host: str, port: int, timeout: float = 10.0):
        self.host = host
        self.port = int(port)
        self.timeout = float(timeout)
        self._sock: socket.socket | None = None
        self._next_id = 1
        self._lock = threading.Lock()

    def _socket(self) -> socket.socket:
        if self._sock is None:
            try:
                self._sock = socket.create_connection(
                    (self.host, self.port), timeout=self.timeout
                )
            except socket.timeout as exc:
                raise BridgeTimeoutError(str(exc)) from exc
            except OSError as exc:
                raise BridgeError(f"cannot reach denoiser at {self.host}:{self.port}: {exc}") from exc
        return self._sock

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def roundtrip(self, request: DenoiserRequest) -> DenoiserResponse:
        grid = np.ascontiguousarray(request.grid, dtype=np.float32)
        if grid.ndim != 3:
            raise BridgeProtocolError(f"grid must be (c, h, w), got {grid.shape}")
        c, h, w = grid.shape
        with self._lock:
            rid = self._next_id
            self._next_id += 1
            sock = self._socket()
            try:
                sock.sendall(
                    encode_frame(KIND_REQUEST, rid, request.t, (c, h, w),
                                 request.label, grid)
                )
                while True:
                    kind, got_id, _t, shape, label, payload = read_frame(sock)
                    if got_id != rid:
                        continue
                    break
            except BridgeError:
                self.close()
                raise
            except (ConnectionError, OSError) as exc:
                self.close()
                raise BridgeError(str(exc)) from exc
        if kind == KIND_ERROR:
            raise BridgeError(f"denoiser server error: {label}")
        if kind != KIND_REPLY:
            raise BridgeProtocolError(f"unexpected frame kind {kind}")
        if shape != (c, h, w) or payload is None:
            raise BridgeProtocolError(
                f"reply shape {shape} does not match request {(c, h, w)}"
            )
        return DenoiserResponse(grid=payload, request_id=got_id)


class RemoteDenoiser:
    """Denoiser that forwards every prediction over the bridge."""

    kind = "remote"

    def __init__(self, host: str, port: int, timeout: float = 10.0,
                 guidance: float = 7.5):
        self.client = BridgeClient(host, port, timeout)
        self.guidance = float(guidance)

    def predict(self, x_t: np.ndarray, t: int, token, s) -> np.ndarray:
        label = "" if token.is_null else token.label
        resp = self.client.roundtrip(DenoiserRequest(t=int(t), grid=x_t, label=label))
        return resp.grid.astype(x_t.dtype, copy=False)
