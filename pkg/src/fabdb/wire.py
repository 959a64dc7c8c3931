"""Optional socket transport for multi-process runs.

Frame format (little-endian): <verb-tag:1B, region_id:4B, offset:8B, len:4B, payload>.
Verb tags: 1=read, 2=write, 3=fetch_and_add, 4=compare_and_swap, 5=send.
Replies reuse the frame with tag | 0x80; errors use tag 0xFF with payload
"ErrorName\nmessage". In-process mode never touches this module.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

from . import errors
from .fabric import Fabric

HEADER = struct.Struct("<BIQI")

TAG_READ = 1
TAG_WRITE = 2
TAG_FAA = 3
TAG_CAS = 4
TAG_SEND = 5
TAG_REPLY = 0x80
TAG_ERROR = 0xFF

_ERROR_TYPES = {
    cls.__name__: cls
    for cls in (
        errors.AddressOutOfBounds,
        errors.Misaligned,
        errors.ServerUnavailable,
        errors.UnknownServer,
        errors.HandlerError,
    )
}


def encode_frame(tag: int, region_id: int, offset: int, length: int, payload: bytes = b"") -> bytes:
    return HEADER.pack(tag, region_id, offset, length) + payload


def read_frame(sock: socket.socket):
    header = _read_exact(sock, HEADER.size)
    if header is None:
        return None
    tag, region_id, offset, length = HEADER.unpack(header)
    # for READ requests `len` is the number of bytes to read and no payload
    # follows; every other frame carries `len` payload bytes
    body_len = 0 if tag == TAG_READ else length
    payload = _read_exact(sock, body_len) if body_len else b""
    if body_len and payload is None:
        return None
    return tag, region_id, offset, length, payload or b""


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class _VerbHandler(socketserver.BaseRequestHandler):
    def handle(self):
        fabric: Fabric = self.server.fabric  # type: ignore[attr-defined]
        server_id: int = self.server.target_server  # type: ignore[attr-defined]
        conn = fabric.connect(server_id)
        while True:
            frame = read_frame(self.request)
            if frame is None:
                return
            tag, region_id, offset, length, payload = frame
            try:
                if tag == TAG_READ:
                    out = conn.read(region_id, offset, length)
                elif tag == TAG_WRITE:
                    conn.write(region_id, offset, payload)
                    out = b""
                elif tag == TAG_FAA:
                    (inc,) = struct.unpack("<Q", payload)
                    out = struct.pack("<Q", conn.fetch_and_add(region_id, offset, inc))
                elif tag == TAG_CAS:
                    check, new = struct.unpack("<QQ", payload)
                    out = struct.pack("<Q", conn.compare_and_swap(region_id, offset, check, new))
                elif tag == TAG_SEND:
                    reply = conn.request(payload)
                    out = reply if isinstance(reply, bytes) else repr(reply).encode()
                else:
                    raise errors.HandlerError(f"unknown verb tag {tag}")
            except Exception as exc:
                body = f"{type(exc).__name__}\n{exc}".encode()
                self.request.sendall(encode_frame(TAG_ERROR, region_id, offset, len(body), body))
                continue
            self.request.sendall(encode_frame(tag | TAG_REPLY, region_id, offset, len(out), out))


class SocketTransport:
    """Serves one memory server's verbs over TCP. Same contract as in-process verbs."""

    def __init__(self, fabric: Fabric, server_id: int, host: str = "127.0.0.1", port: int = 0):
        self._srv = socketserver.ThreadingTCPServer((host, port), _VerbHandler)
        self._srv.daemon_threads = True
        self._srv.fabric = fabric  # type: ignore[attr-defined]
        self._srv.target_server = server_id  # type: ignore[attr-defined]
        self.address = self._srv.server_address
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()

    def close(self):
        self._srv.shutdown()
        self._srv.server_close()


class SocketConnection:
    """Client side of the socket transport; mirrors Connection's verb methods."""

    def __init__(self, address):
        self._sock = socket.create_connection(address)
        self._lock = threading.Lock()

    def _roundtrip(self, tag, region_id, offset, length, payload=b""):
        with self._lock:
            self._sock.sendall(encode_frame(tag, region_id, offset, length, payload))
            frame = read_frame(self._sock)
        if frame is None:
            raise errors.ServerUnavailable("socket closed")
        rtag, _, _, _, body = frame
        if rtag == TAG_ERROR:
            name, _, message = body.decode().partition("\n")
            raise _ERROR_TYPES.get(name, errors.HandlerError)(message)
        return body

    def read(self, region_id: int, offset: int, length: int) -> bytes:
        return self._roundtrip(TAG_READ, region_id, offset, length)  # no payload; len = read size

    def write(self, region_id: int, offset: int, payload: bytes, signaled: bool = False):
        self._roundtrip(TAG_WRITE, region_id, offset, len(payload), payload)
        return None

    def fetch_and_add(self, region_id: int, offset: int, increment: int) -> int:
        out = self._roundtrip(TAG_FAA, region_id, offset, 8, struct.pack("<Q", increment))
        return struct.unpack("<Q", out)[0]

    def compare_and_swap(self, region_id: int, offset: int, check: int, new: int) -> int:
        out = self._roundtrip(TAG_CAS, region_id, offset, 16, struct.pack("<QQ", check, new))
        return struct.unpack("<Q", out)[0]

    def request(self, payload: bytes) -> bytes:
        return self._roundtrip(TAG_SEND, 0, 0, len(payload), payload)

    def close(self):
        self._sock.close()
