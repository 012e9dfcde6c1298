"""Length-prefixed JSON object transport.

Every link between components speaks the same framing::

    [u32 big-endian body length][UTF-8 JSON object]

Bodies are capped at 16 MiB. A frame that is oversized or does not decode
to a JSON object poisons the decoder; the connection must be dropped.
"""

from __future__ import annotations

import asyncio
import json
import logging
import re
import struct
from typing import Any, AsyncIterator

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME = 16 * 1024 * 1024

MESSAGE_TYPES = frozenset(
    {
        "register",
        "allocate",
        "allocation",
        "subtask",
        "chunk",
        "end",
        "error",
        "next",
        "done",
        "ping",
        "pong",
        "start",
        "stop",
    }
)

_encoder = json.JSONEncoder(ensure_ascii=False, separators=(",", ":"), allow_nan=False)


class WireError(Exception):
    pass


class OversizeFrame(WireError):
    pass


class MalformedBody(WireError):
    pass


class ConnectionLost(WireError, ConnectionError):
    pass


def frame_body(body: bytes) -> bytes:
    """Prefix an already-serialized JSON object body with its length."""
    if len(body) > MAX_FRAME:
        raise OversizeFrame(f"frame body of {len(body)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(body)) + body


def encode_frame(obj: dict[str, Any]) -> bytes:
    if not isinstance(obj, dict):
        raise TypeError(f"top-level frame value must be an object, got {type(obj).__name__}")
    return frame_body(_encoder.encode(obj).encode("utf-8"))


def _parse_body(body: bytes) -> dict[str, Any]:
    try:
        value = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedBody(str(exc)) from exc
    if not isinstance(value, dict):
        raise MalformedBody(f"top-level value is {type(value).__name__}, expected object")
    return value


# -- line-laid-out chunks ------------------------------------------------------
#
# A chunk whose records array holds one compact record per line,
#
#   {"type":"chunk","id":"s","payload":{"subtaskId":"s","seq":0,"records":[
#   {...},
#   {...}
#   ]}}
#
# is ordinary JSON, but a receiver that only forwards the records as NDJSON
# can lift them out without parsing: compact JSON never contains a raw
# newline, so the lines are exactly the records.

_STR = rb'"(?:[^"\\]|\\.)*"'
_CHUNK_HEAD = re.compile(
    rb'\{"type":"chunk","id":(' + _STR + rb'),"payload":\{"subtaskId":(' + _STR + rb'),"seq":(\d+),"records":\['
)
_CHUNK_TAIL = b"]}}"


class RawRecords:
    """Records of one chunk kept as NDJSON bytes (one record per line)."""

    __slots__ = ("ndjson", "count")

    def __init__(self, ndjson: bytes, count: int) -> None:
        self.ndjson = ndjson
        self.count = count

    def __len__(self) -> int:
        return self.count

    def __iter__(self):
        for line in self.ndjson.split(b"\n")[:-1]:
            yield json.loads(line)

    def __eq__(self, other) -> bool:
        return list(self) == list(other)

    __hash__ = None


def chunk_body(subtask_id_json: str, seq: int, records_json: list[str]) -> bytes:
    """Serialize a chunk in the line layout from already-encoded records."""
    inner = ",\n".join(records_json)
    return (
        f'{{"type":"chunk","id":{subtask_id_json},"payload":{{"subtaskId":{subtask_id_json},'
        f'"seq":{seq},"records":[\n{inner}\n]}}}}'
    ).encode("utf-8")


def _lift_chunk(body: bytes) -> dict[str, Any] | None:
    m = _CHUNK_HEAD.match(body)
    if m is None or not body.endswith(_CHUNK_TAIL):
        return None
    raw = body[m.end() : -len(_CHUNK_TAIL)]
    if not (raw.startswith(b"\n") and raw.endswith(b"\n")) or len(raw) < 3:
        return None
    lines = raw[1:].replace(b",\n", b"\n")
    try:
        sid = json.loads(m.group(2))
        return {
            "type": "chunk",
            "id": json.loads(m.group(1)),
            "payload": {"subtaskId": sid, "seq": int(m.group(3)), "records": RawRecords(lines, lines.count(b"\n"))},
        }
    except ValueError:
        return None


class FrameDecoder:
    """Incremental decoder; feed arbitrary byte chunks, get whole objects back.

    With ``lift_chunks`` set, chunk frames in the line layout come back with
    their records as :class:`RawRecords` instead of parsed objects.
    """

    def __init__(self, max_frame: int = MAX_FRAME, lift_chunks: bool = False) -> None:
        self.lift_chunks = lift_chunks
        self.max_frame = max_frame
        self._buf = bytearray()
        self._need: int | None = None
        self.poisoned: WireError | None = None

    @property
    def buffered(self) -> int:
        return len(self._buf)

    def feed(self, data: bytes) -> list[dict[str, Any]]:
        if self.poisoned is not None:
            raise self.poisoned
        self._buf += data
        out = []
        try:
            while True:
                if self._need is None:
                    if len(self._buf) < HEADER_SIZE:
                        break
                    (n,) = HEADER.unpack_from(self._buf)
                    if n > self.max_frame:
                        raise OversizeFrame(f"declared frame length {n} exceeds {self.max_frame}")
                    self._need = n
                    del self._buf[:HEADER_SIZE]
                if len(self._buf) < self._need:
                    break
                body = bytes(self._buf[: self._need])
                del self._buf[: self._need]
                self._need = None
                lifted = _lift_chunk(body) if self.lift_chunks else None
                out.append(lifted if lifted is not None else _parse_body(body))
        except WireError as exc:
            self.poisoned = exc
            raise
        return out

    def at_boundary(self) -> bool:
        return self._need is None and not self._buf


def decode_frames(chunks) -> list[dict[str, Any]]:
    """Decode a finished byte stream (an iterable of byte chunks)."""
    dec = FrameDecoder()
    out = []
    for chunk in chunks:
        out.extend(dec.feed(chunk))
    if not dec.at_boundary():
        raise ConnectionLost("stream ended inside a frame")
    return out


# -- envelopes ---------------------------------------------------------------


def envelope(type_: str, id_: str, payload: dict[str, Any] | None = None) -> dict[str, Any]:
    if type_ not in MESSAGE_TYPES:
        raise ValueError(f"unknown message type {type_!r}")
    if not id_:
        raise ValueError("envelope id must be non-empty")
    return {"type": type_, "id": str(id_), "payload": payload if payload is not None else {}}


def check_envelope(obj: dict[str, Any]) -> dict[str, Any]:
    """Validate a received object as an envelope; raises MalformedBody."""
    t = obj.get("type")
    if t not in MESSAGE_TYPES:
        raise MalformedBody(f"unknown message type {t!r}")
    if not isinstance(obj.get("id"), str) or not obj["id"]:
        raise MalformedBody("envelope id must be a non-empty string")
    payload = obj.setdefault("payload", {})
    if not isinstance(payload, dict):
        raise MalformedBody("envelope payload must be an object")
    return obj


# -- connections -------------------------------------------------------------


class ObjectConnection:
    """Full-duplex object channel over an asyncio stream pair.

    ``send`` may be called from many tasks; whole frames are never
    interleaved. Reading is single-consumer.
    """

    read_size = 256 * 1024

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, lift_chunks: bool = False) -> None:
        self.reader = reader
        self.writer = writer
        self._decoder = FrameDecoder(lift_chunks=lift_chunks)
        self._pending: list[dict[str, Any]] = []
        self._send_lock = asyncio.Lock()
        self.closed = False

    @property
    def peername(self):
        return self.writer.get_extra_info("peername")

    async def send(self, obj: dict[str, Any]) -> None:
        await self.send_raw(encode_frame(obj))

    async def send_raw(self, frame: bytes) -> None:
        if self.closed:
            raise ConnectionLost("connection closed")
        async with self._send_lock:
            try:
                self.writer.write(frame)
                await self.writer.drain()
            except (ConnectionError, RuntimeError) as exc:
                self.closed = True
                raise ConnectionLost(str(exc) or "peer went away") from exc

    async def receive(self) -> dict[str, Any] | None:
        """Next object, or None on a clean close between frames."""
        while not self._pending:
            try:
                data = await self.reader.read(self.read_size)
            except ConnectionError as exc:
                raise ConnectionLost(str(exc) or "connection reset") from exc
            if not data:
                if self._decoder.at_boundary():
                    return None
                raise ConnectionLost(
                    f"peer closed mid-frame with {self._decoder.buffered} bytes buffered"
                )
            self._pending.extend(self._decoder.feed(data))
        return self._pending.pop(0)

    async def __aiter__(self) -> AsyncIterator[dict[str, Any]]:
        while True:
            obj = await self.receive()
            if obj is None:
                return
            yield obj

    async def close(self) -> None:
        if self.closed and self.writer.is_closing():
            return
        self.closed = True
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def open_object_connection(
    host: str, port: int, timeout: float | None = 5.0, lift_chunks: bool = False
) -> ObjectConnection:
    reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout)
    return ObjectConnection(reader, writer, lift_chunks=lift_chunks)


async def serve_objects(handler, host: str, port: int) -> asyncio.base_events.Server:
    """Start a TCP server; ``handler(conn)`` runs once per accepted connection."""

    async def _accept(reader, writer):
        conn = ObjectConnection(reader, writer)
        try:
            await handler(conn)
        except (ConnectionLost, WireError) as exc:
            log.debug("connection from %s ended: %s", conn.peername, exc)
        finally:
            await conn.close()

    return await asyncio.start_server(_accept, host, port, reuse_address=True, limit=MAX_FRAME)
