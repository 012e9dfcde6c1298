import asyncio
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scatterd import wire
from scatterd.wire import (
    MAX_FRAME,
    ConnectionLost,
    FrameDecoder,
    MalformedBody,
    ObjectConnection,
    OversizeFrame,
    decode_frames,
    encode_frame,
    envelope,
)

json_scalars = st.one_of(
    st.none(), st.booleans(), st.integers(-(2**53), 2**53),
    st.floats(allow_nan=False, allow_infinity=False), st.text(),
)
json_values = st.recursive(
    json_scalars,
    lambda inner: st.one_of(st.lists(inner, max_size=5), st.dictionaries(st.text(max_size=8), inner, max_size=5)),
    max_leaves=20,
)
json_objects = st.dictionaries(st.text(max_size=8), json_values, max_size=6)


def rechunk(data: bytes, cuts: list[int]) -> list[bytes]:
    points = sorted({c % (len(data) + 1) for c in cuts})
    out, prev = [], 0
    for p in points + [len(data)]:
        out.append(data[prev:p])
        prev = p
    return out


def test_empty_object_bytes():
    assert encode_frame({}) == bytes([0, 0, 0, 2, 0x7B, 0x7D])


def test_ping_header_matches_independent_byte_count():
    obj = {"type": "ping", "id": "1", "payload": {}}
    literal = '{"type":"ping","id":"1","payload":{}}'
    frame = encode_frame(obj)
    assert int.from_bytes(frame[:4], "big") == len(literal) == 37
    assert json.loads(frame[4:]) == obj


def test_non_ascii_length_counts_bytes():
    frame = encode_frame({"k": "é✓"})
    assert int.from_bytes(frame[:4], "big") == len(frame) - 4
    assert len(frame) - 4 > len(json.dumps({"k": "é✓"}, ensure_ascii=False))


def test_oversize_boundary():
    # '{"a":"' + x * k + '"}' is 8 + k bytes
    at_cap = {"a": "x" * (MAX_FRAME - 8)}
    frame = encode_frame(at_cap)
    assert len(frame) == MAX_FRAME + 4
    assert decode_frames([frame]) == [at_cap]
    with pytest.raises(OversizeFrame):
        encode_frame({"a": "x" * (MAX_FRAME - 7)})


def test_encode_rejects_non_objects():
    with pytest.raises(TypeError):
        encode_frame([1, 2])


def test_concatenation_round_trip():
    x, y = {"a": 1}, {"b": [1, 2, {"c": None}]}
    assert FrameDecoder().feed(encode_frame(x) + encode_frame(y)) == [x, y]


def test_byte_by_byte_feed():
    x = {"type": "chunk", "id": "s-1", "payload": {"records": [{"v": 1.5}] * 3}}
    dec = FrameDecoder()
    out = []
    for b in encode_frame(x):
        out.extend(dec.feed(bytes([b])))
    assert out == [x]
    assert dec.at_boundary()


def test_declared_length_over_cap():
    dec = FrameDecoder()
    with pytest.raises(OversizeFrame):
        dec.feed(b"\xff\xff\xff\xff")
    # the stream is unrecoverable after a framing error
    with pytest.raises(OversizeFrame):
        dec.feed(encode_frame({}))


@pytest.mark.parametrize(
    "body", [b"\xff\xfe", b"{not json", b"[1,2]", b'"str"', b"{} trailing"],
)
def test_malformed_bodies(body):
    with pytest.raises(MalformedBody):
        FrameDecoder().feed(len(body).to_bytes(4, "big") + body)


def test_truncated_stream_is_connection_lost():
    frame = encode_frame({"a": 1})
    with pytest.raises(ConnectionLost):
        decode_frames([frame[:-1]])


def test_envelope_helpers():
    assert envelope("ping", "7") == {"type": "ping", "id": "7", "payload": {}}
    with pytest.raises(ValueError):
        envelope("bogus", "1")
    with pytest.raises(MalformedBody):
        wire.check_envelope({"type": "ping", "id": "", "payload": {}})
    with pytest.raises(MalformedBody):
        wire.check_envelope({"type": "ping", "id": "1", "payload": []})


@settings(max_examples=300, deadline=None)
@given(objs=st.lists(json_objects, min_size=1, max_size=8), cuts=st.lists(st.integers(0, 10**6), max_size=12))
def test_round_trip_any_chunking(objs, cuts):
    data = b"".join(encode_frame(o) for o in objs)
    assert decode_frames(rechunk(data, cuts)) == objs


# -- over a real socket --------------------------------------------------------


async def _echo_server(handler):
    server = await wire.serve_objects(handler, "127.0.0.1", 0)
    port = server.sockets[0].getsockname()[1]
    return server, port


def test_ping_pong_echo():
    async def main():
        async def handler(conn: ObjectConnection):
            async for env in conn:
                await conn.send(envelope("pong", env["id"]))

        server, port = await _echo_server(handler)
        async with server:
            conn = await wire.open_object_connection("127.0.0.1", port)
            await conn.send(envelope("ping", "abc-42"))
            reply = await conn.receive()
            await conn.close()
        return reply

    reply = asyncio.run(main())
    assert reply["type"] == "pong" and reply["id"] == "abc-42"


def test_peer_closes_mid_frame():
    async def main():
        async def handler(reader, writer):
            frame = encode_frame({"a": "x" * 100})
            writer.write(frame[:50])
            await writer.drain()
            writer.close()

        server = await asyncio.start_server(handler, "127.0.0.1", 0)
        port = server.sockets[0].getsockname()[1]
        async with server:
            conn = await wire.open_object_connection("127.0.0.1", port)
            try:
                await conn.receive()
            finally:
                await conn.close()

    with pytest.raises(ConnectionLost):
        asyncio.run(main())


def test_clean_close_between_frames_returns_none():
    async def main():
        async def handler(conn):
            await conn.send({"only": 1})

        server, port = await _echo_server(handler)
        async with server:
            conn = await wire.open_object_connection("127.0.0.1", port)
            got = [await conn.receive(), await conn.receive()]
            await conn.close()
        return got

    assert asyncio.run(main()) == [{"only": 1}, None]


def test_thousand_random_objects_in_order():
    rng = random.Random(1234)

    def rand_value(depth=0):
        k = rng.randrange(6 if depth < 3 else 4)
        if k == 0:
            return rng.randint(-(10**9), 10**9)
        if k == 1:
            return rng.random() * 1e6
        if k == 2:
            return "".join(chr(rng.randrange(32, 0x2FF)) for _ in range(rng.randrange(20)))
        if k == 3:
            return rng.choice([None, True, False])
        if k == 4:
            return [rand_value(depth + 1) for _ in range(rng.randrange(4))]
        return {f"k{i}": rand_value(depth + 1) for i in range(rng.randrange(4))}

    objs = [{"i": i, "v": rand_value()} for i in range(1000)]

    async def main():
        received = []
        done = asyncio.Event()

        async def handler(conn):
            async for obj in conn:
                received.append(obj)
            done.set()

        server, port = await _echo_server(handler)
        async with server:
            conn = await wire.open_object_connection("127.0.0.1", port)
            # many concurrent senders: frames must never interleave
            await asyncio.gather(*(conn.send(o) for o in objs))
            await conn.close()
            await asyncio.wait_for(done.wait(), 10)
        return received

    received = asyncio.run(main())
    assert received == objs


# -- line-laid-out chunks ----------------------------------------------------------


@settings(max_examples=300, deadline=None)
@given(sid=st.text(min_size=1, max_size=10), seq=st.integers(0, 10**6), records=st.lists(json_objects, max_size=20))
def test_lifted_chunk_equals_full_parse(sid, seq, records):
    body = wire.chunk_body(json.dumps(sid, ensure_ascii=False), seq, [wire._encoder.encode(r) for r in records])
    frame = wire.frame_body(body)
    parsed = FrameDecoder().feed(frame)[0]
    lifted = FrameDecoder(lift_chunks=True).feed(frame)[0]
    assert parsed == {"type": "chunk", "id": sid, "payload": {"subtaskId": sid, "seq": seq, "records": records}}
    assert lifted["id"] == sid and lifted["payload"]["seq"] == seq
    raw = lifted["payload"]["records"]
    assert len(raw) == len(records) and list(raw) == records
    if records:
        assert isinstance(raw, wire.RawRecords)
        assert raw.ndjson.decode().split("\n")[:-1] == [json.dumps(r, ensure_ascii=False, separators=(",", ":")) for r in records]


def test_compact_chunks_are_parsed_normally():
    env = {"type": "chunk", "id": "s", "payload": {"subtaskId": "s", "seq": 0, "records": [{"a": 1}, {"b": 2}]}}
    (got,) = FrameDecoder(lift_chunks=True).feed(encode_frame(env))
    assert got == env and isinstance(got["payload"]["records"], list)
