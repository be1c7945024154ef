import socket
import struct

import numpy as np
import pytest

from hps import DType, TableMeta, UpdateBatch, VersionedEntry, encode_update_batch
from hps.service import (
    Client,
    ErrorCode,
    Opcode,
    RemoteError,
    ServerThread,
    decode_error,
    decode_lookup_request,
    decode_lookup_response,
    encode_error,
    encode_frame,
    encode_lookup_request,
    encode_lookup_response,
    encode_name,
    handle_request,
)

from conftest import make_stack, vec


@pytest.fixture
def served(tmp_path):
    stack = make_stack(tmp_path, [("ads", 2), ("users", 3)], capacity=64)
    stack.pdb.put_batch("ads", [VersionedEntry(k, vec(float(k), -float(k)), 0) for k in range(100)])
    server = ServerThread(stack)
    client = Client(*server.address)
    yield stack, client, server
    client.close()
    server.stop()
    stack.close()


# golden frames, assembled by hand from the documented layouts


def test_golden_lookup_request():
    frame = encode_frame(Opcode.LOOKUP, 7, encode_lookup_request("ads", [1]))
    assert frame.hex() == "16000000" "01" "07000000" "0300" "616473" "01000000" "0100000000000000"


def test_golden_lookup_response():
    payload = encode_lookup_response(2, DType.F32, [vec(1.0, -2.0)], [1, 0, 0, 0])
    frame = encode_frame(Opcode.LOOKUP, 7, payload)
    assert frame.hex() == (
        "30000000" "01" "07000000" "0200" "00" "0000803f" "000000c0" "0100000000000000" + "00" * 24
    )


def test_golden_publish_stats_refresh_error():
    assert encode_frame(Opcode.PUBLISH, 2, struct.pack("<Q", 1)).hex() == "0d000000" "02" "02000000" "0100000000000000"
    assert encode_frame(Opcode.STATS, 3, encode_name("ads")).hex() == "0a000000" "03" "03000000" "0300616473"
    assert encode_frame(Opcode.REFRESH, 4, encode_name("ads")).hex() == "0a000000" "04" "04000000" "0300616473"
    assert encode_frame(Opcode.ERROR, 9, encode_error(ErrorCode.UNKNOWN_OPCODE, "x")).hex() == (
        "09000000" "05" "09000000" "01" "0100" "78"
    )
    assert decode_error(encode_error(2, "no table")) == (2, "no table")


def test_lookup_request_round_trip():
    table, keys = decode_lookup_request(encode_lookup_request("ünï", [0, 2**64 - 1]))
    assert table == "ünï" and keys.tolist() == [0, 2**64 - 1]


def test_handle_request_in_process(tmp_path):
    with make_stack(tmp_path, [("ads", 2)]) as s:
        op, payload = handle_request(s, Opcode.LOOKUP, encode_lookup_request("ads", []))
        wire = decode_lookup_response(payload, 0)
        assert op == Opcode.LOOKUP and wire.vectors.shape == (0, 2) and wire.source_counts == (0, 0, 0, 0)
        op, payload = handle_request(s, 9, b"")
        assert op == Opcode.ERROR and decode_error(payload)[0] == ErrorCode.UNKNOWN_OPCODE
        op, payload = handle_request(s, Opcode.STATS, encode_name("nope"))
        assert decode_error(payload)[0] == ErrorCode.UNKNOWN_TABLE
        op, payload = handle_request(s, Opcode.LOOKUP, b"\x01")
        assert decode_error(payload)[0] == ErrorCode.DECODE_FAILURE
        bad = encode_update_batch(UpdateBatch.build(TableMeta("ads", 3), 0, [(1, [0, 0, 0])]))
        op, payload = handle_request(s, Opcode.PUBLISH, bad)
        assert decode_error(payload)[0] == ErrorCode.DECODE_FAILURE


def test_wire_lookup_equals_in_process(served, tmp_path):
    stack, client, _ = served
    keys = [3, 500, 3, 42, 0]
    wire = client.lookup("ads", keys)
    with make_stack(tmp_path / "twin", [("ads", 2)], capacity=64) as twin:
        twin.pdb.put_batch("ads", [VersionedEntry(k, vec(float(k), -float(k)), 0) for k in range(100)])
        local, ticket = twin.lookup("ads", keys)
        ticket.wait(5)
    assert wire.vectors.tobytes() == local.as_array().tobytes()
    assert list(wire.source_counts) == local.source_counts


def test_unknown_opcode_keeps_connection(served):
    _, client, _ = served
    rid, fut = client.submit(9, b"junk")
    op, payload = fut.result(5)
    assert op == Opcode.ERROR and decode_error(payload)[0] == ErrorCode.UNKNOWN_OPCODE
    assert client.lookup("ads", [1]).vectors.tolist() == [[1.0, -1.0]]


def test_unknown_table_over_wire(served):
    _, client, _ = served
    with pytest.raises(RemoteError) as info:
        client.lookup("nope", [1])
    assert info.value.code == ErrorCode.UNKNOWN_TABLE


def test_short_frame_gets_error_and_connection_survives(served):
    _, client, _ = served
    rid, fut = client.submit(Opcode.STATS, encode_name("ads"), request_id=77)
    fut.result(5)
    client.send_raw(struct.pack("<I", 2) + b"\x01\x02")
    # the server answers the short frame with request id 0; the client ignores it
    assert client.stats("ads")[0] >= 0


def test_oversized_frame_closes_connection(served):
    _, _, server = served
    with socket.create_connection(server.address, timeout=5) as s:
        s.sendall(struct.pack("<I", 0xFFFFFFFF))
        data = s.recv(64)
        assert data[4] == Opcode.ERROR
        assert s.recv(64) == b""


def test_pipelined_requests_matched_by_id(served):
    _, client, _ = served
    futures = [client.submit(Opcode.LOOKUP, encode_lookup_request("ads", [k])) for k in range(50)]
    for k, (rid, fut) in enumerate(futures):
        op, payload = fut.result(5)
        assert op == Opcode.LOOKUP
        assert decode_lookup_response(payload, 1).vectors[0, 0] == float(k)


def test_publish_refresh_lookup(served):
    stack, client, _ = served
    client.lookup("ads", [5])
    # a second lookup in process hands back a ticket covering promotion of key 5
    _, ticket = stack.lookup("ads", [5])
    ticket.wait(5)
    meta = stack.meta("ads")
    seq = client.publish(encode_update_batch(UpdateBatch.build(meta, 0, [(5, [9.0, 9.0])])))
    assert seq == 1
    assert client.refresh("ads") >= 1
    wire = client.lookup("ads", [5])
    assert wire.vectors.tolist() == [[9.0, 9.0]] and wire.source_counts[0] == 1
    stats = client.stats("ads")
    assert stats[5] >= 1 and stats[1] + stats[2] == stats[0]


def test_request_id_echoed(served):
    _, client, _ = served
    rid, fut = client.submit(Opcode.STATS, encode_name("users"), request_id=0xDEADBEEF)
    assert rid == 0xDEADBEEF
    op, payload = fut.result(5)
    assert op == Opcode.STATS and len(payload) == 56


def test_f16_table_over_wire(tmp_path):
    from hps import CacheConfig

    with make_stack(tmp_path, []) as s:
        s.create_table(TableMeta("h", 2, DType.F16), CacheConfig(16, 8))
        s.pdb.put_batch("h", [VersionedEntry(1, np.array([0.5, -1], dtype="<f2"), 0)])
        with ServerThread(s) as server, Client(*server.address) as c:
            wire = c.lookup("h", [1, 2])
        assert wire.dtype is DType.F16 and wire.vectors.tolist() == [[0.5, -1.0], [0.0, 0.0]]
