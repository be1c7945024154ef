"""Framed binary protocol over TCP.

Frame (little-endian): ``length u32 | opcode u8 | request_id u32 | payload``
where ``length`` counts opcode, request id and payload. Responses echo the
request id; they may arrive out of order on a pipelined connection.

Request payloads::

    LOOKUP   name_len u16 | name | count u32 | keys u64[count]
    PUBLISH  one encoded UpdateBatch (its seq is ignored; the server assigns one)
    STATS    name_len u16 | name
    REFRESH  name_len u16 | name

Response payloads::

    LOOKUP   dim u16 | dtype u8 | count*dim scalars | source_counts u64[4] (L1, L2, L3, default)
    PUBLISH  seq u64
    STATS    queries, hits, misses, insertions, admissions_rejected,
             refresh_replacements, evictions as u64[7]
    REFRESH  replaced u64
    ERROR    code u8 | msg_len u16 | UTF-8 message
"""
from __future__ import annotations

import asyncio
import enum
import logging
import socket
import struct
import threading
from concurrent.futures import Future
from dataclasses import dataclass

import numpy as np

from .core import (
    DecodeError,
    DType,
    HPSError,
    UnknownTableError,
    decode_update_batch,
)

logger = logging.getLogger(__name__)

DEFAULT_PORT = 7411
MAX_FRAME = 64 << 20
_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BI")  # opcode, request id
_NAME_LEN = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_LOOKUP_HEAD = struct.Struct("<HB")
_COUNTS = struct.Struct("<4Q")
_STATS = struct.Struct("<7Q")


class Opcode(enum.IntEnum):
    LOOKUP = 1
    PUBLISH = 2
    STATS = 3
    REFRESH = 4
    ERROR = 5


class ErrorCode(enum.IntEnum):
    UNKNOWN_OPCODE = 1
    UNKNOWN_TABLE = 2
    DECODE_FAILURE = 3
    INTERNAL = 4


class ProtocolError(DecodeError):
    pass


class RemoteError(HPSError):
    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


def encode_frame(opcode: int, request_id: int, payload: bytes = b"") -> bytes:
    return _LEN.pack(_HEAD.size + len(payload)) + _HEAD.pack(opcode, request_id) + payload


def encode_name(table: str) -> bytes:
    raw = table.encode("utf-8")
    return _NAME_LEN.pack(len(raw)) + raw


def _decode_name(payload: bytes, pos: int = 0) -> tuple[str, int]:
    if len(payload) - pos < _NAME_LEN.size:
        raise ProtocolError("truncated table name length")
    (n,) = _NAME_LEN.unpack_from(payload, pos)
    pos += _NAME_LEN.size
    if len(payload) - pos < n:
        raise ProtocolError("truncated table name")
    try:
        return bytes(payload[pos : pos + n]).decode("utf-8"), pos + n
    except UnicodeDecodeError:
        raise ProtocolError("table name is not UTF-8") from None


def decode_name_payload(payload: bytes) -> str:
    name, pos = _decode_name(payload)
    if pos != len(payload):
        raise ProtocolError("trailing bytes after table name")
    return name


def encode_lookup_request(table: str, keys) -> bytes:
    keys = np.asarray(keys, dtype="<u8")
    return encode_name(table) + _U32.pack(len(keys)) + keys.tobytes()


def decode_lookup_request(payload: bytes) -> tuple[str, np.ndarray]:
    table, pos = _decode_name(payload)
    if len(payload) - pos < _U32.size:
        raise ProtocolError("truncated key count")
    (count,) = _U32.unpack_from(payload, pos)
    pos += _U32.size
    if len(payload) - pos != 8 * count:
        raise ProtocolError(f"expected {count} keys, got {len(payload) - pos} bytes")
    return table, np.frombuffer(payload, dtype="<u8", count=count, offset=pos)


def encode_lookup_response(dim: int, dtype: DType, vectors, source_counts) -> bytes:
    if len(vectors):
        body = np.ascontiguousarray(np.stack(vectors), dtype=dtype.numpy).tobytes()
    else:
        body = b""
    return _LOOKUP_HEAD.pack(dim, int(dtype)) + body + _COUNTS.pack(*source_counts)


@dataclass
class WireLookup:
    dim: int
    dtype: DType
    vectors: np.ndarray  # shape (count, dim)
    source_counts: tuple[int, int, int, int]


def decode_lookup_response(payload: bytes, count: int) -> WireLookup:
    if len(payload) < _LOOKUP_HEAD.size + _COUNTS.size:
        raise ProtocolError("truncated lookup response")
    dim, code = _LOOKUP_HEAD.unpack_from(payload, 0)
    dtype = DType(code)
    body = len(payload) - _LOOKUP_HEAD.size - _COUNTS.size
    if body != count * dim * dtype.itemsize:
        raise ProtocolError("lookup response size does not match key count")
    vectors = np.frombuffer(payload, dtype=dtype.numpy, count=count * dim, offset=_LOOKUP_HEAD.size).reshape(count, dim)
    counts = _COUNTS.unpack_from(payload, len(payload) - _COUNTS.size)
    return WireLookup(dim, dtype, vectors, counts)


def encode_error(code: int, message: str) -> bytes:
    raw = message.encode("utf-8")[:0xFFFF]
    return bytes([code]) + _NAME_LEN.pack(len(raw)) + raw


def decode_error(payload: bytes) -> tuple[int, str]:
    code = payload[0]
    (n,) = _NAME_LEN.unpack_from(payload, 1)
    return code, bytes(payload[3 : 3 + n]).decode("utf-8", "replace")


def handle_request(stack, opcode: int, payload: bytes) -> tuple[int, bytes]:
    """Execute one request against ``stack``; returns (response opcode, payload).

    Synchronous and transport-free, so the server and tests share it.
    """
    try:
        if opcode == Opcode.LOOKUP:
            table, keys = decode_lookup_request(payload)
            meta = stack.meta(table)
            result, _ = stack.lookup(table, keys.tolist())
            return opcode, encode_lookup_response(meta.dim, meta.dtype, result.vectors, result.source_counts)
        if opcode == Opcode.PUBLISH:
            batch = decode_update_batch(payload)
            meta = stack.meta(batch.table)
            if batch.dim != meta.dim or batch.dtype != meta.dtype:
                raise ProtocolError(f"batch shape ({batch.dim}, {batch.dtype.name}) does not match table")
            return opcode, _U64.pack(stack.queues.publish_batch(batch))
        if opcode == Opcode.STATS:
            return opcode, _STATS.pack(*stack.stats(decode_name_payload(payload)).as_tuple())
        if opcode == Opcode.REFRESH:
            return opcode, _U64.pack(stack.refresh(decode_name_payload(payload)))
        return Opcode.ERROR, encode_error(ErrorCode.UNKNOWN_OPCODE, f"unknown opcode {opcode}")
    except UnknownTableError as exc:
        return Opcode.ERROR, encode_error(ErrorCode.UNKNOWN_TABLE, str(exc))
    except (DecodeError, ValueError) as exc:
        return Opcode.ERROR, encode_error(ErrorCode.DECODE_FAILURE, str(exc))
    except Exception as exc:
        logger.exception("request failed")
        return Opcode.ERROR, encode_error(ErrorCode.INTERNAL, f"{type(exc).__name__}: {exc}")


class _Connection:
    def __init__(self, stack, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.stack = stack
        self.reader = reader
        self.writer = writer
        self.write_lock = asyncio.Lock()
        self.tasks: set[asyncio.Task] = set()

    async def send(self, opcode: int, request_id: int, payload: bytes) -> None:
        async with self.write_lock:
            self.writer.write(encode_frame(opcode, request_id, payload))
            await self.writer.drain()

    async def run(self) -> None:
        try:
            while True:
                try:
                    head = await self.reader.readexactly(_LEN.size)
                except asyncio.IncompleteReadError:
                    return
                (length,) = _LEN.unpack(head)
                if length > MAX_FRAME:
                    # cannot resynchronise past an unbounded length
                    await self.send(Opcode.ERROR, 0, encode_error(ErrorCode.DECODE_FAILURE, f"frame of {length} bytes exceeds limit"))
                    return
                try:
                    body = await self.reader.readexactly(length)
                except asyncio.IncompleteReadError:
                    return
                if length < _HEAD.size:
                    await self.send(Opcode.ERROR, 0, encode_error(ErrorCode.DECODE_FAILURE, "frame shorter than header"))
                    continue
                opcode, request_id = _HEAD.unpack_from(body, 0)
                task = asyncio.ensure_future(self.dispatch(opcode, request_id, body[_HEAD.size :]))
                self.tasks.add(task)
                task.add_done_callback(self.tasks.discard)
        except (ConnectionError, OSError):
            pass
        finally:
            if self.tasks:
                await asyncio.gather(*self.tasks, return_exceptions=True)
            self.writer.close()

    async def dispatch(self, opcode: int, request_id: int, payload: bytes) -> None:
        if opcode in (Opcode.LOOKUP, Opcode.PUBLISH, Opcode.STATS, Opcode.REFRESH):
            rop, out = await asyncio.get_running_loop().run_in_executor(None, handle_request, self.stack, opcode, payload)
        else:
            rop, out = Opcode.ERROR, encode_error(ErrorCode.UNKNOWN_OPCODE, f"unknown opcode {opcode}")
        try:
            await self.send(rop, request_id, out)
        except (ConnectionError, OSError):
            pass


async def serve(stack, host: str = "127.0.0.1", port: int = DEFAULT_PORT, ready=None) -> None:
    """Serve ``stack`` until cancelled. ``ready`` (if given) is called with the bound address."""

    async def on_connect(reader, writer):
        await _Connection(stack, reader, writer).run()

    server = await asyncio.start_server(on_connect, host, port)
    if ready is not None:
        ready(server.sockets[0].getsockname()[:2])
    async with server:
        await server.serve_forever()


class ServerThread:
    """Runs :func:`serve` on a private event loop in a daemon thread."""

    def __init__(self, stack, host: str = "127.0.0.1", port: int = 0):
        self.address: tuple[str, int] | None = None
        self._ready = threading.Event()
        self._loop = asyncio.new_event_loop()
        self._task = None
        self._thread = threading.Thread(target=self._run, args=(stack, host, port), name="hps-server", daemon=True)
        self._thread.start()
        if not self._ready.wait(10):
            raise RuntimeError("server failed to start")

    def _run(self, stack, host, port):
        asyncio.set_event_loop(self._loop)

        def ready(addr):
            self.address = addr
            self._ready.set()

        self._task = self._loop.create_task(serve(stack, host, port, ready))
        try:
            self._loop.run_until_complete(self._task)
        except asyncio.CancelledError:
            pass
        finally:
            leftover = asyncio.all_tasks(self._loop)
            for t in leftover:
                t.cancel()
            self._loop.run_until_complete(asyncio.gather(*leftover, return_exceptions=True))
            self._loop.run_until_complete(self._loop.shutdown_default_executor())
            self._loop.close()

    def stop(self) -> None:
        if self._thread.is_alive():
            self._loop.call_soon_threadsafe(self._task.cancel)
            self._thread.join(10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class Client:
    """Blocking client; :meth:`submit` pipelines raw requests and returns futures."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float | None = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(None)
        self._timeout = timeout
        self._pending: dict[int, Future] = {}
        self._lock = threading.Lock()
        self._send_lock = threading.Lock()
        self._next_id = 1
        self._reader = threading.Thread(target=self._read_loop, name="hps-client", daemon=True)
        self._reader.start()

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                raise ConnectionError("server closed connection")
            buf += chunk
        return bytes(buf)

    def _read_loop(self) -> None:
        try:
            while True:
                (length,) = _LEN.unpack(self._read_exact(_LEN.size))
                body = self._read_exact(length)
                opcode, request_id = _HEAD.unpack_from(body, 0)
                with self._lock:
                    fut = self._pending.pop(request_id, None)
                if fut is not None:
                    fut.set_result((opcode, body[_HEAD.size :]))
        except (ConnectionError, OSError, struct.error) as exc:
            with self._lock:
                pending, self._pending = self._pending, {}
            for fut in pending.values():
                fut.set_exception(ConnectionError(str(exc)))

    def submit(self, opcode: int, payload: bytes = b"", request_id: int | None = None) -> tuple[int, Future]:
        fut: Future = Future()
        with self._lock:
            if request_id is None:
                request_id = self._next_id
                self._next_id = (self._next_id + 1) & 0xFFFFFFFF or 1
            self._pending[request_id] = fut
        self.send_raw(encode_frame(opcode, request_id, payload))
        return request_id, fut

    def send_raw(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    def call(self, opcode: int, payload: bytes = b"") -> bytes:
        _, fut = self.submit(opcode, payload)
        rop, body = fut.result(self._timeout)
        if rop == Opcode.ERROR:
            raise RemoteError(*decode_error(body))
        if rop != opcode:
            raise ProtocolError(f"response opcode {rop} for request {opcode}")
        return body

    def lookup(self, table: str, keys) -> WireLookup:
        keys = np.asarray(keys, dtype="<u8")
        return decode_lookup_response(self.call(Opcode.LOOKUP, encode_lookup_request(table, keys)), len(keys))

    def publish(self, batch_bytes: bytes) -> int:
        return _U64.unpack(self.call(Opcode.PUBLISH, batch_bytes))[0]

    def stats(self, table: str) -> tuple[int, ...]:
        return _STATS.unpack(self.call(Opcode.STATS, encode_name(table)))

    def refresh(self, table: str) -> int:
        return _U64.unpack(self.call(Opcode.REFRESH, encode_name(table)))[0]

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
