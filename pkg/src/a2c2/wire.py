"""Policy serving over TCP with injected latency.

Frame (little-endian)::

    u32  magic   0x32433241 (bytes "A2C2")
    u16  version
    u8   type    HELLO=1 OBS=2 CHUNK=3 ERR=4 BYE=5
    u64  request_id
    u32  payload_len
    ...  payload

Payload of HELLO/OBS/CHUNK/BYE is a list of float32 arrays::

    u16 count, then per array: u16 rank, u32 dims[rank], f32 data (row-major)

The server's HELLO reply carries ``[obs_dim, act_dim, H, latent_dim]``; OBS
carries the observation; CHUNK carries the (H, act_dim) chunk and the base
latent. ERR carries ``u16 code`` followed by a UTF-8 message.

The server holds every CHUNK reply until the injected latency has elapsed
since the OBS was received and serves one inference at a time per session.
An OBS that arrives while another is in flight is answered with ERR(BUSY).
"""
from __future__ import annotations

import logging
import math
import queue
import random
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .asyncexec import EpisodeTrace, Schedule, ScheduleError, compute_delay, corrected_action, env_event_hash
from .envsim import EnvConfig, observe, reset, step
from .policies import BasePolicy, CorrectionHead, load_policy, predict_chunk

log = logging.getLogger(__name__)

MAGIC = 0x32433241
VERSION = 1
HELLO, OBS, CHUNK, ERR, BYE = 1, 2, 3, 4, 5
MSG_TYPES = (HELLO, OBS, CHUNK, ERR, BYE)
_FRAME = struct.Struct("<IHBQI")
HEADER_SIZE = _FRAME.size
MAX_PAYLOAD = 1 << 24

ERR_BUSY, ERR_MALFORMED, ERR_BAD_REQUEST, ERR_INTERNAL = 1, 2, 3, 4


class ProtocolError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Message:
    type: int
    request_id: int
    arrays: tuple[np.ndarray, ...] = ()
    code: int = 0
    text: str = ""

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (self.type == other.type and self.request_id == other.request_id
                and self.code == other.code and self.text == other.text
                and len(self.arrays) == len(other.arrays)
                and all(a.shape == b.shape and a.tobytes() == b.tobytes()
                        for a, b in zip(self.arrays, other.arrays)))


def _encode_payload(msg: Message) -> bytes:
    if msg.type == ERR:
        return struct.pack("<H", msg.code) + msg.text.encode()
    parts = [struct.pack("<H", len(msg.arrays))]
    for a in msg.arrays:
        a = np.asarray(a, dtype="<f4")  # ascontiguousarray would promote rank 0 to rank 1
        parts.append(struct.pack(f"<H{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def encode(msg: Message) -> bytes:
    if msg.type not in MSG_TYPES:
        raise ValueError(f"unknown message type {msg.type}")
    payload = _encode_payload(msg)
    return _FRAME.pack(MAGIC, VERSION, msg.type, msg.request_id, len(payload)) + payload


def decode_header(data: bytes) -> tuple[int, int, int]:
    """Validate a frame header; returns (type, request_id, payload_len)."""
    if len(data) < HEADER_SIZE:
        raise ProtocolError(f"truncated header: {len(data)} of {HEADER_SIZE} bytes", len(data))
    magic, version, mtype, rid, plen = _FRAME.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic 0x{magic:08x}", 0)
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}", 4)
    if mtype not in MSG_TYPES:
        raise ProtocolError(f"unknown message type {mtype}", 6)
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"payload length {plen} exceeds limit", 15)
    return mtype, rid, plen


def decode(data: bytes) -> Message:
    """Decode exactly one frame; errors carry the offending byte offset."""
    mtype, rid, plen = decode_header(data)
    end = HEADER_SIZE + plen
    if len(data) < end:
        raise ProtocolError(f"truncated payload: expected {plen} bytes, got {len(data) - HEADER_SIZE}",
                            len(data))
    if len(data) > end:
        raise ProtocolError("trailing bytes after frame", end)
    off = HEADER_SIZE
    if mtype == ERR:
        if plen < 2:
            raise ProtocolError("ERR payload shorter than its code", off)
        (code,) = struct.unpack_from("<H", data, off)
        try:
            text = data[off + 2:end].decode()
        except UnicodeDecodeError as exc:
            raise ProtocolError("ERR text is not UTF-8", off + 2 + exc.start) from None
        return Message(ERR, rid, code=code, text=text)
    if plen < 2:
        raise ProtocolError("payload shorter than array count", off)
    (count,) = struct.unpack_from("<H", data, off)
    off += 2
    arrays = []
    for _ in range(count):
        if off + 2 > end:
            raise ProtocolError("truncated array rank", off)
        (rank,) = struct.unpack_from("<H", data, off)
        off += 2
        if off + 4 * rank > end:
            raise ProtocolError("truncated array dims", off)
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        n = math.prod(dims)
        if off + 4 * n > end:
            raise ProtocolError(f"truncated array data: need {4 * n} bytes", off)
        arrays.append(np.frombuffer(data, "<f4", n, off).astype(np.float32).reshape(dims))
        off += 4 * n
    if off != end:
        raise ProtocolError("payload length does not match its arrays", off)
    return Message(mtype, rid, tuple(arrays))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise ConnectionError(f"connection closed after {len(buf)} of {n} bytes")
        buf += part
    return bytes(buf)


def read_message(sock: socket.socket) -> Message:
    header = _recv_exact(sock, HEADER_SIZE)
    _, _, plen = decode_header(header)
    return decode(header + _recv_exact(sock, plen))


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------

@dataclass
class ServerConfig:
    policy: BasePolicy | str | Path
    host: str = "127.0.0.1"
    port: int = 0
    latency: float = 0.0
    jitter: float = 0.0
    seed: int = 0
    single_flight: bool = True

    def __post_init__(self):
        if self.latency < 0:
            raise ValueError("latency must be >= 0")
        if self.jitter < 0 or (self.jitter and self.jitter >= self.latency):
            raise ValueError("jitter must be zero or smaller than latency")
        if not self.single_flight:
            raise ValueError("the server is always single-flight")


class _Session(socketserver.BaseRequestHandler):
    server: "_TCPServer"

    def setup(self):
        self.request.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.write_lock = threading.Lock()
        self.in_flight = threading.Lock()
        self.last_id = -1

    def send(self, msg: Message) -> None:
        with self.write_lock:
            self.request.sendall(encode(msg))

    def handle(self):
        owner = self.server.owner
        while True:
            try:
                msg = read_message(self.request)
            except ProtocolError as exc:
                self.send(Message(ERR, 0, code=ERR_MALFORMED, text=str(exc)))
                return
            except (ConnectionError, OSError):
                return
            received = time.monotonic()
            if msg.request_id <= self.last_id:
                self.send(Message(ERR, msg.request_id, code=ERR_BAD_REQUEST,
                                  text=f"request_id {msg.request_id} not increasing"))
                return
            self.last_id = msg.request_id
            if msg.type == BYE:
                return
            if msg.type == HELLO:
                p = owner.policy
                dims = np.array([p.obs_dim, p.act_dim, p.H, p.latent_dim], np.float32)
                self.send(Message(HELLO, msg.request_id, (dims,)))
            elif msg.type == OBS:
                if not self.in_flight.acquire(blocking=False):
                    owner.busy_count += 1
                    self.send(Message(ERR, msg.request_id, code=ERR_BUSY, text="inference in flight"))
                    continue
                threading.Thread(target=self._infer, args=(msg, received), daemon=True).start()
            else:
                self.send(Message(ERR, msg.request_id, code=ERR_BAD_REQUEST,
                                  text=f"unexpected message type {msg.type}"))
                return

    def _infer(self, msg: Message, received: float) -> None:
        owner = self.server.owner
        try:
            with owner.count_lock:
                owner.active[id(self)] = owner.active.get(id(self), 0) + 1
                assert owner.active[id(self)] == 1, "two inferences in flight on one session"
            try:
                obs = msg.arrays[0] if msg.arrays else np.zeros(0, np.float32)
                chunk, z = predict_chunk(owner.policy, obs)
                reply = Message(CHUNK, msg.request_id, (chunk, z))
            except Exception as exc:  # reported to the client, session stays usable
                reply = Message(ERR, msg.request_id, code=ERR_INTERNAL, text=str(exc))
            hold = owner.sample_latency()
            remaining = received + hold - time.monotonic()
            if remaining > 0:
                time.sleep(remaining)
            with owner.count_lock:
                owner.active[id(self)] -= 1
            self.in_flight.release()
            try:
                self.send(reply)
            except OSError:
                pass
        except Exception:
            log.exception("inference worker failed")


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    owner: "PolicyServer"


class PolicyServer:
    """Running policy server; use as a context manager or call ``close``."""

    def __init__(self, cfg: ServerConfig):
        self.cfg = cfg
        self.policy = cfg.policy if isinstance(cfg.policy, BasePolicy) else load_policy(cfg.policy)
        if not isinstance(self.policy, BasePolicy):
            raise ValueError("server needs a base policy file")
        # Compile the inference kernel now so the first request is not delayed.
        predict_chunk(self.policy, np.zeros(self.policy.obs_dim, np.float32))
        self._rng = random.Random(cfg.seed)
        self._rng_lock = threading.Lock()
        self.count_lock = threading.Lock()
        self.active: dict[int, int] = {}
        self.busy_count = 0
        self._srv = _TCPServer((cfg.host, cfg.port), _Session)
        self._srv.owner = self
        self._thread = threading.Thread(target=self._srv.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._srv.server_address[:2]

    def sample_latency(self) -> float:
        if not self.cfg.jitter:
            return self.cfg.latency
        with self._rng_lock:
            return self.cfg.latency + self._rng.uniform(-self.cfg.jitter, self.cfg.jitter)

    def close(self) -> None:
        self._srv.shutdown()
        self._srv.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve(cfg: ServerConfig) -> PolicyServer:
    return PolicyServer(cfg)


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------

@dataclass
class ClientConfig:
    address: tuple[str, int]
    dt: float
    schedule: Schedule
    env: EnvConfig
    seed: int
    head: CorrectionHead | None = None
    latency: float | None = None
    jitter: float = 0.0
    grace: float = 0.5
    connect_timeout: float = 5.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not 0 <= self.grace < 1:
            raise ValueError("grace must be in [0, 1) control periods")
        if self.latency is not None:
            d = compute_delay(self.latency + self.jitter, self.dt)
            if d != self.schedule.d:
                raise ScheduleError(f"schedule d={self.schedule.d} but worst-case latency "
                                    f"gives d={d}")
        self.schedule.check()


@dataclass
class ClientTrace(EpisodeTrace):
    measured_d: list[int] = field(default_factory=list)
    latencies: list[float] = field(default_factory=list)
    late_adoptions: int = 0
    slip: float = 0.0  # total seconds the tick clock waited inside grace windows


class _Connection:
    def __init__(self, address, timeout: float):
        try:
            self.sock = socket.create_connection(address, timeout=timeout)
        except OSError as exc:
            raise ConnectionError(f"policy server {address[0]}:{address[1]} unreachable: {exc}") from exc
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.next_id = 1
        self.inbox: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                msg = read_message(self.sock)
                self.inbox.put((time.monotonic(), msg))
        except (ConnectionError, OSError, ProtocolError) as exc:
            self.inbox.put((time.monotonic(), exc))

    def send(self, mtype: int, *arrays) -> tuple[int, float]:
        rid = self.next_id
        self.next_id += 1
        data = encode(Message(mtype, rid, tuple(np.asarray(a, np.float32) for a in arrays)))
        sent = time.monotonic()  # before sendall, so the measured latency never undercounts
        self.sock.sendall(data)
        return rid, sent

    def receive(self, timeout: float | None):
        try:
            when, msg = self.inbox.get(timeout=timeout) if timeout is None or timeout > 0 \
                else self.inbox.get_nowait()
        except queue.Empty:
            return None
        if isinstance(msg, Exception):
            raise ConnectionError(f"connection to policy server lost: {msg}")
        if msg.type == ERR:
            raise RuntimeError(f"server error {msg.code} for request {msg.request_id}: {msg.text}")
        return when, msg

    def close(self):
        try:
            self.send(BYE)
        except OSError:
            pass
        self.sock.close()


def client_run(cfg: ClientConfig) -> ClientTrace:
    """Run one episode against a policy server on a fixed wall-clock tick.

    The schedule mirrors the in-process simulator: requests at steps
    ``-d + m*e`` and adoption at ``request + d``. A reply that lands within
    ``grace * dt`` of its adoption tick is waited for and the tick clock slips
    by the wait; a reply later than that is adopted at the first tick after it
    arrives.
    """
    H, e, d = cfg.schedule.H, cfg.schedule.e, cfg.schedule.d
    env, head = cfg.env, cfg.head
    conn = _Connection(cfg.address, cfg.connect_timeout)
    try:
        conn.send(HELLO)
        got = conn.receive(cfg.connect_timeout)
        if got is None:
            raise ConnectionError("no HELLO reply from policy server")
        obs_dim, act_dim, srv_H, _ = (int(v) for v in got[1].arrays[0])
        if (obs_dim, act_dim, srv_H) != (env.obs_dim, env.act_dim, H):
            raise ScheduleError(f"server policy dims {(obs_dim, act_dim, srv_H)} do not match "
                                f"client {(env.obs_dim, env.act_dim, H)}")

        s = reset(env, cfg.seed)
        trace = ClientTrace(seed=cfg.seed, schedule=cfg.schedule, env_hash=env_event_hash(s))

        def record_latency(sent, arrived):
            lat = arrived - sent
            trace.latencies.append(lat)
            trace.measured_d.append(compute_delay(lat, cfg.dt))

        # Bootstrap chunk for the request at step -d; the environment waits for it.
        _, sent = conn.send(OBS, observe(env, s))
        arrived, msg = conn.receive(None)
        record_latency(sent, arrived)
        chunk, z = msg.arrays
        src = -d
        trace.adoptions.append(0)
        pending = None  # (request step, request id, send time)
        ready = None  # (request step, chunk, latent)
        next_req = -d + e
        t0 = time.monotonic()
        t = 0
        while not s.done:
            tick = t0 + t * cfg.dt
            now = time.monotonic()
            if now < tick:
                time.sleep(tick - now)

            if pending is not None:
                due = pending[0] + d <= t
                timeout = max(0.0, tick + cfg.grace * cfg.dt - time.monotonic()) if due else 0.0
                got = conn.receive(timeout)
                if got is not None:
                    arrived, msg = got
                    if msg.request_id != pending[1]:
                        raise RuntimeError(f"reply {msg.request_id} does not match request {pending[1]}")
                    record_latency(pending[2], arrived)
                    ready = (pending[0], *msg.arrays)
                    pending = None
                    if due and arrived > tick:
                        # Re-anchor the clock so serving overhead does not build up over cycles.
                        t0 += arrived - tick
                        trace.slip += arrived - tick
            if ready is not None and ready[0] + d <= t:
                if ready[0] + d < t:
                    trace.late_adoptions += 1
                src, chunk, z = ready
                ready = None
                trace.adoptions.append(t)
            if t >= next_req and pending is None and ready is None:
                rid, sent = conn.send(OBS, observe(env, s))
                pending = (t, rid, sent)
                next_req = t + e
                if d == 0:
                    arrived, msg = conn.receive(None)
                    if msg.request_id != rid:
                        raise RuntimeError(f"reply {msg.request_id} does not match request {rid}")
                    record_latency(sent, arrived)
                    src, (chunk, z) = t, msg.arrays
                    pending = None
                    trace.adoptions.append(t)
            k = t - src
            if k > H - 1:
                raise ScheduleError(f"chunk exhausted at step {t} (k={k}); latency exceeds schedule")
            base_a, delta, a = corrected_action(env, s, chunk, k, H, head, z)
            s, _, _ = step(env, s, a)
            trace.t.append(t)
            trace.k.append(k)
            trace.base.append(base_a)
            trace.delta.append(delta)
            trace.executed.append(a)
            trace.state_hash.append(s.snapshot_hash())
            trace.success_so_far.append(s.success)
            if time.monotonic() > tick + cfg.dt:
                trace.overruns += 1
            t += 1
        trace.success = s.success
        return trace
    finally:
        conn.close()
