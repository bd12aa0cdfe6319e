"""Messages between manager, workers and trainer.

Wire frames are ``>IBB`` (length, type, protocol version) followed by the
payload, where length counts the payload plus the two type/version bytes.

Two transports share one interface (``submit``, ``poll``, ``wait``,
``publish``, ``latest_checkpoint``, ``now``):

* ``SimTransport`` runs workers and the trainer inside the calling process
  as a discrete-event simulation.  Job durations are charged on a simulated
  clock (nodes times ``seconds_per_node``), so runs are bit-reproducible and
  latency, duplicate delivery and worker crashes can be injected from a
  seed.
* ``TcpTransport`` is a hub listening on a socket; workers and the trainer
  are separate processes connecting to it.
"""

from __future__ import annotations

import collections
import enum
import heapq
import logging
import multiprocessing
import os
import queue
import random
import select
import socket
import struct
import threading
import time
from dataclasses import dataclass

from .errors import CheckpointError, ContractViolation, FramingError, ProtocolError
from .games import GameState, Outcome, decode_position, encode_position, get_game
from .jobs import Job, JobResult, JobStatus
from .network import Checkpoint, checkpoint_from_bytes, checkpoint_to_bytes
from .tree import decode_solution_nodes, encode_solution_nodes
from .worker import Worker, WorkerConfig

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_PAYLOAD = 64 * 2**20
HEADER = struct.Struct(">IBB")
DEFAULT_MAX_OUTSTANDING = 256 * 2**20


class MsgType(enum.IntEnum):
    JOB_ASSIGN = 1
    JOB_RESULT = 2
    CHECKPOINT_PUBLISH = 3
    SOLVED_POS = 4
    CRITICAL_POS = 5
    WORKER_HELLO = 6
    SHUTDOWN = 7


_TYPES = frozenset(int(t) for t in MsgType)


@dataclass(frozen=True)
class Frame:
    type: MsgType
    payload: bytes = b""
    version: int = PROTOCOL_VERSION


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise FramingError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}", 0)
    return HEADER.pack(len(frame.payload) + 2, int(frame.type), frame.version) + frame.payload


def _check_header(length: int, mtype: int, version: int, offset: int) -> None:
    if length < 2:
        raise FramingError(f"frame length {length} is shorter than the type and version bytes", offset)
    if length - 2 > MAX_PAYLOAD:
        raise FramingError(f"frame payload of {length - 2} bytes exceeds {MAX_PAYLOAD}", offset)
    if mtype not in _TYPES:
        raise ProtocolError(f"unknown message type {mtype} at byte offset {offset + 4}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version} at byte offset {offset + 5}")


def decode_frame(data: bytes, offset: int = 0) -> tuple[Frame, int]:
    """Decode one frame starting at ``offset``; returns it and the end offset."""
    if len(data) - offset < HEADER.size:
        raise FramingError("truncated frame header", len(data))
    length, mtype, version = HEADER.unpack_from(data, offset)
    _check_header(length, mtype, version, offset)
    end = offset + 4 + length
    if len(data) < end:
        raise FramingError(f"truncated frame: need {end - offset} bytes, have {len(data) - offset}", len(data))
    return Frame(MsgType(mtype), bytes(data[offset + HEADER.size:end]), version), end


class FrameReader:
    """Incremental decoder for a byte stream.  Oversized or malformed
    headers are rejected as soon as the header bytes arrive."""

    def __init__(self):
        self._buf = bytearray()
        self.consumed = 0

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames = []
        while len(self._buf) >= HEADER.size:
            length, mtype, version = HEADER.unpack_from(self._buf, 0)
            _check_header(length, mtype, version, self.consumed)
            if len(self._buf) < 4 + length:
                break
            frames.append(Frame(MsgType(mtype), bytes(self._buf[HEADER.size:4 + length]), version))
            del self._buf[:4 + length]
            self.consumed += 4 + length
        return frames

    @property
    def buffered(self) -> int:
        return len(self._buf)


# --- message payloads -------------------------------------------------------

ROLE_WORKER = 0
ROLE_TRAINER = 1


@dataclass
class CheckpointPublish:
    blob: bytes

    @property
    def version(self) -> int:
        return struct.unpack_from(">I", self.blob, 5)[0]

    @classmethod
    def of(cls, ckpt: Checkpoint) -> "CheckpointPublish":
        return cls(checkpoint_to_bytes(ckpt.net, ckpt.version, ckpt.train_step, ckpt.samples))


@dataclass
class SolvedPos:
    position: GameState
    outcome: Outcome = Outcome.WIN


@dataclass
class CriticalPos:
    position: GameState


@dataclass
class WorkerHello:
    worker_id: int
    role: int = ROLE_WORKER
    jobs_done: int = 0
    busy_time: float = 0.0
    wall_time: float = 0.0
    checkpoint_version: int = 0


@dataclass
class Shutdown:
    pass


_JOB = struct.Struct(">QQI")  # job id, budget, checkpoint version
_RESULT = struct.Struct(">QBQdII")  # job id, status, nodes, wall time, version, worker id
_HELLO = struct.Struct(">IBQddI")


def encode_message(msg) -> Frame:
    if isinstance(msg, Job):
        payload = _JOB.pack(msg.job_id, msg.budget, msg.checkpoint_version) + encode_position(msg.position)
        return Frame(MsgType.JOB_ASSIGN, payload)
    if isinstance(msg, JobResult):
        err = msg.error.encode()
        out = _RESULT.pack(msg.job_id, int(msg.status), msg.nodes, msg.wall_time, msg.checkpoint_version,
                           msg.worker_id) + struct.pack(">H", len(err)) + err
        if msg.proof is None:
            out += struct.pack(">I", 0)
        else:
            body = encode_solution_nodes(None, msg.proof)
            out += struct.pack(">I", len(body) // 5) + body
        return Frame(MsgType.JOB_RESULT, out)
    if isinstance(msg, Checkpoint):
        msg = CheckpointPublish.of(msg)
    if isinstance(msg, CheckpointPublish):
        return Frame(MsgType.CHECKPOINT_PUBLISH, bytes(msg.blob))
    if isinstance(msg, SolvedPos):
        return Frame(MsgType.SOLVED_POS, bytes([int(msg.outcome)]) + encode_position(msg.position))
    if isinstance(msg, CriticalPos):
        return Frame(MsgType.CRITICAL_POS, encode_position(msg.position))
    if isinstance(msg, WorkerHello):
        return Frame(MsgType.WORKER_HELLO, _HELLO.pack(msg.worker_id, msg.role, msg.jobs_done, msg.busy_time,
                                                       msg.wall_time, msg.checkpoint_version))
    if isinstance(msg, Shutdown):
        return Frame(MsgType.SHUTDOWN)
    raise TypeError(f"cannot encode {type(msg).__name__}")


def _need(data, size, what):
    if len(data) < size:
        raise ProtocolError(f"truncated {what} payload")


def _decode_payload(frame: Frame):
    t, p = frame.type, frame.payload
    if t is MsgType.JOB_ASSIGN:
        _need(p, _JOB.size, "JobAssign")
        job_id, budget, version = _JOB.unpack_from(p)
        state, end = decode_position(p, _JOB.size)
        _done(p, end)
        return Job(job_id, state, budget, version)
    if t is MsgType.JOB_RESULT:
        _need(p, _RESULT.size + 6, "JobResult")
        job_id, status, nodes, wall, version, worker_id = _RESULT.unpack_from(p)
        try:
            status = JobStatus(status)
        except ValueError:
            raise ProtocolError(f"unknown job status {status}") from None
        off = _RESULT.size
        (elen,) = struct.unpack_from(">H", p, off)
        off += 2
        _need(p, off + elen + 4, "JobResult")
        err = p[off:off + elen].decode("utf-8", errors="replace")
        off += elen
        (count,) = struct.unpack_from(">I", p, off)
        off += 4
        proof = None
        if count:
            try:
                proof, off = decode_solution_nodes(p, off, count)
            except ValueError as e:
                raise ProtocolError(f"bad proof in JobResult: {e}") from None
        _done(p, off)
        return JobResult(job_id, status, nodes, wall, version, worker_id, proof, err)
    if t is MsgType.CHECKPOINT_PUBLISH:
        _need(p, 9, "CheckpointPublish")
        return CheckpointPublish(p)
    if t is MsgType.SOLVED_POS:
        _need(p, 1, "SolvedPos")
        if p[0] not in (0, 1):
            raise ProtocolError(f"bad outcome byte {p[0]}")
        state, end = decode_position(p, 1)
        _done(p, end)
        return SolvedPos(state, Outcome(p[0]))
    if t is MsgType.CRITICAL_POS:
        state, end = decode_position(p, 0)
        _done(p, end)
        return CriticalPos(state)
    if t is MsgType.WORKER_HELLO:
        _need(p, _HELLO.size, "WorkerHello")
        _done(p, _HELLO.size)
        wid, role, jobs, busy, wall, version = _HELLO.unpack(p)
        if role not in (ROLE_WORKER, ROLE_TRAINER):
            raise ProtocolError(f"unknown role {role}")
        return WorkerHello(wid, role, jobs, busy, wall, version)
    _done(p, 0)
    return Shutdown()


def _done(p, end):
    if end != len(p):
        raise ProtocolError(f"{len(p) - end} trailing bytes in payload")


def decode_message(frame: Frame):
    """Decode a frame's payload.  Every malformed payload raises
    ``ProtocolError``."""
    try:
        return _decode_payload(frame)
    except ProtocolError:
        raise
    except (ValueError, struct.error, ContractViolation, OverflowError) as e:
        raise ProtocolError(f"malformed {frame.type.name} payload: {e}") from None


def to_wire_event(event):
    """Manager events to trainer messages (others give None)."""
    from .manager import CriticalPosition, SolvedPosition

    if isinstance(event, SolvedPosition):
        return SolvedPos(event.position, event.outcome)
    if isinstance(event, CriticalPosition):
        return CriticalPos(event.position)
    return None


def from_wire_event(msg):
    from .manager import CriticalPosition, SolvedPosition

    if isinstance(msg, SolvedPos):
        return SolvedPosition(msg.position, msg.outcome)
    if isinstance(msg, CriticalPos):
        return CriticalPosition(msg.position)
    return None


# --- in-process simulation ----------------------------------------------------

@dataclass
class ChaosConfig:
    """Fault injection for the simulated transport.  Latencies are drawn
    uniformly from [0, latency] seconds per message."""

    latency: float = 0.0
    duplicate_prob: float = 0.0
    kill_prob: float = 0.0
    restart_delay: float = 0.01
    seed: int = 0


@dataclass
class _SimWorker:
    worker: Worker
    free_at: float = 0.0
    alive: bool = True
    busy: float = 0.0
    jobs: int = 0
    kills: int = 0


class SimTransport:
    """Discrete-event simulation of a worker cluster and trainer.

    Manager work is charged with ``charge``; jobs start when a worker is
    free and take ``nodes * seconds_per_node`` simulated seconds.  Jobs are
    executed for real at their start time, with the worker's checkpoint at
    that moment.  The trainer, when present, runs one iteration every
    ``trainer_interval`` simulated seconds.
    """

    def __init__(self, checkpoint: Checkpoint, workers: int = 1, config: WorkerConfig | None = None,
                 seconds_per_node: float = 2e-4, chaos: ChaosConfig | None = None, trainer=None,
                 trainer_interval: float = 2.0):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.config = config or WorkerConfig()
        self.spn = seconds_per_node
        self.chaos = chaos or ChaosConfig()
        self.rng = random.Random(self.chaos.seed)
        self.latest = checkpoint
        self.workers = [_SimWorker(Worker(i, checkpoint, self.config)) for i in range(workers)]
        self.clock = 0.0
        self.pending: collections.deque[Job] = collections.deque()
        self._events: list = []
        self._seq = 0
        self._running: dict[int, int] = {}
        # finished jobs whose result is still travelling to the manager
        self._undelivered: set[int] = set()
        self.trainer = trainer
        self.trainer_interval = trainer_interval
        self._next_train = trainer_interval
        self.published: list[int] = []
        self.kills = 0
        self.duplicates = 0

    # --- clock -------------------------------------------------------------

    def now(self) -> float:
        return self.clock

    def charge(self, nodes: int) -> None:
        self._advance(self.clock + nodes * self.spn)

    def _push(self, t, kind, payload):
        self._seq += 1
        heapq.heappush(self._events, (t, self._seq, kind, payload))

    def _latency(self):
        return self.rng.uniform(0.0, self.chaos.latency) if self.chaos.latency > 0 else 0.0

    def _advance(self, t):
        if self.trainer is not None:
            while self._next_train <= t:
                ck = self.trainer.iterate()
                if ck is not None:
                    self.latest = ck
                    self.published.append(ck.version)
                self._next_train += self.trainer_interval
        self.clock = max(self.clock, t)

    # --- jobs ----------------------------------------------------------------

    @property
    def in_flight(self) -> int:
        return len(self.pending) + len(self._running.keys() | self._undelivered)

    def submit(self, job: Job) -> None:
        self.pending.append(job)
        self._assign()

    def _assign(self):
        for wid, sw in enumerate(self.workers):
            if not self.pending:
                return
            if sw.alive and sw.free_at <= self.clock and wid not in self._running.values():
                self._start(wid, self.pending.popleft())

    def _start(self, wid, job):
        sw = self.workers[wid]
        sw.worker.subscribe(self.latest)
        start = max(self.clock, sw.free_at) + self._latency()
        r = sw.worker.solve_job(job)
        duration = r.nodes * self.spn
        r.wall_time = duration
        self._running[job.job_id] = wid
        sw.free_at = float("inf")
        if self.chaos.kill_prob and self.rng.random() < self.chaos.kill_prob:
            die = start + self.rng.random() * duration
            self._push(die, "kill", (wid, job))
            return
        self._push(start + duration, "finish", (wid, job.job_id, duration))
        self._push(start + duration + self._latency(), "result", r)
        self._undelivered.add(job.job_id)
        if self.chaos.duplicate_prob and self.rng.random() < self.chaos.duplicate_prob:
            self.duplicates += 1
            self._push(start + duration + self._latency(), "result", r)

    def _process(self, ev, out):
        t, _, kind, payload = ev
        self._advance(t)
        if kind == "result":
            self._undelivered.discard(payload.job_id)
            out.append(payload)
        elif kind == "finish":
            wid, job_id, duration = payload
            sw = self.workers[wid]
            sw.free_at = t
            sw.busy += duration
            sw.jobs += 1
            self._running.pop(job_id, None)
        elif kind == "kill":
            wid, job = payload
            sw = self.workers[wid]
            sw.alive = False
            sw.kills += 1
            self.kills += 1
            self._running.pop(job.job_id, None)
            # the hub notices the dropped connection and requeues the job
            self.pending.appendleft(job)
            self._push(t + self.chaos.restart_delay, "restart", wid)
        elif kind == "restart":
            sw = self.workers[payload]
            sw.worker = Worker(payload, self.latest, self.config)
            sw.alive = True
            sw.free_at = t
        self._assign()

    def poll(self) -> list[JobResult]:
        """Results that have arrived by the current clock."""
        out = []
        while self._events and self._events[0][0] <= self.clock:
            self._process(heapq.heappop(self._events), out)
        return out

    def wait(self, timeout: float | None = None) -> list[JobResult]:
        """Advance the clock to the next result arrival."""
        out = self.poll()
        while not out and self._events:
            self._process(heapq.heappop(self._events), out)
        return out

    def publish(self, events) -> None:
        if self.trainer is None:
            return
        for e in events:
            self.trainer.ingest(e)

    def latest_checkpoint(self) -> Checkpoint:
        return self.latest

    def worker_loading(self) -> float:
        if self.clock <= 0:
            return 0.0
        return sum(min(1.0, sw.busy / self.clock) for sw in self.workers) / len(self.workers)

    def close(self) -> None:
        pass


# --- TCP ---------------------------------------------------------------------

def send_message(sock, msg) -> None:
    sock.sendall(encode_frame(encode_message(msg)))


class _Conn:
    def __init__(self, conn_id, sock, hub):
        self.id = conn_id
        self.sock = sock
        self.hub = hub
        self.role = None
        self.worker_id = None
        self.assigned: dict[int, Job] = {}
        self.alive = True
        self._out: collections.deque[bytes] = collections.deque()
        self._ckpt: bytes | None = None
        self._bytes = 0
        self._cond = threading.Condition()
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.writer = threading.Thread(target=self._write_loop, daemon=True)

    def start(self):
        self.reader.start()
        self.writer.start()

    def enqueue(self, data: bytes) -> bool:
        """Queue a frame; blocks while the outstanding bytes are over the cap."""
        with self._cond:
            while self.alive and self._out and self._bytes + len(data) > self.hub.max_outstanding:
                self._cond.wait(0.1)
            if not self.alive:
                return False
            self._out.append(data)
            self._bytes += len(data)
            self._cond.notify_all()
            return True

    def offer_checkpoint(self, data: bytes) -> None:
        # last value wins: an unsent older checkpoint is replaced
        with self._cond:
            self._ckpt = data
            self._cond.notify_all()

    def _write_loop(self):
        try:
            while True:
                with self._cond:
                    while self.alive and not self._out and self._ckpt is None:
                        self._cond.wait()
                    if not self.alive:
                        return
                    if self._ckpt is not None:
                        data, self._ckpt = self._ckpt, None
                        counted = False
                    else:
                        data = self._out.popleft()
                        counted = True
                self.sock.sendall(data)
                if counted:
                    with self._cond:
                        self._bytes -= len(data)
                        self._cond.notify_all()
        except OSError:
            self.close()

    def _read_loop(self):
        reader = FrameReader()
        inbox = self.hub.inbox
        try:
            while True:
                data = self.sock.recv(1 << 16)
                if not data:
                    break
                for frame in reader.feed(data):
                    inbox.put((self.id, decode_message(frame)))
        except (OSError, FramingError, ProtocolError) as e:
            log.warning("connection %d closed: %s", self.id, e)
        self.close()
        inbox.put((self.id, None))

    def close(self):
        with self._cond:
            self.alive = False
            self._cond.notify_all()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class TcpTransport:
    """Manager-side hub.  All bookkeeping happens on the thread calling
    ``poll``/``wait``; connection threads only move frames to and from
    queues."""

    def __init__(self, checkpoint: Checkpoint, host: str = "127.0.0.1", port: int = 0,
                 max_outstanding: int = DEFAULT_MAX_OUTSTANDING):
        self.latest = checkpoint
        self._latest_blob = CheckpointPublish.of(checkpoint).blob
        self.max_outstanding = max_outstanding
        self.inbox: queue.Queue = queue.Queue()
        self.conns: dict[int, _Conn] = {}
        self.pending: collections.deque[Job] = collections.deque()
        self.idle: collections.deque[int] = collections.deque()
        self.heartbeats: dict[int, WorkerHello] = {}
        self.published: list[int] = []
        self.requeued = 0
        self.disconnects = 0
        self._next_conn = 0
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self._closing = False
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)
        self._acceptor.start()
        self.processes: list = []
        self._t0 = time.perf_counter()

    def _accept_loop(self):
        while not self._closing:
            try:
                sock, _ = self._sock.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._next_conn += 1
            conn = _Conn(self._next_conn, sock, self)
            self.inbox.put((conn.id, conn))
            conn.start()

    def reset_clock(self):
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return time.perf_counter() - self._t0

    def charge(self, nodes: int) -> None:
        pass

    @property
    def workers(self) -> list[_Conn]:
        return [c for c in self.conns.values() if c.role == ROLE_WORKER and c.alive]

    @property
    def trainer_conn(self) -> _Conn | None:
        for c in self.conns.values():
            if c.role == ROLE_TRAINER and c.alive:
                return c
        return None

    @property
    def in_flight(self) -> int:
        return len(self.pending) + sum(len(c.assigned) for c in self.conns.values())

    def submit(self, job: Job) -> None:
        self.pending.append(job)
        self._assign()

    def _assign(self):
        while self.pending and self.idle:
            cid = self.idle.popleft()
            conn = self.conns.get(cid)
            if conn is None or not conn.alive or conn.assigned:
                continue
            job = self.pending.popleft()
            conn.assigned[job.job_id] = job
            if not conn.enqueue(encode_frame(encode_message(job))):
                conn.assigned.pop(job.job_id)
                self.pending.appendleft(job)

    def _handle(self, cid, msg, out):
        if isinstance(msg, _Conn):
            self.conns[cid] = msg
            return
        conn = self.conns.get(cid)
        if conn is None:
            return
        if msg is None:
            self.disconnects += 1
            if conn.assigned:
                self.requeued += len(conn.assigned)
                log.warning("worker %s dropped with %d live jobs; requeuing", conn.worker_id, len(conn.assigned))
                self.pending.extendleft(reversed(list(conn.assigned.values())))
                conn.assigned.clear()
            del self.conns[cid]
            self._assign()
            return
        if isinstance(msg, WorkerHello):
            first = conn.role is None
            conn.role = msg.role
            conn.worker_id = msg.worker_id
            if msg.role == ROLE_WORKER:
                self.heartbeats[cid] = msg
            if first:
                conn.offer_checkpoint(encode_frame(Frame(MsgType.CHECKPOINT_PUBLISH, self._latest_blob)))
                if msg.role == ROLE_WORKER:
                    self.idle.append(cid)
                    self._assign()
            return
        if isinstance(msg, JobResult):
            conn.assigned.pop(msg.job_id, None)
            out.append(msg)
            if conn.alive and not conn.assigned:
                self.idle.append(cid)
            self._assign()
            return
        if isinstance(msg, CheckpointPublish):
            try:
                ck = checkpoint_from_bytes(msg.blob)
            except CheckpointError as e:
                log.warning("ignoring corrupt checkpoint from connection %d: %s", cid, e)
                return
            if ck.version <= self.latest.version:
                return
            self.latest = ck
            self._latest_blob = msg.blob
            self.published.append(ck.version)
            frame = encode_frame(Frame(MsgType.CHECKPOINT_PUBLISH, msg.blob))
            for c in self.workers:
                c.offer_checkpoint(frame)
            return
        log.debug("ignoring %s from connection %d", type(msg).__name__, cid)

    def poll(self) -> list[JobResult]:
        return self.wait(0.0)

    def wait(self, timeout: float | None = 1.0) -> list[JobResult]:
        out: list[JobResult] = []
        try:
            item = self.inbox.get(timeout=timeout) if timeout else self.inbox.get_nowait()
        except queue.Empty:
            return out
        self._handle(*item, out)
        while True:
            try:
                item = self.inbox.get_nowait()
            except queue.Empty:
                return out
            self._handle(*item, out)

    def wait_for_workers(self, n: int, timeout: float = 120.0) -> None:
        deadline = time.perf_counter() + timeout
        while len(self.workers) < n:
            if time.perf_counter() > deadline:
                raise TimeoutError(f"only {len(self.workers)} of {n} workers connected")
            self.wait(0.1)

    def wait_for_trainer(self, timeout: float = 120.0) -> None:
        deadline = time.perf_counter() + timeout
        while self.trainer_conn is None:
            if time.perf_counter() > deadline:
                raise TimeoutError("trainer did not connect")
            self.wait(0.1)

    def publish(self, events) -> None:
        conn = self.trainer_conn
        if conn is None:
            return
        for e in events:
            msg = to_wire_event(e)
            if msg is not None:
                conn.enqueue(encode_frame(encode_message(msg)))

    def latest_checkpoint(self) -> Checkpoint:
        return self.latest

    def worker_loading(self) -> float:
        vals = [min(1.0, h.busy_time / h.wall_time) for h in self.heartbeats.values() if h.wall_time > 0]
        return sum(vals) / len(vals) if vals else 0.0

    def close(self, timeout: float = 10.0) -> None:
        shutdown = encode_frame(Frame(MsgType.SHUTDOWN))
        for c in list(self.conns.values()):
            if c.alive:
                c.enqueue(shutdown)
        deadline = time.perf_counter() + timeout
        for p in self.processes:
            p.join(max(0.1, deadline - time.perf_counter()))
            if p.is_alive():
                p.terminate()
                p.join(1.0)
        self._closing = True
        self._sock.close()
        for c in list(self.conns.values()):
            c.close()


# --- client processes ----------------------------------------------------------

def _recv_frames(sock, reader: FrameReader, timeout: float | None):
    if timeout is not None:
        ready, _, _ = select.select([sock], [], [], timeout)
        if not ready:
            return []
    data = sock.recv(1 << 16)
    if not data:
        return None
    return [decode_message(f) for f in reader.feed(data)]


def worker_main(host: str, port: int, worker_id: int, config: WorkerConfig | None = None,
                die_after_jobs: int | None = None) -> None:
    """Worker process: solve assigned jobs with the newest checkpoint seen.

    ``die_after_jobs`` makes the process exit abruptly on receiving the job
    after that many completed jobs (for crash testing).
    """
    config = config or WorkerConfig()
    sock = socket.create_connection((host, port))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    t0 = time.perf_counter()
    send_message(sock, WorkerHello(worker_id, ROLE_WORKER))
    reader = FrameReader()
    worker = None
    while True:
        msgs = _recv_frames(sock, reader, None)
        if msgs is None:
            return
        for msg in msgs:
            if isinstance(msg, CheckpointPublish):
                if worker is None:
                    worker = Worker(worker_id, checkpoint_from_bytes(msg.blob), config)
                    worker.started = t0
                else:
                    worker.subscribe(msg.blob)
            elif isinstance(msg, Job):
                if worker is None:
                    raise ProtocolError("job received before any checkpoint")
                if die_after_jobs is not None and worker.jobs_done >= die_after_jobs:
                    os._exit(3)
                r = worker.solve_job(msg)
                send_message(sock, r)
                send_message(sock, WorkerHello(worker_id, ROLE_WORKER, worker.jobs_done, worker.busy_time,
                                               time.perf_counter() - t0, worker.version))
            elif isinstance(msg, Shutdown):
                sock.close()
                return


def trainer_main(host: str, port: int, game_id: str, opening: tuple, trainer_cfg=None,
                 min_interval: float = 0.0) -> None:
    """Trainer process: ingest positions, fine-tune, publish checkpoints."""
    from .trainer import OnlineTrainer

    state = get_game(game_id).replay(opening)
    sock = socket.create_connection((host, port))
    send_message(sock, WorkerHello(0, ROLE_TRAINER))
    reader = FrameReader()
    trainer = None
    last = 0.0
    while True:
        msgs = _recv_frames(sock, reader, 0.0 if trainer is not None else None)
        if msgs is None:
            return
        for msg in msgs:
            if isinstance(msg, CheckpointPublish) and trainer is None:
                trainer = OnlineTrainer(checkpoint_from_bytes(msg.blob), state, trainer_cfg)
            elif isinstance(msg, Shutdown):
                sock.close()
                return
            elif trainer is not None:
                ev = from_wire_event(msg)
                if ev is not None:
                    trainer.ingest(ev)
        if trainer is None:
            continue
        wait = last + min_interval - time.perf_counter()
        if wait > 0:
            select.select([sock], [], [], wait)
            continue
        last = time.perf_counter()
        ck = trainer.iterate()
        if ck is not None:
            send_message(sock, CheckpointPublish.of(ck))
        else:
            select.select([sock], [], [], 0.1)


def launch_tcp_cluster(checkpoint: Checkpoint, workers: int, game_id: str, opening: tuple,
                       trainer_cfg=None, worker_cfg: WorkerConfig | None = None, host: str = "127.0.0.1",
                       port: int = 0, die_after_jobs: dict | None = None,
                       trainer_interval: float = 0.0) -> TcpTransport:
    """Start a hub plus worker (and optionally trainer) processes and wait
    for them to connect.  ``die_after_jobs`` maps worker id to a crash point."""
    hub = TcpTransport(checkpoint, host, port)
    h, p = hub.address
    ctx = multiprocessing.get_context("spawn")
    die_after_jobs = die_after_jobs or {}
    for wid in range(workers):
        proc = ctx.Process(target=worker_main, args=(h, p, wid, worker_cfg, die_after_jobs.get(wid)), daemon=True)
        proc.start()
        hub.processes.append(proc)
    if trainer_cfg is not None:
        proc = ctx.Process(target=trainer_main, args=(h, p, game_id, tuple(opening), trainer_cfg, trainer_interval),
                           daemon=True)
        proc.start()
        hub.processes.append(proc)
    try:
        hub.wait_for_workers(workers)
        if trainer_cfg is not None:
            hub.wait_for_trainer()
    except TimeoutError:
        hub.close()
        raise
    hub.reset_clock()
    return hub
