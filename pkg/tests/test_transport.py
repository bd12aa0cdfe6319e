import random
import socket
import struct

import pytest
from hypothesis import given

from oftsolve.errors import FramingError, ProtocolError
from oftsolve.games import Outcome, get_game
from oftsolve.harness import SolveConfig, solve
from oftsolve.jobs import Job, JobResult, JobStatus
from oftsolve.network import Checkpoint, Network, checkpoint_from_bytes
from oftsolve.transport import (HEADER, MAX_PAYLOAD, ROLE_TRAINER, ChaosConfig, CheckpointPublish,
                                CriticalPos, Frame, FrameReader, MsgType, Shutdown, SimTransport,
                                SolvedPos, WorkerHello, _Conn, decode_frame, decode_message,
                                encode_frame, encode_message)
from oftsolve.worker import Worker

from test_games import playouts


def round_trip(msg):
    data = encode_frame(encode_message(msg))
    frame, end = decode_frame(data)
    assert end == len(data)
    return decode_message(frame), data


def test_shutdown_frame_is_six_bytes():
    _, data = round_trip(Shutdown())
    assert data == struct.pack(">IBB", 2, 7, 1)


def test_job_assign_ttt_round_trip(ttt):
    job = Job(42, ttt.replay([4, 0, 8, 2, 6]), 100_000, 3)
    back, data = round_trip(job)
    assert back == job and back.position.history == (4, 0, 8, 2, 6)
    length, mtype, version = HEADER.unpack_from(data)
    assert length == len(data) - 4 and mtype == 1 and version == 1


def test_every_kind_round_trips(hex3, ttt):
    net = Network.for_game(ttt, seed=3)
    proof_worker = Worker(0, Checkpoint(0, net))
    win = proof_worker.solve_job(Job(5, ttt.replay([0, 1, 4, 8]), 10_000, 0))
    assert win.proof is not None
    msgs = [
        Job(1, hex3.replay([4]), 77, 2),
        win,
        JobResult(9, JobStatus.ERROR, 0, 0.0, 1, 2, None, "bad position"),
        JobResult(10, JobStatus.UNKNOWN, 100, 0.25, 4, 1),
        CheckpointPublish.of(Checkpoint(7, net)),
        SolvedPos(hex3.replay([4, 0, 1]), Outcome.WIN),
        SolvedPos(hex3.replay([4]), Outcome.LOSS),
        CriticalPos(hex3.replay([1, 2])),
        WorkerHello(3, ROLE_TRAINER, 11, 1.5, 2.5, 6),
        Shutdown(),
    ]
    for m in msgs:
        back, _ = round_trip(m)
        if isinstance(m, JobResult):
            assert (back.job_id, back.status, back.nodes, back.wall_time, back.checkpoint_version,
                    back.worker_id, back.error) == (m.job_id, m.status, m.nodes, m.wall_time,
                                                    m.checkpoint_version, m.worker_id, m.error)
            assert back.proof == m.proof
        else:
            assert back == m
    ck = checkpoint_from_bytes(round_trip(msgs[4])[0].blob)
    assert ck.version == 7 and (ck.net.theta == net.theta).all()


@given(playouts())
def test_position_messages_round_trip(s):
    assert round_trip(CriticalPos(s))[0] == CriticalPos(s)
    if s.outcome is None:
        assert round_trip(Job(1, s, 5, 0))[0].position == s


def test_truncation_reports_offset():
    data = encode_frame(Frame(MsgType.CRITICAL_POS, b"\x00\x00\x00"))
    with pytest.raises(FramingError) as e:
        decode_frame(data[:-1])
    assert e.value.offset == len(data) - 1
    with pytest.raises(FramingError) as e:
        decode_frame(data[:3])
    assert e.value.offset == 3
    two = data + data
    frame, end = decode_frame(two, len(data))
    assert end == len(two)


def test_oversize_rejected_before_buffering():
    header = HEADER.pack(MAX_PAYLOAD + 3, 1, 1)
    reader = FrameReader()
    with pytest.raises(FramingError):
        reader.feed(header)
    with pytest.raises(FramingError):
        encode_frame(Frame(MsgType.JOB_ASSIGN, bytes(MAX_PAYLOAD + 1)))


def test_unknown_type_and_version():
    with pytest.raises(ProtocolError):
        decode_frame(HEADER.pack(2, 9, 1))
    with pytest.raises(ProtocolError):
        decode_frame(HEADER.pack(2, 7, 2))


def test_reader_handles_split_stream(ttt):
    frames = [encode_frame(encode_message(Job(i, ttt.replay([i]), 10, 0))) for i in range(5)]
    stream = b"".join(frames)
    reader = FrameReader()
    got = []
    rng = random.Random(0)
    i = 0
    while i < len(stream):
        n = rng.randint(1, 9)
        got += reader.feed(stream[i:i + n])
        i += n
    assert [decode_message(f).job_id for f in got] == list(range(5))
    assert reader.buffered == 0


def test_decoder_fuzz():
    rng = random.Random(12345)
    valid = [encode_frame(encode_message(m)) for m in
             (Shutdown(), WorkerHello(1), CriticalPos(get_game("ttt").replay([1, 2])))]
    ok = errors = 0
    for i in range(100_000):
        if i % 3 == 0:
            base = bytearray(rng.choice(valid))
            for _ in range(rng.randint(1, 3)):
                base[rng.randrange(len(base))] = rng.randrange(256)
            data = bytes(base[: rng.randint(0, len(base))])
        else:
            data = rng.randbytes(rng.randint(0, 24))
        try:
            frame, _ = decode_frame(data)
            decode_message(frame)
            ok += 1
        except (FramingError, ProtocolError):
            errors += 1
    assert ok + errors == 100_000 and errors > 0


def test_checkpoint_last_value_wins():
    a, b = socket.socketpair()
    conn = _Conn(1, a, hub=None)
    net = Network.for_game(get_game("ttt"))
    for v in (5, 7):
        conn.offer_checkpoint(encode_frame(encode_message(Checkpoint(v, net))))
    conn.writer.start()
    reader = FrameReader()
    frames = []
    b.settimeout(5)
    while not frames:
        frames += reader.feed(b.recv(1 << 16))
    conn.close()
    b.settimeout(0.5)
    try:
        while True:
            chunk = b.recv(1 << 16)
            if not chunk:
                break
            frames += reader.feed(chunk)
    except socket.timeout:
        pass
    b.close()
    assert [decode_message(f).version for f in frames] == [7]


def _sim_run(seed, chaos):
    return solve(SolveConfig(game="hex-3", workers=3, seed=seed, v_thr=12.0, budget=200, chaos=chaos))


def test_sim_is_deterministic():
    a = _sim_run(2, ChaosConfig(latency=0.01, seed=2))
    b = _sim_run(2, ChaosConfig(latency=0.01, seed=2))
    assert a.stats.row() == b.stats.row()


@pytest.mark.parametrize("seed", range(3))
def test_sim_chaos_keeps_outcome(seed, oracle):
    chaos = ChaosConfig(latency=0.02, duplicate_prob=0.3, kill_prob=0.3, seed=seed)
    r = _sim_run(seed, chaos)
    assert r.outcome is Outcome.WIN and r.verify.ok
    assert r.faults["kills"] + r.faults["duplicates"] > 0


def test_sim_duplicates_and_kills_happen():
    game = get_game("hex-3")
    ckpt = Checkpoint(0, Network.for_game(game))
    transport = SimTransport(ckpt, 2, chaos=ChaosConfig(duplicate_prob=1.0, kill_prob=0.0))
    transport.submit(Job(1, game.replay([4]), 50, 0))
    results = []
    while transport.in_flight or not results:
        results += transport.wait()
    results += transport.wait()
    assert [r.job_id for r in results] == [1, 1] and transport.duplicates == 1
    transport = SimTransport(ckpt, 1, chaos=ChaosConfig(kill_prob=0.5, seed=1))
    for j in range(6):
        transport.submit(Job(j, game.replay([j]), 50, 0))
    got = []
    while transport.in_flight:
        got += transport.wait()
    assert sorted(r.job_id for r in got) == list(range(6)) and transport.kills > 0


def test_tcp_matches_inproc_with_worker_kill():
    base = dict(game="hex-3", workers=2, seed=1, v_thr=12.0, budget=300)
    inproc = solve(SolveConfig(**base))
    tcp = solve(SolveConfig(transport="tcp", die_after_jobs={0: 2}, time_limit=240, **base))
    assert inproc.outcome is tcp.outcome is Outcome.WIN
    assert tcp.verify.ok and inproc.verify.ok
    assert tcp.faults["disconnects"] >= 1
