"""Acceptance criteria 1 to 12.  Each test is tagged with its criterion;
the terminal summary prints one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``.  The heuristic
quality and online trend checks pretrain networks and take most of the
time (about 10 and 12 minutes on one core).
"""

import copy
import math
import os
import random
import statistics
import subprocess
import sys
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from oftsolve.errors import FramingError, ProtocolError
from oftsolve.games import OR, Outcome, get_game
from oftsolve.harness import MODES, SolveConfig, ablation, compare, solve, worker_sweep
from oftsolve.manager import (CriticalPosition, JobDispatch, Manager, ManagerConfig, SolvedPosition,
                              audit_event_log)
from oftsolve.network import SOLVED, Checkpoint, Network, evaluate_batch, loss, loss_and_grad, sgd_step
from oftsolve.oracle import cost_rank_correlation
from oftsolve.trainer import OnlineTrainer, PositionQueue, TrainerConfig, pretrain, self_play
from oftsolve.transport import (ChaosConfig, CriticalPos, Shutdown, WorkerHello, decode_frame, decode_message,
                                encode_frame, encode_message)
from oftsolve.tree import PROVEN, UNSOLVED, VIRTUAL_WIN, Violation, iter_nodes, verify_solution
from oftsolve.worker import Worker

from test_network import random_batch, random_positions

# the untrained network's cost head sits near 12, so this threshold splits
# leaves between dispatch and in-manager expansion
V_THR = 12.0
SEEDS = (0, 1, 2)
# pretraining recipe reaching the heuristic-quality bar in the time budget
PRETRAIN = dict(lr=1.0, batch_size=1024, steps_per_round=500, games_per_round=500, replay_games=100_000)
HEX3_GAMES = 20_000
HEX4_WEAK_GAMES = 2_000
HEX4_OPENINGS = ((3,), (6,), (9,), (12,))  # d1 c2 b3 a4: the winning first moves


def detail(record_property, text):
    record_property("detail", text)


def criterion1_instances():
    out = [("ttt", ())] + [("ttt", (m,)) for m in range(9)]
    out += [("hex-2", ()), ("hex-3", ())] + [("hex-3", (m,)) for m in range(9)]
    return out


@pytest.fixture(scope="module")
def c1_runs(oracle):
    """(game, opening, mode, seed, report, expected) for every run of criterion 1."""
    t0 = time.perf_counter()
    runs = []
    for gid, opening in criterion1_instances():
        expected = oracle.solve(get_game(gid).replay(opening))
        for mode in MODES:
            for seed in SEEDS:
                cfg = SolveConfig(game=gid, opening=opening, mode=mode, workers=2, seed=seed, v_thr=V_THR,
                                  drain=True)
                runs.append((gid, opening, mode, seed, solve(cfg), expected))
    return runs, time.perf_counter() - t0


@pytest.mark.criterion(1, "oracle soundness")
def test_c01_oracle_soundness(c1_runs, record_property):
    runs, elapsed = c1_runs
    wrong = [(g, o, m, s, r.outcome_name, e.name) for g, o, m, s, r, e in runs if r.outcome is not e]
    jobs = sum(r.stats.jobs for *_, r, _ in runs)
    detail(record_property, f"{len(runs) - len(wrong)}/{len(runs)} runs agree, {jobs} jobs, {elapsed:.0f}s")
    assert not wrong, wrong[:5]
    assert elapsed <= 15 * 60


def _expected_swap_violation(state, node):
    """First violation the verifier must report once an OR node's move is
    replaced and its old subtree kept: the check fails at that child."""
    s = state.apply(node.move)
    if s.outcome is not None:
        return Violation.TERMINAL_INTERIOR if node.children else Violation.LOSS_LEAF
    if not node.children:
        return Violation.NON_TERMINAL_LEAF
    if any(ch.move == node.move for ch in node.children):
        return Violation.ILLEGAL_MOVE
    return Violation.MISSING_REPLY


def _sites(tree):
    """(node, position, path of nodes from the root) in pre-order."""
    out = []
    stack = [(tree.root, tree.root_state, ())]
    while stack:
        node, s, path = stack.pop()
        out.append((node, s, path))
        for ch in reversed(node.children):
            stack.append((ch, s.apply(ch.move), path + (ch,)))
    return out


def _locate(tree, path_moves):
    node = tree.root
    for m in path_moves:
        node = next(ch for ch in node.children if ch.move == m)
    return node


def mutation_suite(tree, oracle, rng, per_kind=8):
    """Apply each mutation kind at up to ``per_kind`` sites; returns
    (checked, list of mismatches)."""
    sites = _sites(tree)
    checked, bad = 0, []
    # remove an AND reply
    and_sites = [(n, s, p) for n, s, p in sites if s.outcome is None and s.to_move != OR and n.children]
    for n, s, p in rng.sample(and_sites, min(per_kind, len(and_sites))):
        t = tree.copy()
        target = _locate(t, [x.move for x in p])
        target.children.pop(rng.randrange(len(target.children)))
        checked += 1
        got = verify_solution(t).violation
        if got is not Violation.MISSING_REPLY:
            bad.append(("remove", [x.move for x in p], got))
    # swap an OR choice to a losing move
    or_sites = [(n, s, p) for n, s, p in sites if s.outcome is None and s.to_move == OR]
    rng.shuffle(or_sites)
    done = 0
    for n, s, p in or_sites:
        losing = [m for m in s.legal_moves() if oracle.solve(s.apply(m)) is Outcome.LOSS]
        if not losing:
            continue
        t = tree.copy()
        target = _locate(t, [x.move for x in p])
        target.children[0].move = rng.choice(losing)
        want = _expected_swap_violation(s, target.children[0])
        got = verify_solution(t).violation
        checked += 1
        if got is not want:
            bad.append(("swap", [x.move for x in p], got, want))
        done += 1
        if done == per_kind:
            break
    # relabel a winning leaf to a move that does not end the game
    leaves = [(n, s, p) for n, s, p in sites if s.outcome is not None and p]
    rng.shuffle(leaves)
    done = 0
    for n, s, p in leaves:
        parent_state = tree.root_state.game.replay(s.history[:-1])
        alts = [m for m in parent_state.legal_moves() if m != n.move and parent_state.apply(m).outcome is None]
        if not alts:
            continue
        t = tree.copy()
        _locate(t, [x.move for x in p]).move = rng.choice(alts)
        got = verify_solution(t).violation
        checked += 1
        if got is not Violation.NON_TERMINAL_LEAF:
            bad.append(("relabel", [x.move for x in p], got))
        done += 1
        if done == per_kind:
            break
    return checked, bad


@pytest.mark.criterion(2, "solution-tree verification")
def test_c02_solution_trees(c1_runs, oracle, record_property):
    runs, _ = c1_runs
    wins = [(g, o, r) for g, o, m, s, r, e in runs if r.outcome is Outcome.WIN]
    assert wins
    rejected = [(g, o) for g, o, r in wins if not verify_solution(r.solution, g).ok]
    rng = random.Random(2)
    checked, bad = 0, []
    for g, o, r in wins:
        c, b = mutation_suite(r.solution, oracle, rng)
        checked += c
        bad += b
    detail(record_property, f"{len(wins) - len(rejected)}/{len(wins)} trees accepted, "
                            f"{checked - len(bad)}/{checked} mutations rejected with the expected class")
    assert not rejected and not bad, (rejected[:3], bad[:3])
    assert checked >= 3 * len(wins)


def _proven(manager):
    return {n.state.key: n.status for n in iter_nodes(manager.root) if n.status in PROVEN}


def _fixed_job_set(game, seed):
    """A manager stopped with several live jobs, and the worker results."""
    net = Network.for_game(game)
    net.theta[:] = 0.0
    net.params[-1][0] = math.log(2.0 / 22.0)  # constant cost 2: every AND leaf is dispatched
    m = Manager(game.initial(), Checkpoint(0, net), ManagerConfig(v_thr=V_THR, seed=seed))
    jobs = []
    for _ in range(200):
        if m.root.status is not UNSOLVED:
            break
        jobs += [e.job for e in m.step() if isinstance(e, JobDispatch)]
    rng = random.Random(seed)
    w = Worker(0, Checkpoint(0, Network.for_game(game, seed=seed)))
    results = []
    for j in jobs:
        j.budget = rng.choice([2, 50, 5000])
        results.append(w.solve_job(j))
    return m, results


@pytest.mark.criterion(3, "virtual-solving order independence")
def test_c03_order_independence(oracle, record_property):
    game = get_game("hex-3")
    sync = solve(SolveConfig(game="hex-3", workers=1, max_in_flight=1, seed=0, v_thr=V_THR, drain=True))
    sync_proven = _proven(sync.manager)
    problems = []
    for seed in range(50):
        chaos = ChaosConfig(latency=0.05, seed=seed)
        rep = solve(SolveConfig(game="hex-3", workers=3, seed=seed, v_thr=V_THR, drain=True, chaos=chaos))
        proven = _proven(rep.manager)
        if rep.outcome is not sync.outcome:
            problems.append((seed, "outcome", rep.outcome_name))
        if any(n.status is VIRTUAL_WIN for n in iter_nodes(rep.manager.root)):
            problems.append((seed, "virtual win at quiescence"))
        clash = [k for k in proven.keys() & sync_proven.keys() if proven[k] is not sync_proven[k]]
        if clash:
            problems.append((seed, "status differs", len(clash)))
    # the same results in 50 delivery orders give identical proven sets
    exact = 0
    for seed in range(50):
        m, results = _fixed_job_set(game, seed)
        in_order = copy.deepcopy(m)
        for r in results:
            in_order.integrate_result(r)
        ref = _proven(in_order)
        order = results[:]
        random.Random(1000 + seed).shuffle(order)
        mm = copy.deepcopy(m)
        for r in order:
            mm.integrate_result(r)
        if _proven(mm) != ref:
            problems.append((seed, "permuted delivery changed proven set"))
        elif not mm.live_jobs and any(n.status is VIRTUAL_WIN for n in iter_nodes(mm.root)):
            problems.append((seed, "virtual win after all results"))
        else:
            exact += 1
    detail(record_property, "50/50 latency runs consistent with the synchronous run" if not problems else
           f"{len(problems)} problems")
    record_property("detail", f"{exact}/50 permuted deliveries identical")
    assert not problems, problems[:5]


@pytest.mark.criterion(4, "job-gating audit")
def test_c04_gating_audit(c1_runs, record_property):
    runs, _ = c1_runs
    events = dispatches = 0
    problems = []
    for g, o, m, s, r, e in runs:
        log = r.manager.event_log
        events += len(log)
        dispatches += sum(1 for rec in log if rec.get("event") == "dispatch")
        problems += audit_event_log(log, V_THR)
    detail(record_property, f"{events} events, {dispatches} dispatches, {len(problems)} violations")
    assert dispatches > 0 and not problems, problems[:5]


@pytest.mark.criterion(5, "trainer statistics")
def test_c05_trainer_statistics(hex3, record_property):
    theta0 = Checkpoint(0, Network.for_game(hex3, seed=0))
    cfg = TrainerConfig(simulations=4, oft_games=2, oft_steps=2, oft_batch_size=16, seed=0, use_solved=True,
                        use_critical=True, queue_capacity=12)
    t = OnlineTrainer(theta0, hex3.initial(), cfg)
    t.replay.add_game(self_play(t.net, hex3.initial(), random.Random(0), cfg)[0])
    rng = random.Random(5)
    versions = []
    for i in range(40):
        t.ingest(SolvedPosition(hex3.replay([i % 9])))
        t.ingest(CriticalPosition(hex3.replay([i % 9, (i + 4) % 9])))
        assert len(t.solved) <= 12 and len(t.critical) <= 12
        if i % 8 == 7:
            versions.append(t.iterate().version)
    n = 20_000
    rows = t.draw_rows(n, rng)
    solved = sum(r.source == SOLVED for r in rows)
    p = chisquare([solved, n - solved], [0.1 * n, 0.9 * n]).pvalue
    q = PositionQueue(3)
    for i in range(7):
        q.push(i)
    fifo = q.items() == [4, 5, 6] and q.evictions == 4
    # an online run end to end
    rep = solve(SolveConfig(game="hex-3", mode="online-sp+cp", workers=2, v_thr=V_THR, trainer_interval=0.05))
    run_versions = rep.checkpoints
    detail(record_property, f"solved share {solved / n:.4f} over {n} draws (chi2 p={p:.3f}), "
                            f"versions {versions}, online run published {run_versions}")
    assert abs(solved / n - 0.10) <= 0.01 and p > 0.01
    assert fifo
    assert versions == sorted(set(versions)) and versions[0] == 1
    assert all(b > a for a, b in zip(run_versions, run_versions[1:]))
    assert all(r.solved_queue <= cfg.queue_capacity and r.critical_queue <= cfg.queue_capacity
               for r in rep.trainer_records)


@pytest.mark.criterion(6, "cost-model numerics")
def test_c06_numerics(record_property):
    worst = 0.0
    game = get_game("ttt")
    for seed in range(3):
        net = Network.for_game(game, hidden=(16, 12), seed=seed)
        rng = np.random.default_rng(seed)
        batch = random_batch(game, 24, rng, solved_rows=4)
        _, grad = loss_and_grad(net, batch)
        offsets = np.cumsum([0] + [math.prod(s) for s in net.shapes])
        probes = [int(rng.integers(offsets[i], offsets[i + 1])) for i in range(len(net.shapes)) for _ in range(4)]
        for j in probes:
            old = net.theta[j]
            net.theta[j] = old + 1e-6
            up = loss(batch, net)
            net.theta[j] = old - 1e-6
            down = loss(batch, net)
            net.theta[j] = old
            fd = (up - down) / 2e-6
            if abs(fd - grad[j]) > 1e-10:
                worst = max(worst, abs(fd - grad[j]) / max(abs(fd), abs(grad[j])))
    hex3 = get_game("hex-3")
    states = random_positions(hex3, 100, np.random.default_rng(1))
    in_range = True
    for scale in (1e3, -1e3, 1e8):
        net = Network.for_game(hex3)
        net.theta[:] = scale * np.sign(np.random.default_rng(2).normal(size=net.n_params))
        _, v = evaluate_batch(net, states)
        in_range &= bool(np.all(np.isfinite(v)) and np.all((v >= 0) & (v <= net.v_max)))
    net = Network.for_game(hex3, seed=0)
    batch = random_batch(hex3, 512, np.random.default_rng(3))
    losses = [sgd_step(net, batch, lr=0.05) for _ in range(200)]
    means = [float(np.mean(losses[i: i + 10])) for i in range(0, 200, 10)]
    monotone = all(b < a for a, b in zip(means, means[1:]))
    detail(record_property, f"max relative gradient error {worst:.2e}, cost head in range {in_range}, "
                            f"10-step mean loss {means[0]:.3f} -> {means[-1]:.3f}")
    assert worst < 1e-4 and in_range and monotone


@pytest.mark.criterion(7, "heuristic quality")
def test_c07_heuristic_quality(hex3, oracle, record_property):
    t0 = time.perf_counter()
    ck, _ = pretrain(hex3, HEX3_GAMES, TrainerConfig(seed=0, **PRETRAIN))
    elapsed = time.perf_counter() - t0
    rho, n = cost_rank_correlation(ck.net, hex3.initial(), oracle)
    detail(record_property, f"Spearman rho {rho:.3f} over {n} won positions after {HEX3_GAMES} games "
                            f"in {elapsed:.0f}s")
    assert rho >= 0.5 and elapsed <= 20 * 60


@pytest.fixture(scope="module")
def hex4_theta0():
    """Deliberately weak: one tenth of the hex-3 pretraining games."""
    ck, _ = pretrain(get_game("hex-4"), HEX4_WEAK_GAMES, TrainerConfig(seed=0, **PRETRAIN))
    return Checkpoint(0, ck.net, ck.train_step, ck.samples)


@pytest.mark.criterion(8, "online-cp trend on hex-4")
def test_c08_online_trend(hex4_theta0, record_property, tmp_path):
    t0 = time.perf_counter()
    base = SolveConfig(game="hex-4", workers=2, time_limit=1800)
    res = compare(base, HEX4_OPENINGS, ["baseline", "online-cp"], SEEDS, hex4_theta0)
    elapsed = time.perf_counter() - t0
    table = res.table_csv()
    (tmp_path / "compare.csv").write_text(table)
    better, n = res.online_wins("online-cp")
    outcomes = {rep.outcome for *_, rep in res.runs}
    kinds = [line.split(",")[0] for line in table.splitlines()[1:]]
    medians = ", ".join(f"{op}: {res.medians[(op, 'baseline')][0]:.0f} vs {res.medians[(op, 'online-cp')][0]:.0f}"
                        for op in dict.fromkeys(r[0] for r in res.runs))
    detail(record_property, f"online-cp below baseline median nodes on {better}/{n} openings ({medians}); "
                            f"node ratio geomean {res.geomeans['online-cp'][0]:.3f}; {elapsed:.0f}s")
    assert outcomes == {Outcome.WIN}
    assert {"run", "median", "geomean"} <= set(kinds)
    assert n >= 4 and 2 * better >= n
    assert elapsed <= 2 * 3600


@pytest.mark.criterion(9, "ablation harness")
def test_c09_ablation(oracle, record_property):
    base = SolveConfig(workers=2, v_thr=V_THR)
    instances = criterion1_instances()
    table, outcomes = ablation(base, instances, None, oracle)
    expected = [oracle.solve(get_game(g).replay(o)) for g, o in instances]
    lines = table.strip().splitlines()
    agree = {cfg: sum(a is b for a, b in zip(got, expected)) for cfg, got in outcomes.items()}
    detail(record_property, "; ".join(f"top_k={int(a)} and_assign={int(b)}: {v}/{len(instances)}"
                                      for (a, b), v in agree.items()))
    assert len(lines) == 5 and lines[0].startswith("top_k,and_assignment")
    assert all(v == len(instances) for v in agree.values())


def _monotone(times):
    return all(b <= a for a, b in zip(times, times[1:]))


@pytest.mark.criterion(10, "worker scaling")
def test_c10_worker_sweep(hex4_theta0, record_property):
    base = SolveConfig(game="hex-4", opening=(6,))
    table, reports = worker_sweep(base, [1, 2, 4], SEEDS, hex4_theta0)
    header = table.splitlines()[0].split(",")
    medians = [statistics.median(r.stats.time_s for r in reports[n]) for n in (1, 2, 4)]
    speed = [float(line.split(",")[3]) for line in table.splitlines()[1:]]
    detail(record_property, "simulated-cluster median time " + " -> ".join(f"{t:.2f}s" for t in medians)
           + f" (1/2/4 workers, speedup {speed[1]:.2f}x at 2)")
    assert "speedup" in header and "avg_worker_loading_pct" in header
    assert all(r.outcome is Outcome.WIN for rs in reports.values() for r in rs)
    assert _monotone(medians)


@pytest.mark.criterion(10, "worker scaling over TCP, real processes")
def test_c10_worker_sweep_tcp(hex4_theta0, record_property):
    base = SolveConfig(game="hex-4", opening=(6,), transport="tcp", time_limit=600)
    _, reports = worker_sweep(base, [1, 2, 4], SEEDS, hex4_theta0)
    medians = [statistics.median(r.stats.time_s for r in reports[n]) for n in (1, 2, 4)]
    cpus = os.cpu_count() or 1
    detail(record_property, "wall-clock median " + " -> ".join(f"{t:.2f}s" for t in medians) + f" on {cpus} CPU(s)")
    assert all(r.outcome is Outcome.WIN for rs in reports.values() for r in rs)
    if cpus < 4:
        pytest.skip("monotone wall time needs at least 4 CPUs; reported only")
    assert _monotone(medians)


def _cli_stats_row(tmp_path, name, extra, hash_seed):
    stats = tmp_path / f"{name}.csv"
    env = dict(os.environ, PYTHONHASHSEED=str(hash_seed))
    cmd = [sys.executable, "-m", "oftsolve.cli", "solve", "--workers", "1", "--transport", "inproc", "--seed", "7",
           "--stats", str(stats), *extra]
    proc = subprocess.run(cmd, capture_output=True, env=env, timeout=600)
    assert proc.returncode in (0, 1, 2), proc.stderr
    return stats.read_bytes().splitlines()[1]


@pytest.mark.criterion(11, "determinism")
def test_c11_determinism(tmp_path, record_property):
    pairs = []
    for i, extra in enumerate((["--game", "hex-3", "--vthr", "12"],
                               ["--game", "hex-3", "--vthr", "12", "--mode", "online-sp+cp",
                                "--trainer-interval", "0.05"],
                               ["--game", "ttt", "--opening", "4", "--vthr", "12"])):
        a = _cli_stats_row(tmp_path, f"a{i}", extra, 1)
        b = _cli_stats_row(tmp_path, f"b{i}", extra, 2)
        pairs.append((a, b))
    same = sum(a == b for a, b in pairs)
    detail(record_property, f"{same}/{len(pairs)} stats rows byte-identical across processes")
    assert same == len(pairs), pairs


@pytest.mark.criterion(12, "protocol robustness")
def test_c12_protocol_robustness(oracle, record_property):
    rng = random.Random(2024)
    valid = [encode_frame(encode_message(m)) for m in
             (Shutdown(), WorkerHello(1), CriticalPos(get_game("hex-3").replay([1, 2])))]
    rejected = 0
    for i in range(100_000):
        if i % 2:
            data = bytearray(rng.choice(valid))
            for _ in range(rng.randint(1, 4)):
                data[rng.randrange(len(data))] = rng.randrange(256)
            data = bytes(data[: rng.randint(0, len(data))])
        else:
            data = rng.randbytes(rng.randint(0, 32))
        try:
            frame, _ = decode_frame(data)
            decode_message(frame)
        except (FramingError, ProtocolError):
            rejected += 1
    kills = 0
    wrong = []
    hex3 = get_game("hex-3")
    for seed in range(10):
        chaos = ChaosConfig(latency=0.05, duplicate_prob=0.2, kill_prob=0.3, seed=seed)
        rep = solve(SolveConfig(game="hex-3", workers=3, seed=seed, v_thr=V_THR, drain=True, chaos=chaos))
        kills += rep.faults["kills"]
        if rep.outcome is not oracle.solve(hex3.initial()) or not rep.verify.ok:
            wrong.append(seed)
    tcp = solve(SolveConfig(game="hex-3", workers=2, seed=1, v_thr=V_THR, budget=300, transport="tcp",
                            die_after_jobs={0: 2}, time_limit=300))
    detail(record_property, f"10^5 fuzz inputs without a crash ({rejected} rejected); "
                            f"{10 - len(wrong)}/10 chaos runs correct with {kills} worker kills; "
                            f"TCP run with a dead worker: {tcp.outcome_name}")
    assert not wrong and kills > 0
    assert tcp.outcome is Outcome.WIN and tcp.verify.ok and tcp.faults["disconnects"] >= 1
