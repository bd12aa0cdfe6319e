import math
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from oftsolve.games import Outcome
from oftsolve.manager import CriticalPosition, SolvedPosition
from oftsolve.network import SELFPLAY, SOLVED, Checkpoint, Network, evaluate
from oftsolve.trainer import (OnlineTrainer, PositionQueue, ReplayBuffer, TrainerConfig, cost_targets,
                              pretrain, pretrain_metrics_csv, self_play, trainer_metrics_csv)

V = 24.0


def test_cost_targets_won_line():
    # OR, AND(b=3), OR, terminal
    t = cost_targets([True, False, True], [5, 3, 2], Outcome.WIN, V)
    assert t[2] == pytest.approx(1.0)
    assert t[1] == pytest.approx(math.log2(1 + 3 * 2))
    assert t[0] == pytest.approx(math.log2(1 + 7))


def test_cost_targets_lost_line():
    assert cost_targets([True, False, True, False], [4, 3, 2, 1], Outcome.LOSS, V) == [V, None, V, None]


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 30)), min_size=1, max_size=30))
def test_cost_targets_bounded_and_monotone(line):
    flags = [f for f, _ in line]
    b = [x for _, x in line]
    t = cost_targets(flags, b, Outcome.WIN, V)
    assert all(0.0 < x <= V for x in t)
    assert all(x >= y - 1e-12 for x, y in zip(t, t[1:]))


def test_queue_fifo_and_capacity():
    q = PositionQueue(3)
    for i in range(5):
        q.push(i)
        assert len(q) <= 3
    assert q.items() == [2, 3, 4]
    assert q.arrivals == 5 and q.evictions == 2
    assert 4 in q and 0 not in q


def test_replay_keeps_recent_games():
    r = ReplayBuffer(2)
    for g in range(4):
        r.add_game([g] * (g + 1))
    assert r.games == 2 and len(r) == 3 + 4
    rng = random.Random(0)
    assert {r.sample(rng) for _ in range(200)} == {2, 3}


def _trainer(game, **cfg):
    theta0 = Checkpoint(0, Network.for_game(game, seed=0))
    base = dict(simulations=4, oft_games=2, oft_steps=2, oft_batch_size=16, seed=0)
    base.update(cfg)
    return OnlineTrainer(theta0, game.initial(), TrainerConfig(**base))


def test_solved_share_is_ten_percent(hex3):
    t = _trainer(hex3, use_solved=True)
    t.replay.add_game(self_play(t.net, hex3.initial(), random.Random(0), t.cfg)[0])
    for m in range(9):
        t.ingest(SolvedPosition(hex3.replay([m])))
    rng = random.Random(11)
    n = 20_000
    rows = t.draw_rows(n, rng)
    solved = sum(r.source == SOLVED for r in rows)
    assert abs(solved / n - 0.10) <= 0.01
    assert chisquare([solved, n - solved], [0.1 * n, 0.9 * n]).pvalue > 0.01
    assert all(r.cost == 0.0 and r.policy is None for r in rows if r.source == SOLVED)
    assert t.draws[SOLVED] == solved and t.draws[SELFPLAY] == n - solved


def test_losses_only_with_option(hex3):
    t = _trainer(hex3)
    t.ingest(SolvedPosition(hex3.replay([0]), Outcome.LOSS))
    assert len(t.solved) == 0
    t = _trainer(hex3, ingest_losses=True, use_solved=True)
    t.ingest(SolvedPosition(hex3.replay([0]), Outcome.LOSS))
    rows = t.draw_rows(5, random.Random(0))
    assert all(r.cost == V for r in rows)


def test_queue_capacities_hold(hex3):
    t = _trainer(hex3, queue_capacity=7)
    for i in range(30):
        t.ingest(SolvedPosition(hex3.replay([i % 9])))
        t.ingest(CriticalPosition(hex3.replay([i % 9, (i + 1) % 9])))
        assert len(t.solved) <= 7 and len(t.critical) <= 7


def test_start_positions_come_from_critical_queue(hex3):
    t = _trainer(hex3, use_critical=True)
    assert t.start_position() == hex3.initial()
    crit = [hex3.replay([4, m]) for m in (0, 1, 2)]
    for c in crit:
        t.ingest(CriticalPosition(c))
    for _ in range(50):
        assert t.start_position() in t.critical
    t = _trainer(hex3, use_critical=False)
    t.ingest(CriticalPosition(crit[0]))
    assert t.start_position() == hex3.initial()


def test_versions_increase_without_gaps(hex3):
    t = _trainer(hex3, use_critical=True, use_solved=True)
    t.ingest(SolvedPosition(hex3.replay([4])))
    t.ingest(CriticalPosition(hex3.replay([4, 0])))
    versions = [t.iterate().version for _ in range(4)]
    assert versions == [1, 2, 3, 4]
    assert [r.iteration for r in t.records] == [0, 1, 2, 3]
    csv_text = trainer_metrics_csv(t.records)
    assert csv_text.splitlines()[0] == "iteration,loss,solved_queue,critical_queue,mean_critical_length"
    assert len(csv_text.splitlines()) == 5


def test_idle_trainer_publishes_nothing(hex3):
    theta0 = Checkpoint(0, Network.for_game(hex3))
    terminal = hex3.replay([0, 1, 3, 2, 6])
    assert terminal.outcome is not None
    t = OnlineTrainer(theta0, terminal, TrainerConfig(oft_games=2))
    assert t.iterate() is None and t.version == 0 and not t.records


def test_self_play_samples(hex3):
    cfg = TrainerConfig(simulations=8, seed=1)
    net = Network.for_game(hex3, seed=1)
    samples, outcome = self_play(net, hex3.initial(), random.Random(1), cfg)
    assert outcome in (Outcome.WIN, Outcome.LOSS)
    for s in samples:
        assert s.policy is not None and abs(s.policy.sum() - 1) < 1e-9
        assert s.source == SELFPLAY


def test_pretrain_prefers_winning_opening(hex3, oracle):
    cfg = TrainerConfig(seed=0, lr=0.5)
    ckpt, records = pretrain(hex3, 1000, cfg)
    assert ckpt.version == 0 and ckpt.samples == 1000 and len(records) == 2
    p, _ = evaluate(ckpt.net, hex3.initial())
    wins = oracle.winning_moves(hex3.initial())
    assert max(p[m] for m in wins) > 1 / 9
    assert pretrain_metrics_csv(records).startswith("round,games,loss,seconds\n")


def test_pretrain_is_deterministic(ttt):
    cfg = TrainerConfig(seed=3, games_per_round=20, steps_per_round=5, simulations=4)
    a, _ = pretrain(ttt, 40, cfg)
    b, _ = pretrain(ttt, 40, cfg)
    assert np.array_equal(a.net.theta, b.net.theta)
