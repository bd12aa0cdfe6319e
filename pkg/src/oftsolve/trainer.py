"""Pre-training and online fine-tuning of the proof cost network.

Self-play uses a plain PUCT search where the OR player minimizes predicted
cost and the AND player maximizes it.  Cost targets are backed up along the
played line: an OR move adds one node, an AND position is charged as if all
``b`` replies cost as much as the one played.  In a game the OR player
loses, OR-to-move positions are labelled ``v_max`` and AND-to-move ones get
no cost target.

The online trainer keeps two bounded queues fed by the manager: solved
positions, mixed into training batches with cost target 0, and critical
positions, used as self-play start points.
"""

from __future__ import annotations

import collections
import logging
import math
import random
import time
from dataclasses import dataclass

import numpy as np

from .errors import TrainingDiverged
from .games import OR, GameState, Outcome, encode
from .network import (SELFPLAY, SOLVED, Checkpoint, CheckpointStore, Network, TrainingSample, evaluate,
                      make_batch, sgd_step)
from .tree import DEFAULT_C_PUCT, DEFAULT_V_MAX, SearchNode, backpropagate, expand

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    simulations: int = 32
    sample_plies: int = 4
    # AlphaZero-style exploration noise mixed into the root priors
    root_noise: float = 0.25
    dirichlet_alpha: float = 1.0
    games_per_round: int = 500
    steps_per_round: int = 200
    batch_size: int = 256
    lr: float = 0.01
    clip: float | None = 10.0
    # online fine-tuning
    oft_games: int = 8
    oft_steps: int = 20
    oft_batch_size: int = 128
    solved_fraction: float = 0.1
    queue_capacity: int = 1000
    replay_games: int = 2000
    use_solved: bool = True
    use_critical: bool = True
    ingest_losses: bool = False
    c_puct: float = DEFAULT_C_PUCT
    v_max: float = DEFAULT_V_MAX
    seed: int = 0


# --- self-play -------------------------------------------------------------

def cost_targets(or_to_move: list[bool], branching: list[int], outcome: Outcome,
                 v_max: float) -> list[float | None]:
    """Back up cost targets along one finished game line (first position
    first).  The terminal position itself has cost 0.  In a lost game only
    OR-to-move positions get a target (v_max); AND-to-move ones get None."""
    if outcome is not Outcome.WIN:
        return [v_max if o else None for o in or_to_move]
    out = [0.0] * len(or_to_move)
    child = 0.0
    for i in reversed(range(len(or_to_move))):
        mult = 1 if or_to_move[i] else branching[i]
        child = min(v_max, math.log2(1.0 + mult * 2.0 ** child))
        out[i] = child
    return out


def search_policy(net: Network, s: GameState, simulations: int, c_puct: float, v_max: float,
                  noise_rng: np.random.Generator | None = None, noise: float = 0.0,
                  alpha: float = 1.0) -> SearchNode:
    """Run a PUCT search from ``s``; returns the root with visit counts.
    With ``noise_rng``, root priors are mixed with Dirichlet(alpha) noise."""
    root = SearchNode(s)
    p, v = evaluate(net, s)
    expand(root, p)
    if noise_rng is not None and noise > 0 and len(root.children) > 1:
        eta = noise_rng.dirichlet([alpha] * len(root.children))
        for ch, e in zip(root.children, eta):
            ch.prior = (1 - noise) * ch.prior + noise * float(e)
    backpropagate([root], min(max(v, 0.0), v_max), v_max)
    for _ in range(simulations - 1):
        node = root
        path = [root]
        while node.children:
            sq = c_puct * math.sqrt(node.visits)
            best, best_score = None, -1.0
            for ch in node.children:
                n = ch.visits
                score = (ch.utility / n if n else 0.5) + sq * ch.prior / (1 + n)
                if score > best_score:
                    best, best_score = ch, score
            node = best
            path.append(node)
        st = node.state
        if st.outcome is not None:
            v = 0.0 if st.outcome is Outcome.WIN else v_max
        else:
            p, v = evaluate(net, st)
            expand(node, p)
        backpropagate(path, min(max(v, 0.0), v_max), v_max)
    return root


def self_play(net: Network, start: GameState, rng: random.Random, cfg: TrainerConfig) -> tuple[list[TrainingSample], Outcome]:
    """Play one game from ``start``; returns labelled samples and the result."""
    s = start
    feats, pis, or_flags, branching = [], [], [], []
    ply = 0
    noise_rng = np.random.default_rng(rng.getrandbits(64)) if cfg.root_noise > 0 else None
    while s.outcome is None:
        root = search_policy(net, s, cfg.simulations, cfg.c_puct, cfg.v_max, noise_rng, cfg.root_noise,
                             cfg.dirichlet_alpha)
        visits = [ch.visits for ch in root.children]
        pi = np.zeros(s.game.cells)
        total = sum(visits)
        for ch, n in zip(root.children, visits):
            pi[ch.move] = n / total
        if ply < cfg.sample_plies:
            move = root.children[_sample_index(visits, rng)].move
        else:
            move = root.children[max(range(len(visits)), key=lambda i: (visits[i], -i))].move
        feats.append(encode(s))
        pis.append(pi)
        or_flags.append(s.to_move == OR)
        branching.append(len(root.children))
        s = s.apply(move)
        ply += 1
    targets = cost_targets(or_flags, branching, s.outcome, cfg.v_max)
    return [TrainingSample(f, p, t, SELFPLAY) for f, p, t in zip(feats, pis, targets)], s.outcome


def _sample_index(weights, rng):
    r = rng.random() * sum(weights)
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if r < acc:
            return i
    return len(weights) - 1


# --- buffers ---------------------------------------------------------------

class PositionQueue:
    """Bounded FIFO keeping the most recent positions."""

    def __init__(self, capacity: int = 1000):
        self.capacity = capacity
        self._items: collections.deque = collections.deque(maxlen=capacity)
        self.arrivals = 0
        self.evictions = 0

    def push(self, item) -> None:
        if len(self._items) == self.capacity:
            self.evictions += 1
        self._items.append(item)
        self.arrivals += 1

    def sample(self, rng: random.Random):
        return self._items[rng.randrange(len(self._items))]

    def items(self) -> list:
        return list(self._items)

    def __len__(self):
        return len(self._items)

    def __contains__(self, item):
        return item in self._items


class ReplayBuffer:
    """Samples from the most recent ``max_games`` self-play games."""

    def __init__(self, max_games: int = 2000):
        self._games: collections.deque = collections.deque(maxlen=max_games)
        self._flat: list | None = None

    def add_game(self, samples: list[TrainingSample]) -> None:
        if samples:
            self._games.append(samples)
            self._flat = None

    def _all(self):
        if self._flat is None:
            self._flat = [x for g in self._games for x in g]
        return self._flat

    def sample(self, rng: random.Random) -> TrainingSample:
        flat = self._all()
        return flat[rng.randrange(len(flat))]

    @property
    def games(self) -> int:
        return len(self._games)

    def __len__(self):
        return len(self._all())


# --- pre-training ----------------------------------------------------------

@dataclass
class TrainingRecord:
    iteration: int
    loss: float
    games: int
    solved_queue: int = 0
    critical_queue: int = 0
    mean_critical_length: float = 0.0
    seconds: float = 0.0


def _optimize(net, rows_fn, steps, batch_size, cfg, rng):
    losses = []
    for _ in range(steps):
        batch = make_batch(rows_fn(batch_size, rng), cfg.v_max)
        losses.append(sgd_step(net, batch, cfg.lr, cfg.clip))
    return float(np.mean(losses)) if losses else float("nan")


def pretrain(game, games: int = 500, cfg: TrainerConfig | None = None, net: Network | None = None,
             start: GameState | None = None, on_round=None) -> tuple[Checkpoint, list[TrainingRecord]]:
    """Self-play training from ``start`` (default: the initial position).
    Returns checkpoint version 0 and one record per optimization round."""
    cfg = cfg or TrainerConfig()
    rng = random.Random(cfg.seed)
    if net is None:
        net = Network.for_game(game, v_max=cfg.v_max, seed=cfg.seed)
    start = start or game.initial()
    replay = ReplayBuffer(cfg.replay_games)
    records = []
    played = 0
    rnd = 0
    while played < games:
        t0 = time.perf_counter()
        n = min(cfg.games_per_round, games - played)
        for _ in range(n):
            samples, _ = self_play(net, start, rng, cfg)
            replay.add_game(samples)
        played += n
        if len(replay) == 0:
            continue
        value = _optimize(net, lambda b, r: [replay.sample(r) for _ in range(b)], cfg.steps_per_round,
                          cfg.batch_size, cfg, rng)
        if not math.isfinite(value):
            raise TrainingDiverged(f"pretraining loss became {value} in round {rnd}")
        records.append(TrainingRecord(rnd, value, played, seconds=time.perf_counter() - t0))
        if on_round:
            on_round(records[-1])
        rnd += 1
    return Checkpoint(0, net.copy(), rnd * cfg.steps_per_round, played), records


# --- online fine-tuning ----------------------------------------------------

class OnlineTrainer:
    """Fine-tunes a private copy of the network on positions from the live
    search and publishes a new checkpoint per productive iteration."""

    def __init__(self, theta0: Checkpoint, root: GameState, cfg: TrainerConfig | None = None):
        self.cfg = cfg or TrainerConfig()
        self.net = theta0.net.copy()
        self.root = root
        self.rng = random.Random(self.cfg.seed)
        self.solved = PositionQueue(self.cfg.queue_capacity)
        self.critical = PositionQueue(self.cfg.queue_capacity)
        self.replay = ReplayBuffer(self.cfg.replay_games)
        self.store = CheckpointStore()
        self.store.latest = theta0
        self.version = theta0.version
        self.iteration = 0
        self.records: list[TrainingRecord] = []
        self.steps_done = 0
        self.draws = collections.Counter()

    def ingest(self, event) -> None:
        from .manager import CriticalPosition, SolvedPosition

        if isinstance(event, SolvedPosition):
            if event.outcome is Outcome.WIN or self.cfg.ingest_losses:
                self.solved.push((event.position, event.outcome))
        elif isinstance(event, CriticalPosition):
            self.critical.push(event.position)

    def start_position(self) -> GameState:
        if self.cfg.use_critical and len(self.critical):
            return self.critical.sample(self.rng)
        return self.root

    def draw_rows(self, n: int, rng: random.Random) -> list[TrainingSample]:
        """Training rows: each comes from the solved queue with probability
        ``solved_fraction`` (when it has entries), else from replay."""
        use_solved = self.cfg.use_solved and len(self.solved) > 0
        have_replay = len(self.replay) > 0
        rows = []
        for _ in range(n):
            if use_solved and (not have_replay or rng.random() < self.cfg.solved_fraction):
                pos, outcome = self.solved.sample(rng)
                cost = 0.0 if outcome is Outcome.WIN else self.cfg.v_max
                rows.append(TrainingSample(encode(pos), None, cost, SOLVED))
                self.draws[SOLVED] += 1
            else:
                rows.append(self.replay.sample(rng))
                self.draws[SELFPLAY] += 1
        return rows

    def iterate(self) -> Checkpoint | None:
        """One fine-tuning iteration.  Returns the new checkpoint, or None
        when there was nothing to train on."""
        t0 = time.perf_counter()
        starts = []
        for _ in range(self.cfg.oft_games):
            start = self.start_position()
            if start.outcome is not None:
                continue
            starts.append(start)
            samples, _ = self_play(self.net, start, self.rng, self.cfg)
            self.replay.add_game(samples)
        if len(self.replay) == 0 and not (self.cfg.use_solved and len(self.solved)):
            log.info("trainer idle: no samples")
            return None
        value = _optimize(self.net, self.draw_rows, self.cfg.oft_steps, self.cfg.oft_batch_size, self.cfg, self.rng)
        self.steps_done += self.cfg.oft_steps
        self.version += 1
        self.store.save(self.net, self.version, self.steps_done, self.replay.games)
        crit = self.critical.items()
        mean_len = float(np.mean([len(p.history) for p in crit])) if crit else 0.0
        self.records.append(TrainingRecord(self.iteration, value, len(starts), len(self.solved), len(self.critical),
                                           mean_len, time.perf_counter() - t0))
        self.iteration += 1
        return self.store.latest


TRAINER_COLUMNS = ("iteration", "loss", "solved_queue", "critical_queue", "mean_critical_length")


def trainer_metrics_csv(records: list[TrainingRecord]) -> str:
    lines = [",".join(TRAINER_COLUMNS)]
    for r in records:
        lines.append(f"{r.iteration},{r.loss:.6f},{r.solved_queue},{r.critical_queue},{r.mean_critical_length:.3f}")
    return "\n".join(lines) + "\n"


PRETRAIN_COLUMNS = ("round", "games", "loss", "seconds")


def pretrain_metrics_csv(records: list[TrainingRecord]) -> str:
    lines = [",".join(PRETRAIN_COLUMNS)]
    for r in records:
        lines.append(f"{r.iteration},{r.games},{r.loss:.6f},{r.seconds:.3f}")
    return "\n".join(lines) + "\n"
