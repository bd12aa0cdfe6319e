"""Budget-bounded proof search used by workers.

The search is the manager's PUCT loop without job dispatch: every
non-terminal leaf is evaluated and expanded.  Proven positions are shared
through a transposition table that stores references to the proven nodes,
so a solution tree can still be extracted through a transposition hit.

``ProofSearch.run`` is a generator that yields positions needing network
evaluation, which lets ``WorkerPool`` interleave many searches and evaluate
their leaves in one batch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

from .errors import CheckpointError, ProtocolError
from .games import GameState
from .jobs import Job, JobResult, JobStatus
from .network import Checkpoint, checkpoint_from_bytes, evaluate, evaluate_batch
from .tree import (DEFAULT_C_PUCT, DEFAULT_V_MAX, PROVEN, PROVEN_LOSS, PROVEN_WIN, UNSOLVED,
                   SearchNode, backpropagate, expand, extract_solution, propagate_status, select_path,
                   verify_solution)

log = logging.getLogger(__name__)

BATCH_SIZE = 48


@dataclass
class WorkerConfig:
    c_puct: float = DEFAULT_C_PUCT
    v_max: float = DEFAULT_V_MAX
    tt_capacity: int = 1_000_000
    use_tt: bool = True
    verify_proofs: bool = True


class TranspositionTable:
    """Fixed-capacity map from position key to the first node proven there.
    When full, new entries are rejected."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._table: dict[int, SearchNode] = {}
        self.rejected = 0

    def lookup(self, state: GameState) -> SearchNode | None:
        node = self._table.get(state.key)
        if node is not None and node.state.board == state.board and node.state.to_move == state.to_move:
            return node
        return None

    def store(self, node: SearchNode) -> None:
        key = node.state.key
        if key in self._table:
            return
        if len(self._table) >= self.capacity:
            self.rejected += 1
            return
        self._table[key] = node

    def __len__(self):
        return len(self._table)


class ProofSearch:
    def __init__(self, state: GameState, budget: int, config: WorkerConfig | None = None,
                 tt: TranspositionTable | None = None):
        self.config = config or WorkerConfig()
        self.root = SearchNode(state)
        self.budget = budget
        self.nodes = 0
        if tt is None and self.config.use_tt:
            tt = TranspositionTable(self.config.tt_capacity)
        self.tt = tt

    def _proven(self, node, changed):
        if self.tt is None:
            return
        self.tt.store(node)
        for n in changed:
            if n.status in PROVEN:
                self.tt.store(n)

    def run(self):
        """Generator: yields states to evaluate, expects (policy, cost) back.
        Returns the root status."""
        root = self.root
        cfg = self.config
        while root.status is UNSOLVED and self.nodes < self.budget:
            path = select_path(root, None, top_k=False, c_puct=cfg.c_puct)
            leaf = path[-1]
            self.nodes += 1
            s = leaf.state
            if s.outcome is not None:
                leaf.status = PROVEN_WIN if s.outcome else PROVEN_LOSS
                leaf.solved_by = "terminal"
                self._proven(leaf, propagate_status(leaf))
                continue
            if self.tt is not None:
                hit = self.tt.lookup(s)
                if hit is not None and hit is not leaf:
                    leaf.status = hit.status
                    leaf.proof = hit
                    leaf.solved_by = "transposition"
                    self._proven(leaf, propagate_status(leaf))
                    continue
            policy, v = yield s
            expand(leaf, policy)
            backpropagate(path, min(max(v, 0.0), cfg.v_max), cfg.v_max)
        return root.status

    def result_status(self) -> JobStatus:
        st = self.root.status
        if st is PROVEN_WIN:
            return JobStatus.WIN
        if st is PROVEN_LOSS:
            return JobStatus.LOSS
        return JobStatus.UNKNOWN


def run_search(search: ProofSearch, net) -> JobStatus:
    gen = search.run()
    try:
        s = next(gen)
        while True:
            s = gen.send(evaluate(net, s))
    except StopIteration:
        pass
    return search.result_status()


class Worker:
    """Executes jobs with the most recent checkpoint it has received."""

    def __init__(self, worker_id: int, checkpoint: Checkpoint, config: WorkerConfig | None = None):
        self.worker_id = worker_id
        self.checkpoint = checkpoint
        self.config = config or WorkerConfig()
        self.busy_time = 0.0
        self.jobs_done = 0
        self.started = time.perf_counter()
        self.rejected_checkpoints = 0

    @property
    def version(self) -> int:
        return self.checkpoint.version

    def subscribe(self, ckpt) -> bool:
        """Adopt a newer checkpoint (a ``Checkpoint`` or its bytes).  Older
        or corrupt checkpoints are ignored; returns whether it was adopted."""
        if isinstance(ckpt, (bytes, bytearray, memoryview)):
            try:
                ckpt = checkpoint_from_bytes(bytes(ckpt))
            except CheckpointError as e:
                self.rejected_checkpoints += 1
                log.warning("worker %d kept checkpoint v%d: %s", self.worker_id, self.version, e)
                return False
        if ckpt.version <= self.checkpoint.version:
            return False
        self.checkpoint = ckpt
        return True

    def make_search(self, job: Job) -> ProofSearch:
        return ProofSearch(job.position, job.budget, self.config)

    def finish(self, job: Job, search: ProofSearch, version: int, elapsed: float) -> JobResult:
        status = search.result_status()
        proof = None
        if status is JobStatus.WIN:
            tree = extract_solution(search.root)
            if self.config.verify_proofs:
                check = verify_solution(tree)
                if not check.ok:
                    log.error("worker %d produced a bad proof for job %d: %s", self.worker_id,
                              job.job_id, check.describe())
                    status = JobStatus.UNKNOWN
                    tree = None
            proof = tree.root if tree is not None else None
        self.busy_time += elapsed
        self.jobs_done += 1
        return JobResult(job.job_id, status, search.nodes, elapsed, version, self.worker_id, proof)

    def solve_job(self, job: Job) -> JobResult:
        t0 = time.perf_counter()
        if not isinstance(job.position, GameState) or job.budget < 0:
            return JobResult(job.job_id, JobStatus.ERROR, 0, 0.0, self.version, self.worker_id,
                             error="malformed job")
        ckpt = self.checkpoint
        search = self.make_search(job)
        run_search(search, ckpt.net)
        return self.finish(job, search, ckpt.version, time.perf_counter() - t0)

    def solve_wire_job(self, job_id: int, position_bytes: bytes, budget: int, version: int) -> JobResult:
        """Decode a job from its wire position first; bad positions yield an
        ERROR result instead of raising."""
        from .games import decode_position

        try:
            state, _ = decode_position(position_bytes)
        except ProtocolError as e:
            return JobResult(job_id, JobStatus.ERROR, 0, 0.0, self.version, self.worker_id, error=str(e))
        return self.solve_job(Job(job_id, state, budget, version))


class WorkerPool:
    """Several workers in one process sharing batched leaf evaluation.

    Each worker's search runs independently; pending leaves from all of them
    are evaluated together, up to ``batch_size`` at a time.  Results are
    identical to running each job alone on the same checkpoint.
    """

    def __init__(self, workers: list[Worker], batch_size: int = BATCH_SIZE):
        self.workers = workers
        self.batch_size = batch_size
        self.batches = 0

    def solve_jobs(self, jobs: list[Job]) -> list[JobResult]:
        if len(jobs) > len(self.workers):
            raise ValueError("more jobs than workers")
        active = []
        results: list[JobResult | None] = [None] * len(jobs)
        t0 = time.perf_counter()
        for i, (w, job) in enumerate(zip(self.workers, jobs)):
            search = w.make_search(job)
            gen = search.run()
            active.append([i, w, job, search, gen, None, w.checkpoint])
        # prime each generator
        pending = []
        for entry in active:
            self._advance(entry, None, results, pending, t0)
        while pending:
            batch, pending = pending[: self.batch_size], pending[self.batch_size:]
            # all workers in a pool share one checkpoint per batch
            net = batch[0][6].net
            same = [e for e in batch if e[6] is batch[0][6]]
            rest = [e for e in batch if e[6] is not batch[0][6]]
            pending = rest + pending
            P, V = evaluate_batch(net, [e[5] for e in same])
            self.batches += 1
            for e, p, v in zip(same, P, V):
                self._advance(e, (p, float(v)), results, pending, t0)
        return results

    def _advance(self, entry, value, results, pending, t0):
        i, w, job, search, gen, _, ckpt = entry
        try:
            entry[5] = gen.send(value) if value is not None else next(gen)
            pending.append(entry)
        except StopIteration:
            results[i] = w.finish(job, search, ckpt.version, time.perf_counter() - t0)
