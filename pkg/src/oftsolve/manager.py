"""The proof-search coordinator.

Each ``Manager.step`` walks one PUCT selection path and decides what to do
with the leaf: expand it in the manager when its predicted cost is at least
``v_thr``, otherwise hand it to a worker as a job.  Dispatched nodes are
marked virtually won until their result arrives.  OR leaves are never sent
out: they are expanded and their most promising AND child becomes the job.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from dataclasses import dataclass, field

from .games import AND, GameState, Outcome
from .jobs import Job, JobResult, JobStatus
from .network import Checkpoint, evaluate, evaluate_batch
from .tree import (DEFAULT_C_PUCT, DEFAULT_V_MAX, PROVEN_LOSS, PROVEN_WIN, UNSOLVED, VIRTUAL_WIN,
                   SearchNode, SolutionTree, backpropagate, expand, extract_solution, propagate_status,
                   select_child, select_path, set_status)

log = logging.getLogger(__name__)


@dataclass
class ManagerConfig:
    v_thr: float = 10.0
    k: int = 4
    c_puct: float = DEFAULT_C_PUCT
    v_max: float = DEFAULT_V_MAX
    budget: int = 100_000
    top_k: bool = True
    and_assignment: bool = True
    subscribe: bool = True
    emit_losses: bool = False
    log_events: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.v_thr < self.v_max:
            raise ValueError(f"v_thr must lie in (0, v_max={self.v_max}), got {self.v_thr}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")


# --- events ----------------------------------------------------------------

@dataclass
class JobDispatch:
    job: Job
    cost: float


@dataclass
class SolvedPosition:
    position: GameState
    outcome: Outcome = Outcome.WIN


@dataclass
class CriticalPosition:
    position: GameState


@dataclass
class RootSolved:
    outcome: Outcome


@dataclass
class ManagerCounters:
    manager_nodes: int = 0
    steps: int = 0
    jobs: int = 0
    results: int = 0
    solved_jobs: int = 0
    job_nodes: int = 0
    job_time: float = 0.0
    dropped_results: int = 0
    versions_used: set = field(default_factory=set)


class Manager:
    def __init__(self, root_state: GameState, checkpoint: Checkpoint, config: ManagerConfig | None = None):
        self.config = config or ManagerConfig()
        self.root = SearchNode(root_state)
        self.checkpoint = checkpoint
        self.rng = random.Random(self.config.seed)
        self.live_jobs: dict[int, SearchNode] = {}
        self.finished_jobs: set[int] = set()
        self._next_job = 1
        self.counters = ManagerCounters()
        self.counters.versions_used.add(checkpoint.version)
        self.event_log: list[dict] = []
        self._root_reported = False

    # --- helpers -----------------------------------------------------------

    @property
    def net(self):
        return self.checkpoint.net

    @property
    def solved(self) -> bool:
        return self.root.status in (PROVEN_WIN, PROVEN_LOSS)

    def outcome(self) -> Outcome | None:
        if self.root.status is PROVEN_WIN:
            return Outcome.WIN
        if self.root.status is PROVEN_LOSS:
            return Outcome.LOSS
        return None

    def _log(self, **record):
        if self.config.log_events:
            self.event_log.append(record)

    def update_checkpoint(self, ckpt: Checkpoint) -> bool:
        if not self.config.subscribe or ckpt.version <= self.checkpoint.version:
            return False
        self.checkpoint = ckpt
        self.counters.versions_used.add(ckpt.version)
        return True

    def _solved_events(self, nodes, events):
        for n in nodes:
            if n.status is PROVEN_WIN:
                events.append(SolvedPosition(n.state))
            elif n.status is PROVEN_LOSS and self.config.emit_losses:
                events.append(SolvedPosition(n.state, Outcome.LOSS))
        if not self._root_reported and self.solved:
            self._root_reported = True
            events.append(RootSolved(self.outcome()))

    def _resolve_terminal(self, node: SearchNode) -> None:
        set_status(node, PROVEN_WIN if node.state.outcome is Outcome.WIN else PROVEN_LOSS)
        node.solved_by = "manager"

    def _dispatch(self, node: SearchNode, v: float, events) -> None:
        job_id = self._next_job
        self._next_job += 1
        job = Job(job_id, node.state, self.config.budget, self.checkpoint.version)
        node.job_id = job_id
        set_status(node, VIRTUAL_WIN)
        self.live_jobs[job_id] = node
        self.counters.jobs += 1
        self._log(event="dispatch", job=job_id, kind="AND" if node.kind == AND else "OR", v=v,
                  v_thr=self.config.v_thr, history=list(node.state.history))
        events.append(JobDispatch(job, v))
        self._solved_events(propagate_status(node), events)

    def _expand(self, node: SearchNode, policy, v: float, reason: str) -> None:
        expand(node, policy)
        self._log(event="expand", reason=reason, kind="AND" if node.kind == AND else "OR", v=v,
                  v_thr=self.config.v_thr, children=len(node.children), history=list(node.state.history))

    # --- the search loop ---------------------------------------------------

    def step(self) -> list:
        """Process one selection path; returns the emitted events.  Does
        nothing while the root is solved or virtually solved."""
        if self.root.status is not UNSOLVED:
            return []
        cfg = self.config
        events: list = []
        self.counters.steps += 1
        path = select_path(self.root, self.rng, cfg.k, cfg.top_k, cfg.c_puct)
        leaf = path[-1]
        s = leaf.state
        self.counters.manager_nodes += 1
        if s.outcome is not None:
            self._resolve_terminal(leaf)
            backpropagate(path, 0.0 if s.outcome is Outcome.WIN else cfg.v_max, cfg.v_max)
            self._solved_events([leaf] + propagate_status(leaf), events)
            return events
        policy, v = evaluate(self.net, s)
        v = min(max(v, 0.0), cfg.v_max)
        critical = leaf
        if v >= cfg.v_thr:
            self._expand(leaf, policy, v, "select")
            backpropagate(path, v, cfg.v_max)
        elif leaf.kind == AND or not cfg.and_assignment:
            backpropagate(path, v, cfg.v_max)
            self._dispatch(leaf, v, events)
        else:
            critical = self._assign_from_or_leaf(path, policy, v, events)
        if critical is not None:
            events.append(CriticalPosition(critical.state))
        return events

    def _assign_from_or_leaf(self, path, policy, v, events):
        """Expand an OR leaf and send its best AND child out as the job.
        Returns the critical node, or None if the manager solved the leaf."""
        cfg = self.config
        leaf = path[-1]
        self._expand(leaf, policy, v, "or-lookahead")
        backpropagate(path, v, cfg.v_max)
        children = leaf.children
        self.counters.manager_nodes += len(children)
        open_children = []
        for ch in children:
            if ch.state.outcome is not None:
                self._resolve_terminal(ch)
            else:
                open_children.append(ch)
        if open_children:
            _, costs = evaluate_batch(self.net, [ch.state for ch in open_children])
            for ch, c in zip(open_children, costs):
                ch.cost = min(max(float(c), 0.0), cfg.v_max)
                ch.cost_version = self.checkpoint.version
        terminal = [ch for ch in children if ch.state.outcome is not None]
        if terminal:
            changed = []
            for ch in terminal:
                changed.extend(propagate_status(ch))
            self._solved_events([ch for ch in terminal] + changed, events)
            if leaf.status is not UNSOLVED:
                return None
        best = select_child(leaf, self.rng, cfg.k, False, cfg.c_puct)
        if best.cost < cfg.v_thr:
            self._dispatch(best, best.cost, events)
            return best
        return leaf

    # --- results -----------------------------------------------------------

    def integrate_result(self, r: JobResult) -> list:
        node = self.live_jobs.pop(r.job_id, None)
        if node is None:
            self.counters.dropped_results += 1
            why = "duplicate" if r.job_id in self.finished_jobs else "unknown job"
            log.debug("dropped result for job %d (%s)", r.job_id, why)
            self._log(event="drop", job=r.job_id, reason=why)
            return []
        self.finished_jobs.add(r.job_id)
        c = self.counters
        c.results += 1
        c.job_nodes += r.nodes
        c.job_time += r.wall_time
        if r.solved:
            c.solved_jobs += 1
        self._log(event="result", job=r.job_id, status=r.status.name, nodes=r.nodes)
        events: list = []
        if r.status is JobStatus.WIN and r.proof is not None:
            set_status(node, PROVEN_WIN)
            node.proof = r.proof
            node.solved_by = "job"
            self._solved_events([node] + propagate_status(node), events)
        elif r.status is JobStatus.LOSS:
            set_status(node, PROVEN_LOSS)
            node.solved_by = "job"
            self._solved_events([node] + propagate_status(node), events)
        else:
            node.status = UNSOLVED
            node.job_failed = True
            self._solved_events(propagate_status(node), events)
            policy, v = evaluate(self.net, node.state)
            c.manager_nodes += 1
            self._expand(node, policy, min(max(v, 0.0), self.config.v_max), "unknown-result")
        return events

    def abandon_jobs(self) -> None:
        """Forget every live job (used when stopping before the results arrive)."""
        for job_id, node in self.live_jobs.items():
            node.status = UNSOLVED
            propagate_status(node)
        self.live_jobs.clear()

    def solution(self) -> SolutionTree:
        return extract_solution(self.root)

    # --- event log ---------------------------------------------------------

    def event_log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.event_log)


def audit_event_log(records, v_thr: float | None = None, require_and_jobs: bool = True) -> list[str]:
    """Check job gating from logged events; returns violations (empty = clean).

    Every dispatched job must have had v < v_thr and, when AND-player
    assignment is on, target an AND node.  Every AND leaf expanded during
    selection must have had v >= v_thr.
    """
    problems = []
    for i, rec in enumerate(records):
        if isinstance(rec, str):
            rec = json.loads(rec)
        thr = rec.get("v_thr", v_thr) if v_thr is None else v_thr
        ev = rec.get("event")
        if ev == "dispatch":
            if not rec["v"] < thr:
                problems.append(f"record {i}: job {rec['job']} dispatched with v={rec['v']} >= {thr}")
            if require_and_jobs and rec["kind"] != "AND":
                problems.append(f"record {i}: job {rec['job']} targets an {rec['kind']} node")
        elif ev == "expand" and rec["reason"] == "select" and rec["kind"] == "AND":
            if not rec["v"] >= thr:
                problems.append(f"record {i}: AND leaf expanded with v={rec['v']} < {thr}")
    return problems


# --- stats -----------------------------------------------------------------

STATS_COLUMNS = ("game", "opening", "mode", "seed", "workers", "outcome", "nodes", "time_s",
                 "manager_nodes", "jobs", "avg_job_time_s", "avg_job_nodes", "pcn_versions",
                 "solved_jobs_pct", "avg_worker_loading_pct")


@dataclass
class SolveStats:
    game: str
    opening: str
    mode: str
    seed: int
    workers: int
    outcome: str
    nodes: int
    time_s: float
    manager_nodes: int
    jobs: int
    avg_job_time_s: float
    avg_job_nodes: float
    pcn_versions: int
    solved_jobs_pct: float
    avg_worker_loading_pct: float

    def row(self) -> list[str]:
        return [self.game, self.opening, self.mode, str(self.seed), str(self.workers), self.outcome,
                str(self.nodes), f"{self.time_s:.4f}", str(self.manager_nodes), str(self.jobs),
                f"{self.avg_job_time_s:.6f}", f"{self.avg_job_nodes:.2f}", str(self.pcn_versions),
                f"{self.solved_jobs_pct:.2f}", f"{self.avg_worker_loading_pct:.2f}"]

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(self.row())
        return buf.getvalue()


def stats_header() -> str:
    return ",".join(STATS_COLUMNS) + "\n"


def collect_stats(manager: Manager, *, game: str, opening: str, mode: str, seed: int, workers: int,
                  elapsed: float, worker_loading: float, outcome: str | None = None) -> SolveStats:
    c = manager.counters
    if outcome is None:
        out = manager.outcome()
        outcome = "UNKNOWN" if out is None else out.name
    n = max(c.results, 1)
    return SolveStats(game, opening, mode, seed, workers, outcome, c.manager_nodes + c.job_nodes, elapsed,
                      c.manager_nodes, c.jobs, c.job_time / n if c.results else 0.0,
                      c.job_nodes / n if c.results else 0.0, len(c.versions_used),
                      100.0 * c.solved_jobs / n if c.results else 0.0, 100.0 * worker_loading)
