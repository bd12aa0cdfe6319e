"""Experiment driver: one solve, and the comparison and sweep tables built
from repeated solves.

``run_until_solved`` is the main loop.  It alternates manager steps with
result integration, keeping at most ``max_in_flight`` jobs outstanding,
and works the same over the simulated and TCP transports.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import statistics
import time
from dataclasses import dataclass, field

from .errors import ContractViolation
from .games import Game, GameState, Outcome, get_game
from .manager import (STATS_COLUMNS, JobDispatch, Manager, ManagerConfig, SolveStats, collect_stats)
from .network import Checkpoint, Network
from .trainer import OnlineTrainer, TrainerConfig, TrainingRecord, pretrain
from .transport import ChaosConfig, SimTransport, launch_tcp_cluster
from .tree import UNSOLVED, SolutionTree, VerifyResult, verify_solution
from .worker import WorkerConfig

log = logging.getLogger(__name__)

MODES = ("baseline", "online-sp", "online-cp", "online-sp+cp")
OFFLINE_MODE = "offline-ft"


def mode_flags(mode: str) -> tuple[bool, bool]:
    """(use solved positions, use critical positions) for a solver mode."""
    flags = {"baseline": (False, False), "online-sp": (True, False), "online-cp": (False, True),
             "online-sp+cp": (True, True)}
    if mode not in flags:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return flags[mode]


@dataclass
class SolveConfig:
    game: str = "hex-3"
    opening: tuple = ()
    mode: str = "baseline"
    workers: int = 1
    v_thr: float = 10.0
    k: int = 4
    budget: int = 100_000
    seed: int = 0
    transport: str = "inproc"
    time_limit: float = 600.0
    top_k: bool = True
    and_assignment: bool = True
    max_in_flight: int | None = None
    max_nodes: int | None = None
    drain: bool = False
    seconds_per_node: float = 2e-4
    trainer_interval: float = 2.0
    chaos: ChaosConfig = field(default_factory=ChaosConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    host: str = "127.0.0.1"
    port: int = 0
    die_after_jobs: dict | None = None

    def __post_init__(self):
        mode_flags(self.mode)
        if self.transport not in ("inproc", "tcp"):
            raise ValueError(f"unknown transport {self.transport!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        self.opening = tuple(self.opening)


@dataclass
class SolveReport:
    outcome: Outcome | None
    stats: SolveStats
    solution: SolutionTree | None
    verify: VerifyResult | None
    manager: Manager
    trainer_records: list[TrainingRecord]
    checkpoints: list[int]
    timed_out: bool
    wall_time: float
    faults: dict = field(default_factory=dict)  # transport fault counters

    @property
    def outcome_name(self) -> str:
        return "UNKNOWN" if self.outcome is None else self.outcome.name

    def exit_code(self) -> int:
        return {Outcome.WIN: 0, Outcome.LOSS: 1}.get(self.outcome, 2)


def opening_label(game: Game, moves) -> str:
    return " ".join(game.move_name(m) for m in moves) if moves else "-"


def parse_opening(game: Game, text) -> tuple:
    """Moves given as names ("b2 a1"), cell indices, or a sequence of either."""
    if text is None:
        return ()
    if isinstance(text, str):
        text = text.replace(",", " ").split()
    return tuple(m if isinstance(m, int) else game.parse_move(m) for m in text if m not in ("-", ""))


def untrained_checkpoint(game: Game, seed: int = 0) -> Checkpoint:
    return Checkpoint(0, Network.for_game(game, seed=seed))


def run_until_solved(manager: Manager, transport, *, max_in_flight: int, time_limit: float = 600.0,
                     max_nodes: int | None = None, drain: bool = False) -> bool:
    """Drive the search until the root is proven.  Returns False when a
    time or node limit stopped it first."""
    wall0 = time.perf_counter()
    c = manager.counters

    def integrate(results):
        for r in results:
            before = c.manager_nodes
            events = manager.integrate_result(r)
            transport.charge(c.manager_nodes - before)
            transport.publish(events)

    finished = True
    while not manager.solved:
        if time.perf_counter() - wall0 > time_limit or transport.now() > time_limit:
            finished = False
            break
        if max_nodes is not None and c.manager_nodes + c.job_nodes >= max_nodes:
            finished = False
            break
        manager.update_checkpoint(transport.latest_checkpoint())
        integrate(transport.poll())
        if manager.solved:
            break
        if manager.root.status is UNSOLVED and transport.in_flight < max_in_flight:
            before = c.manager_nodes
            events = manager.step()
            transport.charge(c.manager_nodes - before)
            for e in events:
                if isinstance(e, JobDispatch):
                    transport.submit(e.job)
            transport.publish(events)
            continue
        if transport.in_flight == 0:
            raise ContractViolation(f"root is {manager.root.status.name} with no jobs in flight")
        integrate(transport.wait(min(1.0, max(0.01, time_limit - (time.perf_counter() - wall0)))))
    if drain:
        while manager.live_jobs and time.perf_counter() - wall0 <= time_limit + 60:
            if transport.in_flight == 0:
                raise ContractViolation("manager has live jobs the transport does not know about")
            integrate(transport.wait(1.0))
    return finished


def solve(cfg: SolveConfig, theta0: Checkpoint | None = None, root: GameState | None = None) -> SolveReport:
    game = get_game(cfg.game)
    if root is None:
        root = game.replay(cfg.opening)
    if theta0 is None:
        theta0 = untrained_checkpoint(game, cfg.seed)
    use_solved, use_critical = mode_flags(cfg.mode)
    online = cfg.mode != "baseline"
    mcfg = ManagerConfig(v_thr=cfg.v_thr, k=cfg.k, c_puct=cfg.trainer.c_puct, v_max=cfg.trainer.v_max,
                         budget=cfg.budget, top_k=cfg.top_k, and_assignment=cfg.and_assignment,
                         subscribe=online, seed=cfg.seed)
    tcfg = dataclasses.replace(cfg.trainer, use_solved=use_solved, use_critical=use_critical, seed=cfg.seed)
    wcfg = WorkerConfig(c_puct=mcfg.c_puct, v_max=mcfg.v_max)
    max_in_flight = cfg.max_in_flight or 2 * cfg.workers
    manager = Manager(root, theta0, mcfg)
    trainer = None
    wall0 = time.perf_counter()
    if cfg.transport == "inproc":
        if online:
            trainer = OnlineTrainer(theta0, root, tcfg)
        transport = SimTransport(theta0, cfg.workers, wcfg, cfg.seconds_per_node, cfg.chaos, trainer,
                                 cfg.trainer_interval)
    else:
        transport = launch_tcp_cluster(theta0, cfg.workers, cfg.game, root.history, tcfg if online else None,
                                       wcfg, cfg.host, cfg.port, cfg.die_after_jobs)
    try:
        finished = run_until_solved(manager, transport, max_in_flight=max_in_flight, time_limit=cfg.time_limit,
                                    max_nodes=cfg.max_nodes, drain=cfg.drain)
        elapsed = transport.now()
        loading = transport.worker_loading()
        faults = {k: getattr(transport, k) for k in ("kills", "duplicates", "requeued", "disconnects")
                  if hasattr(transport, k)}
    finally:
        transport.close()
    outcome = manager.outcome()
    tree = check = None
    if outcome is Outcome.WIN:
        tree = manager.solution()
        check = verify_solution(tree, cfg.game)
    stats = collect_stats(manager, game=cfg.game, opening=opening_label(game, root.history), mode=cfg.mode,
                          seed=cfg.seed, workers=cfg.workers, elapsed=elapsed, worker_loading=loading)
    return SolveReport(outcome, stats, tree, check, manager, trainer.records if trainer else [],
                       list(transport.published), not finished, time.perf_counter() - wall0, faults)


# --- comparison tables ---------------------------------------------------------

COMPARE_COLUMNS = ("kind", "opening", "mode", "seed", "outcome", "nodes", "time_s", "pcn_versions",
                   "node_ratio", "time_ratio")
CURVE_COLUMNS = ("opening", "mode", "seed", "iteration", "mean_critical_length", "critical_queue")
ABLATION_COLUMNS = ("top_k", "and_assignment", "instances", "oracle_agree", "nodes", "time_s")
WORKER_SWEEP_COLUMNS = ("workers", "seeds", "median_time_s", "speedup", "avg_worker_loading_pct", "median_nodes")
VTHR_SWEEP_COLUMNS = ("v_thr", "seeds", "median_time_s", "avg_job_time_s", "solved_jobs_pct", "median_nodes")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x, digits=4):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.{digits}f}"
    return str(x)


def geometric_mean(values) -> float:
    values = [v for v in values if v > 0 and math.isfinite(v)]
    if not values:
        return float("nan")
    return math.exp(sum(math.log(v) for v in values) / len(values))


@dataclass
class CompareResult:
    runs: list  # (opening label, mode, seed, SolveReport)
    medians: dict  # (opening, mode) -> (nodes, time)
    ratios: dict  # (opening, mode) -> (node ratio, time ratio)
    geomeans: dict  # mode -> (node ratio, time ratio)

    def table_csv(self) -> str:
        rows = []
        for op, mode, seed, rep in self.runs:
            s = rep.stats
            rows.append(["run", op, mode, seed, s.outcome, s.nodes, _fmt(s.time_s), s.pcn_versions, "", ""])
        for (op, mode), (nodes, t) in self.medians.items():
            nr, tr = self.ratios.get((op, mode), (float("nan"), float("nan")))
            rows.append(["median", op, mode, "", "", _fmt(nodes, 1), _fmt(t), "", _fmt(nr), _fmt(tr)])
        for mode, (nr, tr) in self.geomeans.items():
            rows.append(["geomean", "", mode, "", "", "", "", "", _fmt(nr), _fmt(tr)])
        return _csv(COMPARE_COLUMNS, rows)

    def curve_csv(self) -> str:
        rows = []
        for op, mode, seed, rep in self.runs:
            for r in rep.trainer_records:
                rows.append([op, mode, seed, r.iteration, f"{r.mean_critical_length:.3f}", r.critical_queue])
        return _csv(CURVE_COLUMNS, rows)

    def online_wins(self, mode: str) -> tuple[int, int]:
        """(openings where ``mode`` beat baseline on median nodes, openings)."""
        openings = sorted({op for op, _ in self.medians})
        better = sum(1 for op in openings if self.medians[(op, mode)][0] < self.medians[(op, "baseline")][0])
        return better, len(openings)


def offline_finetune(theta0: Checkpoint, root: GameState, games: int, cfg: TrainerConfig | None = None) -> Checkpoint:
    """Continue pretraining ``theta0`` with self-play from ``root``."""
    cfg = cfg or TrainerConfig()
    ck, _ = pretrain(root.game, games, cfg, net=theta0.net.copy(), start=root)
    return Checkpoint(theta0.version, ck.net, theta0.train_step + ck.train_step, theta0.samples + ck.samples)


def compare(base: SolveConfig, openings, modes, seeds, theta0: Checkpoint | None = None,
            offline_games: int = 0, on_run=None) -> CompareResult:
    """Solve every opening under every mode and seed.  ``offline-ft`` in
    ``modes`` solves with a copy of theta0 fine-tuned offline from the
    opening, run as a fixed-network baseline."""
    game = get_game(base.game)
    theta0 = theta0 or untrained_checkpoint(game, base.seed)
    runs = []
    for opening in openings:
        root = game.replay(opening)
        label = opening_label(game, opening)
        for mode in modes:
            net = theta0
            run_mode = mode
            if mode == OFFLINE_MODE:
                net = offline_finetune(theta0, root, offline_games or 100,
                                       dataclasses.replace(base.trainer, seed=base.seed))
                run_mode = "baseline"
            for seed in seeds:
                cfg = dataclasses.replace(base, opening=tuple(opening), mode=run_mode, seed=seed)
                rep = solve(cfg, net, root)
                if mode == OFFLINE_MODE:
                    rep.stats.mode = OFFLINE_MODE
                runs.append((label, mode, seed, rep))
                if on_run:
                    on_run(label, mode, seed, rep)
    medians, ratios, geomeans = {}, {}, {}
    for op in dict.fromkeys(r[0] for r in runs):
        for mode in modes:
            reps = [r[3] for r in runs if r[0] == op and r[1] == mode]
            medians[(op, mode)] = (statistics.median(x.stats.nodes for x in reps),
                                   statistics.median(x.stats.time_s for x in reps))
    if "baseline" in modes:
        for (op, mode), (nodes, t) in medians.items():
            bn, bt = medians[(op, "baseline")]
            ratios[(op, mode)] = (nodes / bn if bn else float("nan"), t / bt if bt else float("nan"))
        for mode in modes:
            rs = [v for (op, m), v in ratios.items() if m == mode]
            geomeans[mode] = (geometric_mean([r[0] for r in rs]), geometric_mean([r[1] for r in rs]))
    return CompareResult(runs, medians, ratios, geomeans)


ABLATION_CONFIGS = ((True, True), (False, True), (True, False), (False, False))


def ablation(base: SolveConfig, instances, theta0: Checkpoint | None = None, oracle=None):
    """Solve each (game id, opening) instance with top-k selection and
    AND-player job assignment toggled.  Returns (rows csv, per-config
    outcomes)."""
    rows, outcomes = [], {}
    for top_k, and_assign in ABLATION_CONFIGS:
        agree, nodes, secs, got = 0, 0, 0.0, []
        for game_id, opening in instances:
            game = get_game(game_id)
            ck = theta0 if theta0 is not None and theta0.net.input_size == 2 * game.cells + 1 else None
            cfg = dataclasses.replace(base, game=game_id, opening=tuple(opening), top_k=top_k,
                                      and_assignment=and_assign)
            rep = solve(cfg, ck)
            got.append(rep.outcome)
            nodes += rep.stats.nodes
            secs += rep.stats.time_s
            if oracle is not None and rep.outcome is oracle.solve(game.replay(opening)):
                agree += 1
        outcomes[(top_k, and_assign)] = got
        rows.append([int(top_k), int(and_assign), len(instances), agree if oracle is not None else "", nodes,
                     _fmt(secs)])
    return _csv(ABLATION_COLUMNS, rows), outcomes


def worker_sweep(base: SolveConfig, worker_counts, seeds, theta0: Checkpoint | None = None):
    """Median solve time per worker count, with speedup relative to the
    first count.  Returns (csv, {workers: [SolveReport]})."""
    reports = {}
    for n in worker_counts:
        reports[n] = [solve(dataclasses.replace(base, workers=n, seed=s), theta0) for s in seeds]
    t_first = statistics.median(r.stats.time_s for r in reports[worker_counts[0]])
    rows = []
    for n in worker_counts:
        reps = reports[n]
        t = statistics.median(r.stats.time_s for r in reps)
        rows.append([n, len(reps), _fmt(t), _fmt(t_first / t if t else float("nan"), 3),
                     _fmt(statistics.mean(r.stats.avg_worker_loading_pct for r in reps), 2),
                     _fmt(statistics.median(r.stats.nodes for r in reps), 1)])
    return _csv(WORKER_SWEEP_COLUMNS, rows), reports


def vthr_sweep(base: SolveConfig, thresholds, seeds, theta0: Checkpoint | None = None):
    reports = {}
    rows = []
    for v in thresholds:
        reps = [solve(dataclasses.replace(base, v_thr=v, seed=s), theta0) for s in seeds]
        reports[v] = reps
        rows.append([_fmt(float(v), 2), len(reps), _fmt(statistics.median(r.stats.time_s for r in reps)),
                     _fmt(statistics.mean(r.stats.avg_job_time_s for r in reps), 6),
                     _fmt(statistics.mean(r.stats.solved_jobs_pct for r in reps), 2),
                     _fmt(statistics.median(r.stats.nodes for r in reps), 1)])
    return _csv(VTHR_SWEEP_COLUMNS, rows), reports


__all__ = ["MODES", "SolveConfig", "SolveReport", "solve", "run_until_solved", "compare", "ablation",
           "worker_sweep", "vthr_sweep", "STATS_COLUMNS", "parse_opening", "opening_label"]
