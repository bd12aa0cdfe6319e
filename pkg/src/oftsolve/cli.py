"""Command-line entry points.

    oftsolve pretrain --game hex-3 --out theta0.ckpt
    oftsolve solve --game hex-4 --opening b2 --mode online-cp --workers 2 --checkpoint theta0.ckpt
    oftsolve verify --tree solution.ofts --game hex-4
    oftsolve compare --game hex-4 --openings "b2;c3" --modes baseline,online-cp --seeds 0,1,2
    oftsolve sweep --game hex-4 --opening b2 --workers-list 1,2,4

Exit codes: 0 Win, 1 Loss (and a rejected tree for verify), 2 Unknown or
timeout, 10 usage error, 11 I/O error, 12 internal error.

Any option can also come from ``--config FILE`` holding ``key = value``
lines (keys are option names, with dashes or underscores); options given
on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import CheckpointError
from .games import get_game
from .harness import (MODES, OFFLINE_MODE, SolveConfig, ablation, compare, parse_opening, solve, vthr_sweep,
                      worker_sweep)
from .manager import stats_header
from .network import load_checkpoint, save_checkpoint
from .oracle import Oracle
from .trainer import TrainerConfig, pretrain, pretrain_metrics_csv, trainer_metrics_csv
from .transport import ChaosConfig
from .tree import read_solution, solution_to_text, verify_solution, write_solution

log = logging.getLogger("oftsolve")

EXIT_WIN, EXIT_LOSS, EXIT_UNKNOWN = 0, 1, 2
EXIT_USAGE, EXIT_IO, EXIT_INTERNAL = 10, 11, 12


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _ints(text):
    return [int(x) for x in str(text).replace(",", " ").split()]


def _floats(text):
    return [float(x) for x in str(text).replace(",", " ").split()]


def _common(p):
    p.add_argument("--config", help="key = value file supplying defaults")
    p.add_argument("--game", default="hex-3", help="ttt or hex-N")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-level", default="WARNING")


def _solver_options(p):
    p.add_argument("--checkpoint", help="theta0 checkpoint (default: untrained network)")
    p.add_argument("--mode", default="baseline", choices=MODES)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--vthr", type=float, default=10.0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--budget", type=int, default=100_000)
    p.add_argument("--transport", default="inproc", choices=("inproc", "tcp"))
    p.add_argument("--time-limit", type=float, default=600.0, help="seconds")
    p.add_argument("--top-k", type=_bool, default=True)
    p.add_argument("--and-assignment", type=_bool, default=True)
    p.add_argument("--max-in-flight", type=int)
    p.add_argument("--max-nodes", type=int)
    p.add_argument("--seconds-per-node", type=float, default=2e-4, help="simulated cost of a node (inproc)")
    p.add_argument("--trainer-interval", type=float, default=2.0, help="simulated seconds per trainer iteration")
    p.add_argument("--oft-games", type=int, default=8)
    p.add_argument("--oft-steps", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--latency", type=float, default=0.0, help="max injected message latency (inproc)")
    p.add_argument("--duplicate-prob", type=float, default=0.0)
    p.add_argument("--kill-prob", type=float, default=0.0)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)


def build_parser():
    top = _Parser(prog="oftsolve", description="Online fine-tuning proof search for small Hex and Tic-Tac-Toe.")
    sub = top.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pretrain", help="train theta0 by self-play")
    _common(p)
    p.add_argument("--out", required=True, help="checkpoint file to write")
    p.add_argument("--games", type=int, default=500)
    p.add_argument("--steps", type=int, default=200, help="optimizer steps per round")
    p.add_argument("--games-per-round", type=int, default=500)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--replay", type=int, default=2000, help="replay buffer size in games")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--simulations", type=int, default=32)
    p.add_argument("--from-checkpoint", help="continue training this checkpoint")
    p.add_argument("--opening", default="", help="self-play start position (default: empty board)")
    p.add_argument("--metrics", help="training metrics CSV (default: OUT.metrics.csv)")

    p = sub.add_parser("solve", help="prove or disprove one opening")
    _common(p)
    _solver_options(p)
    p.add_argument("--opening", default="", help='moves, e.g. "b2 a1"')
    p.add_argument("--stats", help="append the stats row to this CSV")
    p.add_argument("--tree", help="write the solution tree here on a win")
    p.add_argument("--event-log", help="write the manager event log (JSON lines)")
    p.add_argument("--trainer-metrics", help="write per-iteration trainer metrics CSV")
    p.add_argument("--print-tree", action="store_true")

    p = sub.add_parser("verify", help="check a solution-tree file")
    _common(p)
    p.add_argument("--tree", required=True)

    p = sub.add_parser("compare", help="baseline versus online solvers over openings")
    _common(p)
    _solver_options(p)
    p.add_argument("--openings", required=True, help='semicolon-separated openings, e.g. "b2;c3;a1 b1"')
    p.add_argument("--modes", default="baseline,online-cp")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--pretrain-from-opening", type=int, default=0, metavar="GAMES",
                   help=f"also run {OFFLINE_MODE}: theta0 fine-tuned offline with GAMES self-play games per opening")
    p.add_argument("--ablation", action="store_true", help="also emit the top-k / AND-assignment ablation table")
    p.add_argument("--out", default="compare.csv")
    p.add_argument("--curve-out", help="critical-position length curve CSV (default: OUT.curve.csv)")
    p.add_argument("--ablation-out", help="default: OUT.ablation.csv")

    p = sub.add_parser("sweep", help="worker-count or v_thr sweep on one opening")
    _common(p)
    _solver_options(p)
    p.add_argument("--opening", default="")
    p.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    p.add_argument("--workers-list", type=_ints, help="e.g. 1,2,4")
    p.add_argument("--vthr-list", type=_floats, help="e.g. 6,8,10,12")
    p.add_argument("--out", default="sweep.csv")
    return top


def parse_args(argv):
    top = build_parser()
    args = top.parse_args(argv)
    if getattr(args, "config", None):
        try:
            values = read_config(args.config)
        except OSError as e:
            raise UsageError(f"cannot read config file: {e}") from None
        sub = top._subparsers._group_actions[0].choices[args.cmd]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in values.items():
            if key not in known or key in ("config", "help"):
                raise UsageError(f"unknown config key {key!r}")
            action = known[key]
            defaults[key] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)
        args = top.parse_args(argv)
    return args


def _game(args):
    try:
        return get_game(args.game)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from None


def _opening(game, text):
    try:
        return parse_opening(game, text)
    except (ValueError, IndexError) as e:
        raise UsageError(f"bad opening {text!r}: {e}") from None


def _theta0(args, game):
    if not args.checkpoint:
        return None
    ck = load_checkpoint(args.checkpoint)
    if ck.net.input_size != 2 * game.cells + 1 or ck.net.policy_size != game.cells:
        raise UsageError(f"checkpoint {args.checkpoint} does not fit {game.game_id}")
    return ck


def _solve_config(args, opening=()) -> SolveConfig:
    tcfg = TrainerConfig(oft_games=args.oft_games, oft_steps=args.oft_steps, lr=args.lr, seed=args.seed)
    chaos = ChaosConfig(latency=args.latency, duplicate_prob=args.duplicate_prob, kill_prob=args.kill_prob,
                        seed=args.seed)
    try:
        return SolveConfig(game=args.game, opening=opening, mode=args.mode, workers=args.workers, v_thr=args.vthr,
                           k=args.k, budget=args.budget, seed=args.seed, transport=args.transport,
                           time_limit=args.time_limit, top_k=args.top_k, and_assignment=args.and_assignment,
                           max_in_flight=args.max_in_flight, max_nodes=args.max_nodes,
                           seconds_per_node=args.seconds_per_node, trainer_interval=args.trainer_interval,
                           chaos=chaos, trainer=tcfg, host=args.host, port=args.port)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _append_stats(path, row):
    p = Path(path)
    new = not p.exists() or p.stat().st_size == 0
    with open(p, "a") as f:
        if new:
            f.write(stats_header())
        f.write(row)


def cmd_pretrain(args) -> int:
    game = _game(args)
    cfg = TrainerConfig(games_per_round=args.games_per_round, steps_per_round=args.steps, batch_size=args.batch,
                        lr=args.lr, simulations=args.simulations, replay_games=args.replay, seed=args.seed)
    net = None
    if args.from_checkpoint:
        net = load_checkpoint(args.from_checkpoint).net
    start = game.replay(_opening(game, args.opening))

    def report(r):
        log.info("round %d: %d games, loss %.4f", r.iteration, r.games, r.loss)

    ck, records = pretrain(game, args.games, cfg, net=net, start=start, on_round=report)
    save_checkpoint(args.out, ck.net, 0, ck.train_step, ck.samples)
    metrics = args.metrics or f"{args.out}.metrics.csv"
    Path(metrics).write_text(pretrain_metrics_csv(records))
    print(f"wrote {args.out} (version 0, {ck.train_step} steps, {ck.samples} games) and {metrics}")
    return 0


def cmd_solve(args) -> int:
    game = _game(args)
    opening = _opening(game, args.opening)
    rep = solve(_solve_config(args, opening), _theta0(args, game))
    print(rep.outcome_name)
    sys.stdout.write(stats_header() + rep.stats.csv_row())
    if args.stats:
        _append_stats(args.stats, rep.stats.csv_row())
    if args.event_log:
        Path(args.event_log).write_text(rep.manager.event_log_lines())
    if args.trainer_metrics:
        Path(args.trainer_metrics).write_text(trainer_metrics_csv(rep.trainer_records))
    if rep.solution is not None:
        if not rep.verify.ok:
            print(f"internal error: emitted tree rejected: {rep.verify.describe()}", file=sys.stderr)
            return EXIT_INTERNAL
        tree_path = args.tree or "solution.ofts"
        write_solution(rep.solution, tree_path)
        print(f"solution tree: {tree_path} ({rep.solution.size()} nodes)")
        if args.print_tree:
            sys.stdout.write(solution_to_text(rep.solution))
    if rep.timed_out:
        print("stopped at the time or node limit", file=sys.stderr)
    return rep.exit_code()


def cmd_verify(args) -> int:
    _game(args)
    try:
        tree = read_solution(args.tree)
    except ValueError as e:
        raise OSError(f"unreadable solution tree {args.tree}: {e}") from None
    res = verify_solution(tree, args.game)
    print(res.describe())
    return 0 if res.ok else EXIT_LOSS


def cmd_compare(args) -> int:
    game = _game(args)
    openings = [_opening(game, t) for t in args.openings.split(";")]
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for m in modes:
        if m not in MODES and m != OFFLINE_MODE:
            raise UsageError(f"unknown mode {m!r}")
    if args.pretrain_from_opening and OFFLINE_MODE not in modes:
        modes.append(OFFLINE_MODE)
    if "baseline" not in modes:
        modes.insert(0, "baseline")
    theta0 = _theta0(args, game)
    base = _solve_config(args)

    def progress(op, mode, seed, rep):
        print(f"{op:>10} {mode:>13} seed {seed}: {rep.outcome_name} {rep.stats.nodes} nodes "
              f"{rep.stats.time_s:.3f}s", flush=True)

    res = compare(base, openings, modes, args.seeds, theta0, args.pretrain_from_opening, progress)
    Path(args.out).write_text(res.table_csv())
    curve = args.curve_out or f"{args.out}.curve.csv"
    Path(curve).write_text(res.curve_csv())
    print(f"wrote {args.out} and {curve}")
    for mode in modes:
        if mode != "baseline":
            better, n = res.online_wins(mode)
            print(f"{mode}: fewer median nodes than baseline on {better}/{n} openings; "
                  f"node ratio geomean {res.geomeans[mode][0]:.3f}")
    if args.ablation:
        instances = [(args.game, op) for op in openings]
        oracle = Oracle() if game.cells <= 9 else None
        table, _ = ablation(base, instances, theta0, oracle)
        out = args.ablation_out or f"{args.out}.ablation.csv"
        Path(out).write_text(table)
        print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    game = _game(args)
    opening = _opening(game, args.opening)
    if not args.workers_list and not args.vthr_list:
        raise UsageError("give --workers-list and/or --vthr-list")
    theta0 = _theta0(args, game)
    base = _solve_config(args, opening)
    parts = []
    if args.workers_list:
        table, _ = worker_sweep(base, args.workers_list, args.seeds, theta0)
        parts.append(table)
    if args.vthr_list:
        table, _ = vthr_sweep(base, args.vthr_list, args.seeds, theta0)
        parts.append(table)
    text = "\n".join(parts)
    Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


COMMANDS = {"pretrain": cmd_pretrain, "solve": cmd_solve, "verify": cmd_verify, "compare": cmd_compare,
            "sweep": cmd_sweep}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.cmd](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, CheckpointError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:  # noqa: BLE001 - report, do not dump a traceback
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
