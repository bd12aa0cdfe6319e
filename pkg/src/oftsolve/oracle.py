"""Exhaustive ground truth for small positions.

``solve_exact`` is a memoized negamax; ``exact_cost`` computes the proof
size recursion used as the cost target:

* terminal win: 1
* OR to move, won: 1 + min over winning children
* AND to move, won: 1 + sum over all children

Lost positions get the mirrored refutation cost (AND picks the cheapest
refuting child, OR needs every child refuted).
"""

from __future__ import annotations

import struct

from .errors import ContractViolation, OracleOverflow
from .games import AND, OR, GameState, Outcome
from .network import normalize_cost

DEFAULT_MAX_ENTRIES = 10_000_000


class Oracle:
    """Memoized exact solver.  Memos are keyed by canonical hash and are a
    pure function of the position, so one instance can serve many roots."""

    def __init__(self, max_entries: int = DEFAULT_MAX_ENTRIES):
        self.max_entries = max_entries
        self._outcome: dict[int, Outcome] = {}
        self._cost: dict[int, tuple[Outcome, int]] = {}

    def _check(self, memo):
        if len(memo) >= self.max_entries:
            raise OracleOverflow(f"oracle memo exceeded {self.max_entries} entries")

    def solve(self, s: GameState) -> Outcome:
        memo = self._outcome
        hit = memo.get(s.key)
        if hit is not None:
            return hit
        full = self._cost.get(s.key)
        if full is not None:
            return full[0]
        if s.outcome is not None:
            result = s.outcome
        elif s.to_move == OR:
            result = Outcome.LOSS
            for m in s.legal_moves():
                if self.solve(s.apply(m)) is Outcome.WIN:
                    result = Outcome.WIN
                    break
        else:
            result = Outcome.WIN
            for m in s.legal_moves():
                if self.solve(s.apply(m)) is Outcome.LOSS:
                    result = Outcome.LOSS
                    break
        self._check(memo)
        memo[s.key] = result
        return result

    def entry(self, s: GameState) -> tuple[Outcome, int]:
        """(outcome, proof cost if won else refutation cost)."""
        memo = self._cost
        hit = memo.get(s.key)
        if hit is not None:
            return hit
        if s.outcome is not None:
            result = (s.outcome, 1)
        else:
            kids = [self.entry(s.apply(m)) for m in s.legal_moves()]
            wins = [c for o, c in kids if o is Outcome.WIN]
            losses = [c for o, c in kids if o is Outcome.LOSS]
            if s.to_move == OR:
                result = (Outcome.WIN, 1 + min(wins)) if wins else (Outcome.LOSS, 1 + sum(losses))
            else:
                result = (Outcome.LOSS, 1 + min(losses)) if losses else (Outcome.WIN, 1 + sum(wins))
        self._check(memo)
        memo[s.key] = result
        return result

    def exact_cost(self, s: GameState) -> int:
        outcome, cost = self.entry(s)
        if outcome is not Outcome.WIN:
            raise ContractViolation(f"exact_cost of a lost position {s!r}; use refutation_cost")
        return cost

    def refutation_cost(self, s: GameState) -> int:
        outcome, cost = self.entry(s)
        if outcome is not Outcome.LOSS:
            raise ContractViolation(f"refutation_cost of a won position {s!r}")
        return cost

    def normalized_cost(self, s: GameState, v_max: float = 24.0) -> float:
        return normalize_cost(self.exact_cost(s), v_max)

    def winning_moves(self, s: GameState) -> list[int]:
        return [m for m in s.legal_moves() if self.solve(s.apply(m)) is Outcome.WIN]

    def player_wins(self, s: GameState, player: int) -> bool:
        """Negamax for an arbitrary designated winner.  A drawn terminal is a
        win for nobody."""
        return self._player_wins(s, player, {})

    def _player_wins(self, s, player, memo):
        hit = memo.get(s.key)
        if hit is not None:
            return hit
        if s.outcome is not None:
            if player == OR:
                result = s.outcome is Outcome.WIN
            else:
                # the AND player won only if the last mover was the AND player
                result = s.outcome is Outcome.LOSS and s.to_move == OR and _and_completed(s)
        elif s.to_move == player:
            result = any(self._player_wins(s.apply(m), player, memo) for m in s.legal_moves())
        else:
            result = all(self._player_wins(s.apply(m), player, memo) for m in s.legal_moves())
        memo[s.key] = result
        return result

    def __len__(self):
        return max(len(self._outcome), len(self._cost))

    # --- memo dump ---------------------------------------------------------

    _MAGIC = b"OFTO"
    _REC = struct.Struct(">QBQ")

    def dump(self) -> bytes:
        recs = b"".join(self._REC.pack(k, int(o), min(c, 2**64 - 1)) for k, (o, c) in sorted(self._cost.items()))
        body = struct.pack(">I", len(self._cost)) + recs
        return self._MAGIC + struct.pack(">I", len(body)) + body

    @classmethod
    def load(cls, data: bytes, max_entries: int = DEFAULT_MAX_ENTRIES) -> "Oracle":
        if data[:4] != cls._MAGIC:
            raise ValueError("not an oracle memo dump")
        (length,) = struct.unpack_from(">I", data, 4)
        if len(data) != 8 + length:
            raise ValueError("oracle memo dump length mismatch")
        (count,) = struct.unpack_from(">I", data, 8)
        if length != 4 + count * cls._REC.size:
            raise ValueError("oracle memo dump record count mismatch")
        o = cls(max_entries)
        for i in range(count):
            k, out, c = cls._REC.unpack_from(data, 12 + i * cls._REC.size)
            o._cost[k] = (Outcome(out), c)
        return o


def reachable_states(root: GameState, include_terminal: bool = False) -> list[GameState]:
    """Every distinct position reachable from ``root`` (root included)."""
    seen = {root.key: root}
    stack = [root]
    while stack:
        s = stack.pop()
        if s.outcome is not None:
            continue
        for m in s.legal_moves():
            c = s.apply(m)
            if c.key not in seen:
                seen[c.key] = c
                stack.append(c)
    return [s for s in seen.values() if include_terminal or s.outcome is None]


def cost_rank_correlation(net, root: GameState, oracle: Oracle | None = None) -> tuple[float, int]:
    """Spearman correlation between predicted cost and the exact normalized
    cost over every non-terminal won position reachable from ``root``.
    Returns (rho, number of positions)."""
    from scipy.stats import spearmanr

    from .network import evaluate_batch

    oracle = oracle or _default
    won = [s for s in reachable_states(root) if oracle.entry(s)[0] is Outcome.WIN]
    exact = [normalize_cost(oracle.entry(s)[1], net.v_max) for s in won]
    _, pred = evaluate_batch(net, won)
    rho = spearmanr(pred, exact).statistic
    return float(rho), len(won)


def _and_completed(s: GameState) -> bool:
    # Hex: a LOSS terminal always means an AND chain.  ttt: distinguish an O
    # line from a full-board draw.
    game = s.game
    if game.game_id != "ttt":
        return True
    b = s.board
    for line in ((0, 1, 2), (3, 4, 5), (6, 7, 8), (0, 3, 6), (1, 4, 7), (2, 5, 8), (0, 4, 8), (2, 4, 6)):
        if all(b[i] == AND + 1 for i in line):
            return True
    return False


_default = Oracle()


def solve_exact(s: GameState, oracle: Oracle | None = None) -> Outcome:
    return (oracle or _default).solve(s)


def exact_cost(s: GameState, oracle: Oracle | None = None) -> int:
    return (oracle or _default).exact_cost(s)


def oracle_cost_recursion(s: GameState, v_max: float = 24.0, oracle: Oracle | None = None) -> tuple[int, float]:
    """(raw cost C, normalized cost min(v_max, log2 C)) of a won position."""
    c = exact_cost(s, oracle)
    return c, normalize_cost(c, v_max)
