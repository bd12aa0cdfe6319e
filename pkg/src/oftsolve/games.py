"""Game rules for the reference games: Hex on n x n boards and Tic-Tac-Toe.

Both games are played between the OR player, whose win is being proven and
who always moves first, and the AND player.  Moves are 0-based cell indices
in row-major order.  Positions are immutable ``GameState`` objects.
"""

from __future__ import annotations

import enum
import struct
import zlib
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractViolation, IllegalMoveError, ProtocolError

OR = 0
AND = 1

EMPTY = 0
OR_STONE = 1
AND_STONE = 2


class Outcome(enum.IntEnum):
    """Game result seen from the OR player.  Draws count as losses."""

    LOSS = 0
    WIN = 1


class GameState:
    """An immutable position together with the history that produced it."""

    __slots__ = ("game", "board", "to_move", "history", "key", "outcome", "_uf")

    def __init__(self, game, board, to_move, history, key, outcome, uf=None):
        self.game = game
        self.board = board
        self.to_move = to_move
        self.history = history
        self.key = key
        self.outcome = outcome
        self._uf = uf

    @property
    def kind(self) -> int:
        """OR if the OR player is to move, else AND."""
        return self.to_move

    @property
    def is_terminal(self) -> bool:
        return self.outcome is not None

    def legal_moves(self) -> list[int]:
        return legal_moves(self)

    def apply(self, move: int) -> "GameState":
        return apply(self, move)

    def __eq__(self, other):
        if not isinstance(other, GameState):
            return NotImplemented
        return (self.game.game_id == other.game.game_id and self.board == other.board
                and self.to_move == other.to_move)

    def __hash__(self):
        return self.key

    def __repr__(self):
        moves = ",".join(str(m) for m in self.history)
        return f"GameState({self.game.game_id}, [{moves}])"


class Game:
    """Base class for a set of game rules."""

    game_id: str
    wire_id: int
    rows: int
    cols: int

    def __init__(self):
        self.cells = self.rows * self.cols
        rng = np.random.default_rng(zlib.crc32(self.game_id.encode()))
        raw = [int(x) for x in rng.integers(0, 2**64, size=2 * self.cells + 2, dtype=np.uint64)]
        self._stone_keys = (tuple(raw[: self.cells]), tuple(raw[self.cells: 2 * self.cells]))
        self.turn_key = raw[-2]
        self.empty_key = raw[-1]
        self._initial = None

    def initial(self) -> GameState:
        if self._initial is None:
            self._initial = GameState(self, (EMPTY,) * self.cells, OR, (), self.empty_key, None,
                                      self._initial_uf())
        return self._initial

    def replay(self, moves: Iterable[int]) -> GameState:
        s = self.initial()
        for m in moves:
            s = apply(s, m)
        return s

    def stone_key(self, player: int, cell: int) -> int:
        return self._stone_keys[player][cell]

    def move_name(self, cell: int) -> str:
        r, c = divmod(cell, self.cols)
        return f"{chr(ord('a') + c)}{r + 1}"

    def parse_move(self, text: str) -> int:
        text = text.strip().lower()
        if text.isdigit():
            return int(text)
        col = ord(text[0]) - ord("a")
        row = int(text[1:]) - 1
        if not (0 <= col < self.cols and 0 <= row < self.rows):
            raise ValueError(f"move {text!r} is off the board")
        return row * self.cols + col

    def _initial_uf(self):
        return None

    def _play(self, state: GameState, cell: int):
        """Return (outcome, union-find) for the position after ``cell``."""
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.game_id})"


class Hex(Game):
    """Hex on an n x n rhombus.  The OR player joins the top and bottom rows,
    the AND player the left and right columns.  There are no draws."""

    def __init__(self, n: int):
        if not 2 <= n <= 11:
            raise ValueError(f"unsupported Hex board size {n}")
        self.n = n
        self.rows = self.cols = n
        self.game_id = f"hex-{n}"
        self.wire_id = n
        super().__init__()
        self.neighbors = tuple(tuple(self._neighbors(c)) for c in range(self.cells))
        # virtual edge nodes follow the cells
        self.top, self.bottom, self.left, self.right = range(self.cells, self.cells + 4)

    def _neighbors(self, cell):
        n = self.n
        r, c = divmod(cell, n)
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, 1), (1, -1)):
            rr, cc = r + dr, c + dc
            if 0 <= rr < n and 0 <= cc < n:
                yield rr * n + cc

    def _initial_uf(self):
        return tuple(range(self.cells + 4))

    def _play(self, state, cell):
        parent = list(state._uf)

        def find(i):
            root = i
            while parent[root] != root:
                root = parent[root]
            while parent[i] != root:
                parent[i], i = root, parent[i]
            return root

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        player = state.to_move
        stone = player + 1
        board = state.board
        for nb in self.neighbors[cell]:
            if board[nb] == stone:
                union(cell, nb)
        r, c = divmod(cell, self.n)
        if player == OR:
            if r == 0:
                union(cell, self.top)
            if r == self.n - 1:
                union(cell, self.bottom)
            outcome = Outcome.WIN if find(self.top) == find(self.bottom) else None
        else:
            if c == 0:
                union(cell, self.left)
            if c == self.n - 1:
                union(cell, self.right)
            outcome = Outcome.LOSS if find(self.left) == find(self.right) else None
        return outcome, tuple(parent)


_TTT_LINES = ((0, 1, 2), (3, 4, 5), (6, 7, 8), (0, 3, 6), (1, 4, 7), (2, 5, 8), (0, 4, 8), (2, 4, 6))


class TicTacToe(Game):
    """3 x 3 Tic-Tac-Toe where the OR player (X) must get three in a row.
    A full board without an X line is a loss for X."""

    game_id = "ttt"
    wire_id = 0
    rows = cols = 3

    def __init__(self):
        super().__init__()
        self.lines_through = tuple(tuple(l for l in _TTT_LINES if c in l) for c in range(9))

    def _play(self, state, cell):
        stone = state.to_move + 1
        board = state.board
        for line in self.lines_through[cell]:
            if all(board[i] == stone or i == cell for i in line):
                return (Outcome.WIN if state.to_move == OR else Outcome.LOSS), None
        if len(state.history) + 1 == 9:
            return Outcome.LOSS, None
        return None, None


_GAMES: dict[str, Game] = {}


def get_game(game_id: str) -> Game:
    """Look up (and cache) rules by id: ``"ttt"`` or ``"hex-<n>"``."""
    game = _GAMES.get(game_id)
    if game is None:
        if game_id == "ttt":
            game = TicTacToe()
        elif game_id.startswith("hex-") and game_id[4:].isdigit():
            game = Hex(int(game_id[4:]))
        else:
            raise ValueError(f"unknown game id {game_id!r}")
        _GAMES[game_id] = game
    return game


def game_from_wire_id(wire_id: int) -> Game:
    if wire_id == 0:
        return get_game("ttt")
    if 2 <= wire_id <= 11:
        return get_game(f"hex-{wire_id}")
    raise ProtocolError(f"unknown game wire id {wire_id}")


def legal_moves(s: GameState) -> list[int]:
    """Empty cells in ascending order.  Terminal positions have no moves."""
    if s.outcome is not None:
        raise ContractViolation(f"legal_moves called on terminal position {s!r}")
    return [i for i, v in enumerate(s.board) if v == EMPTY]


def apply(s: GameState, move: int) -> GameState:
    game = s.game
    if s.outcome is not None:
        raise IllegalMoveError(move, "game is over")
    if not (isinstance(move, (int, np.integer)) and 0 <= move < game.cells):
        raise IllegalMoveError(move, "off the board")
    if s.board[move] != EMPTY:
        raise IllegalMoveError(move)
    move = int(move)
    outcome, uf = game._play(s, move)
    board = s.board[:move] + (s.to_move + 1,) + s.board[move + 1:]
    key = s.key ^ game.stone_key(s.to_move, move) ^ game.turn_key
    return GameState(game, board, 1 - s.to_move, s.history + (move,), key, outcome, uf)


def terminal_outcome(s: GameState) -> Outcome | None:
    return s.outcome


def canonical_hash(s: GameState) -> int:
    """64-bit Zobrist key, independent of move order."""
    return s.key


def encode(s: GameState) -> np.ndarray:
    """OR-stone plane, AND-stone plane, then 1.0 if the OR player is to move."""
    cells = s.game.cells
    board = np.frombuffer(bytes(s.board), dtype=np.uint8)
    x = np.zeros(2 * cells + 1)
    x[:cells] = board == OR_STONE
    x[cells: 2 * cells] = board == AND_STONE
    x[-1] = 1.0 if s.to_move == OR else 0.0
    return x


def encode_many(states: Sequence[GameState]) -> np.ndarray:
    if not states:
        return np.zeros((0, 0))
    cells = states[0].game.cells
    boards = np.frombuffer(b"".join(bytes(s.board) for s in states), dtype=np.uint8).reshape(len(states), cells)
    x = np.zeros((len(states), 2 * cells + 1))
    x[:, :cells] = boards == OR_STONE
    x[:, cells: 2 * cells] = boards == AND_STONE
    x[:, -1] = [s.to_move == OR for s in states]
    return x


def legal_mask(s: GameState) -> np.ndarray:
    return np.frombuffer(bytes(s.board), dtype=np.uint8) == EMPTY


# --- position wire encoding ------------------------------------------------

def encode_position(s: GameState) -> bytes:
    n = len(s.history)
    return struct.pack(f">BH{n}H", s.game.wire_id, n, *s.history)


def decode_position(data: bytes, offset: int = 0) -> tuple[GameState, int]:
    """Decode a position; returns it and the offset just past it."""
    if len(data) - offset < 3:
        raise ProtocolError("truncated position header")
    wire_id, n = struct.unpack_from(">BH", data, offset)
    game = game_from_wire_id(wire_id)
    end = offset + 3 + 2 * n
    if len(data) < end:
        raise ProtocolError("truncated position move list")
    moves = struct.unpack_from(f">{n}H", data, offset + 3)
    try:
        s = game.replay(moves)
    except IllegalMoveError as e:
        raise ProtocolError(f"position does not replay: {e}") from None
    return s, end


def render(s: GameState) -> str:
    """ASCII board: X for OR stones, O for AND stones."""
    g = s.game
    chars = ".XO"
    rows = []
    for r in range(g.rows):
        pad = " " * r if isinstance(g, Hex) else ""
        rows.append(pad + " ".join(chars[s.board[r * g.cols + c]] for c in range(g.cols)))
    return "\n".join(rows)
