"""AND-OR search tree: PUCT statistics, proof-status propagation with
virtual wins, solution-tree extraction, and an independent verifier."""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass

from .errors import ContractViolation, ExtractionError
from .games import AND, OR, GameState, Outcome, decode_position, encode_position

DEFAULT_C_PUCT = 1.5
DEFAULT_V_MAX = 24.0
UNVISITED_Q = 0.5


class NodeStatus(enum.IntEnum):
    UNSOLVED = 0
    PROVEN_WIN = 1
    PROVEN_LOSS = 2
    VIRTUAL_WIN = 3


UNSOLVED = NodeStatus.UNSOLVED
PROVEN_WIN = NodeStatus.PROVEN_WIN
PROVEN_LOSS = NodeStatus.PROVEN_LOSS
VIRTUAL_WIN = NodeStatus.VIRTUAL_WIN
PROVEN = (PROVEN_WIN, PROVEN_LOSS)


class SearchNode:
    """One position in a proof-search tree.

    ``utility`` accumulates backed-up values already mapped to the parent's
    point of view, so ``utility / visits`` is the Q the parent selects on.
    ``proof`` holds evidence for a ProvenWin leaf that was not proven by its
    own children: a ``SolutionNode`` returned by a worker, or another
    ``SearchNode`` for the same position (transposition hit).

    A child's position is built from its parent on first access, since most
    expanded children are never visited.
    """

    __slots__ = ("_state", "kind", "parent", "move", "status", "visits", "utility", "prior", "cost",
                 "children", "job_id", "proof", "solved_by", "job_failed", "cost_version")

    def __init__(self, state: GameState, parent: SearchNode | None = None, move: int | None = None,
                 prior: float = 1.0):
        if state is None and (parent is None or move is None):
            raise ValueError("a node without a state needs a parent and a move")
        self._state = state
        self.kind = state.to_move if state is not None else 1 - parent.kind
        self.parent = parent
        self.move = move
        self.prior = prior
        self.status = UNSOLVED
        self.visits = 0
        self.utility = 0.0
        self.cost = None
        self.cost_version = None
        self.children: list[SearchNode] = []
        self.job_id = None
        self.proof = None
        self.solved_by = None
        self.job_failed = False

    @property
    def state(self) -> GameState:
        if self._state is None:
            self._state = self.parent.state.apply(self.move)
        return self._state

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def depth(self) -> int:
        d, node = 0, self
        while node.parent is not None:
            d, node = d + 1, node.parent
        return d

    def __repr__(self):
        return (f"SearchNode({self.state.history}, {self.status.name}, N={self.visits}, "
                f"children={len(self.children)})")


def expand(node: SearchNode, priors) -> list[SearchNode]:
    """Create one child per legal move; ``priors`` is indexed by cell."""
    moves = node.state.legal_moves()
    weights = [float(priors[m]) for m in moves]
    total = sum(weights)
    if total <= 0.0 or not math.isfinite(total):
        weights, total = [1.0] * len(moves), float(len(moves))
    node.children = [SearchNode(None, node, m, w / total) for m, w in zip(moves, weights)]
    return node.children


def mapped_utility(node: SearchNode, v: float, v_max: float) -> float:
    """Map a cost to [0, 1] from the point of view of the node's parent.

    An OR parent (whose children are AND nodes) wants cheap proofs; an AND
    parent wants the OR player's proof to be expensive.
    """
    if node.kind == AND:
        return 1.0 - v / v_max
    return v / v_max


def puct_score(parent: SearchNode, index: int, c_puct: float = DEFAULT_C_PUCT) -> float:
    child = parent.children[index]
    q = child.utility / child.visits if child.visits else UNVISITED_Q
    return q + c_puct * child.prior * math.sqrt(parent.visits) / (1 + child.visits)


def _scores(node, c_puct):
    sq = c_puct * math.sqrt(node.visits)
    out = []
    for i, ch in enumerate(node.children):
        if ch.status is UNSOLVED:
            n = ch.visits
            q = ch.utility / n if n else UNVISITED_Q
            out.append((q + sq * ch.prior / (1 + n), i))
    return out


def select_child(node: SearchNode, rng=None, k: int = 4, top_k: bool = True,
                 c_puct: float = DEFAULT_C_PUCT) -> SearchNode:
    scored = _scores(node, c_puct)
    if not scored:
        raise ContractViolation(f"no unsolved child to select under {node!r}")
    if top_k and node.kind == AND and node.visits > k and len(scored) > 1:
        # stable: equal scores keep move order
        scored.sort(key=lambda t: -t[0])
        pick = scored[: k][rng.randrange(min(k, len(scored)))]
        return node.children[pick[1]]
    best_score, best = scored[0]
    for score, i in scored[1:]:
        if score > best_score:
            best_score, best = score, i
    return node.children[best]


def select_path(root: SearchNode, rng=None, k: int = 4, top_k: bool = True,
                c_puct: float = DEFAULT_C_PUCT) -> list[SearchNode]:
    """Walk from ``root`` to a leaf following PUCT, never entering solved or
    virtually solved children.  With ``top_k`` set, AND nodes visited more
    than ``k`` times pick uniformly among their ``k`` best children."""
    if root.status is not UNSOLVED:
        raise ContractViolation(f"selection from a {root.status.name} root")
    path = [root]
    node = root
    while node.children:
        node = select_child(node, rng, k, top_k, c_puct)
        path.append(node)
    return path


def backpropagate(path: list[SearchNode], v_leaf: float, v_max: float = DEFAULT_V_MAX) -> None:
    if not 0.0 <= v_leaf <= v_max:
        raise ContractViolation(f"leaf value {v_leaf} outside [0, {v_max}]")
    path[-1].cost = v_leaf
    for node in path:
        node.visits += 1
        node.utility += mapped_utility(node, v_leaf, v_max)


def compute_status(node: SearchNode) -> NodeStatus:
    """Status implied by the children (the node's own status if it has none)."""
    children = node.children
    if not children:
        return node.status
    if node.kind == OR:
        virtual = False
        all_lost = True
        for ch in children:
            st = ch.status
            if st is PROVEN_WIN:
                return PROVEN_WIN
            if st is VIRTUAL_WIN:
                virtual = True
            if st is not PROVEN_LOSS:
                all_lost = False
        if virtual:
            return VIRTUAL_WIN
        return PROVEN_LOSS if all_lost else UNSOLVED
    all_won = True
    all_winish = True
    for ch in children:
        st = ch.status
        if st is PROVEN_LOSS:
            return PROVEN_LOSS
        if st is not PROVEN_WIN:
            all_won = False
            if st is not VIRTUAL_WIN:
                all_winish = False
    if all_won:
        return PROVEN_WIN
    return VIRTUAL_WIN if all_winish else UNSOLVED


def set_status(node: SearchNode, status: NodeStatus) -> None:
    if node.status in PROVEN and status is not node.status:
        raise ContractViolation(f"attempt to change {node.status.name} to {status.name} at {node!r}")
    node.status = status


def propagate_status(node: SearchNode) -> list[SearchNode]:
    """Recompute ancestors of ``node`` after its status changed.

    Returns the ancestors whose status changed, innermost first.
    """
    changed = []
    p = node.parent
    while p is not None:
        new = compute_status(p)
        if new is p.status:
            break
        set_status(p, new)
        changed.append(p)
        p = p.parent
    return changed


def iter_nodes(root: SearchNode):
    stack = [root]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


def recompute_statuses(root: SearchNode) -> dict[int, NodeStatus]:
    """From-scratch bottom-up statuses, keyed by ``id(node)``.  Leaves keep
    their assigned status.  Does not modify the tree."""
    out = {}
    order = list(iter_nodes(root))
    for n in reversed(order):
        if not n.children:
            out[id(n)] = n.status
            continue
        # evaluate compute_status against the recomputed child values
        saved = [c.status for c in n.children]
        for c in n.children:
            c.status = out[id(c)]
        out[id(n)] = compute_status(n)
        for c, s in zip(n.children, saved):
            c.status = s
    return out


def count_nodes(root: SearchNode) -> int:
    return sum(1 for _ in iter_nodes(root))


# --- solution trees -------------------------------------------------------

class SolutionNode:
    __slots__ = ("move", "children")

    def __init__(self, move: int | None = None, children: list | None = None):
        self.move = move
        self.children = children if children is not None else []

    def size(self) -> int:
        return sum(1 for _ in _iter_solution(self))

    def copy(self) -> "SolutionNode":
        return SolutionNode(self.move, [c.copy() for c in self.children])

    def __eq__(self, other):
        if not isinstance(other, SolutionNode):
            return NotImplemented
        stack = [(self, other)]
        while stack:
            a, b = stack.pop()
            if a.move != b.move or len(a.children) != len(b.children):
                return False
            stack.extend(zip(a.children, b.children))
        return True

    __hash__ = None

    def __repr__(self):
        return f"SolutionNode(move={self.move}, children={len(self.children)})"


def _iter_solution(root):
    stack = [root]
    while stack:
        n = stack.pop()
        yield n
        stack.extend(reversed(n.children))


@dataclass
class SolutionTree:
    """A winning strategy for the OR player from ``root_state``."""

    root_state: GameState
    root: SolutionNode

    def size(self) -> int:
        return self.root.size()

    def copy(self) -> "SolutionTree":
        return SolutionTree(self.root_state, self.root.copy())


def extract_solution(root: SearchNode) -> SolutionTree:
    if root.status is not PROVEN_WIN:
        raise ExtractionError(f"root is {root.status.name}, not PROVEN_WIN")
    return SolutionTree(root.state, _extract(root, None))


def _extract(node: SearchNode, move):
    while isinstance(node.proof, SearchNode):
        node = node.proof
    state = node.state
    if state.outcome is Outcome.WIN:
        return SolutionNode(move)
    if isinstance(node.proof, SolutionNode):
        sub = node.proof.copy()
        sub.move = move
        return sub
    if node.status is not PROVEN_WIN:
        raise ExtractionError(f"{node!r} is on the solution but not proven")
    if not node.children:
        raise ExtractionError(f"proven non-terminal leaf {node!r} has no recorded proof")
    if state.to_move == OR:
        for ch in node.children:
            if ch.status is PROVEN_WIN:
                return SolutionNode(move, [_extract(ch, ch.move)])
        raise ExtractionError(f"OR node {node!r} is PROVEN_WIN without a winning child")
    return SolutionNode(move, [_extract(ch, ch.move) for ch in node.children])


class Violation(enum.Enum):
    ILLEGAL_MOVE = "illegal move"
    DUPLICATE_MOVE = "duplicate move"
    MISSING_REPLY = "missing AND reply"
    OR_FANOUT = "OR node must have exactly one child"
    NON_TERMINAL_LEAF = "leaf is not terminal"
    LOSS_LEAF = "leaf is not a win"
    TERMINAL_INTERIOR = "terminal position has children"
    GAME_MISMATCH = "tree belongs to another game"


@dataclass
class VerifyResult:
    ok: bool
    violation: Violation | None = None
    path: tuple = ()
    detail: str = ""
    nodes_checked: int = 0

    def __bool__(self):
        return self.ok

    def describe(self) -> str:
        if self.ok:
            return f"ok ({self.nodes_checked} nodes)"
        return f"{self.violation.value} at {list(self.path)}: {self.detail}"


def verify_solution(tree: SolutionTree, game_id: str | None = None) -> VerifyResult:
    """Check a solution tree against the game rules alone.

    Every move must be legal, every AND node must answer every legal reply,
    every OR node must pick exactly one move, and every leaf must be a
    terminal OR-player win.  Reports the first violation in pre-order.
    """
    root_state = tree.root_state
    if game_id is not None and root_state.game.game_id != game_id:
        return VerifyResult(False, Violation.GAME_MISMATCH, (),
                            f"tree is for {root_state.game.game_id}, expected {game_id}")
    game = root_state.game
    # rebuild the root from its move list so nothing cached by the solver is trusted
    state = game.replay(root_state.history)
    checked = 0
    stack = [(tree.root, state, ())]
    while stack:
        node, s, path = stack.pop()
        checked += 1

        def fail(v, detail, _path=path):
            return VerifyResult(False, v, _path, detail, checked)

        if s.outcome is not None:
            if node.children:
                return fail(Violation.TERMINAL_INTERIOR, f"{len(node.children)} children below a finished game")
            if s.outcome is not Outcome.WIN:
                return fail(Violation.LOSS_LEAF, "game over without an OR-player win")
            continue
        if not node.children:
            return fail(Violation.NON_TERMINAL_LEAF, "game is not over")
        seen = set()
        nexts = []
        for ch in node.children:
            m = ch.move
            if not (isinstance(m, int) and 0 <= m < game.cells) or s.board[m] != 0:
                return fail(Violation.ILLEGAL_MOVE, f"move {m} is not legal here")
            if m in seen:
                return fail(Violation.DUPLICATE_MOVE, f"move {m} listed twice")
            seen.add(m)
            nexts.append((ch, s.apply(m), path + (m,)))
        if s.to_move == OR:
            if len(node.children) != 1:
                return fail(Violation.OR_FANOUT, f"{len(node.children)} children")
        else:
            missing = [m for m in s.legal_moves() if m not in seen]
            if missing:
                return fail(Violation.MISSING_REPLY, f"no answer to move {missing[0]}")
        stack.extend(reversed(nexts))
    return VerifyResult(True, nodes_checked=checked)


# --- file formats ----------------------------------------------------------

TREE_MAGIC = b"OFTS"
TREE_FORMAT_VERSION = 1
_NO_MOVE = 0xFFFF
_KIND_TERMINAL = 2
_KIND_UNKNOWN = 0xFF


def solution_to_bytes(tree: SolutionTree) -> bytes:
    body = io.BytesIO()
    body.write(struct.pack(">B", tree.root_state.game.wire_id))
    body.write(encode_position(tree.root_state))
    body.write(struct.pack(">I", tree.size()))
    body.write(encode_solution_nodes(tree.root_state, tree.root))
    data = body.getvalue()
    return TREE_MAGIC + struct.pack(">BI", TREE_FORMAT_VERSION, len(data)) + data


def encode_solution_nodes(state: GameState | None, root: SolutionNode) -> bytes:
    """Pre-order records (kind byte, move, child count) under ``state``.

    The kind byte is informational; it is 0xFF when no state is given.
    """
    out = bytearray()
    stack = [(root, state)]
    while stack:
        node, s = stack.pop()
        if s is None:
            kind = _KIND_UNKNOWN
        elif s.outcome is not None:
            kind = _KIND_TERMINAL
        else:
            kind = s.to_move
        move = _NO_MOVE if node.move is None else node.move
        out += struct.pack(">BHH", kind, move, len(node.children))
        for ch in reversed(node.children):
            nxt = None
            if s is not None and s.outcome is None and 0 <= ch.move < s.game.cells and s.board[ch.move] == 0:
                nxt = s.apply(ch.move)
            stack.append((ch, nxt))
    return bytes(out)


def decode_solution_nodes(data: bytes, offset: int = 0, count: int | None = None) -> tuple[SolutionNode, int]:
    """Inverse of ``encode_solution_nodes``; stops after one complete subtree."""
    rec = struct.Struct(">BHH")
    fake_root = SolutionNode()
    stack = [(fake_root, 1)]
    read = 0
    while stack:
        parent, remaining = stack[-1]
        if remaining == 0:
            stack.pop()
            continue
        stack[-1] = (parent, remaining - 1)
        if len(data) - offset < rec.size:
            raise ValueError("truncated solution-tree record")
        _, move, nchild = rec.unpack_from(data, offset)
        offset += rec.size
        read += 1
        if count is not None and read > count:
            raise ValueError("more records than declared")
        node = SolutionNode(None if move == _NO_MOVE else move)
        parent.children.append(node)
        if nchild:
            stack.append((node, nchild))
    if count is not None and read != count:
        raise ValueError(f"declared {count} records, read {read}")
    return fake_root.children[0], offset


def solution_from_bytes(data: bytes) -> SolutionTree:
    if data[:4] != TREE_MAGIC:
        raise ValueError("not a solution-tree file")
    if len(data) < 9:
        raise ValueError("truncated solution-tree header")
    version, length = struct.unpack_from(">BI", data, 4)
    if version != TREE_FORMAT_VERSION:
        raise ValueError(f"unsupported solution-tree format version {version}")
    body = data[9:]
    if len(body) != length:
        raise ValueError(f"body length {len(body)} does not match header {length}")
    game_wire = body[0]
    state, off = decode_position(body, 1)
    if state.game.wire_id != game_wire:
        raise ValueError("header game id does not match root position")
    (count,) = struct.unpack_from(">I", body, off)
    root, end = decode_solution_nodes(body, off + 4, count)
    if end != len(body):
        raise ValueError("trailing bytes after solution tree")
    return SolutionTree(state, root)


def write_solution(tree: SolutionTree, path) -> None:
    with open(path, "wb") as f:
        f.write(solution_to_bytes(tree))


def read_solution(path) -> SolutionTree:
    with open(path, "rb") as f:
        return solution_from_bytes(f.read())


def solution_to_text(tree: SolutionTree) -> str:
    """Indented move lines, one per node in pre-order."""
    game = tree.root_state.game
    lines = [f"{game.game_id} after [{' '.join(game.move_name(m) for m in tree.root_state.history)}]"]
    stack = [(tree.root, tree.root_state, 0)]
    while stack:
        node, s, depth = stack.pop()
        if node.move is None:
            label = "root"
        else:
            label = game.move_name(node.move)
        if s.outcome is not None:
            tag = "WIN" if s.outcome is Outcome.WIN else "LOSS"
        else:
            tag = "OR" if s.to_move == OR else "AND"
        lines.append("  " * depth + f"{label} {tag}")
        for ch in reversed(node.children):
            stack.append((ch, s.apply(ch.move), depth + 1))
    return "\n".join(lines) + "\n"
