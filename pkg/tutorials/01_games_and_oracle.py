# %% [markdown]
# # Games, positions and the exact oracle
#
# Every solver component works on immutable ``GameState`` objects.  The OR
# player moves first and is the side whose win we try to prove.  In Hex the
# OR player connects top to bottom; in Tic-Tac-Toe a draw counts as a loss
# for the OR player.

# %%
from oftsolve.games import OR, Outcome, get_game, render
from oftsolve.oracle import Oracle, oracle_cost_recursion, reachable_states

hex3 = get_game("hex-3")
s = hex3.replay([hex3.parse_move("b2"), hex3.parse_move("a1")])
print(render(s))
print("to move:", "OR" if s.to_move == OR else "AND", "legal:", s.legal_moves())

# %% [markdown]
# Positions carry a 64-bit Zobrist key, so transpositions share a key.

# %%
a = hex3.replay([4, 0, 8])
b = hex3.replay([8, 0, 4])
print(hex(a.key), a.key == b.key)

# %% [markdown]
# The oracle solves small boards exhaustively and memoizes (outcome, cost)
# per position.  Cost is the node count of the cheapest proof: one for a
# terminal, one plus the cheapest child at OR nodes, one plus the sum over
# children at AND nodes.

# %%
oracle = Oracle()
for gid in ("ttt", "hex-2", "hex-3"):
    g = get_game(gid)
    print(gid, oracle.solve(g.initial()).name)

cost, v = oracle_cost_recursion(hex3.initial(), oracle=oracle)
print("empty hex-3: proof cost", cost, "log2 cost", round(v, 3))
print("ttt refutation cost:", oracle.refutation_cost(get_game("ttt").initial()))

# %% [markdown]
# Which first moves win on 3x3 Hex?

# %%
wins = oracle.winning_moves(hex3.initial())
print("winning first moves:", [hex3.move_name(m) for m in wins])
states = reachable_states(hex3.initial())
won = sum(oracle.solve(x) is Outcome.WIN for x in states)
print(f"{won} of {len(states)} non-terminal hex-3 positions are OR wins")
