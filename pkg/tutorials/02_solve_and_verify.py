# %% [markdown]
# # Solving an opening and checking the proof
#
# ``solve`` runs the manager against a set of workers.  By default the
# workers are simulated in process with a node-count clock, which keeps runs
# deterministic.  Leaves whose predicted cost falls under ``v_thr`` become
# worker jobs; the rest are expanded in the manager.

# %%
from oftsolve.games import get_game
from oftsolve.harness import SolveConfig, solve
from oftsolve.manager import audit_event_log, stats_header
from oftsolve.tree import solution_to_text, verify_solution

rep = solve(SolveConfig(game="hex-3", workers=2, v_thr=12.0, seed=0))
print(rep.outcome_name)
print(stats_header() + rep.stats.csv_row())

# %% [markdown]
# A win comes with a solution tree: one move at every OR node and every
# reply at every AND node.  The verifier replays it against the rules and
# trusts nothing the solver cached.

# %%
tree = rep.solution
print(verify_solution(tree, "hex-3").describe())
print("\n".join(solution_to_text(tree).splitlines()[:12]))

# %% [markdown]
# Break the tree and the verifier names the first problem it meets.

# %%
broken = tree.copy()
broken.root.children[0].children.pop()
print(verify_solution(broken).describe())

# %% [markdown]
# The manager logs every dispatch and expansion.  The auditor checks that
# jobs only went to AND nodes predicted cheaper than ``v_thr`` and that
# every AND leaf expanded in the manager was predicted at or above it.

# %%
log = rep.manager.event_log
print(len(log), "events;", "violations:", audit_event_log(log, 12.0))

# %% [markdown]
# Tic-Tac-Toe is a draw under perfect play, so the OR player cannot force a
# win and the solver reports a loss.

# %%
print(solve(SolveConfig(game="ttt", opening=(4,), workers=2, v_thr=12.0)).outcome_name)
