# %% [markdown]
# # Online fine-tuning on 4x4 Hex
#
# A weak network is pretrained by self-play.  Each opening is then solved
# twice: once with the network fixed (``baseline``) and once with the
# trainer fine-tuning it from the manager's critical positions while the
# search runs (``online-cp``).  Workers pick up each new checkpoint.
#
# Takes about three minutes on one core.

# %%
import time

from oftsolve.games import get_game
from oftsolve.harness import SolveConfig, compare
from oftsolve.network import evaluate
from oftsolve.trainer import TrainerConfig, pretrain

hex4 = get_game("hex-4")
t0 = time.perf_counter()
cfg = TrainerConfig(seed=0, lr=1.0, batch_size=1024, steps_per_round=500, games_per_round=500,
                    replay_games=100_000)
theta0, records = pretrain(hex4, 2000, cfg)
print(f"pretrained on {theta0.samples} games in {time.perf_counter() - t0:.0f}s")
for r in records:
    print(f"round {r.iteration}: loss {r.loss:.3f}")

# %%
_, v = evaluate(theta0.net, hex4.replay([hex4.parse_move("c2")]))
print("predicted log2 cost after c2:", round(v, 2))

# %% [markdown]
# Two openings, two seeds.  The table lists every run, then per-opening
# medians with node and time ratios against the baseline.

# %%
res = compare(SolveConfig(game="hex-4", workers=2), [(6,), (9,)], ["baseline", "online-cp"], [0, 1], theta0)
print(res.table_csv())
better, n = res.online_wins("online-cp")
print(f"online-cp used fewer median nodes on {better} of {n} openings")
