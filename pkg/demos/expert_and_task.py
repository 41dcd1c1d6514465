"""Walk through the toy task: start band, trap, goal and the two expert routes.

Run with ``python demos/expert_and_task.py``. Prints an ASCII map of a few
expert paths and the outcome mix of rollouts from an undertrained policy.
"""

import numpy as np

from ppguide import env as E
from ppguide import policy as P

W, H = 40, 20


def draw(paths):
    grid = [[" "] * W for _ in range(H)]
    for r in range(H):
        for c in range(W):
            x, y = (c + 0.5) / W, 1 - (r + 0.5) / H
            if E.in_trap(np.array([x, y])):
                grid[r][c] = "#"
            elif E.in_goal(np.array([x, y])):
                grid[r][c] = "G"
    for mark, pos in paths:
        for x, y in pos:
            r, c = min(H - 1, int((1 - y) * H)), min(W - 1, int(x * W))
            if grid[r][c] == " ":
                grid[r][c] = mark
    return "\n".join("|" + "".join(row) + "|" for row in grid)


demos = E.collect_demos(6)
print(draw([("L" if d.mode == "left" else "R", d.observations[:, :2]) for d in demos]))
for d in demos:
    print(f"seed {d.seed}: start x={d.observations[0, 0]:.2f} mode={d.mode:<5} {d.outcome} in {len(d.actions)} steps")

# a briefly trained policy still hits the trap often, which is what the
# later stages feed on
checkpoints = P.train_policy(E.collect_demos(40, base_seed=10_000), 80, seed=0, checkpoint_epochs=[40])
for ck in checkpoints:
    trajs = P.execute_episodes(ck, range(60))
    print(f"epoch {ck.epoch:>3}: success {P.success_rate(trajs):.2f} over {len(trajs)} rollouts")
