"""From rollouts to pseudo-labels.

Trains a small policy, collects a two-checkpoint corpus, fits the attention
MIL model on it and shows where attention lands inside a success bag and a
failure bag, then how many instances each threshold keeps.
"""

import numpy as np

from ppguide import env as E
from ppguide import harness as H
from ppguide import policy as P
from ppguide.labels import attention_zscores, dataset_from_attention
from ppguide.mil import bag_accuracy, bag_attention, train_mil

checkpoints = P.train_policy(E.collect_demos(40, base_seed=10_000), 160, seed=0, checkpoint_epochs=[80, 120])
corpus = H.collect_rollouts(checkpoints[:2], 60, base_seed=100_000)
print("corpus", corpus.counts)

norm = checkpoints[-1].normalizer
mil = train_mil(corpus.trajectories, 20, seed=0, normalizer=norm)
print(f"bag accuracy {bag_accuracy(mil, corpus.trajectories):.3f}")

alphas = [bag_attention(mil, t) for t in corpus.trajectories]
for outcome in (E.SUCCESS, E.FAILURE):
    i = next(i for i, t in enumerate(corpus.trajectories) if t.outcome == outcome and len(t) > 3)
    traj, z = corpus.trajectories[i], attention_zscores(alphas[i])
    print(f"\n{outcome} bag, seed {traj.seed}")
    for step, (o, score) in enumerate(zip(traj.obs, z)):
        bar = "*" * max(0, int(round(2 * score)) + 2)
        print(f"  chunk {step:>2} at ({o[4]:.2f}, {o[5]:.2f})  z={score:+.2f} {bar}")

print()
for tau in (1.5, 1.75, 2.0, 2.25):
    ds = dataset_from_attention(corpus.trajectories, alphas, tau)
    c = ds.counts
    print(f"tau={tau:<5g} SR {c['SR']:>4} FR {c['FR']:>4} IR {c['IR']:>5}  ratio {ds.imbalance():.1f}")
print("\nmean z of the last chunk in failure bags",
      np.mean([attention_zscores(a)[-1] for a, t in zip(alphas, corpus.trajectories) if not t.success and len(a) > 1]))
