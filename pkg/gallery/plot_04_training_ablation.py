"""
Training the tabular policy
===========================

Three configurations on the same questions and seeds: process advantages
with similarity pruning, group-normalized outcome advantages, and process
advantages with random pruning. Success is the exact expected success of
the current policy, computed by enumerating every template sequence.

Set ``TREEPS_GALLERY_QUICK=1`` for a short run.
"""

import os

import numpy as np

from treeps.env import EnvConfig, generate_corpus
from treeps.policy import TabularPolicy
from treeps.trainer import TrainConfig, run_training
from treeps.tree import RolloutConfig

quick = os.environ.get("TREEPS_GALLERY_QUICK") == "1"
iterations, seeds = (10, 2) if quick else (200, 5)

corpus, questions = generate_corpus(EnvConfig(seed=0, num_chains=8, hop_count=2))
print("initial policy:", TabularPolicy(corpus).theta.shape, "logits")

modes = [("process", "similarity"), ("outcome_grpo", "similarity"), ("process", "random")]
curves = {}
for adv, prune in modes:
    finals = []
    for seed in range(seeds):
        cfg = TrainConfig(iterations=iterations, advantage_mode=adv, pruning_mode=prune, seed=seed)
        res = run_training((corpus, questions), TabularPolicy(corpus), RolloutConfig(), cfg)
        finals.append(res.final_success)
        curves.setdefault((adv, prune), []).append([r["success"] for r in res.rows])
    print(f"{adv:12s} {prune:10s} final success {np.mean(finals):.4f} +- {np.std(finals):.4f}")

###############################################################################
# Mean learning curve, sampled every tenth of the run.
for key, runs in curves.items():
    mean = np.mean(runs, axis=0)
    idx = np.linspace(0, len(mean) - 1, 6).astype(int)
    print(key, np.round(mean[idx], 3))
