"""Confidence-guided training versus group-normalized training on the toy world.

Run: python3 demos/training_tour.py   (about ten seconds)
"""

from saliency_rl import TrainerConfig, build_world, categorize_responses, train
from saliency_rl.optimize import DEFAULT_MAX_LENGTH, collect_samples
from saliency_rl.policy import TabularPolicy

world = build_world(0)
start = TabularPolicy.uniform(len(world.episodes), DEFAULT_MAX_LENGTH, world.vocab)

# Cost per step: one trace per prompt versus a group of eight.
for algo, g in (("cgpo", 1), ("grpo", 8)):
    report, _ = train(TrainerConfig(algorithm=algo, steps=300, group_size=g, schedule="R", seed=1), world, start)
    print(f"{algo}: traces={report.traces} mean_step_ms={report.mean_step_ms:.3f}")

# Full run with the interleaved RL/SFT schedule.
report, policy = train(TrainerConfig(steps=20_000, seed=0), world, start)
print(f"\ncgpo 20000 steps: final-100 RL reward {report.final_mean_reward(100):.4f}")
for step in (0, 1000, 5000, 10000, 19999):
    rec = report.records[step]
    print(f"  step {step:5d} phase={rec.phase} reward={rec.reward}")

# Where do the large advantages fall at a mid-training checkpoint?
_, mid = train(TrainerConfig(steps=2500, seed=0), world, start)
samples, advantages = collect_samples(mid, world, 1200, group_size=8, seed=5)
stats = categorize_responses(samples, advantages)
off, diag = stats.informative_gap("cgpo")
print(f"\nmid-training categories {stats.counts}")
print(f"mean rank-normalized |A| off-diagonal {off:.3f} vs diagonal {diag:.3f}")
