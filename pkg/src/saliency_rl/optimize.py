"""Confidence-guided single-sample policy optimization (CGPO) and a GRPO baseline.

CGPO samples one response per step, scores it, and uses the signed gap
between reward and mean token confidence as its advantage. Supervised steps
on golden responses are interleaved with the RL steps by a fixed pattern
instead of a KL penalty. GRPO samples a group of G responses and normalizes
rewards within the group.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .environment import World, score_response
from .policy import TabularPolicy, Trajectory, kl_gradient, sample, sft_gradient

__all__ = [
    "TrainerConfig",
    "StepRecord",
    "TrainingReport",
    "CategoryStats",
    "cgpo_advantage",
    "bce_loss",
    "bce_gradient_check",
    "grpo_advantages",
    "clipped_surrogate",
    "surrogate_logit_gradient",
    "isr_phase",
    "train",
    "rank_normalize",
    "categorize_responses",
    "collect_samples",
    "CATEGORIES",
    "DEFAULT_MAX_LENGTH",
]

CATEGORIES = ("HrHc", "HrLc", "LrHc", "LrLc")
DEFAULT_MAX_LENGTH = 24  # positions per prompt; the longest golden answer in the default world is 17


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "cgpo"
    group_size: int = 8
    epsilon: float = 0.2
    kl_beta: float = 0.04
    schedule: str = "RRRSS"
    lr_rl: float = 0.05
    lr_sft: float = 0.1
    steps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ("cgpo", "grpo"):
            raise ValueError(f"algorithm must be 'cgpo' or 'grpo', got {self.algorithm!r}")
        if not self.epsilon > 0:
            raise ValueError("clip epsilon must be positive")
        if self.algorithm == "grpo" and self.group_size < 2:
            raise ValueError("grpo needs a group size of at least 2")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be non-negative")
        if not self.schedule or set(self.schedule) - {"R", "S"} or "R" not in self.schedule:
            raise ValueError("schedule must be a non-empty R/S pattern containing at least one R")
        if not (self.lr_rl > 0 and self.lr_sft > 0):
            raise ValueError("learning rates must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainerConfig":
        aliases = {"G": "group_size"}
        known = set(cls.__dataclass_fields__)
        kwargs = {}
        for key, value in data.items():
            key = aliases.get(key, key)
            if key in known:
                kwargs[key] = value
        return cls(**kwargs)


# --- advantages and objectives ------------------------------------------------------


def cgpo_advantage(r: float, c: float) -> float:
    """Signed reward-confidence gap."""
    return r - c


def bce_loss(r: float, c: float) -> float:
    return -r * math.log(c) - (1 - r) * math.log(1 - c)


def bce_gradient_check(r: float, c: float) -> float:
    """Negative derivative of the reward/confidence cross-entropy with respect to c."""
    if not 0.0 < c < 1.0:
        raise ValueError("confidence must lie strictly inside (0, 1)")
    return (r - c) / (c * (1 - c))


def grpo_advantages(rewards) -> np.ndarray:
    """Group-normalized advantages with population std; a flat group gets zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("group normalization needs at least two rewards")
    sigma = r.std()
    if np.ptp(r) == 0 or sigma == 0:
        return np.zeros_like(r)
    return (r - r.mean()) / sigma


def clipped_surrogate(traj: Trajectory, advantage: float, new_probs, epsilon: float):
    """PPO-style clipped objective averaged over the trajectory's tokens.

    Returns ``(objective, grad, clipped)`` where ``grad`` is the derivative
    with respect to each token's log-probability under the new policy and
    ``clipped`` flags tokens whose term sits on the flat clipped branch.
    """
    old = np.asarray(traj.probs, dtype=np.float64)
    new = np.asarray(new_probs, dtype=np.float64)
    if new.shape != old.shape:
        raise ValueError("new_probs must align with the trajectory's tokens")
    ratio = new / old
    unclipped = ratio * advantage
    clipped_val = np.clip(ratio, 1 - epsilon, 1 + epsilon) * advantage
    objective = float(np.minimum(unclipped, clipped_val).mean())
    if advantage > 0:
        clipped = ratio > 1 + epsilon
    elif advantage < 0:
        clipped = ratio < 1 - epsilon
    else:
        clipped = np.zeros(old.shape, dtype=bool)
    grad = np.where(clipped, 0.0, advantage * ratio) / len(old)
    return objective, grad, clipped


def surrogate_logit_gradient(policy: TabularPolicy, traj: Trajectory, advantage: float, epsilon: float):
    """Chain the surrogate gradient into the prompt's (T, V) logit rows."""
    dist = policy.distribution(traj.prompt)
    idx = np.arange(len(traj.tokens))
    tokens = np.asarray(traj.tokens)
    new_probs = np.maximum(dist[idx, tokens], 1e-300)
    objective, g_log, clipped = clipped_surrogate(traj, advantage, new_probs, epsilon)
    grad = np.zeros(policy.logits.shape[1:])
    grad[idx] = -g_log[:, None] * dist[idx]
    grad[idx, tokens] += g_log
    return objective, grad, clipped


def isr_phase(step: int, schedule: str = "RRRSS") -> str:
    """'R' or 'S' for a 1-based training step under a repeating pattern."""
    if not schedule:
        raise ValueError("schedule must be non-empty")
    return schedule[(step - 1) % len(schedule)]


# --- training -------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    phase: str
    prompt: int
    reward: float | None = None
    confidence: float | None = None
    advantage: float | None = None
    clipped_fraction: float | None = None
    traces: int = 0


@dataclass
class TrainingReport:
    algorithm: str
    records: list[StepRecord] = field(default_factory=list)
    traces: int = 0
    reward_evaluations: int = 0
    step_ms: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def rl_records(self) -> list[StepRecord]:
        return [r for r in self.records if r.phase == "R"]

    @property
    def mean_step_ms(self) -> float:
        return float(np.mean(self.step_ms)) if self.step_ms else 0.0

    @property
    def mean_rl_step_ms(self) -> float:
        ms = [t for t, r in zip(self.step_ms, self.records) if r.phase == "R"]
        return float(np.mean(ms)) if ms else 0.0

    def final_mean_reward(self, window: int = 100) -> float:
        rewards = [r.reward for r in self.rl_records[-window:]]
        return float(np.mean(rewards)) if rewards else 0.0

    def summary(self, timing: bool = True) -> dict:
        out = {
            "algorithm": self.algorithm,
            "steps": self.steps,
            "traces": self.traces,
            "reward_evaluations": self.reward_evaluations,
            "final_mean_reward": self.final_mean_reward(),
        }
        if timing:
            out["mean_step_ms"] = self.mean_step_ms
        return out

    def to_jsonl(self) -> str:
        """Deterministic serialization: per-step records then the summary, no wall-clock fields."""
        lines = [json.dumps(_rounded(asdict(r)), sort_keys=True) for r in self.records]
        lines.append(json.dumps({"summary": _rounded(self.summary(timing=False))}, sort_keys=True))
        return "\n".join(lines) + "\n"


def _rounded(obj):
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v) for v in obj]
    return obj


def _score(world: World, traj: Trajectory) -> float:
    traj.reward = score_response(world, world.episode(traj.prompt), traj.decoded).r_total
    return traj.reward


def _cgpo_rl_step(policy, world, prompt, config, rng, report):
    traj = sample(policy, prompt, rng)
    r = _score(world, traj)
    adv = cgpo_advantage(r, traj.confidence)
    _, grad, clipped = surrogate_logit_gradient(policy, traj, adv, config.epsilon)
    policy.logits[prompt] += config.lr_rl * grad
    report.traces += 1
    report.reward_evaluations += 1
    return StepRecord(0, "R", prompt, r, traj.confidence, adv, float(clipped.mean()), 1)


def _grpo_step(policy, reference, world, prompt, config, rng, report):
    group = [sample(policy, prompt, rng) for _ in range(config.group_size)]
    rewards = [_score(world, t) for t in group]
    advs = grpo_advantages(rewards)
    grad = np.zeros(policy.logits.shape[1:])
    clipped_total = 0
    tokens_total = 0
    for traj, adv in zip(group, advs):
        _, g, clipped = surrogate_logit_gradient(policy, traj, float(adv), config.epsilon)
        grad += g
        clipped_total += int(clipped.sum())
        tokens_total += len(traj)
    grad /= len(group)
    if config.kl_beta:
        grad -= config.kl_beta * kl_gradient(policy, reference, prompt)
    policy.logits[prompt] += config.lr_rl * grad
    report.traces += len(group)
    report.reward_evaluations += len(group)
    return StepRecord(
        0,
        "R",
        prompt,
        float(np.mean(rewards)),
        float(np.mean([t.confidence for t in group])),
        float(np.mean(np.abs(advs))),
        clipped_total / tokens_total,
        len(group),
    )


def train(config: TrainerConfig, world: World, policy: TabularPolicy) -> tuple[TrainingReport, TabularPolicy]:
    """Run ``config.steps`` updates; returns the report and the trained policy.

    Each step draws one episode uniformly. The input policy is not modified.
    """
    if policy.vocab != world.vocab:
        raise ValueError("policy and world vocabularies differ")
    if policy.n_prompts != len(world.episodes):
        raise ValueError(f"policy has {policy.n_prompts} prompts, world has {len(world.episodes)} episodes")
    longest = max((len(ep.golden_tokens) for ep in world.episodes), default=0)
    if longest > policy.max_length:
        raise ValueError(f"policy max length {policy.max_length} is shorter than a golden answer ({longest})")
    policy = policy.copy()
    reference = policy.copy()
    rng = np.random.default_rng(config.seed)
    report = TrainingReport(algorithm=config.algorithm)
    for step in range(1, config.steps + 1):
        t0 = time.perf_counter()
        prompt = int(rng.integers(len(world.episodes)))
        if config.algorithm == "grpo":
            rec = _grpo_step(policy, reference, world, prompt, config, rng, report)
        elif isr_phase(step, config.schedule) == "R":
            rec = _cgpo_rl_step(policy, world, prompt, config, rng, report)
        else:
            golden = world.episode(prompt).golden_tokens
            policy.logits[prompt] += config.lr_sft * sft_gradient(policy, prompt, golden)
            rec = StepRecord(0, "S", prompt)
        rec.step = step
        report.records.append(rec)
        report.step_ms.append((time.perf_counter() - t0) * 1e3)
    return report, policy


# --- response-type analysis -------------------------------------------------------------


def rank_normalize(values) -> np.ndarray:
    """Map values to [-1, 1] by ascending rank, averaging ties."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("rank normalization needs at least two values")
    ranks = rankdata(v, method="average")
    return 2.0 * (ranks - 1.0) / (v.size - 1) - 1.0


@dataclass
class CategoryStats:
    r_low: float
    r_high: float
    c_low: float
    c_high: float
    counts: dict[str, int]
    mean_abs_advantage: dict[str, dict[str, float]]
    n_samples: int

    def informative_gap(self, algorithm: str = "cgpo") -> tuple[float, float]:
        """Mean |A| over HrLc+LrHc versus over HrHc+LrLc, pooled by sample count."""
        means = self.mean_abs_advantage[algorithm]

        def pooled(cats):
            total = sum(self.counts[c] for c in cats)
            if total == 0:
                return float("nan")
            return sum(means[c] * self.counts[c] for c in cats if self.counts[c]) / total

        return pooled(("HrLc", "LrHc")), pooled(("HrHc", "LrLc"))

    def as_record(self) -> dict:
        rec = {
            "n_samples": self.n_samples,
            "r_low": self.r_low,
            "r_high": self.r_high,
            "c_low": self.c_low,
            "c_high": self.c_high,
        }
        for cat in CATEGORIES:
            rec[f"{cat}_count"] = self.counts[cat]
            for alg, means in self.mean_abs_advantage.items():
                value = means[cat]
                rec[f"{cat}_{alg}_mean_abs_adv"] = None if math.isnan(value) else value
        return rec


NO_SPREAD = 1e-9


def _bands(x: np.ndarray, low: float, high: float) -> tuple[np.ndarray, np.ndarray]:
    """Bottom and top band membership.

    With no spread between the two percentiles every value would sit in both
    bands; the axis is then split at the unit-interval midpoint instead.
    """
    if high - low <= NO_SPREAD:
        return x < 0.5, x >= 0.5
    return x <= low, x >= high


def categorize_responses(samples, advantages: dict[str, list[float]]) -> CategoryStats:
    """Corner categories from the 20th/80th percentiles of reward and confidence.

    ``samples`` is a list of (reward, confidence); ``advantages`` maps an
    algorithm name to one raw advantage per sample. Advantages are
    rank-normalized per algorithm before taking per-category mean |A|.
    Samples in the middle band of either axis belong to no category, so the
    category counts never sum past the sample count.
    """
    if len(samples) < 10:
        raise ValueError("categorization needs at least 10 samples")
    arr = np.asarray(samples, dtype=np.float64)
    r, c = arr[:, 0], arr[:, 1]
    r_low, r_high = np.percentile(r, [20, 80])
    c_low, c_high = np.percentile(c, [20, 80])
    r_is_low, r_is_high = _bands(r, r_low, r_high)
    c_is_low, c_is_high = _bands(c, c_low, c_high)
    masks = {
        "HrHc": r_is_high & c_is_high,
        "HrLc": r_is_high & c_is_low,
        "LrHc": r_is_low & c_is_high,
        "LrLc": r_is_low & c_is_low,
    }
    means = {}
    for alg, adv in advantages.items():
        if len(adv) != len(samples):
            raise ValueError(f"{alg}: {len(adv)} advantages for {len(samples)} samples")
        norm = np.abs(rank_normalize(adv))
        means[alg] = {cat: float(norm[m].mean()) if m.any() else float("nan") for cat, m in masks.items()}
    return CategoryStats(
        r_low=float(r_low),
        r_high=float(r_high),
        c_low=float(c_low),
        c_high=float(c_high),
        counts={cat: int(m.sum()) for cat, m in masks.items()},
        mean_abs_advantage=means,
        n_samples=len(samples),
    )


def collect_samples(policy: TabularPolicy, world: World, n_samples: int, group_size: int = 8, seed: int = 0):
    """Sample groups per random prompt; return (r, c) pairs and both algorithms' raw advantages."""
    rng = np.random.default_rng(seed)
    samples, cgpo, grpo = [], [], []
    while len(samples) < n_samples:
        prompt = int(rng.integers(len(world.episodes)))
        group = [sample(policy, prompt, rng) for _ in range(group_size)]
        rewards = [_score(world, t) for t in group]
        for traj, adv in zip(group, grpo_advantages(rewards)):
            samples.append((traj.reward, traj.confidence))
            cgpo.append(cgpo_advantage(traj.reward, traj.confidence))
            grpo.append(float(adv))
    n = n_samples
    return samples[:n], {"cgpo": cgpo[:n], "grpo": grpo[:n]}
