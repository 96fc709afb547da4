"""Position-factored categorical policy over text fragments, with analytic gradients.

Each (prompt, position) pair owns one row of logits, so the next-token
distribution depends on the prompt and the position but not on earlier tokens.
Every quantity the trainers need (token probabilities, ratios, confidence,
KL to a reference) is then exact and cheap.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EOS",
    "STRUCTURAL_TOKENS",
    "PROB_FLOOR",
    "Vocabulary",
    "TabularPolicy",
    "Trajectory",
    "default_vocabulary",
    "softmax",
    "sample",
    "token_probs",
    "logprob",
    "confidence",
    "sft_gradient",
    "sft_step",
    "sequence_log_likelihood",
    "kl_divergence",
    "kl_gradient",
    "save_policy",
    "load_policy",
]

EOS = "<eos>"
STRUCTURAL_TOKENS = (
    "<think>",
    "</think>",
    "<answer>",
    "</answer>",
    "<rg>",
    "</rg>",
    "<ins>",
    "</ins>",
    "[semantic]",
)
PROB_FLOOR = 1e-9
CHECKPOINT_FORMAT = "saliency-rl/tabular-policy"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary entries must be distinct")
        if EOS not in self.tokens:
            raise ValueError(f"vocabulary must contain the end marker {EOS!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def encode(self, fragments) -> list[int]:
        try:
            return [self._index[f] for f in fragments]
        except KeyError as exc:
            raise ValueError(f"fragment {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i != self.eos_id)


def default_vocabulary(content: list[str]) -> Vocabulary:
    return Vocabulary(STRUCTURAL_TOKENS + tuple(content) + (EOS,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class TabularPolicy:
    """Logit table of shape (prompts, max_length, vocab)."""

    logits: np.ndarray
    vocab: Vocabulary

    def __post_init__(self):
        self.logits = np.array(self.logits, dtype=np.float64)
        if self.logits.ndim != 3 or self.logits.shape[2] != len(self.vocab):
            raise ValueError(f"logits must have shape (prompts, T, {len(self.vocab)}), got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, n_prompts: int, max_length: int, vocab: Vocabulary) -> "TabularPolicy":
        return cls(np.zeros((n_prompts, max_length, len(vocab))), vocab)

    @property
    def n_prompts(self) -> int:
        return self.logits.shape[0]

    @property
    def max_length(self) -> int:
        return self.logits.shape[1]

    def distribution(self, prompt: int) -> np.ndarray:
        """(T, V) next-token probabilities for every position of a prompt."""
        return softmax(self.logits[prompt])

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.logits.copy(), self.vocab)

    def with_logits(self, prompt: int, rows: np.ndarray) -> "TabularPolicy":
        new = self.copy()
        new.logits[prompt] = rows
        return new


@dataclass
class Trajectory:
    prompt: int
    tokens: tuple[int, ...]
    probs: tuple[float, ...]
    decoded: str
    reward: float | None = None
    confidence: float = field(init=False)

    def __post_init__(self):
        if len(self.tokens) != len(self.probs):
            raise ValueError("one probability per token is required")
        self.confidence = confidence(self)

    def __len__(self):
        return len(self.tokens)


def sample(policy: TabularPolicy, prompt: int, rng: np.random.Generator) -> Trajectory:
    """Draw tokens position by position until the end marker or the length cap."""
    if not 0 <= prompt < policy.n_prompts:
        raise IndexError(f"prompt {prompt} out of range")
    dist = policy.distribution(prompt)
    cdf = np.cumsum(dist, axis=1)
    eos = policy.vocab.eos_id
    tokens, probs = [], []
    for t in range(policy.max_length):
        u = rng.random() * cdf[t, -1]
        tok = min(int(np.searchsorted(cdf[t], u, side="right")), dist.shape[1] - 1)
        tokens.append(tok)
        probs.append(max(float(dist[t, tok]), PROB_FLOOR))
        if tok == eos:
            break
    return Trajectory(prompt, tuple(tokens), tuple(probs), policy.vocab.decode(tokens))


def token_probs(policy: TabularPolicy, prompt: int, tokens) -> np.ndarray:
    """Probability of each given token at its position under the current logits."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(tokens) > policy.max_length:
        raise ValueError("sequence longer than the policy's max length")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= len(policy.vocab)):
        raise ValueError("token id out of range")
    dist = policy.distribution(prompt)
    return np.maximum(dist[np.arange(len(tokens)), tokens], PROB_FLOOR)


def logprob(policy: TabularPolicy, prompt: int, tokens) -> np.ndarray:
    return np.log(token_probs(policy, prompt, tokens))


def confidence(traj: Trajectory) -> float:
    """Mean per-token generation probability."""
    if not traj.probs:
        raise ValueError("confidence of an empty trajectory is undefined")
    return float(np.mean(traj.probs))


def sequence_log_likelihood(policy: TabularPolicy, prompt: int, tokens) -> float:
    return float(np.log(token_probs(policy, prompt, tokens)).sum())


def sft_gradient(policy: TabularPolicy, prompt: int, golden) -> np.ndarray:
    """d/dlogits of sum_t log pi(golden_t): one-hot minus softmax on each covered row."""
    golden = np.asarray(golden, dtype=np.int64)
    grad = np.zeros(policy.logits.shape[1:])
    n = len(golden)
    grad[:n] = -policy.distribution(prompt)[:n]
    grad[np.arange(n), golden] += 1.0
    return grad


def sft_step(policy: TabularPolicy, prompt: int, golden, lr: float) -> TabularPolicy:
    """One gradient-ascent step on the golden sequence's log-likelihood."""
    if lr == 0:
        return policy.copy()
    return policy.with_logits(prompt, policy.logits[prompt] + lr * sft_gradient(policy, prompt, golden))


def kl_divergence(policy: TabularPolicy, reference: TabularPolicy, prompt: int) -> float:
    """Sum over positions of KL(policy || reference) for one prompt."""
    if policy.logits.shape != reference.logits.shape:
        raise ValueError("policy and reference shapes differ")
    p = policy.distribution(prompt)
    q = reference.distribution(prompt)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return float(max(terms.sum(), 0.0))


def kl_gradient(policy: TabularPolicy, reference: TabularPolicy, prompt: int) -> np.ndarray:
    """d/dlogits of the summed KL: p_v * (log p_v - log q_v - KL_t) per row."""
    p = policy.distribution(prompt)
    q = reference.distribution(prompt)
    log_ratio = np.log(np.maximum(p, 1e-300)) - np.log(np.maximum(q, 1e-300))
    row_kl = (p * log_ratio).sum(axis=1, keepdims=True)
    return p * (log_ratio - row_kl)


def save_policy(policy: TabularPolicy, path) -> None:
    """Text checkpoint; floats are written with repr so reloading is exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "prompts": policy.n_prompts,
        "max_length": policy.max_length,
        "vocab": list(policy.vocab.tokens),
        "logits": policy.logits.tolist(),
    }
    with open(os.fspath(path), "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_policy(path) -> TabularPolicy:
    with open(os.fspath(path), encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a policy checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    logits = np.asarray(doc["logits"], dtype=np.float64)
    if logits.shape != (doc["prompts"], doc["max_length"], len(doc["vocab"])):
        raise ValueError(f"{path}: logits shape {logits.shape} disagrees with header")
    return TabularPolicy(logits, Vocabulary(tuple(doc["vocab"])))
