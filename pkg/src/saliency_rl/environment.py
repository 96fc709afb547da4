"""A synthetic token world: rectangle lexicon, episodes for all three tasks, oracle segmenter."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interface import (
    FormatError,
    ReferringExpression,
    TaskKind,
    format_reward,
    parse_response,
)
from .policy import EOS, Vocabulary, default_vocabulary
from .raster import BinaryMask, GrayMask, iou, load_mask, save_mask, union, zeros_like
from .reward import (
    InstanceSet,
    RewardBreakdown,
    correctness_cosod,
    correctness_sod,
    iasm,
    total_reward,
)

__all__ = [
    "WorldConfig",
    "Lexicon",
    "EpisodeSpec",
    "World",
    "WorldBuildError",
    "build_world",
    "oracle_segment",
    "score_response",
    "correctness_from_expressions",
    "golden_fragments",
    "dump_world",
    "load_world",
]

MANIFEST = "manifest.json"


class WorldBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    entries: int = 8
    grid: int = 32
    sod_episodes: int = 2
    sis_episodes: int = 2
    cosod_episodes: int = 2
    group_size: int = 4  # K images per CoSOD group
    max_targets: int = 3
    min_side: int = 5
    max_side: int = 12
    max_pair_iou: float = 0.3
    rejection_budget: int = 10_000

    def __post_init__(self):
        if self.entries < 2:
            raise ValueError("a lexicon needs at least two entries")
        if self.grid < 4 or not 1 <= self.min_side <= self.max_side <= self.grid:
            raise ValueError("invalid grid or rectangle side bounds")
        if self.group_size < 1 or self.max_targets < 1:
            raise ValueError("group_size and max_targets must be positive")


@dataclass(frozen=True)
class Lexicon:
    entries: dict[str, BinaryMask]
    seed: int

    def __post_init__(self):
        if len(self.entries) < 2:
            raise ValueError("a lexicon needs at least two entries")
        if any(m.area == 0 for m in self.entries.values()):
            raise ValueError("lexicon masks must be non-empty")

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(self.entries.values())).shape

    @property
    def names(self) -> list[str]:
        return list(self.entries)


@dataclass(frozen=True)
class EpisodeSpec:
    prompt: int
    task: TaskKind
    targets: tuple[str, ...]  # lexicon entries the ground truth is built from
    gt: object  # GrayMask (sod) | InstanceSet (sis) | list[GrayMask] (cosod)
    golden_tokens: tuple[int, ...]


@dataclass
class World:
    config: WorldConfig
    seed: int
    lexicon: Lexicon
    episodes: list[EpisodeSpec]
    vocab: Vocabulary = field(init=False)

    def __post_init__(self):
        self.vocab = default_vocabulary(self.lexicon.names)

    def episode(self, prompt: int) -> EpisodeSpec:
        return self.episodes[prompt]


def _random_rect(rng: np.random.Generator, cfg: WorldConfig) -> BinaryMask:
    h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
    top = int(rng.integers(0, cfg.grid - h + 1))
    left = int(rng.integers(0, cfg.grid - w + 1))
    arr = np.zeros((cfg.grid, cfg.grid))
    arr[top : top + h, left : left + w] = 1.0
    return BinaryMask(arr)


def golden_fragments(task: TaskKind, targets) -> list[str]:
    """Canonical response fragments naming ``targets`` in the given order."""
    frags = ["<think>", *targets, "</think>", "<answer>"]
    if task is TaskKind.SOD:
        for name in targets:
            frags += ["<rg>", name, "</rg>"]
    elif task is TaskKind.SIS:
        for name in targets:
            frags += ["<ins>", name, "</ins>"]
    else:
        frags += ["<rg>", "[semantic]", targets[0], "</rg>"]
    return frags + ["</answer>", EOS]


def _ground_truth(task: TaskKind, masks: list[BinaryMask], cfg: WorldConfig):
    if task is TaskKind.SOD:
        return union(masks).to_gray()
    if task is TaskKind.SIS:
        return InstanceSet(masks)
    return [masks[0].to_gray() for _ in range(cfg.group_size)]


def _assemble(config: WorldConfig, seed: int, lexicon: Lexicon, plan) -> World:
    world = World(config=config, seed=seed, lexicon=lexicon, episodes=[])
    for prompt, (task, targets) in enumerate(plan):
        masks = [lexicon.entries[t] for t in targets]
        golden = tuple(world.vocab.encode(golden_fragments(task, targets)))
        world.episodes.append(EpisodeSpec(prompt, task, tuple(targets), _ground_truth(task, masks, config), golden))
    return world


def build_world(seed: int, config: WorldConfig | None = None) -> World:
    """Deterministic world: rectangles with bounded pairwise IoU and verified golden answers."""
    cfg = config or WorldConfig()
    rng = np.random.default_rng(seed)
    rects: list[BinaryMask] = []
    attempts = 0
    while len(rects) < cfg.entries:
        attempts += 1
        if attempts > cfg.rejection_budget:
            raise WorldBuildError(
                f"could not place {cfg.entries} rectangles with IoU <= {cfg.max_pair_iou} "
                f"in {cfg.rejection_budget} attempts"
            )
        cand = _random_rect(rng, cfg)
        if all(iou(cand, r) <= cfg.max_pair_iou for r in rects):
            rects.append(cand)
    names = [f"obj{i}" for i in range(cfg.entries)]
    lexicon = Lexicon(dict(zip(names, rects)), seed)

    plan = []
    for task, count in (
        (TaskKind.SOD, cfg.sod_episodes),
        (TaskKind.SIS, cfg.sis_episodes),
        (TaskKind.COSOD, cfg.cosod_episodes),
    ):
        for _ in range(count):
            n = 1 if task is TaskKind.COSOD else int(rng.integers(1, min(cfg.max_targets, cfg.entries) + 1))
            picks = sorted(rng.choice(cfg.entries, size=n, replace=False).tolist())
            plan.append((task, [names[i] for i in picks]))
    world = _assemble(cfg, seed, lexicon, plan)
    for ep in world.episodes:
        got = score_response(world, ep, world.vocab.decode(ep.golden_tokens))
        if got.r_total != 1.0:
            raise WorldBuildError(f"golden answer for prompt {ep.prompt} scores {got.r_total}, not 1.0")
    return world


def oracle_segment(lexicon: Lexicon, expression: ReferringExpression) -> BinaryMask:
    """Exact lookup of the trimmed expression text; unknown text yields an empty mask."""
    mask = lexicon.entries.get(expression.text.strip())
    if mask is None:
        return zeros_like(np.zeros(lexicon.shape))
    return mask


def correctness_from_expressions(task: TaskKind, expressions, gt, segment) -> float:
    """Correctness reward given parsed expressions and a text -> mask segmenter.

    SOD unions every region, SIS matches every instance, CoSOD applies the first
    region to each image of the group. A missing expression of the needed kind
    becomes an empty mask.
    """
    regions = [e for e in expressions if e.kind == "region"]
    instances = [e for e in expressions if e.kind == "instance"]
    if task is TaskKind.SOD:
        masks = [segment(e) for e in regions] or [zeros_like(gt)]
        return correctness_sod(masks, gt)
    if task is TaskKind.SIS:
        return iasm(InstanceSet([segment(e) for e in instances], shape=gt.shape), gt)
    if regions:
        per_image = [segment(regions[0], k) for k in range(len(gt))]
    else:
        per_image = [zeros_like(g) for g in gt]
    return correctness_cosod(per_image, gt)


def score_response(world: World, episode: EpisodeSpec, raw: str) -> RewardBreakdown:
    """Parse, segment with the oracle, and score a response end to end."""
    verdict = format_reward(raw, episode.task)
    try:
        resp = parse_response(raw)
    except FormatError:
        return total_reward(0.0, verdict)

    def segment(expr, _image=None):
        return oracle_segment(world.lexicon, expr)

    r_corr = correctness_from_expressions(episode.task, resp.expressions, episode.gt, segment)
    return total_reward(r_corr, verdict)


# --- world dump -----------------------------------------------------------------


def dump_world(world: World, directory) -> Path:
    """Write a manifest plus one PGM per lexicon entry."""
    root = Path(directory)
    (root / "entries").mkdir(parents=True, exist_ok=True)
    for name, mask in world.lexicon.entries.items():
        save_mask(mask, root / "entries" / f"{name}.pgm")
    cfg = world.config
    manifest = {
        "seed": world.seed,
        "config": cfg.__dict__,
        "entries": world.lexicon.names,
        "vocab": list(world.vocab.tokens),
        "episodes": [
            {
                "prompt": ep.prompt,
                "task": ep.task.value,
                "targets": list(ep.targets),
                "golden": world.vocab.decode(ep.golden_tokens),
            }
            for ep in world.episodes
        ],
    }
    with open(root / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return root


def load_world(directory) -> World:
    root = Path(directory)
    with open(root / MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = WorldConfig(**manifest["config"])
    entries = {}
    for name in manifest["entries"]:
        gray = load_mask(root / "entries" / f"{name}.pgm")
        entries[name] = BinaryMask(gray.values > 0.5)
    lexicon = Lexicon(entries, manifest["seed"])
    plan = [(TaskKind.parse(ep["task"]), ep["targets"]) for ep in manifest["episodes"]]
    return _assemble(cfg, manifest["seed"], lexicon, plan)


def world_path_or_seed(spec: str | int | os.PathLike, config: WorldConfig | None = None) -> World:
    """Load a dumped world directory, or build one from an integer seed."""
    if isinstance(spec, int) or (isinstance(spec, str) and spec.lstrip("-").isdigit()):
        return build_world(int(spec), config)
    return load_world(spec)
