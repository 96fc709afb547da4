"""Acceptance criteria, one test per criterion, at the stated tolerances.

Each test also prints a one-line verdict; the terminal summary repeats them.
"""

import itertools
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from format_corpus import CORPUS
from oracles import ap_exhaustive, brute_force_assignment, s_measure_loops
from saliency_rl.environment import WorldConfig, build_world, score_response
from saliency_rl.interface import format_reward
from saliency_rl.metrics import ScoredMask, average_precision, hungarian_max, s_measure
from saliency_rl.optimize import (
    DEFAULT_MAX_LENGTH,
    TrainerConfig,
    bce_gradient_check,
    bce_loss,
    categorize_responses,
    cgpo_advantage,
    clipped_surrogate,
    collect_samples,
    grpo_advantages,
    surrogate_logit_gradient,
    train,
)
from saliency_rl.policy import (
    EOS,
    TabularPolicy,
    Trajectory,
    Vocabulary,
    sequence_log_likelihood,
    sft_gradient,
    token_probs,
)
from saliency_rl.raster import BinaryMask, iou
from saliency_rl.reward import InstanceSet, iasm


def verdict(number, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


def rect(r0, r1, c0, c1, shape=(8, 8)):
    a = np.zeros(shape)
    a[r0:r1, c0:c1] = 1
    return BinaryMask(a)


# 1 ---------------------------------------------------------------------------------


@pytest.mark.criterion(1, "Hungarian exact vs brute force on 1000 matrices, < 5 s")
def test_hungarian_exactness():
    rng = np.random.default_rng(2024)
    cases = []
    for k in range(1000):
        rows, cols = int(rng.integers(1, 8)), int(rng.integers(1, 8))
        if k % 2:
            w = rng.random((rows, cols))
        else:
            # IoU matrices of random rectangles: many ties and exact zeros.
            def box():
                r0, c0 = rng.integers(0, 6, size=2)
                return rect(r0, r0 + rng.integers(1, 4), c0, c0 + rng.integers(1, 4))

            gts = [box() for _ in range(rows)]
            preds = [box() for _ in range(cols)]
            w = np.array([[iou(g, p) for p in preds] for g in gts])
        cases.append(w)
    t0 = time.perf_counter()
    results = [hungarian_max(w) for w in cases]
    elapsed = time.perf_counter() - t0
    wrong = sum(a.total_value != brute_force_assignment(w.tolist()) for a, w in zip(results, cases))
    verdict(1, wrong == 0 and elapsed < 5.0, f"{wrong} mismatches in 1000 cases, solver time {elapsed:.2f} s")


# 2 ---------------------------------------------------------------------------------


@pytest.mark.criterion(2, "S-measure pins")
def test_s_measure_pins():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(2, 16, size=2))
        while True:
            g = (rng.random(shape) < rng.uniform(0.1, 0.9)).astype(float)
            if 0 < g.sum() < g.size:
                break
        worst = max(worst, abs(s_measure(g, g) - 1.0))
    p = rng.random((6, 6))
    degenerate_ok = s_measure(p, np.zeros((6, 6))) == 1.0 - p.mean() and s_measure(p, np.ones((6, 6))) == p.mean()
    gt = np.zeros((8, 8))
    gt[:, :4] = 1
    pred = np.full((8, 8), 0.5)
    pinned = 0.525  # S_o = 0.8, S_r = 16/64, derived by hand
    oracle_gap = abs(s_measure(pred, gt) - pinned)
    loop_gap = abs(s_measure_loops(pred.tolist(), gt.astype(int).tolist()) - pinned)
    ok = worst <= 1e-9 and degenerate_ok and oracle_gap <= 1e-9 and loop_gap <= 1e-9
    verdict(2, ok, f"max |S(g,g)-1| = {worst:.1e}, degenerate exact = {degenerate_ok}, 8x8 case off by {oracle_gap:.1e}")


# 3 ---------------------------------------------------------------------------------


def instance_config(seed):
    rng = np.random.default_rng(seed)
    shape = (24, 24)
    taken = np.zeros(shape, dtype=bool)
    masks = []
    while len(masks) < rng.integers(1, 5) or not masks:
        h, w = rng.integers(2, 7, size=2)
        r0, c0 = rng.integers(0, 24 - h), rng.integers(0, 24 - w)
        if taken[max(r0 - 1, 0) : r0 + h + 1, max(c0 - 1, 0) : c0 + w + 1].any():
            if rng.random() < 0.05:
                break
            continue
        m = np.zeros(shape)
        m[r0 : r0 + h, c0 : c0 + w] = 1
        taken |= m > 0
        masks.append(BinaryMask(m))
    # A spurious blob disjoint from every ground-truth instance.
    free = np.argwhere(~taken)
    blob = np.zeros(shape)
    r, c = free[rng.integers(len(free))]
    blob[r, c] = 1
    noisy = [BinaryMask(np.where(rng.random(shape) < 0.03, 1 - m.values, m.values)) for m in masks]
    return rng, masks, BinaryMask(blob), noisy


@pytest.mark.criterion(3, "IASM perfect / over- / under-segmentation / permutation, 100 configs each")
def test_iasm_behaviour():
    violations = {"perfect": 0, "spurious": 0, "deleted": 0, "permutation": 0}
    for seed in range(100):
        rng, gts, blob, noisy = instance_config(seed)
        gt = InstanceSet(gts)
        perfect = iasm(InstanceSet(gts), gt)
        violations["perfect"] += perfect != 1.0
        violations["spurious"] += not iasm(InstanceSet(gts + [blob]), gt) < perfect
        drop = int(rng.integers(len(gts)))
        violations["deleted"] += not iasm(InstanceSet(gts[:drop] + gts[drop + 1 :], gt.shape), gt) < perfect
        base = iasm(InstanceSet(noisy + [blob]), gt)
        perm = rng.permutation(len(noisy) + 1)
        shuffled = [(noisy + [blob])[i] for i in perm]
        violations["permutation"] += iasm(InstanceSet(shuffled), InstanceSet([gts[i] for i in rng.permutation(len(gts))])) != base
    verdict(3, not any(violations.values()), f"violations {violations}")


# 4 ---------------------------------------------------------------------------------


@pytest.mark.criterion(4, "format-reward golden corpus")
def test_format_corpus():
    wrong = []
    for raw, task, r_struct, r_tag, _ in CORPUS:
        v = format_reward(raw, task)
        if (v.r_struct, v.r_tag, v.r_fmt) != (r_struct, r_tag, r_struct + r_tag) or v.r_fmt not in (0.0, 0.5, 1.0):
            wrong.append(raw)
    verdict(4, len(CORPUS) >= 20 and not wrong, f"{len(CORPUS) - len(wrong)}/{len(CORPUS)} responses scored as composed")


# 5 ---------------------------------------------------------------------------------


@pytest.mark.criterion(5, "calibration gradient vs central differences, 1e-6 relative")
def test_bce_gradient():
    # Exact hundredths, so c == r really is the zero of the derivative; there the
    # comparison is absolute since a relative error has no meaning.
    worst = 0.0
    for r in (0.0, 0.25, 0.5, 0.75, 1.0):
        for c in (k / 100 for k in range(5, 96)):
            h = 1e-6
            numeric = -(bce_loss(r, c + h) - bce_loss(r, c - h)) / (2 * h)
            analytic = bce_gradient_check(r, c)
            if analytic == 0.0:
                err = abs(numeric)
            else:
                err = abs(numeric - analytic) / abs(analytic)
            worst = max(worst, err)
    verdict(5, worst <= 1e-6, f"max relative error {worst:.2e}")


# 6 ---------------------------------------------------------------------------------


def _relative_error(analytic, numeric):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    return float(np.max(np.where(scale > 1e-6, err / np.maximum(scale, 1e-300), err)))


@pytest.mark.criterion(6, "SFT and clipped-surrogate gradients vs finite differences, 50 policies")
def test_policy_gradients():
    rng = np.random.default_rng(99)
    vocab = Vocabulary(("p", "q", "r", "s", EOS))
    worst_sft = worst_sur = 0.0
    checked = 0
    h = 1e-6
    while checked < 50:
        T = int(rng.integers(2, 5))
        pol = TabularPolicy(rng.normal(0, 1.5, (2, T, len(vocab))), vocab)
        prompt = int(rng.integers(2))
        tokens = tuple(int(t) for t in rng.integers(0, len(vocab), size=T))
        old = token_probs(pol, prompt, tokens) * np.exp(rng.normal(0, 0.15, T))
        traj = Trajectory(prompt, tokens, tuple(np.clip(old, 1e-6, 1.0)), "")
        ratios = token_probs(pol, prompt, tokens) / np.asarray(traj.probs)
        if np.min(np.abs(np.abs(ratios - 1.0) - 0.2)) < 1e-3:
            continue  # too close to a clip boundary for a central difference
        adv = float(rng.uniform(-1, 1))
        sft = sft_gradient(pol, prompt, tokens)
        _, sur, _ = surrogate_logit_gradient(pol, traj, adv, 0.2)
        num_sft = np.zeros_like(sft)
        num_sur = np.zeros_like(sur)
        for t in range(T):
            for v in range(len(vocab)):
                up, down = pol.logits.copy(), pol.logits.copy()
                up[prompt, t, v] += h
                down[prompt, t, v] -= h
                pu, pd = TabularPolicy(up, vocab), TabularPolicy(down, vocab)
                num_sft[t, v] = (sequence_log_likelihood(pu, prompt, tokens) - sequence_log_likelihood(pd, prompt, tokens)) / (2 * h)
                fu = clipped_surrogate(traj, adv, token_probs(pu, prompt, tokens), 0.2)[0]
                fd = clipped_surrogate(traj, adv, token_probs(pd, prompt, tokens), 0.2)[0]
                num_sur[t, v] = (fu - fd) / (2 * h)
        worst_sft = max(worst_sft, _relative_error(sft, num_sft))
        worst_sur = max(worst_sur, _relative_error(sur, num_sur))
        checked += 1
    verdict(6, worst_sft <= 1e-4 and worst_sur <= 1e-4, f"max relative error SFT {worst_sft:.1e}, surrogate {worst_sur:.1e}")


# 7 ---------------------------------------------------------------------------------


@pytest.mark.criterion(7, "advantage arithmetic")
def test_advantages():
    rng = np.random.default_rng(3)
    rc = rng.random((200, 2))
    cgpo_ok = all(cgpo_advantage(r, c) == r - c for r, c in rc) and cgpo_advantage(0.8, 0.3) == 0.8 - 0.3
    grpo_ok = grpo_advantages([1, 0, 0, 1]).tolist() == [1.0, -1.0, -1.0, 1.0]
    flat_ok = all(not grpo_advantages([v] * 8).any() for v in (0.0, 0.37, 1.0))
    verdict(7, cgpo_ok and grpo_ok and flat_ok, f"cgpo {cgpo_ok}, grpo example {grpo_ok}, flat groups {flat_ok}")


# 8 ---------------------------------------------------------------------------------


@pytest.mark.criterion(8, "trace accounting 8:1 and CGPO faster per step")
def test_trace_accounting():
    world = build_world(0)
    policy = TabularPolicy.uniform(len(world.episodes), DEFAULT_MAX_LENGTH, world.vocab)
    steps = 300
    cgpo, _ = train(TrainerConfig(algorithm="cgpo", steps=steps, schedule="R", seed=1), world, policy)
    grpo, _ = train(TrainerConfig(algorithm="grpo", steps=steps, group_size=8, seed=1), world, policy)
    ratio_ok = grpo.traces == 8 * cgpo.traces and cgpo.traces == steps
    faster = cgpo.mean_step_ms < grpo.mean_step_ms
    verdict(
        8,
        ratio_ok and faster,
        f"traces cgpo {cgpo.traces}, grpo {grpo.traces}; mean step {cgpo.mean_step_ms:.3f} ms vs {grpo.mean_step_ms:.3f} ms",
    )


# 9 ---------------------------------------------------------------------------------


@pytest.mark.criterion(9, "response-type analysis: off-diagonal corners carry larger CGPO |A|")
def test_category_gap():
    world = build_world(0)
    policy = TabularPolicy.uniform(len(world.episodes), DEFAULT_MAX_LENGTH, world.vocab)
    _, mid = train(TrainerConfig(steps=2500, seed=0), world, policy)
    samples, advantages = collect_samples(mid, world, 1200, group_size=8, seed=5)
    stats = categorize_responses(samples, advantages)
    r = np.array([s[0] for s in samples])
    c = np.array([s[1] for s in samples])
    thresholds_ok = (stats.r_low, stats.r_high) == tuple(np.percentile(r, [20, 80])) and (
        stats.c_low,
        stats.c_high,
    ) == tuple(np.percentile(c, [20, 80]))
    off, diag = stats.informative_gap("cgpo")
    ok = len(samples) >= 1000 and thresholds_ok and off > diag
    verdict(9, ok, f"{len(samples)} samples, counts {stats.counts}, mean |A| off-diagonal {off:.3f} vs diagonal {diag:.3f}")


# 10 --------------------------------------------------------------------------------


@pytest.mark.criterion(10, "toy CGPO convergence >= 0.9 within 20000 steps, < 2 min, reproducible")
def test_convergence():
    config = TrainerConfig(steps=20_000, seed=0)
    assert config.schedule == "RRRSS"

    def run():
        world = build_world(config.seed, WorldConfig())
        policy = TabularPolicy.uniform(len(world.episodes), DEFAULT_MAX_LENGTH, world.vocab)
        t0 = time.perf_counter()
        report, _ = train(config, world, policy)
        return report, time.perf_counter() - t0

    first, seconds = run()
    second, _ = run()
    final = first.final_mean_reward(100)
    identical = first.to_jsonl() == second.to_jsonl()
    ok = final >= 0.9 and seconds < 120 and identical
    verdict(10, ok, f"final-100 RL mean reward {final:.4f}, run time {seconds:.1f} s, byte-identical rerun {identical}")


# 11 --------------------------------------------------------------------------------


@pytest.mark.criterion(11, "AP equals the exhaustive PR-curve oracle on every enumerated configuration")
def test_ap_enumeration():
    # Overlaps within the catalogue: 0.6, 0.8, 0.8 and disjoint, straddling both thresholds.
    catalogue = [rect(0, 4, 0, 4), rect(0, 4, 1, 5), rect(0, 4, 0, 5), rect(4, 8, 4, 8)]
    cells = [frozenset(zip(*np.nonzero(m.values))) for m in catalogue]
    scores = (Fraction(2, 5), Fraction(4, 5))
    options = [(i, s) for i in range(len(catalogue)) for s in scores]
    gt_sets = [gs for k in range(4) for gs in itertools.combinations(range(len(catalogue)), k)]
    total = mismatches = 0
    for k in range(5):
        for preds in itertools.product(options, repeat=k):
            scored = [ScoredMask(catalogue[i], float(s)) for i, s in preds]
            oracle_preds = [(cells[i], s) for i, s in preds]
            for gs in gt_sets:
                for thr in (0.5, 0.7):
                    total += 1
                    got = average_precision(scored, [catalogue[j] for j in gs], thr)
                    want = float(ap_exhaustive(oracle_preds, [cells[j] for j in gs], thr))
                    mismatches += got != want
    verdict(11, mismatches == 0, f"{mismatches} mismatches over {total} configurations")


# 12 --------------------------------------------------------------------------------


@pytest.mark.criterion(12, "golden responses score 1.0 across 10 world seeds")
def test_golden_pipeline():
    failures = []
    episodes = 0
    tasks = set()
    for seed in range(10):
        world = build_world(seed)
        for ep in world.episodes:
            episodes += 1
            tasks.add(ep.task)
            got = score_response(world, ep, world.vocab.decode(ep.golden_tokens))
            if got.r_total != 1.0:
                failures.append((seed, ep.prompt, got.r_total))
    verdict(12, not failures and len(tasks) == 3, f"{episodes} episodes over {len(tasks)} tasks, {len(failures)} failures")
