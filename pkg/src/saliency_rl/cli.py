"""Command-line entry points: eval, reward, parse, train-toy, analyze, adapter.

Every ``cmd_*`` function is usable from Python; ``main`` wires them to argparse.
Reports round numeric fields to 6 decimals.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from collections import Counter
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import AdapterMaskError, AdapterTimeout, SegmenterRequest, adapter_roundtrip, answer_requests
from .environment import (
    World,
    WorldConfig,
    build_world,
    correctness_from_expressions,
    dump_world,
    load_world,
    oracle_segment,
    score_response,
)
from .interface import FormatError, TaskKind, format_reward, parse_response, serialize_expressions
from .metrics import ScoredMask, average_precision, evaluate_map
from .optimize import DEFAULT_MAX_LENGTH, TrainerConfig, categorize_responses, collect_samples, train
from .policy import TabularPolicy, load_policy, save_policy
from .raster import BINARY_INGEST_THRESHOLD, DimensionError, PGMError, binarize, load_mask
from .reward import InstanceSet, iasm, total_reward

__all__ = [
    "LayoutError",
    "cmd_eval",
    "cmd_reward",
    "cmd_parse",
    "cmd_train_toy",
    "cmd_analyze",
    "cmd_adapter",
    "main",
]

DIGITS = 6


class LayoutError(ValueError):
    """Dataset layout violations, one message per offending file or id."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


def _round(obj):
    if isinstance(obj, (float, np.floating)):
        return round(float(obj), DIGITS)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _write_json(obj, out) -> None:
    text = json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _write_jsonl(records, out) -> None:
    text = "".join(json.dumps(_round(r), sort_keys=True, ensure_ascii=False) + "\n" for r in records)
    if out is None or str(out) == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


# --- eval ---------------------------------------------------------------------------


def _load_binary(path: Path, problems: list[str]):
    try:
        return binarize(load_mask(path), BINARY_INGEST_THRESHOLD)
    except (OSError, PGMError) as exc:
        problems.append(f"{path}: {exc}")
        return None


def _load_gray(path: Path, problems: list[str]):
    try:
        return load_mask(path)
    except (OSError, PGMError) as exc:
        problems.append(f"{path}: {exc}")
        return None


def _instance_files(directory: Path) -> list[Path]:
    def key(p: Path):
        m = re.fullmatch(r"inst_(\d+)\.pgm", p.name)
        return int(m.group(1)) if m else -1

    return sorted((p for p in directory.glob("inst_*.pgm") if key(p) >= 0), key=key)


def _map_metrics(pred, gt, problems, label):
    try:
        return evaluate_map(pred, gt).as_record()
    except DimensionError as exc:
        problems.append(f"{label}: {exc}")
        return None


def cmd_eval(pred_dir, gt_dir, task, out=None) -> dict:
    """Per-item and mean metrics over a prediction / ground-truth directory pair."""
    task = TaskKind.parse(task)
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    problems: list[str] = []
    items = []
    if not gt_dir.is_dir():
        raise LayoutError([f"{gt_dir}: ground-truth directory not found"])
    if not pred_dir.is_dir():
        raise LayoutError([f"{pred_dir}: prediction directory not found"])

    if task is TaskKind.SOD:
        ids = sorted(p.stem for p in gt_dir.glob("*.pgm"))
        missing = [i for i in ids if not (pred_dir / f"{i}.pgm").exists()]
        if missing:
            raise LayoutError([f"missing prediction for id {i}" for i in missing])
        for item_id in ids:
            gt = _load_gray(gt_dir / f"{item_id}.pgm", problems)
            pred = _load_gray(pred_dir / f"{item_id}.pgm", problems)
            if gt is None or pred is None:
                continue
            rec = _map_metrics(pred, gt, problems, item_id)
            if rec is not None:
                items.append({"id": item_id, **rec})
        keys = ["S_m", "E_xi", "F_beta_max", "MAE"]
    elif task is TaskKind.SIS:
        ids = sorted(p.name for p in gt_dir.iterdir() if p.is_dir())
        missing = [i for i in ids if not (pred_dir / i).is_dir()]
        if missing:
            raise LayoutError([f"missing prediction directory for id {i}" for i in missing])
        for item_id in ids:
            gts = [_load_binary(p, problems) for p in _instance_files(gt_dir / item_id)]
            preds = [_load_binary(p, problems) for p in _instance_files(pred_dir / item_id)]
            if any(m is None for m in gts + preds):
                continue
            if not gts and not preds:
                problems.append(f"{item_id}: neither predictions nor ground truths")
                continue
            shapes = {m.shape for m in gts + preds}
            if len(shapes) != 1:
                problems.append(f"{item_id}: instance masks differ in size {sorted(shapes)}")
                continue
            shape = shapes.pop()
            scored = [ScoredMask(m, 1.0) for m in preds]
            items.append(
                {
                    "id": item_id,
                    "AP50": average_precision(scored, gts, 0.5),
                    "AP70": average_precision(scored, gts, 0.7),
                    "IASM": iasm(InstanceSet(preds, shape), InstanceSet(gts, shape)),
                }
            )
        keys = ["AP50", "AP70", "IASM"]
    else:
        groups = sorted(p.name for p in gt_dir.iterdir() if p.is_dir())
        missing = [g for g in groups if not (pred_dir / g).is_dir()]
        if missing:
            raise LayoutError([f"missing prediction group {g}" for g in missing])
        for group in groups:
            members = sorted((p.stem for p in (gt_dir / group).glob("*.pgm")), key=lambda s: (len(s), s))
            lost = [m for m in members if not (pred_dir / group / f"{m}.pgm").exists()]
            if lost:
                problems.extend(f"missing prediction for {group}/{m}" for m in lost)
                continue
            recs = []
            for m in members:
                gt = _load_gray(gt_dir / group / f"{m}.pgm", problems)
                pred = _load_gray(pred_dir / group / f"{m}.pgm", problems)
                if gt is not None and pred is not None:
                    rec = _map_metrics(pred, gt, problems, f"{group}/{m}")
                    if rec is not None:
                        recs.append(rec)
            if recs and len(recs) == len(members):
                group_rec = {k: _mean([r[k] for r in recs]) for k in recs[0]}
                items.append({"id": group, "images": len(recs), **group_rec})
        keys = ["S_m", "E_xi", "F_beta_max", "MAE"]

    if problems:
        raise LayoutError(problems)
    report = {
        "task": task.value,
        "count": len(items),
        "summary": {k: _mean([it[k] for it in items]) for k in keys},
        "items": items,
    }
    if out is not None:
        _write_json(report, out)
    return report


# --- responses files --------------------------------------------------------------------


def _read_responses(path):
    """Yield (line number, record or None, error or None) for a JSONL responses file."""
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict) or not isinstance(rec.get("response"), str):
                    raise ValueError("record must be an object with a string 'response'")
                rec["task"] = TaskKind.parse(rec.get("task")).value
                rec["id"] = str(rec.get("id", n))
                yield n, rec, None
            except (ValueError, TypeError) as exc:
                yield n, None, f"line {n}: {exc}"


def cmd_parse(responses, task=None, out=None) -> dict:
    """Expression records and format verdicts for every response line."""
    task_flag = TaskKind.parse(task) if task is not None else None
    records = []
    counts: Counter = Counter()
    for n, rec, err in _read_responses(responses):
        if err:
            records.append({"line": n, "error": err, "valid": False})
            counts["invalid"] += 1
            counts["unreadable line"] += 1
            continue
        line_task = task_flag or TaskKind.parse(rec["task"])
        verdict = format_reward(rec["response"], line_task)
        exprs = []
        try:
            resp = parse_response(rec["response"])
            exprs = [asdict(e) for e in resp.expressions]
            if verdict.r_fmt == 1.0:
                exprs = [json.loads(s) for s in serialize_expressions(resp, line_task, rec["id"])]
        except FormatError:
            pass
        valid = verdict.r_fmt == 1.0
        counts["valid" if valid else "invalid"] += 1
        for d in verdict.diagnostics:
            counts[re.sub(r":.*", "", d)] += 1
        records.append(
            {
                "line": n,
                "id": rec["id"],
                "task": line_task.value,
                "valid": valid,
                "r_struct": verdict.r_struct,
                "r_tag": verdict.r_tag,
                "expressions": exprs,
                "diagnostics": verdict.diagnostics,
            }
        )
    summary = {"valid": counts.pop("valid", 0), "invalid": counts.pop("invalid", 0), "diagnostics": dict(sorted(counts.items()))}
    result = {"summary": summary, "records": records}
    if out is not None:
        _write_jsonl(records + [{"summary": summary}], out)
    return result


def _episode_for(world: World, rec_id: str):
    m = re.search(r"(\d+)$", rec_id)
    if not m or int(m.group(1)) >= len(world.episodes):
        raise ValueError(f"id {rec_id!r} does not name an episode of this world")
    return world.episode(int(m.group(1)))


def _gt_for(gt_dir: Path, task: TaskKind, rec_id: str):
    if task is TaskKind.SOD:
        return load_mask(gt_dir / f"{rec_id}.pgm")
    if task is TaskKind.SIS:
        files = _instance_files(gt_dir / rec_id)
        masks = [binarize(load_mask(p), BINARY_INGEST_THRESHOLD) for p in files]
        if not masks:
            raise ValueError(f"{gt_dir / rec_id}: no inst_*.pgm ground truths")
        return InstanceSet(masks)
    files = sorted((gt_dir / rec_id).glob("*.pgm"), key=lambda p: (len(p.stem), p.stem))
    if not files:
        raise ValueError(f"{gt_dir / rec_id}: no group images")
    return [load_mask(p) for p in files]


def _gt_shape(task: TaskKind, gt):
    if task is TaskKind.SOD:
        return gt.shape
    if task is TaskKind.SIS:
        return gt.shape
    return gt[0].shape


def cmd_reward(responses, world=None, gt_dir=None, adapter_dir=None, timeout_ms=10_000, out=None) -> list[dict]:
    """One reward breakdown per response line, in input order.

    Masks come from the oracle segmenter of ``world`` (a seed or a dumped
    world directory), or from an external segmenter through ``adapter_dir``
    with ground truths read from the ``gt_dir`` layout.
    """
    if (world is None) == (adapter_dir is None):
        raise ValueError("give exactly one mask source: a world or an adapter directory")
    if adapter_dir is not None and gt_dir is None:
        raise ValueError("adapter mode needs a ground-truth directory")
    if world is not None and not isinstance(world, World):
        world = build_world(int(world)) if str(world).lstrip("-").isdigit() else load_world(world)

    parsed = []  # (line, rec, verdict, resp|None, gt|None, error|None)
    for n, rec, err in _read_responses(responses):
        if err:
            parsed.append((n, None, None, None, None, err))
            continue
        task = TaskKind.parse(rec["task"])
        try:
            if world is not None:
                ep = _episode_for(world, rec["id"])
                if ep.task is not task:
                    raise ValueError(f"task {task.value} does not match episode task {ep.task.value}")
                gt = ep
            else:
                gt = _gt_for(Path(gt_dir), task, rec["id"])
        except (OSError, ValueError) as exc:
            parsed.append((n, rec, None, None, None, f"line {n}: {exc}"))
            continue
        verdict = format_reward(rec["response"], task)
        try:
            resp = parse_response(rec["response"])
        except FormatError:
            resp = None
        parsed.append((n, rec, verdict, resp, gt, None))

    masks = {}
    if adapter_dir is not None:
        requests, shapes = [], {}
        for n, rec, verdict, resp, gt, err in parsed:
            if resp is None:
                continue
            task = TaskKind.parse(rec["task"])
            for req in _requests_for(_request_prefix(n, rec["id"]), rec["id"], task, resp, gt):
                requests.append(req)
                shapes[req.id] = _gt_shape(task, gt)
        if requests:
            masks = adapter_roundtrip(requests, adapter_dir, timeout_ms, shapes)

    results = []
    for n, rec, verdict, resp, gt, err in parsed:
        if err:
            results.append({"line": n, "id": rec["id"] if rec else None, "error": err})
            continue
        task = TaskKind.parse(rec["task"])
        if world is not None:
            breakdown = score_response(world, gt, rec["response"])
        elif resp is None:
            breakdown = total_reward(0.0, verdict)
        else:
            segment = _adapter_segmenter(_request_prefix(n, rec["id"]), task, resp, masks)
            r_corr = correctness_from_expressions(task, resp.expressions, gt, segment)
            breakdown = total_reward(r_corr, verdict)
        results.append({"line": n, "id": rec["id"], "task": task.value, **breakdown.as_record()})
    if out is not None:
        _write_jsonl(results, out)
    return results


def _request_prefix(line: int, rec_id: str) -> str:
    # Line numbers keep request ids unique even when response ids repeat.
    return f"L{line}_" + re.sub(r"[^A-Za-z0-9_.-]", "_", rec_id)


def _requests_for(prefix, rec_id, task, resp, gt):
    """Segmenter requests for one response: ``{prefix}-{i}`` per expression, ``{prefix}-k{k}`` per group image."""
    exprs = resp.expressions
    if task is TaskKind.SOD:
        return [SegmenterRequest(f"{prefix}-{i}", rec_id, e.text, "region") for i, e in enumerate(exprs) if e.kind == "region"]
    if task is TaskKind.SIS:
        return [
            SegmenterRequest(f"{prefix}-{i}", rec_id, e.text, "instance") for i, e in enumerate(exprs) if e.kind == "instance"
        ]
    regions = [e for e in exprs if e.kind == "region"]
    if not regions:
        return []
    return [SegmenterRequest(f"{prefix}-k{k}", f"{rec_id}/{k}", regions[0].text, "region") for k in range(len(gt))]


def _adapter_segmenter(prefix, task, resp, masks):
    index = {id(e): i for i, e in enumerate(resp.expressions)}

    def segment(expr, image=None):
        if task is TaskKind.COSOD:
            return masks[f"{prefix}-k{image}"]
        return masks[f"{prefix}-{index[id(expr)]}"]

    return segment


# --- training and analysis -------------------------------------------------------------------


_WORLD_KEYS = {"grid": "grid", "entries": "entries", "K": "group_size", "group_size": "group_size"}
_WORLD_KEYS.update({k: k for k in ("sod_episodes", "sis_episodes", "cosod_episodes", "max_targets")})


def load_config(path) -> tuple[TrainerConfig, WorldConfig, int]:
    """Flat JSON config -> (trainer config, world config, max sequence length)."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError("config must be a flat JSON object")
    unknown = set(data) - set(TrainerConfig.__dataclass_fields__) - {"G", "max_length"} - set(_WORLD_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    world_kwargs = {_WORLD_KEYS[k]: v for k, v in data.items() if k in _WORLD_KEYS}
    return TrainerConfig.from_mapping(data), WorldConfig(**world_kwargs), int(data.get("max_length", DEFAULT_MAX_LENGTH))


def cmd_train_toy(config_path, out, seed=None) -> dict:
    """Build the world, train, and write report.jsonl, policy.json, world/ and timing.json under ``out``."""
    config, world_cfg, max_length = load_config(config_path)
    if seed is not None:
        config = TrainerConfig(**{**config.__dict__, "seed": int(seed)})
    world = build_world(config.seed, world_cfg)
    policy = TabularPolicy.uniform(len(world.episodes), max_length, world.vocab)
    report, trained = train(config, world, policy)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    save_policy(trained, out / "policy.json")
    dump_world(world, out / "world")
    summary = report.summary(timing=True)
    _write_json(summary, out / "timing.json")
    return summary


def cmd_analyze(checkpoint, world, samples=1000, group_size=8, seed=0, out=None) -> dict:
    """Quadrant statistics of sampled responses under both advantage rules."""
    if samples < 100:
        raise ValueError("analysis needs at least 100 samples")
    policy = load_policy(checkpoint)
    if not isinstance(world, World):
        world = build_world(int(world)) if str(world).lstrip("-").isdigit() else load_world(world)
    pairs, advantages = collect_samples(policy, world, samples, group_size, seed)
    stats = categorize_responses(pairs, advantages)
    record = stats.as_record()
    if out is not None:
        _write_json(record, out)
    return record


def cmd_adapter(requests_path, adapter_dir, timeout_ms=10_000, out=None) -> dict:
    """Run one adapter round trip for a JSONL file of segmenter requests."""
    with open(requests_path, encoding="utf-8") as fh:
        requests = [SegmenterRequest(**json.loads(line)) for line in fh if line.strip()]
    masks = adapter_roundtrip(requests, adapter_dir, timeout_ms)
    record = {
        "received": len(masks),
        "masks": [{"id": rid, "width": m.width, "height": m.height, "area": m.area} for rid, m in masks.items()],
    }
    if out is not None:
        _write_json(record, out)
    return record


def cmd_serve_oracle(adapter_dir, world) -> int:
    """Answer pending adapter requests with the oracle segmenter of a world."""
    if not isinstance(world, World):
        world = build_world(int(world)) if str(world).lstrip("-").isdigit() else load_world(world)
    from .interface import ReferringExpression

    return answer_requests(adapter_dir, lambda req: oracle_segment(world.lexicon, ReferringExpression(req.kind, req.text)))


# --- argparse -------------------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="saliency-rl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=None, help="defaults to 0, or to the config's seed")
        sp.add_argument("--out", required=out_required, default="-" if not out_required else None)
        return sp

    sp = common(sub.add_parser("eval", help="metrics over pred/gt directories"))
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--task", required=True, choices=[t.value for t in TaskKind])

    sp = common(sub.add_parser("reward", help="reward breakdown per response line"))
    sp.add_argument("--responses", required=True)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--world", help="world seed or dumped world directory (oracle masks)")
    src.add_argument("--adapter", help="adapter directory (external segmenter masks)")
    sp.add_argument("--gt", help="ground-truth layout, required with --adapter")
    sp.add_argument("--timeout-ms", type=int, default=10_000)

    sp = common(sub.add_parser("parse", help="parse and validate responses"))
    sp.add_argument("--responses", required=True)
    sp.add_argument("--task", choices=[t.value for t in TaskKind], help="override each line's task")

    sp = common(sub.add_parser("train-toy", help="train on the synthetic token world"), out_required=True)
    sp.add_argument("--config", required=True)

    sp = common(sub.add_parser("analyze", help="response-type quadrant statistics"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--world", required=True)
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--group-size", type=int, default=8)

    sp = common(sub.add_parser("adapter", help="external segmenter round trip"))
    sp.add_argument("--requests", required=True)
    sp.add_argument("--dir", required=True)
    sp.add_argument("--timeout-ms", type=int, default=10_000)

    sp = common(sub.add_parser("serve-oracle", help="answer adapter requests with a world's oracle"))
    sp.add_argument("--dir", required=True)
    sp.add_argument("--world", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "eval":
            report = cmd_eval(args.pred, args.gt, args.task, args.out)
            if args.out != "-":
                print(json.dumps(_round(report["summary"]), sort_keys=True))
        elif args.command == "reward":
            cmd_reward(args.responses, args.world, args.gt, args.adapter, args.timeout_ms, args.out)
        elif args.command == "parse":
            result = cmd_parse(args.responses, args.task, args.out)
            if args.out != "-":
                print(json.dumps(result["summary"], sort_keys=True))
        elif args.command == "train-toy":
            t0 = time.perf_counter()
            summary = cmd_train_toy(args.config, args.out, args.seed)
            print(
                f"{summary['algorithm']}: steps={summary['steps']} traces={summary['traces']} "
                f"mean_step_ms={summary['mean_step_ms']:.3f} final_mean_reward={summary['final_mean_reward']:.4f} "
                f"wall_s={time.perf_counter() - t0:.1f}"
            )
        elif args.command == "analyze":
            cmd_analyze(args.checkpoint, args.world, args.samples, args.group_size, args.seed or 0, args.out)
        elif args.command == "adapter":
            cmd_adapter(args.requests, args.dir, args.timeout_ms, args.out)
        elif args.command == "serve-oracle":
            print(cmd_serve_oracle(args.dir, args.world))
    except (LayoutError, AdapterTimeout, AdapterMaskError, FormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
