"""File-based handoff to an external referring segmenter.

Protocol, all inside one adapter directory:

* this side writes ``requests.jsonl``: one ``{"id", "image", "text", "kind"}``
  object per line;
* the segmenter writes ``masks/{id}.pgm`` (binary PGM, P5, maxval 255) for
  every request, ideally to a temporary name followed by a rename;
* this side polls until every id has a mask or the timeout expires.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from .raster import BINARY_INGEST_THRESHOLD, BinaryMask, PGMError, binarize, load_mask, save_mask

__all__ = [
    "SegmenterRequest",
    "AdapterTimeout",
    "AdapterMaskError",
    "write_requests",
    "read_requests",
    "collect_masks",
    "adapter_roundtrip",
    "answer_requests",
]

REQUESTS_FILE = "requests.jsonl"
MASKS_DIR = "masks"


@dataclass(frozen=True)
class SegmenterRequest:
    id: str
    image: str
    text: str
    kind: str = "region"

    def __post_init__(self):
        if self.kind not in ("region", "instance"):
            raise ValueError(f"unknown request kind {self.kind!r}")
        if not self.id or "/" in self.id or "\\" in self.id:
            raise ValueError(f"request id {self.id!r} must be a non-empty file-name-safe string")


class AdapterTimeout(TimeoutError):
    def __init__(self, missing: list[str], timeout_ms: int):
        self.missing = sorted(missing)
        super().__init__(f"no mask after {timeout_ms} ms for {len(self.missing)} request(s): {', '.join(self.missing)}")


class AdapterMaskError(ValueError):
    def __init__(self, errors: dict[str, str]):
        self.errors = dict(sorted(errors.items()))
        super().__init__("; ".join(f"{k}: {v}" for k, v in self.errors.items()))


def write_requests(requests: list[SegmenterRequest], adapter_dir) -> Path:
    ids = [r.id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("request ids must be unique within a batch")
    root = Path(adapter_dir)
    (root / MASKS_DIR).mkdir(parents=True, exist_ok=True)
    path = root / REQUESTS_FILE
    tmp = path.with_suffix(".jsonl.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in requests:
            fh.write(json.dumps(asdict(r), ensure_ascii=False) + "\n")
    tmp.replace(path)
    return path


def read_requests(adapter_dir) -> list[SegmenterRequest]:
    with open(Path(adapter_dir) / REQUESTS_FILE, encoding="utf-8") as fh:
        return [SegmenterRequest(**json.loads(line)) for line in fh if line.strip()]


def collect_masks(
    ids: list[str],
    adapter_dir,
    timeout_ms: int = 10_000,
    expected_shapes: dict[str, tuple[int, int]] | None = None,
    poll_ms: int = 10,
) -> dict[str, BinaryMask]:
    """Wait for ``masks/{id}.pgm`` for every id and ingest them as binary masks.

    Files that fail to parse are retried until the deadline, since a writer
    may still be filling them. Raises :class:`AdapterTimeout` naming ids with
    no file and :class:`AdapterMaskError` for unreadable or wrong-size masks.
    """
    masks_dir = Path(adapter_dir) / MASKS_DIR
    deadline = time.monotonic() + timeout_ms / 1000.0
    pending = set(ids)
    got: dict[str, BinaryMask] = {}
    errors: dict[str, str] = {}
    while True:
        for rid in sorted(pending):
            path = masks_dir / f"{rid}.pgm"
            if not path.exists():
                continue
            try:
                mask = binarize(load_mask(path), BINARY_INGEST_THRESHOLD)
            except PGMError as exc:
                errors[rid] = str(exc)
                continue
            errors.pop(rid, None)
            pending.discard(rid)
            want = (expected_shapes or {}).get(rid)
            if want is not None and tuple(mask.shape) != tuple(want):
                errors[rid] = f"dimension mismatch: got {mask.width}x{mask.height}, expected {want[1]}x{want[0]}"
            else:
                got[rid] = mask
        if not pending or time.monotonic() >= deadline:
            break
        time.sleep(poll_ms / 1000.0)
    unreadable = {rid for rid in pending if rid in errors}
    missing = pending - unreadable
    if missing:
        raise AdapterTimeout(sorted(missing), timeout_ms)
    if errors:
        raise AdapterMaskError(errors)
    return {rid: got[rid] for rid in ids}


def adapter_roundtrip(
    requests: list[SegmenterRequest],
    adapter_dir,
    timeout_ms: int = 10_000,
    expected_shapes: dict[str, tuple[int, int]] | None = None,
) -> dict[str, BinaryMask]:
    """Write the requests, then collect one mask per request id."""
    write_requests(requests, adapter_dir)
    return collect_masks([r.id for r in requests], adapter_dir, timeout_ms, expected_shapes)


def answer_requests(adapter_dir, segment, only=None) -> int:
    """Play the segmenter side: write ``segment(request)`` for each pending request.

    ``only`` optionally restricts which ids get answered. Returns the number of
    masks written.
    """
    root = Path(adapter_dir)
    written = 0
    for req in read_requests(root):
        if only is not None and req.id not in only:
            continue
        final = root / MASKS_DIR / f"{req.id}.pgm"
        tmp = final.with_suffix(".pgm.tmp")
        save_mask(segment(req), tmp)
        tmp.replace(final)
        written += 1
    return written
