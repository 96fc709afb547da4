"""Parsing and format scoring for ``<think>...</think><answer>...</answer>`` responses.

The answer block carries referring expressions as ``<rg>`` (region) and
``<ins>`` (instance) tags. A region body may start with ``[semantic] `` to
mark a bare category name.
"""

from __future__ import annotations

import enum
import json
import re
from dataclasses import dataclass, field

__all__ = [
    "TaskKind",
    "ReferringExpression",
    "CotResponse",
    "FormatVerdict",
    "FormatError",
    "parse_response",
    "parse_answer",
    "validate_answer",
    "format_reward",
    "serialize_expressions",
    "expressions_from_records",
    "render_answer",
    "SEMANTIC_PREFIX",
]

SEMANTIC_PREFIX = "[semantic]"

# Plain tag shape; no nested quantifiers, so matching is linear.
_TAG = re.compile(r"<(/?)([A-Za-z][A-Za-z0-9_-]*)>")
_BLOCKS = ("think", "answer")
_EXPRESSION_TAGS = {"rg": "region", "ins": "instance"}


class TaskKind(str, enum.Enum):
    SOD = "sod"
    SIS = "sis"
    COSOD = "cosod"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, TaskKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown task {value!r}; expected one of sod, sis, cosod") from None


@dataclass(frozen=True)
class ReferringExpression:
    kind: str  # "region" | "instance"
    text: str
    semantic: bool = False

    def __post_init__(self):
        if self.kind not in ("region", "instance"):
            raise ValueError(f"unknown expression kind {self.kind!r}")
        if not self.text or self.text != self.text.strip():
            raise ValueError("expression text must be non-empty and trimmed")
        if self.semantic and self.kind != "region":
            raise ValueError("only region expressions can carry the semantic flag")

    def render(self) -> str:
        tag = "rg" if self.kind == "region" else "ins"
        body = f"{SEMANTIC_PREFIX} {self.text}" if self.semantic else self.text
        return f"<{tag}>{body}</{tag}>"


@dataclass(frozen=True)
class CotResponse:
    think_text: str
    expressions: list[ReferringExpression]
    raw: str
    answer_text: str = ""
    # Problems inside the answer block; structure is fine when a CotResponse exists.
    answer_diagnostics: tuple[str, ...] = ()


@dataclass(frozen=True)
class FormatVerdict:
    r_struct: float
    r_tag: float
    diagnostics: list[str] = field(default_factory=list)

    @property
    def r_fmt(self) -> float:
        return self.r_struct + self.r_tag


class FormatError(ValueError):
    """Structural failure of a response; ``diagnostics`` lists every violation found."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


# --- block structure ------------------------------------------------------------


def _block_tags(raw: str, name: str) -> list[tuple[bool, int, int]]:
    """(is_close, start, end) for every <name> / </name> occurrence."""
    return [(m.group(1) == "/", m.start(), m.end()) for m in _TAG.finditer(raw) if m.group(2) == name]


def _locate_block(raw: str, name: str) -> tuple[tuple[int, int, int, int] | None, list[str]]:
    """Find the single ``<name>...</name>`` block.

    Returns ``(open_start, body_start, body_end, close_end)`` or ``None`` with
    diagnostics describing why no single well-formed block exists.
    """
    tags = _block_tags(raw, name)
    opens = [t for t in tags if not t[0]]
    closes = [t for t in tags if t[0]]
    if not tags:
        return None, [f"missing {name}"]
    if len(opens) == 1 and len(closes) == 1:
        (_, o_start, o_end), (_, c_start, c_end) = opens[0], closes[0]
        if o_start < c_start:
            return (o_start, o_end, c_start, c_end), []
        return None, [f"unopened {name}", f"unclosed {name}"]
    diags = []
    depth = 0
    for is_close, _, _ in tags:
        if is_close:
            depth -= 1
            if depth < 0:
                diags.append(f"unopened {name}")
                depth = 0
        else:
            depth += 1
            if depth > 1:
                diags.append(f"nested {name}")
    if depth > 0:
        diags.append(f"unclosed {name}")
    if len(opens) > 1 and f"nested {name}" not in diags:
        diags.append(f"duplicated {name}")
    if len(opens) == 1 and len(closes) > 1:
        diags.append(f"duplicated {name}")
    # Dedupe, keeping first occurrence order.
    return None, list(dict.fromkeys(diags))


def _structure(raw: str):
    spans = {}
    diags: list[str] = []
    for name in _BLOCKS:
        span, d = _locate_block(raw, name)
        spans[name] = span
        diags.extend(d)
    think, answer = spans["think"], spans["answer"]
    if think is not None and answer is not None:
        t0, _, _, t1 = think
        a0, _, _, a1 = answer
        if a1 <= t0:
            diags.append("answer before think")
        elif t0 < a0 < t1:
            diags.append("nested answer in think" if a1 <= t1 else "interleaved think and answer")
        elif a0 < t0 < a1:
            diags.append("nested think in answer" if t1 <= a1 else "interleaved think and answer")
    return spans, diags


# --- answer content -------------------------------------------------------------


def parse_answer(body: str) -> tuple[list[ReferringExpression], list[str]]:
    """Extract expressions from an answer body.

    Returns every well-formed expression plus diagnostics for anything that
    departs from a sequence of closed ``<rg>``/``<ins>`` tags.
    """
    exprs: list[ReferringExpression] = []
    diags: list[str] = []
    pos = 0
    open_tag: tuple[str, int] | None = None
    for m in _TAG.finditer(body):
        is_close, name = m.group(1) == "/", m.group(2)
        if open_tag is None:
            if body[pos : m.start()].strip():
                diags.append("stray text in answer")
            if name not in _EXPRESSION_TAGS:
                diags.append(f"unknown tag <{m.group(1)}{name}>")
                pos = m.end()
                continue
            if is_close:
                diags.append(f"unopened {name}")
                pos = m.end()
                continue
            open_tag = (name, m.end())
            continue
        current, body_start = open_tag
        if is_close and name == current:
            expr, d = _make_expression(current, body[body_start : m.start()])
            diags.extend(d)
            if expr is not None:
                exprs.append(expr)
            open_tag = None
            pos = m.end()
        elif name == current:
            diags.append(f"nested {current}")
            open_tag = None
            pos = m.end()
        else:
            diags.append(f"interleaved tags <{current}> and <{m.group(1)}{name}>")
            open_tag = None
            pos = m.end()
    if open_tag is not None:
        diags.append(f"unclosed {open_tag[0]}")
    elif body[pos:].strip():
        diags.append("stray text in answer")
    return exprs, list(dict.fromkeys(diags))


def _make_expression(tag: str, body: str) -> tuple[ReferringExpression | None, list[str]]:
    kind = _EXPRESSION_TAGS[tag]
    text = body.strip()
    semantic = False
    if text.startswith(SEMANTIC_PREFIX):
        rest = text[len(SEMANTIC_PREFIX) :]
        if not rest[:1].isspace() or not rest.strip():
            return None, ["malformed [semantic] annotation"]
        if kind != "region":
            return None, ["[semantic] prefix on instance"]
        text, semantic = rest.strip(), True
    if not text:
        return None, [f"empty {tag}"]
    return ReferringExpression(kind, text, semantic), []


# --- public API -----------------------------------------------------------------


def parse_response(raw: str) -> CotResponse:
    """Parse a full response, raising :class:`FormatError` on structural failure.

    Structure requires exactly one think block followed by exactly one answer
    block, neither nested, truncated nor duplicated. Tags inside the think
    block are ignored; expressions come from the answer block only.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    spans, diags = _structure(raw)
    if diags:
        raise FormatError(diags)
    _, t_body0, t_body1, _ = spans["think"]
    _, a_body0, a_body1, _ = spans["answer"]
    answer_text = raw[a_body0:a_body1]
    exprs, answer_diags = parse_answer(answer_text)
    return CotResponse(
        think_text=raw[t_body0:t_body1].strip(),
        expressions=exprs,
        raw=raw,
        answer_text=answer_text,
        answer_diagnostics=tuple(answer_diags),
    )


def validate_answer(expressions: list[ReferringExpression], task) -> tuple[bool, list[str]]:
    """Task rules on the expression list: SOD regions, SIS instances, CoSOD one semantic region."""
    task = TaskKind.parse(task)
    regions = [e for e in expressions if e.kind == "region"]
    instances = [e for e in expressions if e.kind == "instance"]
    diags = []
    if task is TaskKind.SOD:
        if instances:
            diags.append("incorrect tag type: <ins> in sod")
        if not regions:
            diags.append("missing <rg>")
    elif task is TaskKind.SIS:
        if regions:
            diags.append("incorrect tag type: <rg> in sis")
        if not instances:
            diags.append("missing <ins>")
    else:
        if instances:
            diags.append("incorrect tag type: <ins> in cosod")
        if not regions:
            diags.append("missing <rg>")
        elif len(regions) > 1:
            diags.append("more than one <rg> in cosod")
        elif not regions[0].semantic:
            diags.append("missing [semantic] prefix")
    return not diags, diags


def format_reward(raw: str, task) -> FormatVerdict:
    """Score structure and answer tags independently, 0.5 each."""
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8", errors="replace")
    spans, diags = _structure(raw)
    r_struct = 0.0 if diags else 0.5
    r_tag = 0.0
    answer = spans["answer"]
    if answer is not None:
        exprs, answer_diags = parse_answer(raw[answer[1] : answer[2]])
        ok, task_diags = validate_answer(exprs, task)
        diags = diags + answer_diags + task_diags
        if not answer_diags and ok:
            r_tag = 0.5
    return FormatVerdict(r_struct=r_struct, r_tag=r_tag, diagnostics=diags)


def render_answer(expressions: list[ReferringExpression]) -> str:
    return "<answer>" + "".join(e.render() for e in expressions) + "</answer>"


def serialize_expressions(resp: CotResponse, task, response_id: str = "r") -> list[str]:
    """One JSON line per expression: id, kind, text, semantic, index."""
    task = TaskKind.parse(task)
    ok, diags = validate_answer(resp.expressions, task)
    if resp.answer_diagnostics or not ok:
        raise ValueError(f"response is not valid for {task.value}: {list(resp.answer_diagnostics) + diags}")
    return [
        json.dumps(
            {"id": f"{response_id}-{i}", "kind": e.kind, "text": e.text, "semantic": e.semantic, "index": i},
            ensure_ascii=False,
        )
        for i, e in enumerate(resp.expressions)
    ]


def expressions_from_records(lines: list[str]) -> list[ReferringExpression]:
    records = sorted((json.loads(line) for line in lines), key=lambda r: r["index"])
    return [ReferringExpression(r["kind"], r["text"], bool(r["semantic"])) for r in records]
