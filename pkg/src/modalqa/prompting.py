"""Prompt templates for every agent role and the tolerant section parser for model output."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

from .backends import ChatMessage
from .core import ImageRef
from .errors import MissingPlaceholder, TemplateError

PLACEHOLDERS = frozenset({
    "question", "modality_name", "modality_content", "anchor_insights",
    "other_modality_1", "other_modality_2", "synthesis_blocks",
    "context", "thoughts", "candidate",
})
TEMPLATE_NAMES = (
    "expert", "synthesis", "aggregator", "aggregator_with_question",
    "cot", "cot_nocontext", "capcot_caption", "tot_propose", "tot_value",
)
IMAGE_MARKER = "[image attached]"
FORMAT_REMINDER = "Respond using the required headers."

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(sorted(PLACEHOLDERS)) + r")\}")
_FRONT_RE = re.compile(r"^#!\s*template:\s*([\w-]+)\s*;\s*requires:\s*(.*)$")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_skeleton: str
    required: frozenset[str]

    def __post_init__(self):
        found = set(_PLACEHOLDER_RE.findall(self.user_skeleton))
        if found != set(self.required):
            raise TemplateError(
                f"template {self.name!r}: declared placeholders {sorted(self.required)} "
                f"but skeleton uses {sorted(found)}"
            )
        if _PLACEHOLDER_RE.search(self.system_text):
            raise TemplateError(f"template {self.name!r}: the system text must not contain placeholders")

    @classmethod
    def parse(cls, text: str) -> PromptTemplate:
        lines = text.splitlines()
        if not lines:
            raise TemplateError("empty template file")
        m = _FRONT_RE.match(lines[0].strip())
        if not m:
            raise TemplateError("first line must be '#! template: <name>; requires: <a>, <b>'")
        name = m.group(1)
        required = frozenset(p.strip() for p in m.group(2).split(",") if p.strip())
        unknown = required - PLACEHOLDERS
        if unknown:
            raise TemplateError(f"template {name!r}: unknown placeholders {sorted(unknown)}")
        body = "\n".join(lines[1:])
        parts = re.split(r"^=== (system|user) ===[ \t]*$", body, flags=re.M)
        blocks = dict(zip(parts[1::2], parts[2::2]))
        if set(blocks) != {"system", "user"}:
            raise TemplateError(f"template {name!r}: needs '=== system ===' and '=== user ===' blocks")
        return cls(name, blocks["system"].strip("\n"), blocks["user"].strip("\n"), required)


def load_templates(directory: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load every ``*.txt`` template from ``directory`` (default: the bundled set)."""
    if directory is None:
        return dict(_bundled())
    out = {}
    for path in sorted(Path(directory).glob("*.txt")):
        tpl = PromptTemplate.parse(path.read_text(encoding="utf-8"))
        out[tpl.name] = tpl
    return out


@lru_cache(maxsize=1)
def _bundled() -> tuple[tuple[str, PromptTemplate], ...]:
    root = resources.files("modalqa") / "prompts"
    items = []
    for name in TEMPLATE_NAMES:
        tpl = PromptTemplate.parse((root / f"{name}.txt").read_text(encoding="utf-8"))
        items.append((tpl.name, tpl))
    return tuple(items)


def get_template(name: str) -> PromptTemplate:
    return dict(_bundled())[name]


def _flatten(value) -> tuple[str, list[ImageRef]]:
    if isinstance(value, str):
        return value, []
    if isinstance(value, ImageRef):
        return IMAGE_MARKER, [value]
    texts, images = [], []
    for item in value:
        t, im = _flatten(item)
        texts.append(t)
        images.extend(im)
    return "\n".join(texts), images


def render(template: PromptTemplate, bindings: Mapping[str, object]) -> list[ChatMessage]:
    """Bind placeholders and return ``[system, user]`` messages.

    Image values are replaced in the text by a marker and attached to the user
    message as image parts, in placeholder order. Bindings the template does
    not use are ignored.
    """
    for name in sorted(template.required):
        if name not in bindings or bindings[name] is None:
            raise MissingPlaceholder(name)
    images: list[ImageRef] = []

    def sub(m: re.Match) -> str:
        text, ims = _flatten(bindings[m.group(1)])
        images.extend(ims)
        return text

    user_text = _PLACEHOLDER_RE.sub(sub, template.user_skeleton)
    return [
        ChatMessage("system", (template.system_text,)),
        ChatMessage("user", (user_text, *images)),
    ]


def with_format_reminder(messages: Sequence[ChatMessage]) -> list[ChatMessage]:
    """Copy of ``messages`` with the header reminder appended to the last user turn."""
    out = list(messages)
    for i in range(len(out) - 1, -1, -1):
        if out[i].role == "user":
            out[i] = ChatMessage("user", (*out[i].parts, "\n\n" + FORMAT_REMINDER))
            break
    return out


# Section parsing

SECTIONS = ("INSIGHTS", "CUES", "GAPS", "SUB_ANSWERS", "FINAL_ANSWER", "UNCERTAINTY", "REASONING")

_ALIASES = {
    "INSIGHTS": "INSIGHTS",
    "KEY_INSIGHTS": "INSIGHTS",
    "KEY_FACTS": "INSIGHTS",
    "EXTRACTED_INSIGHTS": "INSIGHTS",
    "FACTS": "INSIGHTS",
    "CUES": "CUES",
    "TEMPORAL_CUES": "CUES",
    "CONTEXTUAL_CUES": "CUES",
    "TEMPORAL_AND_CONTEXTUAL_CUES": "CUES",
    "GAPS": "GAPS",
    "AMBIGUITIES": "GAPS",
    "GAPS_AND_AMBIGUITIES": "GAPS",
    "SUB_ANSWERS": "SUB_ANSWERS",
    "SUBANSWERS": "SUB_ANSWERS",
    "SUB_QUESTIONS": "SUB_ANSWERS",
    "INTERMEDIATE_SUB_ANSWERS": "SUB_ANSWERS",
    "FINAL_ANSWER": "FINAL_ANSWER",
    "UNCERTAINTY": "UNCERTAINTY",
    "UNCERTAINTIES": "UNCERTAINTY",
    "REASONING": "REASONING",
    "RATIONALE": "REASONING",
}

_HEADER_RE = re.compile(
    r"^\s*(?:[-*•]\s+|#{1,6}\s*)?(?:\*\*|__)?\s*"
    r"([A-Za-z][A-Za-z _-]{0,40}?)\s*(?:\*\*|__)?\s*:\s*(?:\*\*|__)?[ \t]*(.*)$"
)


def _header(line: str) -> tuple[str, str] | None:
    m = _HEADER_RE.match(line)
    if not m:
        return None
    key = re.sub(r"[\s_-]+", "_", m.group(1).strip().upper())
    canonical = _ALIASES.get(key)
    if canonical is None:
        return None
    return canonical, m.group(2)


def parse_sections(raw: str) -> dict[str, str]:
    """Split model output into canonical sections.

    Header lines are matched case-insensitively with markdown bold, bullets and
    ``#`` prefixes tolerated. Text before the first header becomes REASONING; a
    repeated header keeps its last occurrence. Never raises.
    """
    sections: dict[str, str] = {}
    if not raw:
        return sections
    current: str | None = None
    buf: list[str] = []
    preamble: list[str] = []

    def flush():
        if current is not None:
            sections.pop(current, None)
            sections[current] = "\n".join(buf).strip()

    for line in str(raw).splitlines():
        hit = _header(line)
        if hit is None:
            (buf if current is not None else preamble).append(line)
            continue
        flush()
        current, first = hit
        buf = [first] if first.strip() else []
    flush()
    pre = "\n".join(preamble).strip()
    if pre and "REASONING" not in sections:
        sections["REASONING"] = pre
    return sections


ABSTENTION_MARKERS = frozenset({
    "unknown", "cannot be determined", "insufficient evidence", "unanswerable", "n/a",
})
_CONFIDENT_UNCERTAINTY = frozenset({"none", "no", "-"})


class FinalAnswer(NamedTuple):
    answer: str | None
    uncertain: bool


def _first_line(text: str) -> str:
    for line in text.splitlines():
        if line.strip():
            return line.strip()
    return ""


def is_abstention(answer: str | None, markers: Iterable[str] = ABSTENTION_MARKERS) -> bool:
    if answer is None:
        return True
    key = answer.strip().strip("\"'*").strip().rstrip(".!").strip().lower()
    return not key or key in {m.lower() for m in markers}


def extract_final_answer(
    sections: Mapping[str, str], markers: Iterable[str] = ABSTENTION_MARKERS
) -> FinalAnswer:
    answer = _first_line(sections.get("FINAL_ANSWER", ""))
    if is_abstention(answer, markers):
        return FinalAnswer(None, True)
    note = sections.get("UNCERTAINTY", "").strip()
    uncertain = bool(note) and note.lower().rstrip(".") not in _CONFIDENT_UNCERTAINTY
    return FinalAnswer(answer, uncertain)


_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")


def section_items(text: str) -> list[str]:
    """One item per non-empty line, bullets and numbering stripped, "none" dropped."""
    items = []
    for line in (text or "").splitlines():
        item = _BULLET_RE.sub("", line).strip()
        if item and item.lower().rstrip(".") not in ("none", "n/a"):
            items.append(item)
    return items


_PAIR_RE = re.compile(r"\s*(?:->|=>|→)\s*")


def parse_sub_answers(text: str) -> list[tuple[str, str]]:
    pairs = []
    for item in section_items(text):
        parts = _PAIR_RE.split(item, maxsplit=1)
        if len(parts) == 2:
            pairs.append((parts[0].strip(), parts[1].strip()))
        elif "?" in item:
            q, _, a = item.rpartition("?")
            pairs.append((q.strip() + "?", a.strip(" :")))
        else:
            pairs.append((item, ""))
    return pairs
