"""Single-model prompting baselines: CoT, no-context CoT, CapCoT and depth-first Tree-of-Thoughts."""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from typing import MutableMapping

from .backends import Backend, GenParams, prompt_hash
from .core import Modality, QAInstance, RunTrace, available_modalities, linearize_table
from .errors import BackendError
from .pipeline import CallLog, _call
from .prompting import (
    ABSTENTION_MARKERS,
    PromptTemplate,
    extract_final_answer,
    is_abstention,
    load_templates,
    parse_sections,
    render,
)

logger = logging.getLogger(__name__)


@dataclass
class BaselineConfig:
    params: GenParams = field(default_factory=GenParams)
    templates: dict[str, PromptTemplate] = field(default_factory=load_templates)
    abstention_markers: frozenset[str] = ABSTENTION_MARKERS


@dataclass(frozen=True)
class CoTResult:
    prediction: str | None
    raw_text: str
    uncertain: bool = False


def _context_bindings(instance: QAInstance) -> list:
    """Passages, linearized table and image (as an attachment) for a single-prompt baseline."""
    parts: list = []
    present = available_modalities(instance)
    if Modality.TEXT in present:
        parts.append("Passages:\n" + "\n\n".join(p for p in instance.text_passages if p.strip()))
    if Modality.TABLE in present:
        parts.append("Table:\n" + linearize_table(instance.table))
    if Modality.IMAGE in present:
        parts.extend(["Image:", instance.image])
    return parts or ["(no context)"]


def run_cot(instance: QAInstance, backend: Backend, include_context: bool = True,
            cfg: BaselineConfig | None = None, log: CallLog | None = None) -> CoTResult:
    """One chain-of-thought call; ``include_context=False`` sends the question alone."""
    cfg = cfg or BaselineConfig()
    if include_context:
        messages = render(cfg.templates["cot"], {
            "question": instance.question, "context": _context_bindings(instance)})
    else:
        messages = render(cfg.templates["cot_nocontext"], {"question": instance.question})
    completion = _call(backend, messages, cfg, "cot" if include_context else "cot_nocontext", log)
    answer, uncertain = extract_final_answer(parse_sections(completion.text), cfg.abstention_markers)
    return CoTResult(answer, completion.text, uncertain)


@dataclass(frozen=True)
class CapCoTResult:
    prediction: str | None
    captions: dict[str, str]
    raw_text: str
    caption_calls: int = 0


class CaptionCache:
    """Thread-safe prompt-hash -> caption store shared across evaluations."""

    def __init__(self, store: MutableMapping[str, str] | None = None):
        self._store = store if store is not None else {}
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            return self._store.get(key)

    def put(self, key, value):
        with self._lock:
            self._store[key] = value

    def __len__(self):
        return len(self._store)


def caption(instance: QAInstance, modality: Modality, backend: Backend, cfg: BaselineConfig,
            cache: CaptionCache | None = None, log: CallLog | None = None) -> tuple[str, bool]:
    """Caption the table or image of ``instance``. Returns ``(caption, made_a_call)``."""
    content = linearize_table(instance.table) if modality is Modality.TABLE else instance.image
    messages = render(cfg.templates["capcot_caption"], {
        "modality_name": modality.label, "modality_content": content})
    key = prompt_hash(messages, cfg.params, backend.model_name)
    if cache is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit, False
    text = _call(backend, messages, cfg, f"caption:{modality.label}", log).text.strip()
    if cache is not None:
        cache.put(key, text)
    return text, True


def captioned_context(instance: QAInstance, caption_backend: Backend, cfg: BaselineConfig,
                      cache: CaptionCache | None = None, log: CallLog | None = None) -> tuple[str, dict, int]:
    """Text-only context: passages plus captions of the table and image."""
    present = available_modalities(instance)
    captions: dict[str, str] = {}
    calls = 0
    for m in (Modality.TABLE, Modality.IMAGE):
        if m in present:
            captions[m.label], made = caption(instance, m, caption_backend, cfg, cache, log)
            calls += made
    parts = []
    if Modality.TEXT in present:
        parts.append("Passages:\n" + "\n\n".join(p for p in instance.text_passages if p.strip()))
    if "table" in captions:
        parts.append("Table caption:\n" + captions["table"])
    if "image" in captions:
        parts.append("Image caption:\n" + captions["image"])
    return "\n\n".join(parts) or "(no context)", captions, calls


def run_capcot(instance: QAInstance, caption_backend: Backend, reasoner_backend: Backend,
               cfg: BaselineConfig | None = None, cache: CaptionCache | None = None,
               log: CallLog | None = None) -> CapCoTResult:
    cfg = cfg or BaselineConfig()
    context, captions, calls = captioned_context(instance, caption_backend, cfg, cache, log)
    messages = render(cfg.templates["cot"], {"question": instance.question, "context": context})
    completion = _call(reasoner_backend, messages, cfg, "capcot", log)
    answer, _ = extract_final_answer(parse_sections(completion.text), cfg.abstention_markers)
    return CapCoTResult(answer, captions, completion.text, calls)


# Tree-of-Thoughts


@dataclass(frozen=True)
class ToTConfig:
    branching: int = 3
    max_depth: int = 3
    value_threshold: float = 0.5
    thought_budget: int = 39

    def __post_init__(self):
        if self.branching < 1 or self.max_depth < 1:
            raise ValueError("branching and max_depth must be positive")
        if not 0.0 <= self.value_threshold <= 1.0:
            raise ValueError("value_threshold must lie in [0, 1]")
        if self.thought_budget < self.branching:
            raise ValueError("thought_budget must be at least the branching factor")

    @property
    def full_tree_size(self) -> int:
        return sum(self.branching ** d for d in range(1, self.max_depth + 1))


@dataclass(eq=False)
class ThoughtNode:
    depth: int
    text: str
    value: float
    parent: ThoughtNode | None = None
    terminal: bool = False
    index: int = 0  # creation order

    @property
    def answer(self) -> str | None:
        return thought_answer(self.text)

    def path(self) -> list[ThoughtNode]:
        out, node = [], self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "depth": self.depth,
            "text": self.text,
            "value": self.value,
            "parent": self.parent.index if self.parent else None,
            "terminal": self.terminal,
        }


@dataclass(frozen=True)
class ToTResult:
    prediction: str | None
    node_count: int
    nodes: tuple[ThoughtNode, ...]
    best: ThoughtNode | None = None


_ANSWER_RE = re.compile(r"^\s*(?:\*\*)?(?:final\s+)?answer\s*(?:\*\*)?\s*:\s*(?:\*\*)?\s*(.+?)\s*$",
                        re.IGNORECASE | re.MULTILINE)
_STEP_RE = re.compile(r"^\s*(?:step\s*)?(?:\d+[.):]|[-*•])\s*(.+)$", re.IGNORECASE)
_VALUE_RE = re.compile(r"value\s*[:=]\s*(-?\d+(?:\.\d+)?)", re.IGNORECASE)
_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


def thought_answer(text: str) -> str | None:
    m = _ANSWER_RE.search(text)
    return m.group(1) if m else None


def parse_proposals(raw: str, limit: int) -> list[str]:
    """Candidate steps from a propose response; an ``ANSWER:`` line stays with its step."""
    steps: list[str] = []
    for line in raw.splitlines():
        if not line.strip():
            continue
        m = _STEP_RE.match(line)
        if m:
            steps.append(m.group(1).strip())
        elif steps and _ANSWER_RE.match(line):
            steps[-1] += "\n" + line.strip()
        elif not steps and _ANSWER_RE.match(line):
            steps.append(line.strip())
    return steps[:limit]


def parse_value(raw: str) -> float:
    """Score in [0, 1]; anything unparseable scores 0.0."""
    m = _VALUE_RE.search(raw) or _NUMBER_RE.search(raw)
    if not m:
        return 0.0
    try:
        v = float(m.group(1) if m.re is _VALUE_RE else m.group(0))
    except ValueError:
        return 0.0
    return min(1.0, max(0.0, v))


def _path_text(node: ThoughtNode | None) -> str:
    if node is None:
        return "(none yet)"
    return "\n".join(f"{n.depth}. {n.text}" for n in node.path())


def run_tot(instance: QAInstance, backend: Backend, tot: ToTConfig | None = None,
            cfg: BaselineConfig | None = None, caption_backend: Backend | None = None,
            cache: CaptionCache | None = None, log: CallLog | None = None) -> ToTResult:
    """Depth-first Tree-of-Thoughts over a captioned context.

    Each expansion makes one propose call and one value call per candidate.
    Candidates below the value threshold are pruned; survivors are explored
    best-first. Search stops once ``thought_budget`` nodes exist; the
    highest-valued terminal answer wins (first found on ties).
    """
    tot = tot or ToTConfig()
    cfg = cfg or BaselineConfig()
    context, _, _ = captioned_context(instance, caption_backend or backend, cfg, cache, log)
    nodes: list[ThoughtNode] = []
    best: list[ThoughtNode] = []

    def expand(parent: ThoughtNode | None, depth: int) -> None:
        if len(nodes) >= tot.thought_budget:
            return
        thoughts = _path_text(parent)
        propose = render(cfg.templates["tot_propose"], {
            "question": instance.question, "context": context, "thoughts": thoughts})
        proposals = parse_proposals(_call(backend, propose, cfg, f"tot:propose:{depth}", log).text,
                                    tot.branching)
        children = []
        for text in proposals:
            if len(nodes) >= tot.thought_budget:
                break
            value_msgs = render(cfg.templates["tot_value"], {
                "question": instance.question, "context": context,
                "thoughts": thoughts, "candidate": text})
            value = parse_value(_call(backend, value_msgs, cfg, f"tot:value:{depth}", log).text)
            child = ThoughtNode(depth, text, value, parent,
                                terminal=depth >= tot.max_depth or thought_answer(text) is not None,
                                index=len(nodes))
            nodes.append(child)
            children.append(child)
        kept = [c for c in children if c.value >= tot.value_threshold]
        kept.sort(key=lambda c: (-c.value, c.index))
        for child in kept:
            if child.terminal:
                if child.answer is not None and (not best or child.value > best[0].value):
                    best[:] = [child]
            else:
                expand(child, depth + 1)

    expand(None, 1)
    winner = best[0] if best else None
    prediction = winner.answer if winner else None
    if prediction is not None and is_abstention(prediction, cfg.abstention_markers):
        prediction = None
    return ToTResult(prediction, len(nodes), tuple(nodes), winner)


# Trace adapters used by run_batch and the CLI


def _trace(instance: QAInstance, method: str, log: CallLog, prediction=None, error=None, **extras) -> RunTrace:
    return RunTrace(
        instance_id=instance.id,
        method=method,
        model_calls=log.calls,
        prediction=prediction,
        error=error,
        modality_tag=instance.modality_tag,
        gold_answers=instance.gold_answers,
        parse_failures=log.parse_failures,
        extras=extras,
    )


def _error_text(exc: Exception) -> str:
    stage = getattr(exc, "stage", None)
    return f"{getattr(exc, 'code', type(exc).__name__)}: {exc}" + (f" [{stage}]" if stage else "")


def trace_cot(instance: QAInstance, backend: Backend, include_context: bool = True,
              cfg: BaselineConfig | None = None) -> RunTrace:
    method = "cot" if include_context else "cot-nocontext"
    log = CallLog()
    try:
        r = run_cot(instance, backend, include_context, cfg, log)
    except BackendError as exc:
        return _trace(instance, method, log, error=_error_text(exc))
    if "FINAL_ANSWER" not in parse_sections(r.raw_text):
        log.parse_failures += 1
    return _trace(instance, method, log, r.prediction, raw_text=r.raw_text)


def trace_capcot(instance: QAInstance, caption_backend: Backend, reasoner_backend: Backend,
                 cfg: BaselineConfig | None = None, cache: CaptionCache | None = None) -> RunTrace:
    log = CallLog()
    try:
        r = run_capcot(instance, caption_backend, reasoner_backend, cfg, cache, log)
    except BackendError as exc:
        return _trace(instance, "capcot", log, error=_error_text(exc))
    if "FINAL_ANSWER" not in parse_sections(r.raw_text):
        log.parse_failures += 1
    return _trace(instance, "capcot", log, r.prediction, captions=r.captions, raw_text=r.raw_text)


def trace_tot(instance: QAInstance, backend: Backend, tot: ToTConfig | None = None,
              cfg: BaselineConfig | None = None, caption_backend: Backend | None = None,
              cache: CaptionCache | None = None) -> RunTrace:
    log = CallLog()
    try:
        r = run_tot(instance, backend, tot, cfg, caption_backend, cache, log)
    except BackendError as exc:
        return _trace(instance, "tot", log, error=_error_text(exc))
    return _trace(instance, "tot", log, r.prediction, node_count=r.node_count,
                  tot_nodes=[n.to_dict() for n in r.nodes])
