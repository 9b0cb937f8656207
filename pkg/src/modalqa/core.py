"""Domain types shared across the engine: instances, modalities, stage outputs, traces.

All types are frozen dataclasses; collections are stored as tuples so values
can be shared between worker threads without copying.
"""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator


class Modality(enum.IntEnum):
    """Evidence type. Integer values fix the iteration order Text < Table < Image."""

    TEXT = 0
    TABLE = 1
    IMAGE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def short(self) -> str:
        """Dataset-style abbreviation used in per-modality report columns."""
        return _SHORT[self]

    @classmethod
    def parse(cls, value: str | Modality) -> Modality:
        if isinstance(value, Modality):
            return value
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ValueError(f"unknown modality {value!r}") from None


_SHORT = {Modality.TEXT: "Txt", Modality.TABLE: "Tb", Modality.IMAGE: "Img"}
# Tag components are joined in this order ("Tb|Txt", "Txt|Img", ...).
_TAG_ORDER = (Modality.TABLE, Modality.TEXT, Modality.IMAGE)


def modality_signature(modalities: Iterable[Modality]) -> str:
    present = set(modalities)
    return "|".join(m.short for m in _TAG_ORDER if m in present)


@dataclass(frozen=True)
class TableData:
    headers: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...] = ()
    title: str = ""

    def __post_init__(self):
        object.__setattr__(self, "headers", tuple(str(h) for h in self.headers))
        object.__setattr__(self, "rows", tuple(tuple(str(c) for c in r) for r in self.rows))
        if not self.headers:
            raise ValueError("table must have at least one header")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.headers):
                raise ValueError(
                    f"row {i} has {len(row)} cells, expected {len(self.headers)}"
                )

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "headers": list(self.headers),
            "rows": [list(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> TableData:
        return cls(headers=d["headers"], rows=d.get("rows") or (), title=d.get("title") or "")


@dataclass(frozen=True)
class ImageRef:
    """An image passed opaquely to backends, either by file path or raw bytes."""

    path: str | None = None
    data: bytes | None = None
    media_type: str = "image/png"
    caption_hint: str | None = None
    # Directory that a relative ``path`` is resolved against; not serialized.
    root: str | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if (self.path is None) == (self.data is None):
            raise ValueError("ImageRef needs exactly one of path or data")
        if self.data is not None and not self.media_type:
            raise ValueError("media_type is required for raw image bytes")

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        path = Path(self.path)
        if self.root is not None and not path.is_absolute():
            path = Path(self.root) / path
        return path.read_bytes()

    def to_dict(self) -> dict:
        d: dict[str, Any] = {}
        if self.path is not None:
            d["path"] = self.path
        else:
            d["data_b64"] = base64.b64encode(self.data).decode("ascii")
        d["media_type"] = self.media_type
        if self.caption_hint is not None:
            d["caption_hint"] = self.caption_hint
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> ImageRef:
        data = base64.b64decode(d["data_b64"]) if d.get("data_b64") else None
        return cls(
            path=d.get("path"),
            data=data,
            media_type=d.get("media_type") or "image/png",
            caption_hint=d.get("caption_hint"),
            root=str(base_dir) if base_dir is not None else None,
        )


def _aliases(value) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(str(item) for item in alias) for alias in value)


@dataclass(frozen=True)
class QAInstance:
    id: str
    question: str
    text_passages: tuple[str, ...] = ()
    table: TableData | None = None
    image: ImageRef | None = None
    gold_answers: tuple[tuple[str, ...], ...] = ()
    gold_modality_tag: str | None = None
    split: str = "dev"

    def __post_init__(self):
        if not self.id:
            raise ValueError("instance id must be non-empty")
        object.__setattr__(self, "text_passages", tuple(self.text_passages))
        object.__setattr__(self, "gold_answers", _aliases(self.gold_answers))

    @property
    def modality_tag(self) -> str:
        return self.gold_modality_tag or modality_signature(available_modalities(self))

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "text": list(self.text_passages),
            "table": self.table.to_dict() if self.table else None,
            "image": self.image.to_dict() if self.image else None,
            "answers": [list(a) for a in self.gold_answers],
            "modality_tag": self.gold_modality_tag,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> QAInstance:
        return cls(
            id=d["id"],
            question=d["question"],
            text_passages=d.get("text") or (),
            table=TableData.from_dict(d["table"]) if d.get("table") else None,
            image=ImageRef.from_dict(d["image"], base_dir) if d.get("image") else None,
            gold_answers=d.get("answers") or (),
            gold_modality_tag=d.get("modality_tag"),
            split=d.get("split") or "dev",
        )


def available_modalities(instance: QAInstance) -> list[Modality]:
    present = []
    if any(p.strip() for p in instance.text_passages):
        present.append(Modality.TEXT)
    if instance.table is not None:
        present.append(Modality.TABLE)
    if instance.image is not None:
        present.append(Modality.IMAGE)
    return present


def _escape_cell(cell: str) -> str:
    return cell.replace("|", "\\|")


def linearize_table(table: TableData) -> str:
    lines = []
    if table.title:
        lines.append(table.title)
    lines.append(" | ".join(_escape_cell(h) for h in table.headers))
    for row in table.rows:
        lines.append(" | ".join(_escape_cell(c) for c in row))
    return "\n".join(lines)


@dataclass(frozen=True)
class ModalityInsights:
    modality: Modality
    key_facts: tuple[str, ...] = ()
    cues: tuple[str, ...] = ()
    gaps: tuple[str, ...] = ()
    raw_model_text: str = ""

    def __post_init__(self):
        for name in ("key_facts", "cues", "gaps"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def to_dict(self) -> dict:
        return {
            "modality": self.modality.label,
            "key_facts": list(self.key_facts),
            "cues": list(self.cues),
            "gaps": list(self.gaps),
            "raw_model_text": self.raw_model_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModalityInsights:
        return cls(
            modality=Modality.parse(d["modality"]),
            key_facts=d.get("key_facts", ()),
            cues=d.get("cues", ()),
            gaps=d.get("gaps", ()),
            raw_model_text=d.get("raw_model_text", ""),
        )


@dataclass(frozen=True)
class SynthesisResult:
    anchor: Modality
    insights_used: ModalityInsights
    sub_answers: tuple[tuple[str, str], ...] = ()
    final_answer: str | None = None
    uncertain: bool = True
    reasoning: str = ""
    raw_model_text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "sub_answers", tuple(tuple(p) for p in self.sub_answers))
        if self.final_answer is None and not self.uncertain:
            raise ValueError("an abstaining synthesis result must be flagged uncertain")
        if self.anchor != self.insights_used.modality:
            raise ValueError("anchor must match the modality of the insights used")

    @property
    def abstained(self) -> bool:
        return self.final_answer is None

    @property
    def confident(self) -> bool:
        return self.final_answer is not None and not self.uncertain

    def to_dict(self) -> dict:
        return {
            "anchor": self.anchor.label,
            "insights_used": self.insights_used.to_dict(),
            "sub_answers": [list(p) for p in self.sub_answers],
            "final_answer": self.final_answer,
            "uncertain": self.uncertain,
            "reasoning": self.reasoning,
            "raw_model_text": self.raw_model_text,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SynthesisResult:
        return cls(
            anchor=Modality.parse(d["anchor"]),
            insights_used=ModalityInsights.from_dict(d["insights_used"]),
            sub_answers=d.get("sub_answers", ()),
            final_answer=d.get("final_answer"),
            uncertain=d.get("uncertain", True),
            reasoning=d.get("reasoning", ""),
            raw_model_text=d.get("raw_model_text", ""),
        )


class DecisionRule(str, enum.Enum):
    MAJORITY = "Majority"
    CONFIDENT_OVER_UNCERTAIN = "ConfidentOverUncertain"
    BEST_RATIONALE = "BestRationale"
    ALL_ABSTAINED = "AllAbstained"


@dataclass(frozen=True)
class AggregateDecision:
    final_answer: str | None
    rule: DecisionRule
    rationale: str = ""
    contributing_anchors: tuple[Modality, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "contributing_anchors", tuple(self.contributing_anchors))
        if self.rule is DecisionRule.ALL_ABSTAINED and self.final_answer is not None:
            raise ValueError("AllAbstained decisions carry no answer")
        if self.rule is DecisionRule.MAJORITY and len(self.contributing_anchors) < 2:
            raise ValueError("a majority needs at least two contributing anchors")

    def to_dict(self) -> dict:
        return {
            "final_answer": self.final_answer,
            "rule": self.rule.value,
            "rationale": self.rationale,
            "contributing_anchors": [m.label for m in self.contributing_anchors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> AggregateDecision:
        return cls(
            final_answer=d.get("final_answer"),
            rule=DecisionRule(d["rule"]),
            rationale=d.get("rationale", ""),
            contributing_anchors=[Modality.parse(m) for m in d.get("contributing_anchors", ())],
        )


@dataclass(frozen=True)
class ModelCall:
    """One agent activation as seen by the trace.

    ``synthetic`` entries mark aggregator decisions taken in code without a
    model round-trip; ``retry`` entries are format re-asks and are excluded
    from activation counts.
    """

    stage: str
    backend: str
    prompt_hash: str
    latency_ms: float = 0.0
    seq: int = 0
    retry: bool = False
    synthetic: bool = False

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "backend": self.backend,
            "prompt_hash": self.prompt_hash,
            "latency_ms": self.latency_ms,
            "seq": self.seq,
            "retry": self.retry,
            "synthetic": self.synthetic,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelCall:
        return cls(
            stage=d["stage"],
            backend=d["backend"],
            prompt_hash=d["prompt_hash"],
            latency_ms=d.get("latency_ms", 0.0),
            seq=d.get("seq", 0),
            retry=d.get("retry", False),
            synthetic=d.get("synthetic", False),
        )


_TRACE_FIELDS = (
    "instance_id", "method", "modality_tag", "gold_answers", "prediction", "error",
    "parse_failures", "stage1", "stage2", "stage3", "model_calls",
)


@dataclass(frozen=True)
class RunTrace:
    instance_id: str
    method: str = "mammqa"
    stage1: tuple[ModalityInsights, ...] = ()
    stage2: tuple[SynthesisResult, ...] = ()
    stage3: AggregateDecision | None = None
    model_calls: tuple[ModelCall, ...] = ()
    prediction: str | None = None
    error: str | None = None
    modality_tag: str | None = None
    gold_answers: tuple[tuple[str, ...], ...] = ()
    parse_failures: int = 0
    # Method-specific payloads (captions, tot_nodes, raw_text, ...), emitted as top-level keys.
    extras: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "stage1", tuple(self.stage1))
        object.__setattr__(self, "stage2", tuple(self.stage2))
        object.__setattr__(self, "model_calls", tuple(self.model_calls))
        object.__setattr__(self, "gold_answers", _aliases(self.gold_answers))

    @property
    def failed(self) -> bool:
        return self.error is not None

    @property
    def agent_activations(self) -> int:
        return sum(1 for c in self.model_calls if not c.retry)

    @property
    def model_call_count(self) -> int:
        return sum(1 for c in self.model_calls if not c.retry and not c.synthetic)

    def to_dict(self) -> dict:
        d = {
            "instance_id": self.instance_id,
            "method": self.method,
            "modality_tag": self.modality_tag,
            "gold_answers": [list(a) for a in self.gold_answers],
            "prediction": self.prediction,
            "error": self.error,
            "parse_failures": self.parse_failures,
            "stage1": [s.to_dict() for s in self.stage1],
            "stage2": [s.to_dict() for s in self.stage2],
            "stage3": self.stage3.to_dict() if self.stage3 else None,
            "model_calls": [c.to_dict() for c in self.model_calls],
        }
        for key in sorted(self.extras):
            d[key] = self.extras[key]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunTrace:
        return cls(
            instance_id=d["instance_id"],
            method=d.get("method", "mammqa"),
            stage1=[ModalityInsights.from_dict(s) for s in d.get("stage1", ())],
            stage2=[SynthesisResult.from_dict(s) for s in d.get("stage2", ())],
            stage3=AggregateDecision.from_dict(d["stage3"]) if d.get("stage3") else None,
            model_calls=[ModelCall.from_dict(c) for c in d.get("model_calls", ())],
            prediction=d.get("prediction"),
            error=d.get("error"),
            modality_tag=d.get("modality_tag"),
            gold_answers=d.get("gold_answers", ()),
            parse_failures=d.get("parse_failures", 0),
            extras={k: v for k, v in d.items() if k not in _TRACE_FIELDS},
        )


# JSONL helpers


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False)


def iter_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(dumps_line(rec))
            fh.write("\n")


def load_instances(path: str | Path) -> list[QAInstance]:
    """Read a canonical dataset file. Relative image paths resolve against its directory."""
    base = Path(path).resolve().parent
    return [QAInstance.from_dict(d, base) for d in iter_jsonl(path)]


def save_instances(path: str | Path, instances: Iterable[QAInstance]) -> None:
    write_jsonl(path, (inst.to_dict() for inst in instances))


def load_traces(path: str | Path) -> list[RunTrace]:
    return [RunTrace.from_dict(d) for d in iter_jsonl(path)]


def save_traces(path: str | Path, traces: Iterable[RunTrace]) -> None:
    write_jsonl(path, (t.to_dict() for t in traces))
