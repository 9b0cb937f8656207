"""Exact-match scoring with per-modality breakdowns, and report rendering."""

from __future__ import annotations

import csv
import io
import json
import re
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .core import QAInstance, RunTrace
from .errors import MissingGold

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_ASCII_PUNCT = frozenset(string.punctuation)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation, drop the articles a/an/the, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if not _is_punct(ch))
    s = _ARTICLES_RE.sub(" ", s)
    return " ".join(s.split())


_LIST_SPLIT_RE = re.compile(r"\s*(?:,|;|\band\b)\s*", re.IGNORECASE)


def split_list_answer(prediction: str) -> list[str]:
    return [p for p in _LIST_SPLIT_RE.split(prediction) if p.strip()]


def exact_match(prediction: str | None, gold: Sequence[Sequence[str]]) -> bool:
    """True when the prediction matches any gold alias.

    Single-item aliases compare normalized strings; multi-item aliases compare
    the normalized items of the split prediction as a multiset.
    """
    if prediction is None:
        return False
    norm = normalize_answer(prediction)
    items = None
    for alias in gold:
        if len(alias) == 1:
            if norm == normalize_answer(alias[0]):
                return True
        elif len(alias) > 1:
            if items is None:
                items = Counter(normalize_answer(p) for p in split_list_answer(prediction))
                items.pop("", None)
            expected = Counter(normalize_answer(a) for a in alias)
            if items == expected:
                return True
    return False


@dataclass(frozen=True)
class Bucket:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        """Percentage in [0, 100]."""
        return 100.0 * self.correct / self.total if self.total else 0.0

    def to_dict(self) -> dict:
        return {"correct": self.correct, "total": self.total, "accuracy": self.accuracy}


# Column orders of the two benchmark result tables.
MULTIMODALQA_TAGS = ("Img", "Tb|Img", "Tb|Txt", "Tb", "Txt|Img", "Txt")
MANYMODALQA_TAGS = ("Text", "Table", "Image")


def ordered_tags(tags: Iterable[str]) -> list[str]:
    present = set(tags)
    known = [t for t in MULTIMODALQA_TAGS + MANYMODALQA_TAGS if t in present]
    return known + sorted(present - set(known))


@dataclass(frozen=True)
class ScoreReport:
    per_tag: dict[str, Bucket]
    abstention_count: int = 0
    parse_failure_count: int = 0
    failed_count: int = 0
    label: str = ""

    @property
    def overall(self) -> Bucket:
        return Bucket(
            sum(b.correct for b in self.per_tag.values()),
            sum(b.total for b in self.per_tag.values()),
        )

    @property
    def tags(self) -> list[str]:
        return ordered_tags(self.per_tag)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "per_tag": {t: self.per_tag[t].to_dict() for t in self.tags},
            "overall": self.overall.to_dict(),
            "abstention_count": self.abstention_count,
            "parse_failure_count": self.parse_failure_count,
            "failed_count": self.failed_count,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ScoreReport:
        return cls(
            per_tag={t: Bucket(b["correct"], b["total"]) for t, b in d["per_tag"].items()},
            abstention_count=d.get("abstention_count", 0),
            parse_failure_count=d.get("parse_failure_count", 0),
            failed_count=d.get("failed_count", 0),
            label=d.get("label", ""),
        )


@dataclass
class _Item:
    prediction: str | None
    gold: tuple
    tag: str
    parse_failure: bool = False
    failed: bool = False
    id: str = ""


def _as_item(entry) -> _Item:
    if isinstance(entry, RunTrace):
        return _Item(entry.prediction, entry.gold_answers, entry.modality_tag or "?",
                     entry.parse_failures > 0, entry.failed, entry.instance_id)
    prediction, instance = entry
    if not isinstance(instance, QAInstance):
        raise TypeError("expected (prediction, QAInstance) pairs or RunTrace objects")
    return _Item(prediction, instance.gold_answers, instance.modality_tag, id=instance.id)


def score_run(entries: Iterable[RunTrace | tuple[str | None, QAInstance]], label: str = "") -> ScoreReport:
    """Bucket predictions by modality tag and count exact matches.

    Abstentions and failed runs score as incorrect; they are also counted
    separately, as are responses that never produced a parseable answer.
    """
    correct: Counter = Counter()
    total: Counter = Counter()
    abstained = parse_failures = failed = 0
    for entry in entries:
        item = _as_item(entry)
        if not item.gold:
            raise MissingGold(f"instance {item.id!r} has no gold answers")
        total[item.tag] += 1
        if exact_match(item.prediction, item.gold):
            correct[item.tag] += 1
        if item.failed:
            failed += 1
        elif item.prediction is None:
            abstained += 1
        if item.parse_failure:
            parse_failures += 1
    per_tag = {t: Bucket(correct[t], total[t]) for t in total}
    return ScoreReport(per_tag, abstained, parse_failures, failed, label)


def _pct(x: float) -> str:
    return f"{x:.2f}"


def render_report(report: ScoreReport, fmt: str = "markdown") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n"
    tags = report.tags
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tag", "correct", "total", "accuracy"])
        for t in tags:
            b = report.per_tag[t]
            w.writerow([t, b.correct, b.total, _pct(b.accuracy)])
        o = report.overall
        w.writerow(["Total", o.correct, o.total, _pct(o.accuracy)])
        return buf.getvalue()
    if fmt == "markdown":
        header = ["Method", *tags, "Total"]
        row = [report.label or "-", *(_pct(report.per_tag[t].accuracy) for t in tags),
               _pct(report.overall.accuracy)]
        lines = [
            "| " + " | ".join(_md_cell(h) for h in header) + " |",
            "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|",
            "| " + " | ".join(_md_cell(c) for c in row) + " |",
            "",
            f"instances: {report.overall.total}, abstentions: {report.abstention_count}, "
            f"parse failures: {report.parse_failure_count}, failed runs: {report.failed_count}",
        ]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def _md_cell(text: str) -> str:
    return text.replace("|", " \\| ")


def relative_change(base: float, new: float) -> float | None:
    """Signed percentage change from ``base`` to ``new``; None when base is zero."""
    if base == 0:
        return None
    return 100.0 * (new - base) / base


def format_degradation(base: float, new: float) -> str:
    """Render ``new`` next to its change from ``base``, e.g. ``"05.92 (-91.24%)"``."""
    change = relative_change(base, new)
    if change is None:
        return f"{new:05.2f} (n/a)"
    return f"{new:05.2f} ({change:+06.2f}%)"


@dataclass(frozen=True)
class Comparison:
    base: ScoreReport
    others: tuple[ScoreReport, ...] = field(default_factory=tuple)

    @property
    def tags(self) -> list[str]:
        tags = set(self.base.per_tag)
        for r in self.others:
            tags |= set(r.per_tag)
        return ordered_tags(tags)

    def _acc(self, report: ScoreReport, tag: str | None) -> float:
        if tag is None:
            return report.overall.accuracy
        b = report.per_tag.get(tag)
        return b.accuracy if b else 0.0

    def rows(self) -> list[list[str]]:
        rows = []
        for tag in [*self.tags, None]:
            base = self._acc(self.base, tag)
            cells = [tag or "Total", _pct(base)]
            cells += [format_degradation(base, self._acc(r, tag)) for r in self.others]
            rows.append(cells)
        return rows

    def to_dict(self) -> dict:
        out = {}
        for tag in [*self.tags, None]:
            base = self._acc(self.base, tag)
            out[tag or "Total"] = {
                "base": base,
                "compared": [
                    {"label": r.label, "accuracy": self._acc(r, tag),
                     "change_pct": relative_change(base, self._acc(r, tag))}
                    for r in self.others
                ],
            }
        return out


def render_comparison(cmp: Comparison, fmt: str = "markdown") -> str:
    if fmt == "json":
        return json.dumps(cmp.to_dict(), indent=2, ensure_ascii=False) + "\n"
    header = ["Tag", cmp.base.label or "Original", *(r.label or f"Run {i + 1}" for i, r in enumerate(cmp.others))]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(cmp.rows())
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(_md_cell(h) for h in header) + " |",
                 "|" + "|".join(["---"] + [":---:"] * (len(header) - 1)) + "|"]
        lines += ["| " + " | ".join(_md_cell(c) for c in row) + " |" for row in cmp.rows()]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")
