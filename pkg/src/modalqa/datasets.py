"""Adapters from MultiModalQA- and ManyModalQA-shaped sources to the canonical JSONL, plus validation.

MultiModalQA source directory::

    MMQA_<split>.jsonl   {qid, question, answers: [{answer, ...}], metadata: {modalities,
                          table_id, text_doc_ids, image_doc_ids}, supporting_context: [{doc_id, doc_part}]}
    MMQA_texts.jsonl     {id, title, text}
    MMQA_tables.jsonl    {id, title, table: {header: [{column_name}], table_rows: [[{text}]]}}
    MMQA_images.jsonl    {id, title, path}
    images/              image files named by ``path``

ManyModalQA source directory::

    <split>.json or <split>.jsonl   records {id, question, answer, q_type, text, table, image}
    images/                         image files named by ``image``
"""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

from .core import ImageRef, QAInstance, TableData, iter_jsonl, write_jsonl
from .errors import DanglingReference, DuplicateId

logger = logging.getLogger(__name__)

UNSCORED_SPLITS = frozenset({"test"})
_MMQA_TAG = {"table": "Tb", "text": "Txt", "image": "Img"}
_MMQA_TAG_ORDER = ("table", "text", "image")
_MEDIA_TYPES = {".png": "image/png", ".jpg": "image/jpeg", ".jpeg": "image/jpeg",
                ".gif": "image/gif", ".webp": "image/webp", ".bmp": "image/bmp"}


@dataclass
class IngestResult:
    instances: list[QAInstance]
    counts: dict[str, int]
    skipped: list[str] = field(default_factory=list)

    def stats(self) -> dict:
        out = dict(sorted(self.counts.items()))
        if self.skipped:
            out["_skipped"] = len(self.skipped)
        return out


def media_type_for(path: str) -> str:
    return _MEDIA_TYPES.get(Path(path).suffix.lower(), "application/octet-stream")


def _index(path: Path, key: str = "id") -> dict[str, dict]:
    if not path.exists():
        return {}
    return {str(r[key]): r for r in iter_jsonl(path)}


def load_overlay(path: str | Path | None) -> dict[str, list[list[str]]]:
    """Read ``{id, add_aliases}`` lines into a map of extra gold aliases."""
    if path is None:
        return {}
    out: dict[str, list[list[str]]] = {}
    for rec in iter_jsonl(path):
        out.setdefault(str(rec["id"]), []).extend([str(a) for a in alias] for alias in rec["add_aliases"])
    return out


def _apply_overlay(instances: list[QAInstance], overlay: Mapping[str, list[list[str]]]) -> list[QAInstance]:
    if not overlay:
        return instances
    known = {i.id for i in instances}
    for missing in sorted(set(overlay) - known):
        logger.warning("overlay id %s not in dataset; ignored", missing)
    out = []
    for inst in instances:
        extra = [tuple(a) for a in overlay.get(inst.id, ()) if tuple(a) not in inst.gold_answers]
        out.append(replace(inst, gold_answers=inst.gold_answers + tuple(extra)) if extra else inst)
    return out


def _mmqa_table(rec: dict) -> TableData:
    t = rec.get("table", rec)
    headers = [h.get("column_name", "") if isinstance(h, dict) else str(h) for h in t.get("header", [])]
    rows = [[c.get("text", "") if isinstance(c, dict) else str(c) for c in row] for row in t.get("table_rows", [])]
    return TableData(headers=headers, rows=rows, title=rec.get("title") or t.get("table_name") or "")


def _mmqa_one(q: dict, texts, tables, images, image_dir: Path, split: str) -> QAInstance:
    qid = str(q["qid"])
    meta = q.get("metadata") or {}
    support = q.get("supporting_context") or []
    if support:
        # Gold context: only the documents the answer is grounded in.
        cited = {"text": [], "table": [], "image": []}
        for c in support:
            if c.get("doc_part") in cited and c.get("doc_id"):
                cited[c["doc_part"]].append(str(c["doc_id"]))
        text_ids, table_ids, image_ids = cited["text"], cited["table"], cited["image"]
    else:
        text_ids = [str(d) for d in meta.get("text_doc_ids") or []]
        image_ids = [str(d) for d in meta.get("image_doc_ids") or []]
        table_ids = [str(meta["table_id"])] if meta.get("table_id") else []
    # Deduplicate, keep citation order.
    text_ids, image_ids, table_ids = (list(dict.fromkeys(x)) for x in (text_ids, image_ids, table_ids))

    for doc_id in text_ids:
        if doc_id not in texts:
            raise DanglingReference(qid, f"missing passage {doc_id}")
    for doc_id in table_ids:
        if doc_id not in tables:
            raise DanglingReference(qid, f"missing table {doc_id}")
    image = None
    for doc_id in image_ids:
        rec = images.get(doc_id)
        if rec is None or not (image_dir / rec["path"]).is_file():
            raise DanglingReference(qid, f"missing image {doc_id}")
    if image_ids:
        if len(image_ids) > 1:
            logger.info("%s cites %d images; keeping the first", qid, len(image_ids))
        rec = images[image_ids[0]]
        path = image_dir / rec["path"]
        image = ImageRef(path=str(path), media_type=media_type_for(rec["path"]))

    modalities = [m.lower() for m in meta.get("modalities") or []]
    if not modalities:
        modalities = [k for k, ids in (("table", table_ids), ("text", text_ids), ("image", image_ids)) if ids]
    tag = "|".join(_MMQA_TAG[m] for m in _MMQA_TAG_ORDER if m in modalities)

    answers = [str(a["answer"]) if isinstance(a, dict) else str(a) for a in q.get("answers") or []]
    return QAInstance(
        id=qid,
        question=q["question"],
        text_passages=[texts[d].get("text", "") for d in text_ids],
        table=_mmqa_table(tables[table_ids[0]]) if table_ids else None,
        image=image,
        gold_answers=[answers] if answers else [],
        gold_modality_tag=tag or None,
        split=split,
    )


def _finish(instances: list[QAInstance], skipped: list[str], overlay) -> IngestResult:
    instances = _apply_overlay(sorted(instances, key=lambda i: i.id), load_overlay(overlay)
                               if not isinstance(overlay, Mapping) else overlay)
    counts = Counter(i.gold_modality_tag or "?" for i in instances)
    return IngestResult(instances, dict(counts), skipped)


def ingest_multimodalqa(source_dir: str | Path, split: str = "dev", strict: bool = False,
                        overlay: str | Path | Mapping | None = None) -> IngestResult:
    src = Path(source_dir)
    questions_path = src / f"MMQA_{split}.jsonl"
    if not questions_path.exists():
        raise FileNotFoundError(questions_path)
    texts = _index(src / "MMQA_texts.jsonl")
    tables = _index(src / "MMQA_tables.jsonl")
    images = _index(src / "MMQA_images.jsonl")
    image_dir = src / "images"
    instances, skipped, seen = [], [], set()
    for q in iter_jsonl(questions_path):
        qid = str(q["qid"])
        if qid in seen:
            raise DuplicateId(qid)
        seen.add(qid)
        try:
            instances.append(_mmqa_one(q, texts, tables, images, image_dir, split))
        except (DanglingReference, ValueError) as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            skipped.append(qid)
    return _finish(instances, skipped, overlay)


_MANY_TAGS = {"text": "Text", "table": "Table", "image": "Image"}


def _many_table(value) -> TableData | None:
    if not value:
        return None
    if isinstance(value, dict):
        headers = value.get("header") or value.get("headers") or []
        return TableData(headers=headers, rows=value.get("rows") or [], title=value.get("title") or "")
    rows = [[str(c) for c in r] for r in value]
    return TableData(headers=rows[0], rows=rows[1:])


def _many_records(src: Path, split: str) -> list[dict]:
    if (src / f"{split}.jsonl").exists():
        return list(iter_jsonl(src / f"{split}.jsonl"))
    path = src / f"{split}.json"
    if not path.exists():
        raise FileNotFoundError(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    return doc["data"] if isinstance(doc, dict) else doc


def ingest_manymodalqa(source_dir: str | Path, split: str = "dev", strict: bool = False,
                       overlay: str | Path | Mapping | None = None) -> IngestResult:
    src = Path(source_dir)
    image_dir = src / "images"
    instances, skipped, seen = [], [], set()
    for rec in _many_records(src, split):
        rid = str(rec["id"])
        if rid in seen:
            raise DuplicateId(rid)
        seen.add(rid)
        q_type = str(rec.get("q_type", "")).lower()
        try:
            if q_type not in _MANY_TAGS:
                raise DanglingReference(rid, f"unknown q_type {rec.get('q_type')!r}")
            image = None
            img = rec.get("image")
            if img:
                name = img.get("path") if isinstance(img, dict) else str(img)
                if not (image_dir / name).is_file():
                    raise DanglingReference(rid, f"missing image {name}")
                image = ImageRef(path=str(image_dir / name), media_type=media_type_for(name))
            text = rec.get("text") or []
            answer = rec.get("answer")
            alias = [str(a) for a in answer] if isinstance(answer, list) else ([str(answer)] if answer else [])
            instances.append(QAInstance(
                id=rid,
                question=rec["question"],
                text_passages=[text] if isinstance(text, str) else list(text),
                table=_many_table(rec.get("table")),
                image=image,
                gold_answers=[alias] if alias else [],
                gold_modality_tag=_MANY_TAGS[q_type],
                split=split,
            ))
        except (DanglingReference, ValueError) as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            skipped.append(rid)
    return _finish(instances, skipped, overlay)


def write_canonical(path: str | Path, instances: Iterable[QAInstance]) -> None:
    """Write canonical JSONL with image paths relative to the output file's directory."""
    out_dir = Path(path).resolve().parent
    records = []
    for inst in instances:
        d = inst.to_dict()
        if d["image"] and "path" in d["image"]:
            p = Path(inst.image.path)
            if inst.image.root and not p.is_absolute():
                p = Path(inst.image.root) / p
            d["image"]["path"] = Path(os.path.relpath(p.resolve(), out_dir)).as_posix()
        records.append(d)
    write_jsonl(path, records)


def write_stats(path: str | Path, result: IngestResult) -> None:
    Path(path).write_text(json.dumps(result.stats(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Violation:
    id: str
    message: str

    def __str__(self) -> str:
        return f"{self.id or '<no id>'}: {self.message}"


def validate(source: str | Path | Iterable[dict]) -> list[Violation]:
    """Check canonical records against the instance invariants. An empty list means valid."""
    records = iter_jsonl(source) if isinstance(source, (str, Path)) else source
    out: list[Violation] = []
    seen: set[str] = set()
    for n, rec in enumerate(records):
        rid = str(rec.get("id") or "")
        if not rid:
            out.append(Violation("", f"record {n} has no id"))
        elif rid in seen:
            out.append(Violation(rid, "duplicate id"))
        seen.add(rid)
        if not str(rec.get("question") or "").strip():
            out.append(Violation(rid, "empty question"))
        table = rec.get("table")
        if table:
            headers = table.get("headers") or []
            if not headers:
                out.append(Violation(rid, "table has no headers"))
            for i, row in enumerate(table.get("rows") or []):
                if len(row) != len(headers):
                    out.append(Violation(rid, f"table row {i} has {len(row)} cells, expected {len(headers)}"))
        image = rec.get("image")
        if image and not (image.get("path") or image.get("data_b64")):
            out.append(Violation(rid, "image has neither path nor data"))
        has_text = any(str(p).strip() for p in rec.get("text") or [])
        if not (has_text or table or image):
            out.append(Violation(rid, "no modality present"))
        split = rec.get("split") or "dev"
        answers = rec.get("answers") or []
        if split not in UNSCORED_SPLITS and not any(a for a in answers):
            out.append(Violation(rid, f"no gold answers on scored split {split!r}"))
    return out
