"""Regenerate everything under tests/fixtures.

    python3 scripts/make_fixtures.py

Outputs are deterministic; rerunning leaves the tree byte-identical.

The replay fixture is recorded from a scripted team of agents whose answers
are planned per question below. Ten instances, seven answered correctly:
r05 (all agents abstain), r06 (aggregator picks a wrong answer) and r10
(majority on a wrong answer) are the misses, so overall accuracy is 70.00.
"""

from __future__ import annotations

import json
import re
import shutil
import struct
import zlib
from pathlib import Path

from modalqa.backends import CachingBackend, GenParams, ResponseCache, ScriptedBackend
from modalqa.core import ImageRef, QAInstance, TableData, load_instances, save_traces
from modalqa.datasets import write_canonical
from modalqa.pipeline import PipelineConfig, run_batch
from modalqa.prompting import FORMAT_REMINDER, get_template

ROOT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
MODEL = "fixture-model"


def png(width: int, height: int, rgb: tuple[int, int, int]) -> bytes:
    """Minimal truecolour PNG of one flat colour."""
    def chunk(kind: bytes, data: bytes) -> bytes:
        body = kind + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body) & 0xFFFFFFFF)

    raw = b"".join(b"\x00" + bytes(rgb) * width for _ in range(height))
    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))


def write_jsonl(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


# Two images differing in exactly one byte (prompt-hash sensitivity).

def make_pixel_pair() -> None:
    d = ROOT / "images"
    d.mkdir(parents=True, exist_ok=True)
    a = bytearray(png(2, 2, (200, 30, 30)))
    b = bytearray(a)
    b[-20] ^= 0x01
    (d / "pixel_a.png").write_bytes(bytes(a))
    (d / "pixel_b.png").write_bytes(bytes(b))


# MultiModalQA-shaped source

MMQA_TEXTS = [
    {"id": "t-laugh", "title": "Laughing Gravy", "text": "Laughing Gravy is a 1931 short film. It stars Laurel and Hardy."},
    {"id": "t-oslo", "title": "Oslo", "text": "Oslo is the capital of Norway. It lies at the head of the Oslofjord."},
    {"id": "t-nile", "title": "Nile", "text": "The Nile flows north into the Mediterranean Sea."},
    {"id": "t-vega", "title": "Vega", "text": "Vega is the brightest star in the constellation Lyra."},
    {"id": "t-bridge", "title": "Golden Gate", "text": "The Golden Gate Bridge is painted International Orange."},
]
MMQA_TABLES = [
    {"id": "tb-films", "title": "Filmography",
     "table": {"table_name": "Filmography",
               "header": [{"column_name": "Year"}, {"column_name": "Title"}],
               "table_rows": [[{"text": "1928"}, {"text": "Laughin"}], [{"text": "1931"}, {"text": "Laughing Gravy"}]]}},
    {"id": "tb-caps", "title": "Capitals",
     "table": {"header": [{"column_name": "Country"}, {"column_name": "Capital"}],
               "table_rows": [[{"text": "Norway"}, {"text": "Oslo"}], [{"text": "Sweden"}, {"text": "Stockholm"}]]}},
    {"id": "tb-stars", "title": "Stars",
     "table": {"header": [{"column_name": "Star"}, {"column_name": "Magnitude"}],
               "table_rows": [[{"text": "Vega"}, {"text": "0.03"}], [{"text": "Deneb"}, {"text": "1.25"}]]}},
]
MMQA_IMAGES = [
    {"id": "im-flag", "title": "Flag of Norway", "path": "flag_norway.png", "rgb": (186, 12, 47)},
    {"id": "im-bridge", "title": "Golden Gate", "path": "golden_gate.png", "rgb": (192, 54, 44)},
    {"id": "im-star", "title": "Vega", "path": "vega.png", "rgb": (220, 220, 255)},
]


def _q(qid, question, answers, modalities, support, extra_meta=None):
    meta = {"modalities": modalities, "image_doc_ids": [], "text_doc_ids": [], "table_id": None}
    for doc_id, part in support:
        if part == "text":
            meta["text_doc_ids"].append(doc_id)
        elif part == "image":
            meta["image_doc_ids"].append(doc_id)
        else:
            meta["table_id"] = doc_id
    meta.update(extra_meta or {})
    return {
        "qid": qid,
        "question": question,
        "answers": [{"answer": a, "type": "string"} for a in answers],
        "metadata": meta,
        "supporting_context": [{"doc_id": d, "doc_part": p} for d, p in support],
    }


MMQA_QUESTIONS = [
    _q("mm-01", "What colour is the cross on the flag?", ["blue"], ["image"], [("im-flag", "image")]),
    _q("mm-02", "Which country's capital has the flag shown?", ["Norway"], ["table", "image"],
       [("tb-caps", "table"), ("im-flag", "image")]),
    _q("mm-03", "In what year was Laughing Gravy released?", ["1931"], ["table", "text"],
       [("tb-films", "table"), ("t-laugh", "text")]),
    _q("mm-04", "What is the capital of Sweden?", ["Stockholm"], ["table"], [("tb-caps", "table")]),
    _q("mm-05", "What colour is the bridge in the picture?", ["International Orange"], ["text", "image"],
       [("t-bridge", "text"), ("im-bridge", "image")]),
    _q("mm-06", "Where does the Nile flow into?", ["the Mediterranean Sea"], ["text"], [("t-nile", "text")]),
    _q("mm-07", "Which 1928 film is listed?", ["laughin"], ["table"], [("tb-films", "table")]),
    _q("mm-08", "Which star is brighter than Deneb?", ["Vega"], ["table", "text"],
       [("tb-stars", "table"), ("t-vega", "text")]),
    _q("mm-09", "Which films are listed?", ["Laughin", "Laughing Gravy"], ["table"], [("tb-films", "table")]),
    _q("mm-10", "What is the capital of Norway?", ["Oslo"], ["text"], [("t-oslo", "text")]),
    _q("mm-11", "What shape is the pictured star?", ["point"], ["image"], [("im-missing", "image")]),
    _q("mm-12", "Which constellation holds the star shown?", ["Lyra"], ["text", "image"],
       [("t-vega", "text"), ("im-star", "image")]),
]


def make_multimodalqa() -> None:
    d = ROOT / "multimodalqa"
    if d.exists():
        shutil.rmtree(d)
    (d / "images").mkdir(parents=True)
    write_jsonl(d / "MMQA_texts.jsonl", MMQA_TEXTS)
    write_jsonl(d / "MMQA_tables.jsonl", MMQA_TABLES)
    write_jsonl(d / "MMQA_images.jsonl", [{k: v for k, v in im.items() if k != "rgb"} for im in MMQA_IMAGES])
    for im in MMQA_IMAGES:
        (d / "images" / im["path"]).write_bytes(png(4, 3, im["rgb"]))
    write_jsonl(d / "MMQA_dev.jsonl", MMQA_QUESTIONS)
    write_jsonl(ROOT / "overlay.jsonl", [{"id": "mm-07", "add_aliases": [["laughing"]]}])


# ManyModalQA-shaped source

def _many(rid, question, answer, q_type, image=None):
    return {
        "id": rid,
        "question": question,
        "answer": answer,
        "q_type": q_type,
        "text": "The museum opened in 1902. Its first curator was Ada Brook.",
        "table": {"header": ["Wing", "Opened"], "rows": [["East", "1902"], ["West", "1955"]]},
        "image": image or "museum.png",
    }


MANY_RECORDS = [
    _many("mn-01", "When did the museum open?", "1902", "text"),
    _many("mn-02", "Who was the first curator?", "Ada Brook", "text"),
    _many("mn-03", "When did the West wing open?", "1955", "table"),
    _many("mn-04", "Which wing opened first?", "East", "table"),
    _many("mn-05", "What colour is the museum door?", "green", "image"),
    _many("mn-06", "How many windows are shown?", "4", "image"),
    _many("mn-07", "What year is carved over the door?", "1902", "image"),
    _many("mn-08", "How many wings are listed?", "2", "table"),
    _many("mn-09", "What was the curator's surname?", "Brook", "text"),
    _many("mn-10", "What is on the roof?", "a flag", "image"),
]


def make_manymodalqa() -> None:
    d = ROOT / "manymodalqa"
    if d.exists():
        shutil.rmtree(d)
    (d / "images").mkdir(parents=True)
    (d / "images" / "museum.png").write_bytes(png(3, 3, (40, 120, 40)))
    (d / "dev.json").write_text(json.dumps(MANY_RECORDS, indent=1) + "\n", encoding="utf-8")


# Replay fixture

def _table(rows):
    return TableData(["Item", "Value"], rows)


# id -> (question, gold, modalities, {anchor: (answer|None, uncertain)}, aggregator replies)
PLAN = {
    "r01": ("Who painted the ceiling?", ["Michelangelo"], "txt,tb,img",
            {"text": ("Michelangelo", False), "table": ("Michelangelo", False), "image": ("Michelangelo", False)}, []),
    "r02": ("When was the hall built?", ["1928"], "txt,tb,img",
            {"text": ("1928", False), "table": ("1928", True), "image": (None, True)}, []),
    "r03": ("Which team won the cup?", ["Rovers"], "txt,tb",
            {"text": (None, True), "table": ("Rovers", False)}, []),
    "r04": ("Which river crosses the city?", ["the Vltava"], "txt,tb,img",
            {"text": ("Vltava", False), "table": ("Elbe", False), "image": ("Danube", False)},
            ["REASONING: the text agent cites the city map directly\nFINAL ANSWER: Vltava"]),
    "r05": ("What is the mascot's name?", ["Bolt"], "txt,tb,img",
            {"text": (None, True), "table": (None, True), "image": (None, True)}, []),
    "r06": ("What colour is the tram?", ["red"], "txt,img",
            {"text": ("blue", False), "image": ("green", False)},
            ["Agent 2 looks more convincing to me.",
             "REASONING: the image agent describes the livery\nFINAL ANSWER: green"]),
    "r07": ("Who founded the library?", ["Ann Lee"], "txt",
            {"text": ("Ann Lee", False)}, []),
    "r08": ("How tall is the tower?", ["120 m"], "tb",
            {"table": ("120 m", True)}, []),
    "r09": ("Which players scored?", ["Alice", "Bob"], "tb,img",
            {"table": ("Alice, Bob", False), "image": ("alice, bob", False)}, []),
    "r10": ("What is the station called?", ["Central"], "txt,tb,img",
            {"text": ("North", False), "table": ("North", True), "image": ("Central", False)}, []),
}

_QUESTION_RE = re.compile(r"^Question: (.+)$", re.M)
_ANCHOR_RE = re.compile(r"^Anchor modality: (\w+)$", re.M)


def _build_replay_instances(d: Path) -> list[QAInstance]:
    (d / "images").mkdir(parents=True, exist_ok=True)
    out = []
    for n, (rid, (question, gold, mods, _, _)) in enumerate(sorted(PLAN.items())):
        mods = mods.split(",")
        image = None
        if "img" in mods:
            name = f"images/{rid}.png"
            (d / name).write_bytes(png(2, 2, (10 * n, 100, 200 - 10 * n)))
            image = ImageRef(path=name, media_type="image/png", root=str(d))
        out.append(QAInstance(
            id=rid,
            question=question,
            text_passages=(f"Notes for {rid}. The record mentions {gold[0]} once.",) if "txt" in mods else (),
            table=_table([[rid, gold[0]], ["other", "n/a"]]) if "tb" in mods else None,
            image=image,
            gold_answers=[gold] if len(gold) > 1 else [[g] for g in gold],
        ))
    return out


def _fixture_responder():
    by_question = {plan[0]: plan for plan in PLAN.values()}
    system = {name: get_template(name).system_text for name in ("expert", "synthesis", "aggregator")}

    def respond(messages, params):
        sys_text = messages[0].text
        user = messages[-1].text
        if sys_text == system["expert"]:
            kind = re.search(r"^Evidence type: (\w+)$", user, re.M).group(1)
            return (f"INSIGHTS:\n- the {kind} names one candidate\n- it gives a date\n"
                    f"CUES:\n- none\nGAPS:\n- no second source")
        if sys_text == system["synthesis"]:
            plan = by_question[_QUESTION_RE.search(user).group(1)]
            answer, uncertain = plan[3][_ANCHOR_RE.search(user).group(1)]
            final = answer if answer is not None else "insufficient evidence"
            return (f"INSIGHTS:\n- evidence reviewed\nSUB_ANSWERS:\n- what does the anchor say? -> {final}\n"
                    f"REASONING: the anchor evidence points to {final}.\n"
                    f"FINAL ANSWER: {final}\n"
                    f"UNCERTAINTY: {'the sources disagree' if uncertain else 'none'}")
        if sys_text == system["aggregator"]:
            # The aggregator never sees the question; identify the case by its answers.
            for plan in PLAN.values():
                answers = {a for a, _ in plan[3].values() if a}
                if answers and all(f"Answer: {a}\n" in user for a in answers) and plan[4]:
                    replies = plan[4]
                    return replies[-1] if FORMAT_REMINDER in user else replies[0]
        raise AssertionError("fixture responder saw an unexpected prompt")

    return respond


def make_replay() -> None:
    d = ROOT / "replay"
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    instances = _build_replay_instances(d)
    write_canonical(d / "dataset.jsonl", instances)

    # Record through the caching layer, then freeze timestamps/latencies so the file is stable.
    memory = ResponseCache()
    recorder = CachingBackend(memory, ScriptedBackend(responder=_fixture_responder(), model_name=MODEL),
                              mode="record")
    cfg = PipelineConfig.single(recorder, params=GenParams())
    run_batch(load_instances(d / "dataset.jsonl"), cfg)
    frozen = ResponseCache(d / "cache.jsonl")
    for i, (key, entry) in enumerate(sorted(memory._entries.items())):
        frozen.put(key, entry.response, latency_ms=float(200 + 7 * i), timestamp=1767225600.0 + i)

    (d / "backends.json").write_text(json.dumps({
        "fixture": {"kind": "http", "model_name": MODEL, "endpoint": "http://127.0.0.1:9/v1"},
    }, indent=2) + "\n", encoding="utf-8")

    replay = CachingBackend(ResponseCache(d / "cache.jsonl"), None, mode="replay", model_name=MODEL,
                            label="fixture")
    traces = run_batch(load_instances(d / "dataset.jsonl"), PipelineConfig.single(replay))
    save_traces(d / "expected_traces.jsonl", traces)


def main() -> None:
    make_pixel_pair()
    make_multimodalqa()
    make_manymodalqa()
    make_replay()
    print(f"fixtures written under {ROOT}")


if __name__ == "__main__":
    main()
