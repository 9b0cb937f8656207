"""Scripted agents and instance builders shared by the test modules."""

from __future__ import annotations

import re

from modalqa.backends import ScriptedBackend
from modalqa.core import ImageRef, Modality, QAInstance, TableData
from modalqa.prompting import TEMPLATE_NAMES, get_template

PNG_BYTES = b"\x89PNG\r\n\x1a\n" + b"\x00" * 24

_ANCHOR_RE = re.compile(r"^Anchor modality: (\w+)$", re.M)


def role_of(messages) -> str:
    system = messages[0].text
    for name in TEMPLATE_NAMES:
        if get_template(name).system_text == system:
            return name
    raise AssertionError("unrecognised system prompt")


def expert_reply(modality: str) -> str:
    return f"INSIGHTS:\n- a {modality} fact\nCUES:\n- none\nGAPS:\n- none"


def synthesis_reply(answer: str | None, uncertain: bool = False, reasoning: str = "because") -> str:
    final = answer if answer is not None else "insufficient evidence"
    return (
        "INSIGHTS:\n- fact\n"
        "SUB_ANSWERS:\n- which one? -> " + final + "\n"
        f"REASONING: {reasoning}\n"
        f"FINAL ANSWER: {final}\n"
        f"UNCERTAINTY: {'conflicting evidence' if uncertain else 'none'}"
    )


class Team:
    """Responder playing expert, synthesis and aggregator roles.

    ``answers`` maps an anchor modality label to ``(answer, uncertain)``;
    ``aggregate`` is what the aggregator model says.
    """

    def __init__(self, answers=None, aggregate="aggregated", default=("42", False)):
        self.answers = answers or {}
        self.aggregate = aggregate
        self.default = default
        self.prompts: dict[str, list[str]] = {}

    def __call__(self, messages, params):
        role = role_of(messages)
        user = "\n".join(m.text for m in messages if m.role == "user")
        self.prompts.setdefault(role, []).append(messages[0].text + "\n" + user)
        if role == "expert":
            return expert_reply(re.search(r"^Evidence type: (\w+)$", user, re.M).group(1))
        if role == "synthesis":
            anchor = _ANCHOR_RE.search(user).group(1)
            return synthesis_reply(*self.answers.get(anchor, self.default))
        if role.startswith("aggregator"):
            return f"REASONING: picked the clearest\nFINAL ANSWER: {self.aggregate}"
        raise AssertionError(f"unexpected role {role}")

    def backend(self, **kw) -> ScriptedBackend:
        return ScriptedBackend(responder=self, **kw)


def make_instance(id="q1", modalities=(Modality.TEXT, Modality.TABLE, Modality.IMAGE),
                  question="Who won?", answers=(("Alice",),), passages=None, tag=None) -> QAInstance:
    mods = set(modalities)
    return QAInstance(
        id=id,
        question=question,
        text_passages=passages if passages is not None else (
            ("Alice won the race. Bob came second.",) if Modality.TEXT in mods else ()),
        table=TableData(["Name", "Place"], [["Alice", "1"], ["Bob", "2"]], "Results")
        if Modality.TABLE in mods else None,
        image=ImageRef(data=PNG_BYTES, media_type="image/png") if Modality.IMAGE in mods else None,
        gold_answers=answers,
        gold_modality_tag=tag,
    )


class ToTScript:
    """Propose/value responder. ``value(depth, k)`` scores the k-th proposal at that depth."""

    def __init__(self, value, answer_at_depth=3):
        self.value = value
        self.answer_at_depth = answer_at_depth
        self.propose_calls = 0
        self.value_calls = 0

    def __call__(self, messages, params):
        role = role_of(messages)
        user = messages[-1].text
        if role == "capcot_caption":
            return "caption"
        so_far = user.split("Reasoning so far:\n", 1)[1].split("\n\nProposed next step:")[0]
        depth = 1 if so_far.strip() == "(none yet)" else len(so_far.strip().splitlines()) + 1
        if role == "tot_propose":
            self.propose_calls += 1
            lines = []
            for k in range(3):
                lines.append(f"{k + 1}. step d{depth}k{k}")
                if depth >= self.answer_at_depth:
                    lines.append(f"ANSWER: ans-d{depth}k{k}")
            return "\n".join(lines)
        if role == "tot_value":
            self.value_calls += 1
            k = int(re.search(r"step d\d+k(\d)", user.split("Proposed next step:")[1]).group(1))
            return f"VALUE: {self.value(depth, k)}"
        raise AssertionError(role)
