"""Seeded text perturbations for robustness runs: shuffling, irrelevant-context injection, context removal."""

from __future__ import annotations

import dataclasses
import enum
import random
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from .core import QAInstance
from .errors import EmptyDonorPool, NothingToShuffle
from .evaluation import normalize_answer


class PerturbKind(str, enum.Enum):
    SHUFFLE_SENTENCES = "shuffle-sentences"
    SHUFFLE_PARAGRAPHS = "shuffle-paragraphs"
    INJECT_IRRELEVANT = "inject"
    DROP_ALL_CONTEXT = "drop"


@dataclass(frozen=True)
class PerturbSpec:
    kind: PerturbKind
    seed: int = 0
    inject_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", PerturbKind(self.kind))
        if not -(2 ** 63) <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")
        if self.inject_count < 1:
            raise ValueError("inject_count must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "seed": self.seed, "inject_count": self.inject_count}


def _rng(spec: PerturbSpec, instance: QAInstance) -> random.Random:
    # Per-instance stream: results do not depend on dataset order.
    return random.Random(f"{spec.seed}:{spec.kind.value}:{instance.id}")


ABBREVIATIONS = ("Mr.", "Mrs.", "Dr.", "St.", "No.", "vs.")
_BOUNDARY_RE = re.compile(r"[.!?](?=\s+[A-Z]|\s*$)")


def split_sentences(text: str) -> list[str]:
    """Split after '.', '!' or '?' when followed by whitespace and an uppercase letter, or by the end.

    A period that closes one of ``ABBREVIATIONS`` never ends a sentence.
    """
    sentences, start = [], 0
    for m in _BOUNDARY_RE.finditer(text):
        end = m.end()
        words = text[start:end].split()
        if text[m.start()] == "." and words and words[-1] in ABBREVIATIONS:
            continue
        piece = text[start:end].strip()
        if piece:
            sentences.append(piece)
        start = end
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def shuffle_text(instance: QAInstance, spec: PerturbSpec) -> QAInstance:
    """Permute sentences within each passage, or the passages themselves."""
    rng = _rng(spec, instance)
    passages = [p for p in instance.text_passages if p.strip()]
    if spec.kind is PerturbKind.SHUFFLE_PARAGRAPHS:
        if len(passages) < 2:
            raise NothingToShuffle(f"{instance.id}: fewer than two passages")
        rng.shuffle(passages)
        return dataclasses.replace(instance, text_passages=tuple(passages))
    if spec.kind is not PerturbKind.SHUFFLE_SENTENCES:
        raise ValueError(f"shuffle_text cannot apply {spec.kind.value}")
    split = [split_sentences(p) for p in passages]
    if not any(len(s) >= 2 for s in split):
        raise NothingToShuffle(f"{instance.id}: no passage has two or more sentences")
    out = []
    for sentences in split:
        rng.shuffle(sentences)
        out.append(" ".join(sentences))
    return dataclasses.replace(instance, text_passages=tuple(out))


def _answer_keys(instance: QAInstance) -> set[str]:
    return {normalize_answer(a) for alias in instance.gold_answers for a in alias}


def inject_irrelevant(instance: QAInstance, spec: PerturbSpec, donor_pool: Sequence[QAInstance]) -> QAInstance:
    """Append ``inject_count`` passages sampled from donors whose gold answers differ."""
    own = _answer_keys(instance)
    candidates = [
        p
        for donor in sorted(donor_pool, key=lambda d: d.id)
        if donor.id != instance.id and not (own & _answer_keys(donor))
        for p in donor.text_passages if p.strip()
    ]
    if len(candidates) < spec.inject_count:
        raise EmptyDonorPool(
            f"{instance.id}: {len(candidates)} eligible donor passages, need {spec.inject_count}")
    picked = _rng(spec, instance).sample(candidates, spec.inject_count)
    return dataclasses.replace(instance, text_passages=tuple(instance.text_passages) + tuple(picked))


def drop_context(instance: QAInstance) -> QAInstance:
    return dataclasses.replace(instance, text_passages=(), table=None, image=None)


@dataclass
class PerturbOutcome:
    instances: list[QAInstance]
    unchanged: list[str]


def perturb_dataset(instances: Iterable[QAInstance], spec: PerturbSpec) -> PerturbOutcome:
    """Apply ``spec`` to every instance; ones that cannot be perturbed pass through and are listed."""
    instances = list(instances)
    out, unchanged = [], []
    for inst in instances:
        try:
            if spec.kind is PerturbKind.DROP_ALL_CONTEXT:
                out.append(drop_context(inst))
            elif spec.kind is PerturbKind.INJECT_IRRELEVANT:
                out.append(inject_irrelevant(inst, spec, instances))
            else:
                out.append(shuffle_text(inst, spec))
        except (NothingToShuffle, EmptyDonorPool):
            out.append(inst)
            unchanged.append(inst.id)
    return PerturbOutcome(out, unchanged)
