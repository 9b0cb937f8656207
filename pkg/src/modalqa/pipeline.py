"""Three-stage orchestration: modality experts, cross-modal synthesis, aggregation."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .backends import Backend, ChatMessage, Completion, GenParams
from .core import (
    AggregateDecision,
    DecisionRule,
    ModalityInsights,
    Modality,
    ModelCall,
    QAInstance,
    RunTrace,
    SynthesisResult,
    available_modalities,
    linearize_table,
)
from .errors import BackendError, PreconditionError
from .evaluation import normalize_answer
from .prompting import (
    ABSTENTION_MARKERS,
    PromptTemplate,
    extract_final_answer,
    load_templates,
    parse_sections,
    parse_sub_answers,
    render,
    section_items,
    with_format_reminder,
)

logger = logging.getLogger(__name__)

NOT_PROVIDED = "not provided"
DETERMINISTIC_BACKEND = "deterministic"


@dataclass
class PipelineConfig:
    expert_backend: Backend
    synthesis_backend: Backend
    aggregator_backend: Backend
    aggregator_sees_question: bool = False
    params: GenParams = field(default_factory=GenParams)
    templates: Mapping[str, PromptTemplate] = field(default_factory=load_templates)
    abstention_markers: frozenset[str] = ABSTENTION_MARKERS

    @classmethod
    def single(cls, backend: Backend, **kwargs) -> PipelineConfig:
        """All three roles served by one backend."""
        return cls(backend, backend, backend, **kwargs)


class CallLog:
    """Per-instance record of agent activations, in execution order."""

    def __init__(self):
        self.calls: list[ModelCall] = []
        self.parse_failures = 0

    def add(self, stage: str, backend: str, completion: Completion | None = None, *,
            retry: bool = False, synthetic: bool = False) -> None:
        self.calls.append(ModelCall(
            stage=stage,
            backend=backend,
            prompt_hash=completion.prompt_hash if completion else "",
            latency_ms=round(completion.latency_ms, 3) if completion else 0.0,
            seq=len(self.calls),
            retry=retry,
            synthetic=synthetic,
        ))


def _call(backend: Backend, messages: Sequence[ChatMessage], cfg: PipelineConfig, stage: str,
          log: CallLog | None, retry: bool = False) -> Completion:
    try:
        completion = backend.complete(messages, cfg.params)
    except BackendError as exc:
        exc.stage = exc.stage or stage
        raise
    if log is not None:
        log.add(stage, backend.label, completion, retry=retry)
    return completion


def _call_with_format_retry(backend, messages, cfg, stage, log) -> tuple[dict[str, str], str, bool]:
    """Call once; if FINAL_ANSWER is missing, re-ask once with a header reminder.

    Returns ``(sections, raw_text, parsed_ok)``.
    """
    completion = _call(backend, messages, cfg, stage, log)
    sections = parse_sections(completion.text)
    if "FINAL_ANSWER" in sections:
        return sections, completion.text, True
    completion = _call(backend, with_format_reminder(messages), cfg, stage, log, retry=True)
    sections = parse_sections(completion.text)
    ok = "FINAL_ANSWER" in sections
    if not ok and log is not None:
        log.parse_failures += 1
    return sections, completion.text, ok


def modality_content(instance: QAInstance, modality: Modality):
    """Raw evidence of one modality as a prompt binding (text, or the image itself)."""
    if modality is Modality.TEXT:
        return "\n\n".join(p for p in instance.text_passages if p.strip())
    if modality is Modality.TABLE:
        return linearize_table(instance.table)
    return instance.image


def stage1_extract(instance: QAInstance, modality: Modality, cfg: PipelineConfig,
                   log: CallLog | None = None) -> ModalityInsights:
    if modality not in available_modalities(instance):
        raise PreconditionError(f"{instance.id}: modality {modality.label} is not available")
    messages = render(cfg.templates["expert"], {
        "question": instance.question,
        "modality_name": modality.label,
        "modality_content": modality_content(instance, modality),
    })
    completion = _call(cfg.expert_backend, messages, cfg, f"stage1:{modality.label}", log)
    sections = parse_sections(completion.text)
    return ModalityInsights(
        modality=modality,
        key_facts=section_items(sections.get("INSIGHTS", "")),
        cues=section_items(sections.get("CUES", "")),
        gaps=section_items(sections.get("GAPS", "")),
        raw_model_text=completion.text,
    )


def insights_text(insights: ModalityInsights) -> str:
    def block(title, items):
        return f"{title}:\n" + ("\n".join(f"- {i}" for i in items) if items else "- none")

    return "\n".join([
        block("Key facts", insights.key_facts),
        block("Cues", insights.cues),
        block("Gaps", insights.gaps),
    ])


def _other_binding(instance: QAInstance, modality: Modality, present: list[Modality]):
    header = f"[{modality.label}]"
    if modality not in present:
        return f"{header} {NOT_PROVIDED}"
    content = modality_content(instance, modality)
    return [header, content]


def stage2_synthesize(instance: QAInstance, anchor: Modality, anchor_insights: ModalityInsights,
                      cfg: PipelineConfig, log: CallLog | None = None) -> SynthesisResult:
    if anchor_insights.modality != anchor:
        raise PreconditionError("anchor insights come from a different modality")
    present = available_modalities(instance)
    others = [m for m in Modality if m is not anchor]
    messages = render(cfg.templates["synthesis"], {
        "question": instance.question,
        "modality_name": anchor.label,
        "anchor_insights": insights_text(anchor_insights),
        "other_modality_1": _other_binding(instance, others[0], present),
        "other_modality_2": _other_binding(instance, others[1], present),
    })
    sections, raw, _ = _call_with_format_retry(
        cfg.synthesis_backend, messages, cfg, f"stage2:{anchor.label}", log)
    answer, uncertain = extract_final_answer(sections, cfg.abstention_markers)
    return SynthesisResult(
        anchor=anchor,
        insights_used=anchor_insights,
        sub_answers=parse_sub_answers(sections.get("SUB_ANSWERS", "")),
        final_answer=answer,
        uncertain=uncertain,
        reasoning=sections.get("REASONING", ""),
        raw_model_text=raw,
    )


def synthesis_block(index: int, result: SynthesisResult) -> str:
    """What the aggregator sees of one synthesis agent: answer, confidence, reasoning."""
    lines = [f"Agent {index}:"]
    lines.append(f"Answer: {result.final_answer if result.final_answer is not None else '(abstained)'}")
    lines.append(f"Confident: {'yes' if result.confident else 'no'}")
    if result.sub_answers:
        lines.append("Sub-answers:")
        lines += [f"- {q} -> {a}" for q, a in result.sub_answers]
    lines.append(f"Reasoning: {result.reasoning or '(none given)'}")
    return "\n".join(lines)


def deterministic_decision(results: Sequence[SynthesisResult]) -> AggregateDecision | None:
    """Cascade rules that need no model: all abstained, majority, lone confident answer.

    Returns None when only rationale comparison can decide.
    """
    results = sorted(results, key=lambda r: r.anchor)
    answered = [r for r in results if not r.abstained]
    if not answered:
        return AggregateDecision(None, DecisionRule.ALL_ABSTAINED, "every agent abstained")

    groups: dict[str, list[SynthesisResult]] = {}
    for r in answered:
        key = normalize_answer(r.final_answer)
        if key:
            groups.setdefault(key, []).append(r)
    best = max(groups.values(), key=len, default=[])
    if len(best) >= 2:
        anchors = [r.anchor for r in best]
        return AggregateDecision(
            best[0].final_answer, DecisionRule.MAJORITY,
            f"{len(best)} of {len(results)} agents agree ({', '.join(a.label for a in anchors)})",
            anchors,
        )

    confident = [r for r in results if r.confident]
    if len(confident) == 1:
        r = confident[0]
        return AggregateDecision(
            r.final_answer, DecisionRule.CONFIDENT_OVER_UNCERTAIN,
            f"only the {r.anchor.label}-anchored agent answered confidently", [r.anchor],
        )
    if len(results) == 1:
        # A lone uncertain answer has nothing to be weighed against.
        r = answered[0]
        return AggregateDecision(
            r.final_answer, DecisionRule.CONFIDENT_OVER_UNCERTAIN,
            f"single {r.anchor.label}-anchored agent", [r.anchor],
        )
    return None


def _fallback(results: Sequence[SynthesisResult]) -> AggregateDecision:
    pool = [r for r in results if r.confident] or [r for r in results if not r.abstained]
    # max() keeps the first of equal-length candidates, i.e. modality order.
    best = max(pool, key=lambda r: len(r.reasoning))
    return AggregateDecision(
        best.final_answer, DecisionRule.BEST_RATIONALE,
        f"aggregator output unparseable; kept the {best.anchor.label}-anchored answer with the longest rationale",
        [best.anchor],
    )


def stage3_aggregate(results: Sequence[SynthesisResult], question: str | None, cfg: PipelineConfig,
                     log: CallLog | None = None) -> AggregateDecision:
    if not results:
        raise PreconditionError("aggregation needs at least one synthesis result")
    results = sorted(results, key=lambda r: r.anchor)
    decision = deterministic_decision(results)
    if decision is not None:
        if log is not None and len(results) > 1:
            log.add("stage3", DETERMINISTIC_BACKEND, synthetic=True)
        return decision

    blocks = "\n\n".join(synthesis_block(i, r) for i, r in enumerate(results, 1))
    if cfg.aggregator_sees_question:
        if question is None:
            raise PreconditionError("aggregator_sees_question is set but no question was passed")
        messages = render(cfg.templates["aggregator_with_question"],
                          {"question": question, "synthesis_blocks": blocks})
    else:
        messages = render(cfg.templates["aggregator"], {"synthesis_blocks": blocks})
    sections, _, ok = _call_with_format_retry(cfg.aggregator_backend, messages, cfg, "stage3", log)
    if not ok:
        return _fallback(results)
    answer, _ = extract_final_answer(sections, cfg.abstention_markers)
    chosen = [r.anchor for r in results
              if answer is not None and r.final_answer is not None
              and normalize_answer(r.final_answer) == normalize_answer(answer)]
    return AggregateDecision(answer, DecisionRule.BEST_RATIONALE,
                             sections.get("REASONING", "").strip(), chosen)


def run_pipeline(instance: QAInstance, cfg: PipelineConfig) -> RunTrace:
    """Run all three stages for one instance. Failures are captured in the trace."""
    log = CallLog()
    stage1: list[ModalityInsights] = []
    stage2: list[SynthesisResult] = []
    decision = None
    error = None
    try:
        present = available_modalities(instance)
        if not present:
            raise PreconditionError(f"{instance.id}: no modality available")
        for m in present:
            stage1.append(stage1_extract(instance, m, cfg, log))
        for insights in stage1:
            stage2.append(stage2_synthesize(instance, insights.modality, insights, cfg, log))
        question = instance.question if cfg.aggregator_sees_question else None
        decision = stage3_aggregate(stage2, question, cfg, log)
    except Exception as exc:  # any stage failure aborts this instance only
        stage = getattr(exc, "stage", None)
        error = f"{getattr(exc, 'code', type(exc).__name__)}: {exc}" + (f" [{stage}]" if stage else "")
        logger.warning("instance %s failed: %s", instance.id, error)
    return RunTrace(
        instance_id=instance.id,
        method="mammqa",
        stage1=stage1,
        stage2=stage2,
        stage3=decision,
        model_calls=log.calls,
        prediction=decision.final_answer if decision else None,
        error=error,
        modality_tag=instance.modality_tag,
        gold_answers=instance.gold_answers,
        parse_failures=log.parse_failures,
    )


Runner = Callable[[QAInstance], RunTrace]


def run_batch(instances: Iterable[QAInstance], cfg: PipelineConfig | None = None, parallelism: int = 1,
              runner: Runner | None = None) -> list[RunTrace]:
    """Evaluate instances on a bounded thread pool; output order equals input order.

    ``runner`` defaults to the three-stage pipeline under ``cfg``; baselines
    pass their own per-instance callable.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    if runner is None:
        if cfg is None:
            raise ValueError("run_batch needs a config or a runner")
        runner = lambda inst: run_pipeline(inst, cfg)  # noqa: E731
    instances = list(instances)
    if not instances:
        return []
    guarded = _isolate(runner)
    if parallelism == 1:
        return [guarded(i) for i in instances]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(guarded, instances))


def _isolate(runner: Runner) -> Runner:
    def run(inst: QAInstance) -> RunTrace:
        try:
            return runner(inst)
        except Exception as exc:
            logger.warning("instance %s failed: %s", inst.id, exc)
            return RunTrace(
                instance_id=inst.id,
                method=getattr(runner, "method", "mammqa"),
                error=f"{getattr(exc, 'code', type(exc).__name__)}: {exc}",
                modality_tag=inst.modality_tag,
                gold_answers=inst.gold_answers,
            )
    return run
