import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalqa.backends import ScriptedBackend
from modalqa.core import DecisionRule, Modality, ModalityInsights, SynthesisResult
from modalqa.errors import BackendError, ImageUnsupported, PreconditionError
from modalqa.pipeline import (
    NOT_PROVIDED,
    CallLog,
    PipelineConfig,
    run_batch,
    run_pipeline,
    stage1_extract,
    stage2_synthesize,
    stage3_aggregate,
)
from support import Team, make_instance, role_of

T, TB, I = Modality.TEXT, Modality.TABLE, Modality.IMAGE


def syn(mod, answer, uncertain=False, reasoning="r"):
    return SynthesisResult(mod, ModalityInsights(mod), final_answer=answer,
                           uncertain=uncertain or answer is None, reasoning=reasoning)


def cfg_for(backend, **kw):
    return PipelineConfig.single(backend, **kw)


# Stage I


def test_stage1_table_facts_from_scripted_reply():
    reply = "INSIGHTS:\n- Alice placed 1\n- Bob placed 2\nCUES:\n- none\nGAPS:\n- race date missing"
    b = ScriptedBackend(default=reply)
    ins = stage1_extract(make_instance(modalities=(TB,)), TB, cfg_for(b))
    assert ins.modality is TB
    assert ins.key_facts == ("Alice placed 1", "Bob placed 2")
    assert ins.cues == () and ins.gaps == ("race date missing",)
    assert "Name | Place" in b.calls[0][1][1].text


def test_stage1_image_on_text_only_backend():
    b = ScriptedBackend(default="INSIGHTS: x", text_only=True)
    with pytest.raises(ImageUnsupported):
        stage1_extract(make_instance(), I, cfg_for(b))


def test_stage1_requires_available_modality():
    inst = make_instance(modalities=(TB,), passages=())
    with pytest.raises(PreconditionError):
        stage1_extract(inst, T, cfg_for(ScriptedBackend(default="x")))


def test_stage1_backend_error_carries_stage():
    with pytest.raises(BackendError) as err:
        stage1_extract(make_instance(), T, cfg_for(ScriptedBackend()))
    assert err.value.stage == "stage1:text"


# Stage II


def test_stage2_binds_other_modalities_raw():
    team = Team()
    b = team.backend()
    inst = make_instance(passages=("SENTINEL-PASSAGE",))
    ins = ModalityInsights(T, key_facts=["fact-from-text"])
    stage2_synthesize(inst, T, ins, cfg_for(b))
    msgs = b.calls[0][1]
    text = msgs[1].text
    assert "fact-from-text" in text and "SENTINEL-PASSAGE" not in text
    assert "Alice | 1" in text  # raw table
    assert len(msgs[1].images) == 1  # raw image


def test_stage2_single_modality_other_slots_not_provided():
    b = Team().backend()
    stage2_synthesize(make_instance(modalities=(TB,)), TB, ModalityInsights(TB), cfg_for(b))
    text = b.calls[0][1][1].text
    assert f"[text] {NOT_PROVIDED}" in text and f"[image] {NOT_PROVIDED}" in text


def test_stage2_parses_answer():
    b = ScriptedBackend(default="FINAL ANSWER: 1928\nUNCERTAINTY: none")
    r = stage2_synthesize(make_instance(), T, ModalityInsights(T), cfg_for(b))
    assert (r.final_answer, r.uncertain) == ("1928", False)


def test_stage2_anchor_mismatch():
    with pytest.raises(PreconditionError):
        stage2_synthesize(make_instance(), T, ModalityInsights(TB), cfg_for(ScriptedBackend(default="x")))


def test_stage2_format_retry_recovers():
    replies = iter(["I believe it is 1928.", "FINAL ANSWER: 1928\nUNCERTAINTY: none"])
    b = ScriptedBackend(responder=lambda m, p: next(replies))
    log = CallLog()
    r = stage2_synthesize(make_instance(), T, ModalityInsights(T), cfg_for(b), log)
    assert r.final_answer == "1928"
    assert [c.retry for c in log.calls] == [False, True]
    assert log.parse_failures == 0
    assert b.calls[1][1][-1].text.endswith("Respond using the required headers.")


def test_stage2_format_retry_exhausted_abstains():
    log = CallLog()
    b = ScriptedBackend(default="no headers at all")
    r = stage2_synthesize(make_instance(), T, ModalityInsights(T), cfg_for(b), log)
    assert r.abstained and r.uncertain
    assert b.call_count == 2 and log.parse_failures == 1


# Stage III


def no_model():
    return ScriptedBackend()  # any call would raise


def test_rule1_majority():
    b = no_model()
    d = stage3_aggregate([syn(T, "Paris"), syn(TB, "Paris"), syn(I, "London")], None, cfg_for(b))
    assert (d.final_answer, d.rule) == ("Paris", DecisionRule.MAJORITY)
    assert d.contributing_anchors == (T, TB)
    assert b.call_count == 0


def test_rule1_uses_normalized_agreement_and_first_surface_form():
    d = stage3_aggregate([syn(I, "Eiffel Tower"), syn(TB, "The Eiffel Tower", True)], None, cfg_for(no_model()))
    assert (d.final_answer, d.rule) == ("The Eiffel Tower", DecisionRule.MAJORITY)


def test_rule2_confident_over_uncertain():
    d = stage3_aggregate([syn(T, None), syn(TB, None), syn(I, "42")], None, cfg_for(no_model()))
    assert (d.final_answer, d.rule) == ("42", DecisionRule.CONFIDENT_OVER_UNCERTAIN)


def test_rule0_all_abstained():
    d = stage3_aggregate([syn(T, None), syn(TB, None)], None, cfg_for(no_model()))
    assert (d.final_answer, d.rule) == (None, DecisionRule.ALL_ABSTAINED)


def test_rule3_model_adjudicates():
    b = ScriptedBackend(default="REASONING: B is better supported\nFINAL ANSWER: B")
    d = stage3_aggregate([syn(T, "A"), syn(TB, "B"), syn(I, None)], None, cfg_for(b))
    assert (d.final_answer, d.rule) == ("B", DecisionRule.BEST_RATIONALE)
    assert d.contributing_anchors == (TB,)
    assert b.call_count == 1


def test_rule3_parse_failure_falls_back_to_longest_confident_rationale():
    b = ScriptedBackend(default="I cannot decide.")
    results = [syn(T, "A", reasoning="short"), syn(TB, "B", reasoning="a much longer rationale"),
               syn(I, "C", True, reasoning="the longest rationale of them all, but uncertain")]
    d = stage3_aggregate(results, None, cfg_for(b))
    assert (d.final_answer, d.rule) == ("B", DecisionRule.BEST_RATIONALE)
    assert b.call_count == 2  # original plus one format retry


def test_rule3_fallback_tie_prefers_modality_order():
    b = ScriptedBackend(default="garbled")
    d = stage3_aggregate([syn(I, "C", reasoning="same"), syn(TB, "B", reasoning="same")], None, cfg_for(b))
    assert d.final_answer == "B"


def test_rule3_aggregator_abstains():
    b = ScriptedBackend(default="FINAL ANSWER: cannot be determined")
    d = stage3_aggregate([syn(T, "A"), syn(TB, "B")], None, cfg_for(b))
    assert d.final_answer is None and d.rule is DecisionRule.BEST_RATIONALE


def test_stage3_requires_results_and_question_when_visible():
    with pytest.raises(PreconditionError):
        stage3_aggregate([], None, cfg_for(no_model()))
    with pytest.raises(PreconditionError):
        stage3_aggregate([syn(T, "A"), syn(TB, "B")], None,
                         cfg_for(ScriptedBackend(default="FINAL ANSWER: A"), aggregator_sees_question=True))


def test_rule3_prompt_holds_answers_and_reasoning_only():
    b = ScriptedBackend(default="FINAL ANSWER: A")
    stage3_aggregate([syn(T, "A", reasoning="why-A"), syn(TB, "B", reasoning="why-B")], None, cfg_for(b))
    msgs = b.calls[0][1]
    text = "\n".join(m.text for m in msgs)
    assert "Answer: A" in text and "why-B" in text
    assert not any(m.images for m in msgs)


# Whole pipeline


@pytest.mark.parametrize("mods, activations", [((T, TB, I), 7), ((T, TB), 5), ((TB, I), 5), ((T, I), 5)])
def test_agent_count(mods, activations):
    team = Team()
    trace = run_pipeline(make_instance(modalities=mods), cfg_for(team.backend()))
    assert not trace.failed
    assert trace.agent_activations == activations
    assert len(trace.stage1) == len(trace.stage2) == len(mods)
    assert trace.prediction == "42" and trace.stage3.rule is DecisionRule.MAJORITY


def test_agent_count_with_rule3_has_real_aggregator_call():
    team = Team({"text": ("A", False), "table": ("B", False), "image": ("C", False)}, aggregate="B")
    trace = run_pipeline(make_instance(), cfg_for(team.backend()))
    assert trace.agent_activations == 7 and trace.model_call_count == 7
    assert trace.prediction == "B"


def test_single_modality_is_two_calls():
    team = Team({"table": ("Alice", False)})
    trace = run_pipeline(make_instance(modalities=(TB,)), cfg_for(team.backend()))
    assert trace.agent_activations == 2
    assert trace.stage3.rule is DecisionRule.CONFIDENT_OVER_UNCERTAIN
    assert trace.prediction == "Alice"


def test_single_modality_abstention():
    team = Team({"text": (None, True)})
    trace = run_pipeline(make_instance(modalities=(T,)), cfg_for(team.backend()))
    assert trace.prediction is None and trace.stage3.rule is DecisionRule.ALL_ABSTAINED


def test_stage_order_in_trace():
    trace = run_pipeline(make_instance(), cfg_for(Team().backend()))
    stages = [c.stage.split(":")[0] for c in trace.model_calls]
    assert stages == ["stage1"] * 3 + ["stage2"] * 3 + ["stage3"]
    assert [c.seq for c in trace.model_calls] == list(range(7))
    assert [c.stage for c in trace.model_calls[:3]] == ["stage1:text", "stage1:table", "stage1:image"]


def test_no_modalities_fails_instance():
    trace = run_pipeline(make_instance(modalities=()), cfg_for(Team().backend()))
    assert trace.failed and "E_PRECONDITION" in trace.error


def test_separate_backends_per_role():
    team = Team()
    experts, synth, agg = (ScriptedBackend(responder=team, label=n) for n in ("e", "s", "a"))
    cfg = PipelineConfig(experts, synth, agg)
    trace = run_pipeline(make_instance(modalities=(T, TB)), cfg)
    assert experts.call_count == 2 and synth.call_count == 2 and agg.call_count == 0
    assert [c.backend for c in trace.model_calls] == ["e", "e", "s", "s", "deterministic"]


def test_aggregator_question_visibility_toggle():
    team = Team({"text": ("A", False), "table": ("B", False)})
    q = "QSENTINEL-1234 who?"
    inst = make_instance(modalities=(T, TB), question=q)
    run_pipeline(inst, cfg_for(team.backend()))
    assert q not in team.prompts["aggregator"][0]
    run_pipeline(inst, cfg_for(team.backend(), aggregator_sees_question=True))
    assert q in team.prompts["aggregator_with_question"][0]


@settings(max_examples=60, deadline=None)
@given(st.sets(st.sampled_from(list(Modality)), min_size=2),
       st.lists(st.tuples(st.sampled_from(["x", "y", "z", None]), st.booleans()), min_size=3, max_size=3))
def test_agent_count_law_property(mods, plan):
    answers = {m.label: plan[i] for i, m in enumerate(Modality)}
    trace = run_pipeline(make_instance(modalities=mods), cfg_for(Team(answers, aggregate="x").backend()))
    assert not trace.failed
    assert trace.agent_activations == 2 * len(mods) + 1


# Batch


def test_run_batch_empty():
    assert run_batch([], cfg_for(Team().backend())) == []


def test_run_batch_rejects_bad_parallelism():
    with pytest.raises(ValueError):
        run_batch([make_instance()], cfg_for(Team().backend()), parallelism=0)


def test_run_batch_isolates_failures():
    team = Team()

    def responder(messages, params):
        if "Who broke?" in messages[-1].text:
            raise BackendError("endpoint down")
        return team(messages, params)

    b = ScriptedBackend(responder=responder)
    insts = [make_instance(id="a"), make_instance(id="b", question="Who broke?"), make_instance(id="c")]
    traces = run_batch(insts, cfg_for(b), parallelism=2)
    assert [t.instance_id for t in traces] == ["a", "b", "c"]
    assert [t.failed for t in traces] == [False, True, False]
    assert "stage1:text" in traces[1].error


def test_run_batch_parallelism_independent():
    insts = [make_instance(id=f"i{n}", modalities=mods, question=f"Question {n}?")
             for n, mods in enumerate([(T,), (T, TB), (T, TB, I), (TB, I)] * 5)]
    team = Team({"text": ("A", False), "table": ("B", True), "image": ("A", True)})
    serial = run_batch(insts, cfg_for(team.backend()), parallelism=1)
    parallel = run_batch(insts, cfg_for(team.backend()), parallelism=8)
    assert [t.to_dict() for t in serial] == [t.to_dict() for t in parallel]


def test_run_batch_custom_runner_exception_is_contained():
    def runner(inst):
        raise RuntimeError("boom")
    runner.method = "cot"
    traces = run_batch([make_instance()], runner=runner)
    assert traces[0].failed and traces[0].method == "cot"


def test_role_helper_identifies_templates():
    b = Team().backend()
    run_pipeline(make_instance(modalities=(T, TB)), cfg_for(b))
    assert [role_of(m) for _, m in b.calls] == ["expert", "expert", "synthesis", "synthesis"]
