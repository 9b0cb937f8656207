from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modalqa.core import Modality, available_modalities
from modalqa.errors import EmptyDonorPool, NothingToShuffle
from modalqa.evaluation import normalize_answer
from modalqa.robustness import (
    PerturbKind,
    PerturbSpec,
    drop_context,
    inject_irrelevant,
    perturb_dataset,
    shuffle_text,
    split_sentences,
)
from support import make_instance

SENT = PerturbSpec(PerturbKind.SHUFFLE_SENTENCES, seed=7)
PARA = PerturbSpec(PerturbKind.SHUFFLE_PARAGRAPHS, seed=7)
INJECT = PerturbSpec(PerturbKind.INJECT_IRRELEVANT, seed=7, inject_count=2)

LONG = ("Dr. Smith arrived at noon. He met Mr. Jones at St. Mary's! Did they talk? "
        "They did. It rained all day.")


@pytest.mark.parametrize("text, expected", [
    ("One. Two. Three.", ["One.", "Two.", "Three."]),
    ("Dr. Who is here. Mr. Bean too.", ["Dr. Who is here.", "Mr. Bean too."]),
    ("Wait! Really? Yes.", ["Wait!", "Really?", "Yes."]),
    ("Version 2.5 shipped. it was late. Then fixed.", ["Version 2.5 shipped. it was late.", "Then fixed."]),
    ("No trailing stop", ["No trailing stop"]),
    ("", []),
])
def test_split_sentences(text, expected):
    assert split_sentences(text) == expected


def test_one_sentence_cannot_be_shuffled():
    with pytest.raises(NothingToShuffle):
        shuffle_text(make_instance(passages=("Just one sentence.",)), SENT)


def test_one_passage_cannot_be_paragraph_shuffled():
    with pytest.raises(NothingToShuffle):
        shuffle_text(make_instance(passages=(LONG,)), PARA)


def test_shuffle_is_deterministic_and_preserves_sentences():
    inst = make_instance(passages=(LONG, "Alpha one. Beta two. Gamma three."))
    a, b = shuffle_text(inst, SENT), shuffle_text(inst, SENT)
    assert a == b
    before = sorted(s for p in inst.text_passages for s in split_sentences(p))
    after = sorted(s for p in a.text_passages for s in split_sentences(p))
    assert before == after
    assert a.table == inst.table and a.image == inst.image and a.gold_answers == inst.gold_answers


def test_different_seeds_give_different_orders():
    inst = make_instance(passages=(" ".join(f"Sentence {i} here." for i in range(12)),))
    orders = {shuffle_text(inst, PerturbSpec(PerturbKind.SHUFFLE_SENTENCES, seed=s)).text_passages for s in range(5)}
    assert len(orders) > 1


def test_paragraph_shuffle_permutes_passages():
    passages = tuple(f"Passage {i}." for i in range(6))
    out = shuffle_text(make_instance(passages=passages), PARA)
    assert sorted(out.text_passages) == sorted(passages)


def test_shuffle_rejects_other_kinds():
    with pytest.raises(ValueError):
        shuffle_text(make_instance(passages=(LONG,)), INJECT)


_sentence = st.from_regex(r"[A-Z][a-z]{1,8}( [a-z]{1,8}){0,4}[.!?]", fullmatch=True)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(_sentence, min_size=1, max_size=6), min_size=1, max_size=3), st.integers(0, 2 ** 32))
def test_shuffle_preserves_sentence_multiset(passages, seed):
    inst = make_instance(passages=tuple(" ".join(p) for p in passages))
    spec = PerturbSpec(PerturbKind.SHUFFLE_SENTENCES, seed=seed)
    try:
        out = shuffle_text(inst, spec)
    except NothingToShuffle:
        assert all(len(p) < 2 for p in passages)
        return
    assert Counter(s for p in out.text_passages for s in split_sentences(p)) == \
        Counter(s for p in passages for s in p)
    assert out == shuffle_text(inst, spec)


# Injection


def pool():
    return [make_instance(id=f"d{i}", answers=((f"answer {i}",),), passages=(f"Donor passage {i}.",))
            for i in range(6)]


def test_inject_appends_exactly_count_and_keeps_prefix():
    inst = make_instance(id="target", passages=("Original one.", "Original two."))
    out = inject_irrelevant(inst, INJECT, pool())
    assert len(out.text_passages) == len(inst.text_passages) + 2
    assert out.text_passages[:2] == inst.text_passages
    assert out == inject_irrelevant(inst, INJECT, list(reversed(pool())))


def test_inject_skips_donors_sharing_an_answer():
    inst = make_instance(id="target", answers=(("Answer 0",),))
    donors = pool()[:3]
    for seed in range(10):
        out = inject_irrelevant(inst, PerturbSpec(PerturbKind.INJECT_IRRELEVANT, seed=seed), donors)
        assert "Donor passage 0." not in out.text_passages


def test_inject_never_uses_itself():
    inst = make_instance(id="d0", answers=(("x",),), passages=("Own passage.",))
    donors = [inst, make_instance(id="d1", answers=(("y",),), passages=("Other.",))]
    with pytest.raises(EmptyDonorPool):
        inject_irrelevant(inst, INJECT, donors)


def test_inject_empty_pool():
    with pytest.raises(EmptyDonorPool):
        inject_irrelevant(make_instance(), INJECT, [])


def test_injected_answers_disjoint_from_gold():
    inst = make_instance(id="t", answers=(("answer 3",),))
    out = inject_irrelevant(inst, PerturbSpec(PerturbKind.INJECT_IRRELEVANT, seed=1, inject_count=5), pool())
    assert "Donor passage 3." not in out.text_passages
    assert normalize_answer("answer 3") not in {normalize_answer(p) for p in out.text_passages}


# Drop


def test_drop_context():
    inst = make_instance()
    out = drop_context(inst)
    assert available_modalities(out) == []
    assert out.question == inst.question and out.gold_answers == inst.gold_answers


def test_perturbation_settings_validation():
    with pytest.raises(ValueError):
        PerturbSpec(PerturbKind.INJECT_IRRELEVANT, inject_count=0)
    with pytest.raises(ValueError):
        PerturbSpec("scramble")
    assert PerturbSpec("drop").kind is PerturbKind.DROP_ALL_CONTEXT


def test_perturb_dataset_lists_unchanged_instances():
    data = [make_instance(id="a", passages=(LONG,)), make_instance(id="b", passages=("Single.",)),
            make_instance(id="c", modalities=(Modality.TABLE,))]
    out = perturb_dataset(data, SENT)
    assert out.unchanged == ["b", "c"]
    assert [i.id for i in out.instances] == ["a", "b", "c"]
    assert out.instances[1] == data[1]
