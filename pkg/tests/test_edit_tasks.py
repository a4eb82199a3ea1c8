import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from massedit import evaluate, lm, tasks
from massedit.errors import ParseError

DATA = os.path.join(os.path.dirname(__file__), "data")


def _task(seed=0, **kw):
    args = dict(num_facts=40, vocab_size=64, prompt_len=5, paraphrases_per_fact=2, num_unrelated=20)
    args.update(kw)
    return tasks.generate_synthetic_task(seed, **args)


# ------------------------------------------------------- synthetic generator

def test_same_seed_is_byte_identical(tmp_path):
    _task(7).save(tmp_path / "a.json")
    _task(7).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert _task(7).to_json() != _task(8).to_json()


def test_counts():
    task = tasks.generate_synthetic_task(0, 100, 128, 5, 2)
    assert len(task.edits) == 100
    assert sum(len(eq) for eq in task.equivalents) == 200


def test_disjointness_audit():
    for seed in range(10):
        task = _task(seed)
        edited = {t.prompt for t in task.edits} | {t.prompt for eq in task.equivalents for t in eq}
        assert not any(t.prompt in edited for t in task.unrelated_pool)


def test_paraphrases_are_distinct_and_share_answer():
    task = _task(3)
    for edit, eq in zip(task.edits, task.equivalents):
        prompts = [edit.prompt] + [t.prompt for t in eq]
        assert len(set(prompts)) == len(prompts)
        assert all(t.answer == edit.answer for t in eq)


def test_flip_labels_changes_answers():
    task = _task(1, flip_labels=True)
    old = {t.prompt: t.answer for t in task.pretrain}
    assert all(old[e.prompt] != e.answer for e in task.edits)
    unflipped = _task(1, flip_labels=False)
    assert not any(t.prompt == e.prompt for e in unflipped.edits for t in unflipped.pretrain)


def test_lookup_model_solves_any_task():
    task = _task(5, answer_len=2)
    _, split = tasks.eval_split(task, 10, 0)
    m = evaluate.compute_metrics(None, evaluate.LookupModel.from_task(task), split)
    assert m.es == m.gs == m.ls == 1.0


@pytest.mark.parametrize("kw", [dict(paraphrases_per_fact=0), dict(num_facts=0), dict(prompt_len=3),
                                dict(num_facts=5000), dict(val_fraction=1.0)])
def test_infeasible_sizes(kw):
    with pytest.raises(ValueError):
        _task(**kw)


def test_split_tags():
    task = _task(0, val_fraction=0.25)
    assert len(task.indices("val")) == 10 and len(task.indices("train")) == 30
    with pytest.raises(ValueError):
        task.indices("test")


def test_task_json_roundtrip(tmp_path):
    task = _task(2)
    task.save(tmp_path / "t.json")
    back = tasks.EditTask.load(tmp_path / "t.json")
    assert back.to_json() == task.to_json()


def test_task_invariants_enforced():
    e = tasks.EditTuple((2, 3), (4,))
    with pytest.raises(ValueError):
        tasks.EditTask([e], [[]], [], 8, ["train"])
    with pytest.raises(ValueError):
        tasks.EditTask([e], [[e]], [tasks.EditTuple((2, 3), (5,))], 8, ["train"])
    with pytest.raises(ValueError):
        tasks.EditTask([e], [[e]], [], 4, ["train"])
    with pytest.raises(ValueError):
        tasks.EditTuple((), (1,))


# ------------------------------------------------------------ dataset loading

def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    task, _ = tasks.load_dataset(path, "qa-jsonl")
    assert len(task) == 0 and task.unrelated_pool == []


def test_three_line_fixture():
    task, vocab = tasks.load_dataset(os.path.join(DATA, "three_facts.jsonl"), "qa-jsonl")
    assert len(task) == 3
    assert [len(eq) for eq in task.equivalents] == [2, 1, 2]
    assert vocab.detokenize(task.equivalents[1][0].prompt) == "who wrote hamlet ?"
    assert vocab.detokenize(task.edits[2].answer) == "jupiter"
    assert task.splits == ["train", "train", "val"]
    assert [vocab.detokenize(t.prompt) for t in task.unrelated_pool] == ["color of the sky ?"]


def test_malformed_line_is_named():
    with pytest.raises(ParseError) as exc:
        tasks.load_dataset(os.path.join(DATA, "malformed_line3.jsonl"), "qa-jsonl")
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_invalid_json_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"prompt": "a", "answer": "b", "equivalents": ["c"]}\n{oops\n')
    with pytest.raises(ParseError) as exc:
        tasks.load_dataset(path, "qa-jsonl")
    assert exc.value.line == 2


def test_fact_checking_labels():
    task, vocab = tasks.load_dataset(os.path.join(DATA, "claims.jsonl"), "fc-jsonl")
    assert [vocab.detokenize(e.answer) for e in task.edits] == ["False", "True"]
    with pytest.raises(ParseError):
        tasks.load_dataset(os.path.join(DATA, "three_facts.jsonl"), "fc-jsonl")


def test_unknown_format():
    with pytest.raises(ValueError):
        tasks.load_dataset(os.path.join(DATA, "three_facts.jsonl"), "csv")


def test_supplied_vocabulary_maps_unknown(tmp_path):
    vocab = tasks.Vocabulary(["capital", "of", "?"])
    task, _ = tasks.load_dataset(os.path.join(DATA, "three_facts.jsonl"), "qa-jsonl", vocab)
    assert task.edits[0].prompt == (2, 3, 1, 4)


def test_colliding_unrelated_dropped(tmp_path):
    rec = {"prompt": "p q", "answer": "a", "equivalents": ["q p"], "unrelated": [{"prompt": "q p", "answer": "b"}]}
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    task, _ = tasks.load_dataset(path, "qa-jsonl")
    assert task.unrelated_pool == [] and task.meta["unrelated_dropped"] == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abcxyz?!", min_size=1, max_size=5), min_size=1, max_size=6))
def test_word_tokenization_roundtrip(words):
    text = " ".join(words)
    vocab = tasks.Vocabulary.build([text])
    assert vocab.detokenize(vocab.tokenize(text)) == text


@settings(max_examples=50, deadline=None)
@given(st.text(alphabet="abc xyz?", min_size=1, max_size=20))
def test_char_tokenization_roundtrip(text):
    vocab = tasks.Vocabulary.build([text], mode="char")
    assert vocab.detokenize(vocab.tokenize(text)) == text


def test_vocabulary_file_roundtrip(tmp_path):
    vocab = tasks.Vocabulary.build(["a b c"])
    vocab.save(tmp_path / "v.txt")
    assert tasks.Vocabulary.load(tmp_path / "v.txt").tokens == vocab.tokens


# -------------------------------------------------------------------- sampling

def test_full_sample_is_permutation():
    task = _task(0)
    edit, _, _ = tasks.sample_edit_batch(task, len(task), 3)
    assert sorted(edit.prompts) == sorted(t.prompt for t in task.edits)


def test_same_seed_same_batches():
    task = _task(0)
    assert tasks.sample_edit_batch(task, 8, [1, 2]) == tasks.sample_edit_batch(task, 8, [1, 2])


def test_alignment_audit():
    task = _task(0)
    by_prompt = {e.prompt: i for i, e in enumerate(task.edits)}
    for seed in range(10):
        edit, equiv, unrel = tasks.sample_edit_batch(task, 12, seed)
        assert len(edit) == len(equiv) == len(unrel) == 12
        for i in range(12):
            eq = task.equivalents[by_prompt[edit.prompts[i]]]
            assert (equiv.prompts[i], equiv.answers[i]) in {(t.prompt, t.answer) for t in eq}


def test_sampling_respects_split_and_size():
    task = _task(0)
    edit, _, _ = tasks.sample_edit_batch(task, 5, 0, split="val")
    val = {task.edits[i].prompt for i in task.indices("val")}
    assert set(edit.prompts) <= val
    with pytest.raises(ValueError):
        tasks.sample_edit_batch(task, 11, 0, split="val")
    with pytest.raises(ValueError):
        tasks.sample_edit_batch(task, 0, 0)


def test_eval_split_contains_every_equivalent():
    task = _task(0)
    sample, split = tasks.eval_split(task, 6, 4)
    assert len(split.equivalents) == sum(len(task.equivalents[i]) for i in sample.edits)
    assert len(split.unrelated) == len(task.unrelated_pool)


def test_base_model_fits_pretrain():
    task = _task(0, num_facts=16, num_unrelated=16, flip_labels=True)
    model = tasks.fit_base_model_for_task(task, width=16, hidden=32, n_blocks=2, epochs=40, last_k=2)
    batch = lm.Batch.from_tuples(task.pretrain)
    pred = model.predict(batch)
    acc = np.mean([tuple(p) == a for p, a in zip(pred, batch.answers)])
    assert acc > 0.9
