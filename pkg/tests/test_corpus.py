import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from longclin.corpus import (TaskExample, ValidationError, gen_synthetic, load_dataset,
                             preprocess_note, save_dataset, window_examples)
from longclin.corpus.io import ParseError, load_split, read_manifest, write_manifest
from longclin.corpus.synthetic import GenerationError
from longclin.corpus.windows import group_by_parent
from longclin.tokenizer import CLS, SEP, train_bpe


@pytest.fixture(scope="module")
def byte_tok():
    # no merges: one token per byte, which makes token counts easy to control
    return train_bpe(["abcdef"], 300)


@pytest.fixture(scope="module")
def note_tok():
    notes = [preprocess_note(e.text) for e in gen_synthetic("mlm-text", 80, seed=1)]
    qa = gen_synthetic("qa", 10, seed=1)
    return train_bpe(notes + [e.context for e in qa], 900)


class TestPreprocess:
    @pytest.mark.parametrize("raw,clean", [
        ("[**Patient Name**] was  SEEN.", "was seen."),
        ("BP 120/80\t\n stable", "bp 120/80 stable"),
        ("", ""),
        ("T 98.6°F", "t 98.6 f"),
        ("[**2101-1-1**][**Hospital 12**]", ""),
        ("[*[**a**]*b**] x", "x"),
    ])
    def test_examples(self, raw, clean):
        assert preprocess_note(raw) == clean

    def test_multiline_placeholder(self):
        assert preprocess_note("a [**first\nlast**] b") == "a b"

    @settings(max_examples=300, deadline=None)
    @given(st.text(alphabet=st.sampled_from(list("ab [*]\t\nXé.")), max_size=60))
    def test_idempotent(self, raw):
        once = preprocess_note(raw)
        assert preprocess_note(once) == once

    @settings(max_examples=200, deadline=None)
    @given(st.text(max_size=80))
    def test_output_alphabet(self, raw):
        out = preprocess_note(raw)
        assert out == out.strip() and "  " not in out
        assert all(c.isascii() and (c.isalnum() or c == " " or not c.isspace()) for c in out)
        assert out == out.lower()


class TestTaskExample:
    def test_qa_span_checked(self):
        with pytest.raises(ValidationError, match="q1"):
            TaskExample("qa", id="q1", context="abc", answer_start=1, answer_end=2,
                        answer_text="c").validate()
        with pytest.raises(ValidationError):
            TaskExample("qa", context="abc", answer_start=2, answer_end=5,
                        answer_text="c").validate()

    def test_ner_tags(self):
        with pytest.raises(ValidationError):
            TaskExample("ner", tokens=["a", "b"], tags=["O"]).validate()
        with pytest.raises(ValidationError):
            TaskExample("ner", tokens=["a"], tags=["X-1"]).validate()
        TaskExample("ner", tokens=["a", "b"], tags=["B-DRUG", "I-DRUG"]).validate()

    def test_pair_label(self):
        with pytest.raises(ValidationError):
            TaskExample("pair-cls", premise="a", hypothesis="b", label="maybe").validate()

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            TaskExample("summary").validate()


class TestSynthetic:
    def test_deterministic(self):
        assert gen_synthetic("ner", 10, seed=7) == gen_synthetic("ner", 10, seed=7)
        assert gen_synthetic("ner", 10, seed=7) != gen_synthetic("ner", 10, seed=8)

    @pytest.mark.parametrize("kind", ["mlm-text", "qa", "ner", "doc-cls", "pair-cls"])
    def test_invariants(self, kind):
        for ex in gen_synthetic(kind, 30, seed=2):
            assert ex.validate() is ex

    def test_errors(self):
        with pytest.raises(GenerationError):
            gen_synthetic("ner", 0)
        with pytest.raises(GenerationError):
            gen_synthetic("poems", 3)
        with pytest.raises(GenerationError):
            gen_synthetic("qa", 3, profile="legal")

    def test_long_range_answers_past_512_tokens(self, note_tok):
        examples = gen_synthetic("qa", 40, seed=4, long_range=True)
        windows = window_examples(examples, note_tok, 4096)
        for ex, win in zip(examples, windows):
            assert win.answerable
            question_len = len(note_tok.encode_words(ex.question).ids)
            assert win.start - question_len - 2 > 512

    def test_ner_iob_legal(self):
        for ex in gen_synthetic("ner", 20, seed=5):
            for prev, tag in zip(["O"] + ex.tags, ex.tags):
                if tag.startswith("I-"):
                    assert prev[2:] == tag[2:]

    def test_sample_fraction(self):
        full = gen_synthetic("qa", 20, seed=6)
        part = gen_synthetic("qa", 20, seed=6, sample_fraction=0.25)
        assert len(part) == 5
        assert all(p in full for p in part)

    def test_multilabel_doc_cls(self):
        for ex in gen_synthetic("doc-cls", 20, seed=0, num_classes=4, multilabel=True):
            assert all(0 <= c < 4 for c in ex.labels)


class TestIO:
    def test_two_sentence_iob(self, tmp_path):
        path = tmp_path / "ner.tsv"
        path.write_text("aspirin\tB-DRUG\ngiven\tO\n\nfever\tB-PROBLEM\n")
        examples = load_dataset(path, "iob2col")
        assert len(examples) == 2
        assert examples[0].tokens == ["aspirin", "given"]
        assert examples[1].tags == ["B-PROBLEM"]

    def test_iob_parse_error_line(self, tmp_path):
        path = tmp_path / "ner.tsv"
        path.write_text("a\tO\nbroken line\n")
        with pytest.raises(ParseError) as info:
            load_dataset(path, "iob2col")
        assert info.value.line == 2

    def test_iob_bad_tag_is_validation_error(self, tmp_path):
        path = tmp_path / "ner.tsv"
        path.write_text("a\tDRUG\n")
        with pytest.raises(ValidationError):
            load_dataset(path, "iob2col")

    def test_qa_mismatch(self, tmp_path):
        path = tmp_path / "qa.json"
        path.write_text(json.dumps([{"id": "r0", "context": "take aspirin", "question": "what?",
                                     "answers": [{"text": "tylenol", "start": 5}]}]))
        with pytest.raises(ValidationError, match="r0"):
            load_dataset(path, "qa-json")

    def test_qa_answer_end_from_text(self, tmp_path):
        path = tmp_path / "qa.json"
        path.write_text(json.dumps([{"context": "take aspirin", "question": "what?",
                                     "answers": [{"text": "aspirin", "start": 5}]}]))
        (ex,) = load_dataset(path, "qa-json")
        assert (ex.answer_start, ex.answer_end) == (5, 12)

    def test_json_syntax_error(self, tmp_path):
        path = tmp_path / "cls.json"
        path.write_text('[{"text": "a",\n "labels": }]')
        with pytest.raises(ParseError) as info:
            load_dataset(path, "cls-json")
        assert info.value.line == 2

    @pytest.mark.parametrize("fmt", ["iob2col", "qa-json", "cls-json"])
    def test_empty_file(self, tmp_path, fmt):
        path = tmp_path / "empty"
        path.write_text("")
        assert load_dataset(path, fmt) == []

    def test_unknown_format(self, tmp_path):
        with pytest.raises(ValueError):
            load_dataset(tmp_path / "x", "xml")

    @pytest.mark.parametrize("kind,fmt", [("ner", "iob2col"), ("qa", "qa-json"),
                                          ("doc-cls", "cls-json"), ("pair-cls", "cls-json"),
                                          ("mlm-text", "text")])
    def test_round_trip(self, tmp_path, kind, fmt):
        examples = gen_synthetic(kind, 6, seed=3)
        path = tmp_path / "data"
        assert save_dataset(examples, path) == fmt
        again = load_dataset(path, fmt)
        assert len(again) == len(examples)
        for a, b in zip(examples, again):
            if kind == "ner":
                assert (a.tokens, a.tags) == (b.tokens, b.tags)
            elif kind == "qa":
                assert (a.context, a.answer_start, a.answer_text) == (
                    b.context, b.answer_start, b.answer_text)
            elif kind == "doc-cls":
                assert (a.text, a.labels) == (b.text, b.labels)
            elif kind == "pair-cls":
                assert (a.premise, a.hypothesis, a.label) == (b.premise, b.hypothesis, b.label)
            else:
                assert a.text == b.text

    def test_manifest(self, tmp_path):
        examples = gen_synthetic("doc-cls", 4, seed=0)
        save_dataset(examples, tmp_path / "train.json")
        write_manifest(tmp_path / "dataset.json", {"train": "train.json"}, "cls-json", "doc-cls")
        assert read_manifest(tmp_path / "dataset.json")["kind"] == "doc-cls"
        assert [e.text for e in load_split(tmp_path / "dataset.json", "train")] == [
            e.text for e in examples]


def doc(n_bytes, ex_id="d0"):
    return TaskExample("doc-cls", id=ex_id, text="a" * n_bytes, labels=(1,))


class TestWindows:
    def test_truncate_long_keeps_whole_short_doc(self, byte_tok):
        (win,) = window_examples([doc(1000)], byte_tok, 3072)
        assert len(win) == 1002
        assert win.input_ids[0] == CLS and win.input_ids[-1] == SEP

    def test_truncate_long_cuts(self, byte_tok):
        (win,) = window_examples([doc(1000)], byte_tok, 384)
        assert len(win) == 384

    def test_segment_short_tiles(self, byte_tok):
        wins = window_examples([doc(1000)], byte_tok, 384, "segment-short")
        assert len(wins) == 3 == -(-1000 // 382)
        assert [w.snippet_index for w in wins] == [0, 1, 2]
        assert all(len(w) <= 384 and w.parent_id == "d0" for w in wins)
        body = np.concatenate([w.input_ids[1:-1] for w in wins])
        full = byte_tok.encode("a" * 1000, add_specials=False).ids
        np.testing.assert_array_equal(body, full)

    def test_segment_short_truncates_first(self, byte_tok):
        wins = window_examples([doc(5000)], byte_tok, 384, "segment-short")
        assert sum(len(w) - 2 for w in wins) == 4094

    def test_group_by_parent(self, byte_tok):
        wins = window_examples([doc(500, "x"), doc(10, "y")], byte_tok, 100, "segment-short")
        groups = group_by_parent(wins)
        assert [len(g) for g in groups] == [6, 1]
        assert groups[1][0].parent_id == "y"

    def test_pair_single_separator(self, note_tok):
        ex = TaskExample("pair-cls", premise="patient has fever .",
                         hypothesis="patient is febrile .", label="entailment")
        (win,) = window_examples([ex], note_tok, 128)
        ids = list(win.input_ids)
        assert ids[0] == CLS and ids[-1] == SEP
        assert ids.count(SEP) == 2
        mid = ids.index(SEP)
        assert note_tok.decode(ids[1:mid]) == ex.premise
        assert note_tok.decode(ids[mid + 1:-1]) == " " + ex.hypothesis or \
            note_tok.decode(ids[mid + 1:-1]) == ex.hypothesis
        assert win.labels == (0,)

    def test_min_length_and_mode(self, byte_tok):
        with pytest.raises(ValueError):
            window_examples([doc(3)], byte_tok, 7)
        with pytest.raises(ValueError):
            window_examples([doc(3)], byte_tok, 64, "overlap")

    def test_qa_alignment_recovers_answer(self, note_tok):
        examples = gen_synthetic("qa", 30, seed=9)
        for ex, win in zip(examples, window_examples(examples, note_tok, 4096)):
            assert win.answerable
            s, e = win.char_spans[win.start, 0], win.char_spans[win.end, 1]
            assert ex.answer_text in ex.context[s:e]
            assert ex.context[s:e] == ex.answer_text

    def test_qa_question_tokens_global(self, note_tok):
        ex = gen_synthetic("qa", 1, seed=0)[0]
        (win,) = window_examples([ex], note_tok, 4096)
        n_q = len(note_tok.encode_words(ex.question).ids)
        assert win.global_positions == tuple(range(n_q + 1))

    def test_qa_answer_lost_to_truncation(self, note_tok):
        examples = gen_synthetic("qa", 5, seed=1, long_range=True)
        for win in window_examples(examples, note_tok, 384):
            assert not win.answerable and (win.start, win.end) == (0, 0)
        for wins in group_by_parent(window_examples(examples, note_tok, 384, "segment-short")):
            assert sum(w.answerable for w in wins) == 1

    def test_ner_first_subtoken_labels(self, note_tok):
        examples = gen_synthetic("ner", 4, seed=2)
        tags = sorted({t for e in examples for t in e.tags})
        tag_map = {t: i for i, t in enumerate(tags)}
        for ex, win in zip(examples, window_examples(examples, note_tok, 4096, tag_map=tag_map)):
            first = win.word_index >= 0
            np.testing.assert_array_equal(win.word_index[first], np.arange(len(ex.tokens)))
            assert [tags[i] for i in win.token_labels[first]] == ex.tags
            assert (win.token_labels[~first] == -100).all()
