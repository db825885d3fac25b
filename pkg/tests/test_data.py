import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitrans.data import (LABEL_PRESETS, PARITY_TEXT, Dialog, Utterance, corpus_stats, encode_dialog, format_stats,
                          load_corpus, overfit_corpus, read_dialogs, save_corpus, speaker_parity_corpus,
                          write_dialogs)
from hitrans.errors import ParseError, SchemaError
from hitrans.tokenizer import TokenizerConfig, build_vocab


def write(path, dialogs):
    path.write_text("\n".join(json.dumps(d) for d in dialogs) + "\n", encoding="utf-8")
    return path


def dlg(*utts):
    return {"utterances": [dict(zip(("text", "speaker", "label"), u)) for u in utts]}


def test_out_of_set_labels_are_masked(tmp_path):
    p = write(tmp_path / "train.jsonl", [dlg(("hi", "a", "joy"), ("wow", "b", "surprise"))])
    c = load_corpus({"train": p}, "friends4")
    d = c.split("train")[0]
    assert c.golds(d) == [1, -1]
    assert d.texts == ["hi", "wow"] and d.speakers == ["a", "b"]


def test_drop_out_of_set_removes_utterances(tmp_path):
    p = write(tmp_path / "train.jsonl", [dlg(("hi", "a", "joy"), ("wow", "b", "surprise")),
                                         dlg(("x", "a", "fear"))])
    c = load_corpus({"train": p}, "friends4", drop_out_of_set=True)
    assert [d.texts for d in c.split("train")] == [["hi"]]


def test_all_in_set_means_nothing_masked(tmp_path):
    p = write(tmp_path / "train.jsonl", [dlg(("a", "x", "joy"), ("b", "y", "anger"))])
    assert corpus_stats(load_corpus({"train": p}, "friends4"))["masked"] == 0


def test_s_max_spans_all_splits(tmp_path):
    three = dlg(*[("t", s, "joy") for s in "abc"])
    five = dlg(*[("t", s, "joy") for s in "abcde"])
    c = load_corpus({"train": write(tmp_path / "tr.jsonl", [three]), "test": write(tmp_path / "te.jsonl", [five])},
                    "friends4")
    assert c.s_max == 5


def test_parse_and_schema_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text(json.dumps(dlg(("a", "x", "joy"))) + "\n{oops\n", encoding="utf-8")
    with pytest.raises(ParseError, match=":2:"):
        read_dialogs(p)
    p.write_text('{"utterances": []}\n', encoding="utf-8")
    with pytest.raises(SchemaError, match=":1:"):
        read_dialogs(p)
    with pytest.raises(SchemaError):
        Dialog((Utterance("t", ""),))


def test_stats_counts_and_partition(tmp_path):
    p = write(tmp_path / "train.jsonl", [dlg(("a", "x", "joy"), ("b", "y", "fear"), ("c", "x")),
                                         dlg(("d", "x", "anger"), ("e", "y", "joy"))])
    stats = corpus_stats(load_corpus({"train": p}, "friends4"))
    assert stats["splits"]["train"]["cell"] == "2(5)"
    assert sum(stats["classes"].values()) + stats["masked"] == stats["utterances"] == 5
    assert "2(5)" in format_stats(stats)


def test_label_presets_and_unknown_names():
    assert LABEL_PRESETS["friends4"] == ("anger", "joy", "sadness", "neutral")
    assert LABEL_PRESETS["emorynlp7"] == ("neutral", "joyful", "peaceful", "powerful", "scared", "mad", "sad")
    with pytest.raises(SchemaError):
        load_corpus({}, "nope")
    with pytest.raises(SchemaError):
        load_corpus({}, ["a", "a"])


texts = st.text(min_size=0, max_size=12)
names = st.text(min_size=1, max_size=6)
labels = st.one_of(st.none(), st.sampled_from(["joy", "anger", "surprise"]))
dialogs = st.lists(st.builds(Utterance, texts, names, labels), min_size=1, max_size=5).map(
    lambda u: Dialog(tuple(u)))


@settings(max_examples=40, deadline=None)
@given(st.lists(dialogs, min_size=1, max_size=4))
def test_serialise_round_trip(tmp_path_factory, ds):
    path = tmp_path_factory.mktemp("rt") / "d.jsonl"
    write_dialogs(ds, path)
    assert read_dialogs(path) == ds


def test_corpus_save_load_round_trip(tmp_path):
    c = overfit_corpus(3, n_train=4, n_val=2, n_test=2)
    paths = save_corpus(c, tmp_path)
    again = load_corpus(paths, c.label_set)
    assert again.splits == c.splits and again.s_max == c.s_max


def test_overfit_corpus_shape():
    c = overfit_corpus(0)
    train = c.split("train")
    assert len(train) == 32 and all(4 <= len(d) <= 8 for d in train)
    vocab = build_vocab([u.text for d in train for u in d.utterances], 200)
    assert 50 <= len(vocab) <= 70
    assert overfit_corpus(0).splits == c.splits


def test_parity_corpus_labels_follow_speaker_changes():
    c = speaker_parity_corpus(1)
    assert c.label_set == LABEL_PRESETS["parity2"]
    for d in c.split("train"):
        assert set(d.texts) == {PARITY_TEXT}
        assert d.utterances[0].label is None
        for prev, cur in zip(d.utterances, d.utterances[1:]):
            assert cur.label == ("same_speaker" if cur.speaker == prev.speaker else "new_speaker")


def test_encode_dialog_keeps_order_and_speakers():
    d = Dialog((Utterance("I agree.", "a"), Utterance("", "b")))
    vocab = build_vocab(["i agree ."], 20)
    enc = encode_dialog(d, vocab, TokenizerConfig(max_len=8))
    assert len(enc) == 2 and enc.speakers == ["a", "b"]
    assert len(enc.ids[1]) == 2
