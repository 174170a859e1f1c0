import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from emhrnn.data_io import (
    CorpusError,
    RawCorpus,
    batch_by_length,
    encode,
    load_embeddings,
    read_text_corpus,
    save_embeddings,
    split_sentences_tokenize,
    write_jsonl,
)
from emhrnn.model import Document


@pytest.fixture
def emb_file(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("good 1 0 0 0\nbad 0 1 0 0\n. 0 0 1 0.5\n", encoding="utf-8")
    return path


def test_vocab_has_file_tokens_plus_unk(emb_file):
    vocab = load_embeddings(emb_file, 4)
    assert len(vocab) == 4
    assert vocab.lookup("missing") == vocab.unk_id
    assert_array_equal(vocab.vector("missing"), np.zeros(4))
    assert_array_equal(vocab.vector("."), [0, 0, 1, 0.5])


def test_embedding_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "e.txt"
    path.write_text("".join(f"t{i} " + " ".join(repr(float(x)) for x in rng.standard_normal(5)) + "\n"
                            for i in range(20)))
    vocab = load_embeddings(path, 5)
    save_embeddings(tmp_path / "f.txt", vocab)
    again = load_embeddings(tmp_path / "f.txt", 5)
    assert np.max(np.abs(again.vectors - vocab.vectors)) <= 1e-15
    assert again.index == vocab.index


def test_a_few_malformed_lines_are_skipped(tmp_path):
    lines = [f"w{i} 1 2 3" for i in range(200)] + ["broken 1 2"]
    path = tmp_path / "e.txt"
    path.write_text("\n".join(lines))
    vocab = load_embeddings(path, 3)
    assert len(vocab) == 201
    assert vocab.skipped == 1


def test_too_many_malformed_lines_is_an_error(tmp_path):
    path = tmp_path / "e.txt"
    path.write_text("a 1 2 3\nb 1 2\nc x y z\n")
    with pytest.raises(CorpusError, match="2 of 3"):
        load_embeddings(path, 3)


def test_unreadable_embedding_file(tmp_path):
    with pytest.raises(CorpusError):
        load_embeddings(tmp_path / "none.txt", 3)


@pytest.mark.parametrize("text,want", [
    ("Good. Bad!", [["good", "."], ["bad", "!"]]),
    ("no punct here", [["no", "punct", "here"]]),
    ("A.B", [["a", "."], ["b"]]),
    ("Wait... what?", [["wait", "."], ["."], ["."], ["what", "?"]]),
    ("one; two.", [["one", ";", "two", "."]]),
])
def test_tokenizer(text, want):
    assert split_sentences_tokenize(text) == want


def test_tokenizer_rejects_empty_text():
    with pytest.raises(CorpusError):
        split_sentences_tokenize("   ")


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcXYZ .!?,;'", min_size=1, max_size=40))
def test_tokenizer_is_idempotent_on_its_output(text):
    try:
        sents = split_sentences_tokenize(text)
    except CorpusError:
        return
    flat = [t for s in sents for t in s]
    again = split_sentences_tokenize(" ".join(flat))
    assert [t for s in again for t in s] == flat


def test_encode_known_tokens_are_vocab_rows(emb_file):
    vocab = load_embeddings(emb_file, 4)
    doc = encode("Good bad", vocab, label=2)
    assert doc.label == 2
    assert_array_equal(doc.sentences[0], vocab.vectors[[vocab.index["good"], vocab.index["bad"]]])


def test_encode_unknown_text_keeps_structure(emb_file):
    vocab = load_embeddings(emb_file, 4)
    doc = encode("xx yy. zz", vocab)
    assert doc.sentence_lengths == [3, 1]
    assert_array_equal(doc.sentences[1], np.zeros((1, 4)))


def test_encode_is_case_insensitive(emb_file):
    vocab = load_embeddings(emb_file, 4)
    assert_array_equal(encode("GOOD", vocab).sentences[0], encode("good", vocab).sentences[0])


def test_raw_corpus_label_range():
    with pytest.raises(CorpusError):
        RawCorpus([{"text": "a", "label": 0}], 5)
    with pytest.raises(CorpusError):
        RawCorpus([{"text": "a", "label": 6}], 5)
    assert RawCorpus([{"text": "a", "label": 3}]).class_count == 3


def test_text_corpus_file(tmp_path, emb_file):
    write_jsonl(tmp_path / "c.jsonl", [{"text": "Good.", "label": 1}, {"text": "bad", "label": 2}])
    raw = read_text_corpus(tmp_path / "c.jsonl")
    docs = raw.documents(load_embeddings(emb_file, 4))
    assert [d.label for d in docs] == [0, 1]


def docs_of_lengths(lengths):
    return [Document([np.zeros((n, 1))]) for n in lengths]


def test_batches_of_64_64_2():
    batches = batch_by_length(docs_of_lengths(range(1, 131)), 64)
    assert [len(b) for b in batches] == [64, 64, 2]


def test_stable_sort_keeps_input_order_for_ties():
    batches = batch_by_length(docs_of_lengths([3, 1, 3, 1, 3]), 2)
    assert batches == [[1, 3], [0, 2], [4]]


def test_shuffled_batch_order_is_seeded():
    docs = docs_of_lengths(np.random.default_rng(0).integers(1, 50, 300))
    a = batch_by_length(docs, 16, np.random.default_rng(5))
    b = batch_by_length(docs, 16, np.random.default_rng(5))
    assert a == b
    assert sorted(map(tuple, a)) == sorted(map(tuple, batch_by_length(docs, 16)))


def test_length_batches_are_tighter_than_random_batches():
    rng = np.random.default_rng(1)
    lengths = rng.integers(1, 200, 640)
    docs = docs_of_lengths(lengths)

    def worst_spread(batches):
        return max(np.ptp(lengths[b]) for b in batches)

    sorted_spread = worst_spread(batch_by_length(docs, 64))
    for _ in range(20):
        perm = rng.permutation(640)
        random_batches = [perm[i: i + 64] for i in range(0, 640, 64)]
        assert sorted_spread <= worst_spread(random_batches)


def test_batch_size_must_be_positive():
    with pytest.raises(ValueError):
        batch_by_length([], 0)
