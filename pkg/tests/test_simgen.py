import numpy as np
import pytest
from numpy.testing import assert_array_equal

from emhrnn.model import ModelParams
from emhrnn.simgen import (
    SyntheticCorpus,
    generate_corpus,
    make_teacher,
    read_corpus,
    recovery_accuracy,
    recovery_counts,
    teacher_label,
    teacher_labels,
    write_corpus,
)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(300, 40, data_seed=3, teacher_seed=3)


def test_document_shape_and_forced_bits(small):
    train, test = small
    assert (len(train), len(test)) == (300, 40)
    eos = train.docs[0].sentences[0][4]
    for c in (train, test):
        for d, z in zip(c.docs, c.true_z):
            assert d.sentence_lengths == [5, 5]
            assert d.d_emb == 50
            assert_array_equal(d.sentences[0][4], eos)
            assert_array_equal(d.sentences[1][4], eos)
            assert z[4] == 1 and z[9] == 1


def test_indicator_count_per_document(small):
    assert sum(len(z) for z in small[0].true_z) == 3000


def test_generation_is_deterministic(small):
    again, _ = generate_corpus(300, 40, data_seed=3, teacher_seed=3)
    for a, b in zip(small[0].docs, again.docs):
        for s, t in zip(a.sentences, b.sentences):
            assert_array_equal(s, t)
        assert a.label == b.label


def test_train_and_test_use_disjoint_streams(small):
    train, test = small
    assert not np.array_equal(train.docs[0].sentences[0], test.docs[0].sentences[0])


def test_prefix_of_a_larger_corpus_is_identical(small):
    big, _ = generate_corpus(301, 1, data_seed=3, teacher_seed=3)
    assert_array_equal(big.docs[299].sentences[1], small[0].docs[299].sentences[1])
    assert_array_equal(big.true_z[299], small[0].true_z[299])


def test_teacher_is_deterministic_and_uses_true_z(small):
    train, _ = small
    teacher = make_teacher(train.teacher_seed)
    d, z = train.docs[0], train.true_z[0]
    assert teacher_label(d, z, teacher) == teacher_label(d, z, teacher) == d.label + 1
    assert_array_equal(teacher_labels(teacher, train.docs, train.true_z), train.labels)


def test_every_class_occurs(small):
    counts = np.bincount(small[0].labels, minlength=6)[1:]
    assert np.all(counts / 300 >= 0.02)


def test_cued_indicators_follow_the_cue():
    train, _ = generate_corpus(50, 5, data_seed=1, teacher_seed=1, indicator_mode="cued")
    # tokens on the same side of the cue direction share their bit
    X = np.vstack([np.vstack(d.sentences) for d in train.docs])
    z = np.concatenate(train.true_z)
    keep = ~np.all(X == train.docs[0].sentences[0][4], axis=1)
    w, *_ = np.linalg.lstsq(np.c_[X[keep], np.ones(keep.sum())], 2.0 * z[keep] - 1, rcond=None)
    pred = (np.c_[X[keep], np.ones(keep.sum())] @ w > 0).astype(int)
    assert np.mean(pred == z[keep]) > 0.95


def test_recovery_counts_extremes(small):
    train, _ = small
    perfect = recovery_counts(train.true_z, train.true_z)
    assert perfect["correct"] == perfect["total"]
    flipped = recovery_counts([1 - z for z in train.true_z], train.true_z)
    assert flipped["correct"] == 0


def test_zero_on_free_positions_recovers_about_six_tenths():
    # 20% forced positions right, the Bernoulli(0.5) rest half right
    train, _ = generate_corpus(2000, 1, data_seed=11, teacher_seed=11)
    static_only = np.array([0, 0, 0, 0, 1] * 2)
    c = recovery_counts([static_only] * len(train), train.true_z)
    assert abs(c["correct"] / c["total"] - 0.6) <= 0.01
    # all zeros also misses every forced position
    c = recovery_counts([np.zeros(10, dtype=int)] * len(train), train.true_z)
    assert abs(c["correct"] / c["total"] - 0.4) <= 0.01
    assert c["forced_correct"] == 0


def test_recovery_accuracy_of_a_model(small):
    train, _ = small
    params = ModelParams.init(0, d_emb=50, d_h=4, d_a=4, n_classes=5)
    params.W_pi.value[:] = 0.0
    params.b_pi.value[:] = 100.0  # always predicts a boundary
    assert recovery_accuracy(params, train, forced=True) == 1.0
    want = np.mean(np.concatenate(train.true_z))
    assert abs(recovery_accuracy(params, train) - want) < 1e-12


def test_corpus_file_round_trip_is_exact(tmp_path, small):
    _, test = small
    write_corpus(tmp_path / "t.jsonl", test)
    back = read_corpus(tmp_path / "t.jsonl")
    for a, b, za, zb in zip(test.docs, back.docs, test.true_z, back.true_z):
        for s, t in zip(a.sentences, b.sentences):
            assert_array_equal(s, t)
        assert_array_equal(za, zb)
        assert a.label == b.label
    write_corpus(tmp_path / "u.jsonl", back)
    assert (tmp_path / "t.jsonl").read_bytes() == (tmp_path / "u.jsonl").read_bytes()


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_corpus(0, 1)
    with pytest.raises(ValueError):
        generate_corpus(1, 1, indicator_mode="sticky")
    with pytest.raises(ValueError):
        SyntheticCorpus([1, 2], [np.zeros(10)], 0, 0)
