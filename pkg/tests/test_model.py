import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from emhrnn import autodiff as ad
from emhrnn.autodiff import ShapeError
from emhrnn.model import (
    Document,
    ModelParams,
    Plan,
    as_assignment,
    complete_log_likelihood,
    evaluate,
    forward_given_z,
    impute,
    indicator_probs,
    phrase_lengths,
    predict,
    predict_batch,
    segments_from,
)

import reference as R
from conftest import random_doc, small_params


def one_sentence(n, d=2):
    return Document([np.zeros((n, d))])


def test_segments_close_at_each_active_bit():
    assert segments_from(one_sentence(5), [0, 0, 1, 0, 1]) == [[(0, 3), (3, 5)]]
    assert phrase_lengths(one_sentence(5), [0, 0, 1, 0, 1]) == [3, 2]


def test_sentence_end_closes_even_when_its_bit_is_zero():
    doc = Document([np.zeros((3, 2)), np.zeros((2, 2))])
    assert segments_from(doc, [0, 0, 0, 0, 0]) == [[(0, 3)], [(3, 5)]]
    assert segments_from(doc, [0, 1, 1, 1, 0]) == [[(0, 2), (2, 3)], [(3, 4), (4, 5)]]


def test_all_ones_gives_unit_phrases():
    assert phrase_lengths(one_sentence(10), np.ones(10)) == [1] * 10


@pytest.mark.parametrize("z", [[0, 1], [0, 0, 2], [[0, 1, 0]]])
def test_bad_assignments_are_rejected(z):
    with pytest.raises(ValueError):
        as_assignment(z, 3)


def test_document_validation():
    with pytest.raises(ValueError):
        Document([])
    with pytest.raises(ValueError):
        Document([np.zeros((0, 3))])
    with pytest.raises(ShapeError):
        Document([np.zeros((2, 3)), np.zeros((2, 4))])


def test_complete_log_likelihood_frozen_value():
    # value from the loop reference in tests/reference.py, frozen
    rng = np.random.default_rng(7)
    doc = random_doc(rng, (3, 4), 6, 3)
    got = complete_log_likelihood(small_params(7), doc, [1, 0, 0, 0, 1, 0, 1]).item()
    assert_allclose(got, -5.855282684770147, rtol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_complete_log_likelihood_matches_reference(lengths, seed):
    rng = np.random.default_rng(seed)
    doc = random_doc(rng, lengths)
    params = small_params(seed % 1000)
    z = rng.integers(0, 2, doc.n)
    want = R.log_joint(params.state_dict(), doc.sentences, z, doc.label)
    assert_allclose(complete_log_likelihood(params, doc, z).item(), want, rtol=1e-11)


def test_batched_engine_matches_single_configuration_calls(rng):
    params = small_params(3)
    docs = [random_doc(rng, (3, 2)), random_doc(rng, (1, 4, 2)), random_doc(rng, (5,))]
    configs = [rng.integers(0, 2, (6, d.n)) for d in docs]
    with ad.no_grad():
        ev = evaluate(params, Plan(docs, configs))
    for d, Z, lj in zip(docs, configs, ev.log_joint()):
        want = [complete_log_likelihood(params, d, z).item() for z in Z]
        assert_allclose(lj, want, rtol=1e-12)


def test_plan_shares_segmentations_and_combinations(rng):
    doc = random_doc(rng, (5, 5))
    codes = np.arange(1024)
    Z = ((codes[:, None] >> (9 - np.arange(10))) & 1).astype(np.int8)
    plan = Plan([doc], [Z])
    # final bits never change the segmentation: 2^4 per sentence, 2^8 per doc
    assert len(plan.seg_ranges) == 32
    assert len(plan.combos) == 256
    assert plan.n_configs == 1024


def test_indicator_probs_match_reference_and_ignore_z(rng):
    params = small_params(1)
    doc = random_doc(rng, (3, 4))
    _, want = R.forward(params.state_dict(), doc.sentences, [0] * doc.n)
    assert_allclose(indicator_probs(params, doc), want, rtol=1e-12)
    _, tr = forward_given_z(params, doc, np.ones(doc.n, dtype=int))
    assert_allclose(tr.pi, want, rtol=1e-12)


def test_forward_given_z_returns_distribution_and_trace(rng):
    params = small_params(2)
    doc = random_doc(rng, (5, 3))
    z = [0, 0, 1, 0, 1, 0, 1, 0]
    probs, tr = forward_given_z(params, doc, z)
    want, _ = R.forward(params.state_dict(), doc.sentences, z)
    assert_allclose(probs.value, want, rtol=1e-12)
    assert tr.segments == segments_from(doc, z)
    assert [len(b) for b in tr.beta] == [2, 2]
    for sent_alpha, segs in zip(tr.alpha, tr.segments):
        for a, (s, e) in zip(sent_alpha, segs):
            assert len(a) == e - s
            assert_allclose(a.sum(), 1.0, rtol=1e-14)
    assert_allclose(tr.gamma.sum(), 1.0, rtol=1e-14)


def test_predict_uses_the_thresholded_indicators(rng):
    params = small_params(4)
    doc = random_doc(rng, (4, 4))
    label, z, tr = predict(params, doc)
    assert_array_equal(z, impute(indicator_probs(params, doc)))
    probs, _ = forward_given_z(params, doc, z)
    assert label == int(np.argmax(probs.value))
    labels, zs, _ = predict_batch(params, [doc, doc])
    assert list(labels) == [label, label]


def test_impute_ties_go_to_zero():
    assert_array_equal(impute([0.5, 0.5000001, 0.4999999, 0.9]), [0, 1, 0, 1])


def test_state_dict_round_trip_is_exact():
    p = small_params(5)
    q = ModelParams.from_state_dict(p.state_dict())
    for k, v in p.state_dict().items():
        assert_array_equal(q.state_dict()[k], v)
    assert len(p.named_tensors()) == 4 * 12 + 3 * 3 + 4


def test_model_rejects_inconsistent_shapes():
    state = small_params(0).state_dict()
    state["W_c"] = np.zeros((3, 5))
    with pytest.raises(ShapeError):
        ModelParams.from_state_dict(state)


def test_token_width_must_match_model(rng):
    with pytest.raises(ShapeError):
        complete_log_likelihood(small_params(0, d_emb=6), random_doc(rng, (2,), d_emb=5), [0, 1])


def test_full_model_gradient_matches_finite_differences(rng):
    params = small_params(11, d_emb=3, d_h=3, d_a=2)
    doc = random_doc(rng, (2, 3), d_emb=3)
    z = [1, 0, 0, 1, 1]
    report = ad.finite_difference_check(
        lambda: ad.neg(complete_log_likelihood(params, doc, z)), params.named_tensors())
    assert report.passed(), report.worst()
