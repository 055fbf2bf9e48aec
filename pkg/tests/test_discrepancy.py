import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from jointda import discrepancy as dsc
from jointda import tensor_ad as ad
from jointda.discrepancy import DiscrepancyKind, ScoreBatch
from jointda.gradcheck import numeric_grad, relative_error
from jointda.tensor_ad import ContractError, DimensionError


def batch(*rows):
    return ScoreBatch.from_probs(np.array(rows, dtype=float))


def prob_vectors(classes):
    return st.lists(st.floats(0.01, 1.0), min_size=classes, max_size=classes).map(
        lambda v: np.array(v) / np.sum(v))


# ---------------------------------------------------------- induced label

def test_induced_label_cases():
    assert dsc.induced_label(batch([0.2, 0.8]))[0] == 1
    assert dsc.induced_label(batch([0.5, 0.5]))[0] == 0


def test_induced_label_matches_scan():
    rows = np.random.default_rng(0).dirichlet(np.ones(4), size=3)
    expected = []
    for r in rows:
        best = 0
        for k in range(1, 4):
            if r[k] > r[best]:
                best = k
        expected.append(best)
    assert list(dsc.induced_label(ScoreBatch.from_probs(rows))) == expected


def test_score_batch_invariants():
    sb = ScoreBatch.from_scores(np.random.default_rng(1).normal(size=(6, 3)))
    np.testing.assert_allclose(sb.probs.data.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((sb.probs.data > 0) & (sb.probs.data < 1))
    np.testing.assert_allclose(sb.log_probs.data, np.log(sb.probs.data), atol=1e-9)


def test_clamp_bound():
    with pytest.raises(ContractError):
        DiscrepancyKind(clamp=1e-3)
    with pytest.raises(ContractError):
        DiscrepancyKind(form="kl")


# ------------------------------------------------------------- margin loss

def from_logs(*rows):
    logs = np.array(rows, dtype=float)
    return ScoreBatch(ad.Tensor(np.exp(logs)), ad.Tensor(logs))


def test_margin_satisfied():
    assert dsc.margin_loss(from_logs([-0.1, -1.5]), [0]).item() == 0.0


def test_margin_hand_value():
    assert dsc.margin_loss(from_logs([-0.7, -0.9]), [0]).item() == pytest.approx(0.8, abs=1e-12)


def test_margin_is_mean_of_rows():
    a = dsc.margin_loss(from_logs([-0.7, -0.9]), [0]).item()
    b = dsc.margin_loss(from_logs([-0.2, -1.0, -3.0]), [2]).item()
    both_rows = from_logs([-0.7, -0.9, -50.0], [-0.2, -1.0, -3.0])
    assert dsc.margin_loss(both_rows, [0, 2]).item() == pytest.approx((a + b) / 2, abs=1e-12)


def test_margin_label_range():
    with pytest.raises(ContractError):
        dsc.margin_loss(from_logs([-0.7, -0.9]), [2])


def test_margin_disparity_cases():
    confident = from_logs([-0.01, -5.0], [-6.0, -0.002])
    assert dsc.margin_disparity(confident, [0, 1]).item() == 0.0
    assert dsc.margin_disparity(from_logs([-0.7, -0.9]), [0]).item() == pytest.approx(0.8, abs=1e-12)


def test_margin_disparity_uses_induced_labels():
    rng = np.random.default_rng(3)
    h = ScoreBatch.from_scores(rng.normal(size=(9, 3)))
    f = ScoreBatch.from_scores(rng.normal(size=(9, 3)))
    via_pair = dsc.pair_discrepancy(h, f, DiscrepancyKind("margin_disparity")).item()
    assert via_pair == dsc.margin_loss(f, dsc.induced_label(h)).item()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_margin_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    sb = ScoreBatch.from_scores(rng.normal(scale=3, size=(5, 4)))
    assert dsc.margin_loss(sb, rng.integers(0, 4, size=5)).item() >= 0


# ------------------------------------------------------------ cmd pointwise

def test_cmd_primitive_disagree_hand_value():
    v = dsc.cmd_pointwise([0.9, 0.1], [0.2, 0.8], "primitive")
    assert v == pytest.approx(math.log(9) + math.log(4), abs=1e-12)
    assert v == pytest.approx(3.5835, abs=1e-4)


def test_cmd_primitive_identical_is_zero():
    assert dsc.cmd_pointwise([0.7, 0.3], [0.7, 0.3], "primitive") == 0.0


def test_cmd_dual_two_class_collapse():
    v = dsc.cmd_pointwise([0.9, 0.1], [0.2, 0.8], "dual")
    assert v == pytest.approx(2 * math.log(0.9) + 2 * math.log(0.8), abs=1e-12)
    assert v == pytest.approx(-0.6570, abs=1e-4)


def test_branch_selection():
    # argmaxes 0 and 1 -> disagree branch, which for primitive is a sum of two log ratios
    v = dsc.cmd_pointwise([0.9, 0.1], [0.3, 0.7], "primitive")
    assert v == pytest.approx(math.log(9) + math.log(0.7 / 0.3), abs=1e-12)
    agree = dsc.cmd_pointwise([0.9, 0.1], [0.6, 0.4], "primitive")
    assert agree == pytest.approx(math.log(0.9 / 0.6), abs=1e-12)


def test_agree_dual_value():
    v = dsc.cmd_pointwise([0.9, 0.1], [0.6, 0.4], "dual")
    assert v == pytest.approx(math.log(0.9) + math.log(0.4), abs=1e-12)


def test_clamp_keeps_values_finite():
    assert math.isfinite(dsc.cmd_pointwise([1.0, 0.0], [0.0, 1.0], "primitive"))
    assert math.isfinite(dsc.cmd_pointwise([1.0, 0.0], [0.0, 1.0], "dual"))


@settings(max_examples=300, deadline=None)
@given(prob_vectors(3), prob_vectors(3))
def test_primitive_symmetric_and_nonnegative(p, q):
    a = dsc.cmd_pointwise(p, q, "primitive")
    assert a >= 0
    assert a == pytest.approx(dsc.cmd_pointwise(q, p, "primitive"), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(prob_vectors(4), prob_vectors(4))
def test_primitive_disagree_strictly_positive(p, q):
    assume(np.argmax(p) != np.argmax(q))
    assume(np.max(p) > np.sort(p)[-2] and np.max(q) > np.sort(q)[-2])
    assert dsc.cmd_pointwise(p, q, "primitive") > 0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_binary_primitive_equals_negative_margins(a, b):
    # with two classes the best competitor of one label is the other hypothesis' label
    p, q = np.array([a, 1 - a]), np.array([b, 1 - b])
    y1, y2 = int(np.argmax(p)), int(np.argmax(q))
    assume(y1 != y2)
    rho1 = math.log(p[y2]) - math.log(p[y1])   # margin of f1 at y2
    rho2 = math.log(q[y1]) - math.log(q[y2])   # margin of f2 at y1
    assert dsc.cmd_pointwise(p, q, "primitive") == pytest.approx(-rho1 - rho2, abs=1e-12)


# ---------------------------------------------------------------- cmd batch

def test_cmd_batch_identical_is_zero():
    sb = ScoreBatch.from_scores(np.random.default_rng(0).normal(size=(8, 3)))
    assert dsc.cmd_batch(sb, sb, "primitive").item() == 0.0


def test_single_row_equals_pointwise():
    p, q = [0.6, 0.3, 0.1], [0.1, 0.2, 0.7]
    for form in ("primitive", "dual"):
        assert dsc.cmd_batch(batch(p), batch(q), form).item() == pytest.approx(dsc.cmd_pointwise(p, q, form), abs=1e-12)


def test_mixed_batch_is_mean_of_rows():
    rows1 = [[0.9, 0.1], [0.8, 0.2]]
    rows2 = [[0.6, 0.4], [0.3, 0.7]]
    for form in ("primitive", "dual"):
        expect = np.mean([dsc.cmd_pointwise(a, b, form) for a, b in zip(rows1, rows2)])
        assert dsc.cmd_batch(batch(*rows1), batch(*rows2), form).item() == pytest.approx(expect, abs=1e-12)


def test_batch_mismatch():
    with pytest.raises(DimensionError):
        dsc.cmd_batch(batch([0.5, 0.5]), batch([0.5, 0.5], [0.2, 0.8]))
    with pytest.raises(DimensionError):
        dsc.l1_discrepancy(batch([0.5, 0.5]), batch([0.2, 0.3, 0.5]))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["primitive", "dual"]))
def test_batch_matches_rowwise_oracle(seed, form):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(3), size=6)
    q = rng.dirichlet(np.ones(3), size=6)
    q[:2] = p[:2]
    expect = np.mean([dsc.cmd_pointwise(a, b, form) for a, b in zip(p, q)])
    got = dsc.cmd_batch(ScoreBatch.from_probs(p), ScoreBatch.from_probs(q), form).item()
    assert got == pytest.approx(expect, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["primitive", "dual"]))
def test_cmd_gradient_matches_finite_differences(seed, form):
    rng = np.random.default_rng(seed)
    s1 = rng.normal(scale=2, size=(5, 3))
    s2 = rng.normal(scale=2, size=(5, 3))

    def stable(s):
        top = np.sort(s, axis=1)
        return np.all(top[:, -1] - top[:, -2] > 1e-3)

    assume(stable(s1) and stable(s2))
    p1, p2 = ScoreBatch.from_scores(s1).probs.data, ScoreBatch.from_scores(s2).probs.data
    top = dsc.induced_label(ScoreBatch.from_scores(s1))
    # agree rows with near-equal probabilities sit on the max/min kink
    agree = top == dsc.induced_label(ScoreBatch.from_scores(s2))
    rows = np.arange(5)
    assume(np.all(np.abs(p1[rows, top] - p2[rows, top])[agree] > 1e-3))

    def fn(a, b):
        return dsc.cmd_batch(ScoreBatch.from_scores(a), ScoreBatch.from_scores(b), form)

    x1, x2 = ad.parameter(s1.copy()), ad.parameter(s2.copy())
    ad.backward(fn(x1, x2))
    assert relative_error(x1.grad, numeric_grad(fn, [s1, s2], 0)) < 1e-3
    assert relative_error(x2.grad, numeric_grad(fn, [s1, s2], 1)) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_branch_routing_stable_under_small_perturbation(seed):
    rng = np.random.default_rng(seed)
    s1 = rng.normal(size=(4, 3))
    s2 = rng.normal(size=(4, 3))
    eps = rng.normal(scale=1e-6, size=(4, 3))
    lab = lambda s: dsc.induced_label(ScoreBatch.from_scores(s))
    assume(np.array_equal(lab(s1), lab(s1 + eps)) and np.array_equal(lab(s2), lab(s2 + eps)))
    before = dsc.cmd_rows(ScoreBatch.from_scores(s1), ScoreBatch.from_scores(s2)).data
    after = dsc.cmd_rows(ScoreBatch.from_scores(s1 + eps), ScoreBatch.from_scores(s2 + eps)).data
    np.testing.assert_allclose(before, after, atol=1e-4)


# --------------------------------------------------------------------- l1

def test_l1_cases():
    assert dsc.l1_discrepancy(batch([0.3, 0.7]), batch([0.3, 0.7])).item() == 0.0
    # one-hot rows are outside from_probs' domain (log 0); l1 only reads probabilities
    onehot = lambda r: ScoreBatch(ad.Tensor(np.array([r])), ad.Tensor(np.zeros((1, 2))))
    assert dsc.l1_discrepancy(onehot([1.0, 0.0]), onehot([0.0, 1.0])).item() == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_l1_symmetric_and_bounded(seed, classes):
    rng = np.random.default_rng(seed)
    a = ScoreBatch.from_probs(rng.dirichlet(np.ones(classes) * 0.3, size=4))
    b = ScoreBatch.from_probs(rng.dirichlet(np.ones(classes) * 0.3, size=4))
    v = dsc.l1_discrepancy(a, b).item()
    assert v == dsc.l1_discrepancy(b, a).item()
    assert 0 <= v <= 2 * (classes - 1) / classes
    # rows differ by at most 2 in total variation, so the class mean is at most 2 / classes
    assert v <= 2 / classes + 1e-12
