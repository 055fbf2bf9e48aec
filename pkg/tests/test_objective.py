import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointda import objective as ob
from jointda import tensor_ad as ad
from jointda.data import gen_twomoons_shift
from jointda.discrepancy import DiscrepancyKind, ScoreBatch, cmd_batch
from jointda.objective import Hyperparams, Objective
from jointda.tensor_ad import ContractError


# ---------------------------------------------------------------- oracles

def np_forward(net, x):
    """Eval-mode forward of a plain MLP with numpy only."""
    h = np.asarray(x, dtype=np.float64)
    ws = net.effective_weights()
    for i, (w, b) in enumerate(zip(ws, net.biases)):
        h = h @ w + b.data
        if i < len(ws) - 1:
            h = np.maximum(h, 0) if net.spec.activation == "relu" else np.tanh(h)
    return h


def np_log_softmax(s):
    s = s - s.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def np_margin_disparity(f_scores, h_scores):
    s = np_log_softmax(f_scores)
    y = np.argmax(h_scores, axis=1)
    true = s[np.arange(len(y)), y]
    other = s.copy()
    other[np.arange(len(y)), y] = -np.inf
    return np.mean(np.maximum(0.0, 1.0 + other.max(axis=1) - true))


def np_l1(a_scores, b_scores):
    pa, pb = np.exp(np_log_softmax(a_scores)), np.exp(np_log_softmax(b_scores))
    return np.mean(np.abs(pa - pb))


def batch(seed=0, n=32):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 2)), rng.integers(0, 2, size=n), rng.normal(size=(n, 2)) + 0.5


def snapshot(nets):
    return [p.data.copy() for net in nets for p in net.parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# ------------------------------------------------------------- degeneracy

def test_mdd_configuration_matches_hand_assembly():
    hp = Hyperparams(objective_kind="mdd", width=16, seed=3)
    state = ob.init_state(hp, 2, 2)
    assert state.f2 is state.f1 and state.h is not state.f1
    x_s, y_s, x_t = batch(1)
    got = ob.evaluate_objective(state, x_s, y_s, x_t)["total"]
    fs, ft = np_forward(state.g, x_s), np_forward(state.g, x_t)
    h_s, h_t = np_forward(state.h, fs), np_forward(state.h, ft)
    f_s, f_t = np_forward(state.f1, fs), np_forward(state.f1, ft)
    expect = np_margin_disparity(f_t, h_t) - np_margin_disparity(f_s, h_s)
    assert abs(got - expect) < 1e-12


def test_original_with_tied_adversaries_degrades_to_mdd():
    hp = Hyperparams(objective_kind="mdd", width=16, seed=4)
    state = ob.init_state(hp, 2, 2)
    x_s, y_s, x_t = batch(2)
    mdd = ob.evaluate_objective(state, x_s, y_s, x_t)["total"]
    # full four-term objective, same tied weights, no constraint
    ours = Objective("original", DiscrepancyKind("margin_disparity"), None, tie_f2_to_f1=True)
    full = ob.evaluate_objective(state, x_s, y_s, x_t, objective=ours)
    assert full["eps_T_f1f2"] == 0.0 and full["eps_S_f1f2"] == 0.0
    assert abs(full["total"] - mdd) < 1e-9


def test_mcd_configuration_matches_l1_on_target():
    hp = Hyperparams(objective_kind="mcd", width=16, seed=5)
    state = ob.init_state(hp, 2, 2)
    assert state.h is state.f1 and state.f2 is not state.f1
    obj = state.objective
    assert obj.constraint == "original" and obj.gamma == 1.0 and obj.terms == ("eps_T_f1f2",)
    x_s, y_s, x_t = batch(3)
    got = ob.evaluate_objective(state, x_s, y_s, x_t)["total"]
    ft = np_forward(state.g, x_t)
    expect = np_l1(np_forward(state.f1, ft), np_forward(state.f2, ft))
    assert abs(got - expect) < 1e-9


def test_original_restricted_to_target_term_matches_mcd():
    hp = Hyperparams(objective_kind="mcd", width=16, seed=6)
    state = ob.init_state(hp, 2, 2)
    x_s, y_s, x_t = batch(4)
    mcd = ob.evaluate_objective(state, x_s, y_s, x_t)["total"]
    ours = Objective("original", DiscrepancyKind("l1"), "original", gamma=1.0, tie_h_to_f1=True)
    full = ob.evaluate_objective(state, x_s, y_s, x_t, objective=ours)
    assert full["eps_T_hf1"] == 0.0
    assert abs(full["eps_T_f1f2"] - mcd) < 1e-9


def test_adversarial_term_is_sum_of_four_discrepancies():
    hp = Hyperparams(width=16, seed=7)
    state = ob.init_state(hp, 2, 2)
    for net in (state.g, *state.heads()):
        net.eval()
    x_s, _, x_t = batch(5)
    fs, ft = state.g(x_s), state.g(x_t)
    total = ob.adversarial_term(fs, ft, state.h, state.f1, state.f2, DiscrepancyKind()).item()

    def sb(net, f):
        return ScoreBatch.from_scores(net(f))

    expect = (cmd_batch(sb(state.f1, ft), sb(state.f2, ft)).item()
              + cmd_batch(sb(state.f1, fs), sb(state.f2, fs)).item()
              + cmd_batch(sb(state.h, ft), sb(state.f1, ft)).item()
              - cmd_batch(sb(state.h, fs), sb(state.f2, fs)).item())
    assert abs(total - expect) < 1e-12


# ------------------------------------------------------------ constraints

def probs_batch(rows):
    return ScoreBatch.from_probs(np.asarray(rows, dtype=np.float64))


def test_original_constraint_hand_value():
    f1 = probs_batch([[0.8, 0.2], [0.4, 0.6]])
    f2 = probs_batch([[0.5, 0.5], [0.1, 0.9]])
    y = [0, 1]
    value = ob.constraint_loss_original(f1, f2, y, 0.5).item()
    expect = -(math.log(0.8) + math.log(0.6)) / 2 - 0.5 * (math.log(0.5) + math.log(0.9)) / 2
    assert value == pytest.approx(expect, abs=1e-14)


def test_alternative_constraint_hand_value():
    f1 = probs_batch([[0.8, 0.2], [0.4, 0.6]])
    f2 = probs_batch([[0.5, 0.5], [0.1, 0.9]])
    f2_t = probs_batch([[0.7, 0.3], [0.25, 0.75], [0.6, 0.4]])
    value = ob.constraint_loss_alternative(f1, f2, [0, 1], f2_t, [0, 1, 1], 0.9).item()
    src = -(math.log(0.8) + math.log(0.6)) / 2 + 0.9 * -(math.log(0.5) + math.log(0.9)) / 2
    tgt = -(math.log(0.7) + math.log(0.75) + math.log(0.4)) / 3
    assert value == pytest.approx(src + 0.1 * tgt, abs=1e-14)


def test_alternative_with_eta_one_is_original():
    f1 = probs_batch([[0.8, 0.2], [0.4, 0.6]])
    f2 = probs_batch([[0.5, 0.5], [0.1, 0.9]])
    f2_t = probs_batch([[0.7, 0.3]])
    alt = ob.constraint_loss_alternative(f1, f2, [0, 1], f2_t, [1], 1.0).item()
    assert alt == ob.constraint_loss_original(f1, f2, [0, 1], 1.0).item()


def test_alternative_with_eta_zero_ignores_f2_on_source():
    f1 = probs_batch([[0.8, 0.2]])
    f2_t = probs_batch([[0.7, 0.3]])
    a = ob.constraint_loss_alternative(f1, probs_batch([[0.5, 0.5]]), [0], f2_t, [0], 0.0).item()
    b = ob.constraint_loss_alternative(f1, probs_batch([[0.01, 0.99]]), [0], f2_t, [0], 0.0).item()
    assert a == b


def test_pseudo_labels_carry_no_gradient():
    hp = Hyperparams(objective_kind="alternative", eta=0.5, width=16, seed=8)
    state = ob.init_state(hp, 2, 2)
    x_s, y_s, x_t = batch(6)
    out_S, out_T = ob.domain_outputs(state, x_s, x_t)
    pseudo = ob.induced_label(out_T[id(state.h)])
    cons = ob.constraint_loss_alternative(out_S[id(state.f1)], out_S[id(state.f2)], y_s,
                                          out_T[id(state.f2)], pseudo, 0.5)
    params = [p for net in (state.g, *state.heads()) for p in net.parameters()]
    ad.zero_grads(params)
    ad.backward(cons)
    for p in state.h.parameters():
        assert p.grad is None or not np.any(p.grad)
    assert any(np.any(p.grad) for p in state.f2.parameters())


def test_target_labels_never_reach_losses():
    pair = gen_twomoons_shift(64, 64, 30, 0.1, 0)
    shuffled = type(pair.target_eval)(np.random.default_rng(0).permutation(pair.target_eval.y))
    other = type(pair)(pair.source, pair.target, shuffled, pair.meta, pair.true_fS, pair.true_fT)
    hp = Hyperparams(objective_kind="alternative", eta=0.9, total_steps=3, batch_size=32, width=16)
    a = ob.train(hp, pair).history
    b = ob.train(hp, other).history
    loss_cols = [c for c in ob.METRIC_COLUMNS if c != "tgt_acc_h"]
    for ra, rb in zip(a, b):
        for c in loss_cols:
            assert ra[c] == rb[c] or (math.isnan(ra[c]) and math.isnan(rb[c]))


# --------------------------------------------------------------- stepping

def stepped_state(kind="original", **kw):
    hp = Hyperparams(objective_kind=kind, width=16, seed=9, **kw)
    return hp, ob.init_state(hp, 2, 2)


def test_phase_isolation(monkeypatch):
    hp, state = stepped_state(lr=1e-2)
    x_s, y_s, x_t = batch(7)
    snaps = []
    real_apply = ob._apply

    def spy(st, loss, nets):
        before_g = snapshot([st.g])
        before_heads = snapshot(st.heads())
        real_apply(st, loss, nets)
        snaps.append((before_g, snapshot([st.g]), before_heads, snapshot(st.heads())))

    monkeypatch.setattr(ob, "_apply", spy)
    ob.step_minimax(state, (x_s, y_s), x_t, hp)
    assert len(snaps) == 2 + hp.inner_g_steps
    g0, g1, h0, h1 = snaps[0]
    assert not same(g0, g1) and not same(h0, h1)
    g0, g1, h0, h1 = snaps[1]
    assert same(g0, g1) and not same(h0, h1)
    # h itself is not an adversary
    for g0, g1, h0, h1 in snaps[2:]:
        assert same(h0, h1) and not same(g0, g1)


def test_adversary_phase_leaves_h_alone(monkeypatch):
    hp, state = stepped_state(lr=1e-2)
    x_s, y_s, x_t = batch(8)
    calls = []
    real_apply = ob._apply

    def spy(st, loss, nets):
        calls.append([n for n in nets])
        real_apply(st, loss, nets)

    monkeypatch.setattr(ob, "_apply", spy)
    ob.step_minimax(state, (x_s, y_s), x_t, hp)
    adversaries = calls[1]
    assert all(n is state.f1 or n is state.f2 for n in adversaries) and len(adversaries) == 2
    assert all(c == [state.g] for c in calls[2:])


def test_zero_learning_rate_keeps_parameters():
    hp, state = stepped_state(lr=0.0)
    before = snapshot([state.g, *state.heads()])
    x_s, y_s, x_t = batch(9)
    m = ob.step_minimax(state, (x_s, y_s), x_t, hp)
    assert same(before, snapshot([state.g, *state.heads()]))
    assert all(not math.isnan(m[c]) for c in ("eps_S_h", "adv_term", "eps_T_f1f2", "constraint_f2"))


def test_source_only_skips_adversarial_phases(monkeypatch):
    hp, state = stepped_state("source_only")
    assert state.f1 is None and state.f2 is None
    calls = []
    real_apply = ob._apply
    monkeypatch.setattr(ob, "_apply", lambda st, loss, nets: (calls.append(nets), real_apply(st, loss, nets)))
    x_s, y_s, x_t = batch(10)
    m = ob.step_minimax(state, (x_s, y_s), x_t, hp)
    assert len(calls) == 1
    assert math.isnan(m["adv_term"])


def test_steps_are_deterministic():
    results = []
    for _ in range(2):
        hp, state = stepped_state(dropout_rate=0.2)
        for k in range(2):
            x_s, y_s, x_t = batch(11 + k)
            ob.step_minimax(state, (x_s, y_s), x_t, hp)
        results.append(snapshot([state.g, *state.heads()]))
    assert same(*results)


def test_training_diverges_loudly():
    hp, state = stepped_state()
    x_s, y_s, x_t = batch(12)
    x_s[0, 0] = np.nan
    with pytest.raises(ob.TrainingDiverged, match="step 0"):
        ob.step_minimax(state, (x_s, y_s), x_t, hp)


def test_empty_batches_rejected():
    hp, state = stepped_state()
    with pytest.raises(ContractError):
        ob.step_minimax(state, (np.zeros((0, 2)), np.zeros(0, dtype=int)), np.ones((3, 2)), hp)


@pytest.mark.parametrize("bad", [dict(gamma=1.5), dict(eta=-0.1), dict(lr=-1.0), dict(inner_g_steps=0),
                                 dict(objective_kind="gan"), dict(constraint_weight=0.0)])
def test_invalid_hyperparams(bad):
    with pytest.raises(ContractError):
        Hyperparams(**bad)


# ------------------------------------------------------------------ train

def test_zero_steps_returns_initial_state():
    pair = gen_twomoons_shift(40, 40, 30, 0.1, 0)
    res = ob.train(Hyperparams(total_steps=0, width=16), pair)
    assert res.history == []
    fresh = ob.init_state(Hyperparams(total_steps=0, width=16), 2, 2)
    assert same(snapshot([res.state.g]), snapshot([fresh.g]))


@settings(max_examples=5, deadline=None)
@given(st.integers(1, 6))
def test_one_metric_row_per_step(steps):
    pair = gen_twomoons_shift(40, 40, 30, 0.1, 0)
    res = ob.train(Hyperparams(total_steps=steps, width=8, batch_size=16, inner_g_steps=1), pair)
    assert [r["step"] for r in res.history] == list(range(steps))
    assert set(ob.METRIC_COLUMNS) <= set(res.history[0])


def test_joint_forward_matches_separate_forwards():
    hp, state = stepped_state()
    # eval mode keeps the power-iteration vectors fixed between calls
    for net in (state.g, *state.heads()):
        net.eval()
    x_s, _, x_t = batch(13)
    out_S, out_T = ob.domain_outputs(state, x_s, x_t)
    for net in state.heads():
        np.testing.assert_allclose(out_S[id(net)].log_probs.data,
                                   ad.log_softmax(net(state.g(x_s))).data, rtol=0, atol=1e-14)
        np.testing.assert_allclose(out_T[id(net)].log_probs.data,
                                   ad.log_softmax(net(state.g(x_t))).data, rtol=0, atol=1e-14)


@pytest.mark.slow
def test_large_constraint_weight_aligns_source_accuracy():
    pair = gen_twomoons_shift(400, 400, 30, 0.1, 1)
    hp = Hyperparams(constraint_weight=20.0, lr=1e-3, total_steps=300, batch_size=64, width=32)
    res = ob.train(hp, pair, eval_every=10**9)
    st = res.state
    x, y = pair.source.x, pair.source.y
    acc = {}
    for name, net in (("h", st.h), ("f1", st.f1), ("f2", st.f2)):
        for n in (st.g, net):
            n.eval()
        acc[name] = int(np.sum(np.argmax(net(st.g(x)).data, axis=1) == y))
    # within 2 points, compared as counts of correct points
    assert abs(acc["f1"] - acc["h"]) * 100 <= 2 * len(y), acc
    assert abs(acc["f2"] - acc["h"]) * 100 <= 2 * len(y), acc
