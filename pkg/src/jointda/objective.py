"""Constrained minimax objectives and the alternating optimizer.

One training step runs three phases:

A. ``g, h, f1, f2`` minimise ``eps_S(h) + constraint_weight * constraint``.
B. ``f1, f2`` maximise ``adversarial_term - constraint_weight * constraint`` with ``g`` frozen.
C. ``g`` minimises ``adversarial_term`` for ``inner_g_steps`` with the heads frozen.

Freezing means the frozen parameters are left out of the optimizer update;
the graph itself is always built in full.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor_ad as ad
from .data import DomainPair
from .discrepancy import DiscrepancyKind, ScoreBatch, induced_label, pair_discrepancy
from .nets import MlpSpec, Network, init_network
from .tensor_ad import ContractError, Tensor

log = logging.getLogger(__name__)

OBJECTIVE_KINDS = ("original", "alternative", "mdd", "mcd", "source_only")
TERM_NAMES = ("eps_T_f1f2", "eps_S_f1f2", "eps_T_hf1", "eps_S_hf2")
TERM_SIGNS = {"eps_T_f1f2": 1.0, "eps_S_f1f2": 1.0, "eps_T_hf1": 1.0, "eps_S_hf2": -1.0}
METRIC_COLUMNS = ("step", "eps_S_h", "constraint_f1", "constraint_f2", "adv_term", "eps_T_f1f2",
                  "eps_S_f1f2", "eps_T_hf1", "eps_S_hf2", "src_acc_h", "tgt_acc_h")


class TrainingDiverged(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 1.0
    eta: float = 0.0
    lr: float = 1e-4
    inner_g_steps: int = 4
    batch_size: int = 128
    total_steps: int = 2000
    discrepancy: DiscrepancyKind = DiscrepancyKind()
    objective_kind: str = "original"
    constraint_weight: float = 1.0
    seed: int = 0
    width: int = 64
    activation: str = "relu"
    head_spectral_norm: bool = True
    batch_norm: bool = False
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.eta <= 1.0:
            raise ContractError(f"eta must lie in [0, 1], got {self.eta}")
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        if self.inner_g_steps < 1 or self.batch_size < 1 or self.total_steps < 0:
            raise ContractError("step counts and batch size must be positive")
        if self.objective_kind not in OBJECTIVE_KINDS:
            raise ContractError(f"objective_kind must be one of {OBJECTIVE_KINDS}")
        if self.constraint_weight <= 0:
            raise ContractError("constraint_weight must be positive")


@dataclass(frozen=True)
class Objective:
    """Which terms, constraint and parameter ties a run uses."""

    kind: str
    discrepancy: DiscrepancyKind
    constraint: str | None  # "original", "alternative" or None
    gamma: float = 1.0
    eta: float = 0.0
    terms: tuple[str, ...] = TERM_NAMES
    tie_f2_to_f1: bool = False
    tie_h_to_f1: bool = False

    @property
    def adversarial(self) -> bool:
        return self.kind != "source_only"


def objective_for(hp: Hyperparams) -> Objective:
    kind = hp.objective_kind
    if kind in ("mdd", "mcd"):
        return build_baseline(kind, hp)
    if kind == "source_only":
        return Objective("source_only", hp.discrepancy, None, terms=())
    return Objective(kind, hp.discrepancy, kind, gamma=hp.gamma, eta=hp.eta)


def build_baseline(kind: str, hp: Hyperparams) -> Objective:
    """MDD: one adversary (f2 tied to f1), margin disparity, no constraint.
    MCD: h tied to f1, gamma = 1, L1 discrepancy on the target term only."""
    if kind == "mdd":
        return Objective("mdd", DiscrepancyKind("margin_disparity", hp.discrepancy.clamp), None,
                         terms=("eps_T_hf1", "eps_S_hf2"), tie_f2_to_f1=True)
    if kind == "mcd":
        return Objective("mcd", DiscrepancyKind("l1", hp.discrepancy.clamp), "original", gamma=1.0,
                         terms=("eps_T_f1f2",), tie_h_to_f1=True)
    raise ContractError(f"unknown baseline {kind!r}")


# ----------------------------------------------------------------- optimizer

class Adam:
    """Adam with per-parameter moments and step counts, keyed by tensor identity."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state: dict[int, list] = {}

    def step(self, params: list[Tensor]) -> None:
        for p in params:
            if p.grad is None:
                continue
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = [np.zeros_like(p.data), np.zeros_like(p.data), 0]
            m, v, t = st
            t += 1
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            st[2] = t
            if self.lr == 0:
                continue
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------- train state

@dataclass
class TrainState:
    g: Network
    h: Network
    f1: Network | None
    f2: Network | None
    objective: Objective
    optimizer: Adam
    step: int = 0
    metrics: deque = field(default_factory=lambda: deque(maxlen=256))

    def heads(self) -> list[Network]:
        """Distinct head networks (tied heads appear once)."""
        out: list[Network] = []
        for net in (self.h, self.f1, self.f2):
            if net is not None and all(net is not o for o in out):
                out.append(net)
        return out

    def networks(self) -> dict[str, Network]:
        named = {"g": self.g, "h": self.h}
        if self.f1 is not None and self.f1 is not self.h:
            named["f1"] = self.f1
        if self.f2 is not None and self.f2 is not self.f1:
            named["f2"] = self.f2
        return named


def sub_seed(seed: int, *tags: int) -> int:
    """Deterministic child seed; integer tuple hashing is stable across processes."""
    return hash((seed, *tags)) & 0x7FFFFFFF


def init_state(hp: Hyperparams, d_in: int, classes: int, objective: Objective | None = None) -> TrainState:
    objective = objective or objective_for(hp)
    common = dict(activation=hp.activation, batch_norm=hp.batch_norm, dropout_rate=hp.dropout_rate)
    g_spec = MlpSpec((d_in, hp.width, hp.width), **common)
    head = MlpSpec((hp.width, hp.width, classes), spectral_norm=hp.head_spectral_norm, **common)
    g = init_network(g_spec, sub_seed(hp.seed, 0))
    h = init_network(head, sub_seed(hp.seed, 1))
    f1 = f2 = None
    if objective.adversarial:
        f1 = h if objective.tie_h_to_f1 else init_network(head, sub_seed(hp.seed, 2))
        f2 = f1 if objective.tie_f2_to_f1 else init_network(head, sub_seed(hp.seed, 3))
    return TrainState(g, h, f1, f2, objective, Adam(hp.lr))


# -------------------------------------------------------------------- losses

def nll(out: ScoreBatch, labels) -> Tensor:
    """Mean negative log-likelihood of the given labels."""
    labels = np.asarray(labels, dtype=np.int64)
    return ad.neg(ad.mean(ad.gather_rows(out.log_probs, labels)))


def constraint_loss_original(f1_out_S: ScoreBatch, f2_out_S: ScoreBatch, labels_S, gamma: float) -> Tensor:
    """``eps_S(f1) + gamma * eps_S(f2)`` with cross-entropy risks."""
    return ad.add(nll(f1_out_S, labels_S), ad.mul(nll(f2_out_S, labels_S), gamma))


def constraint_loss_alternative(f1_out_S: ScoreBatch, f2_out_S: ScoreBatch, labels_S, f2_out_T: ScoreBatch,
                                pseudo_labels_T, eta: float) -> Tensor:
    """``eps_S(f1) + eta * eps_S(f2) + (1 - eta) * eps~_T(f2)``; pseudo labels are constants."""
    pseudo = np.asarray(pseudo_labels_T, dtype=np.int64)
    src = ad.add(nll(f1_out_S, labels_S), ad.mul(nll(f2_out_S, labels_S), eta))
    return ad.add(src, ad.mul(nll(f2_out_T, pseudo), 1.0 - eta))


def adversarial_components(out_S: dict, out_T: dict, h: Network, f1: Network, f2: Network,
                           kind: DiscrepancyKind, terms=TERM_NAMES) -> dict[str, Tensor]:
    """Signed pieces of ``eps_T(f1,f2) + eps_S(f1,f2) + eps_T(h,f1) - eps_S(h,f2)`` plus ``total``.

    ``out_S``/``out_T`` map ``id(network)`` to its :class:`ScoreBatch`. A pair of
    tied (identical) hypotheses has zero discrepancy and contributes nothing.
    """
    pairs = {
        "eps_T_f1f2": (f1, f2, out_T),
        "eps_S_f1f2": (f1, f2, out_S),
        "eps_T_hf1": (h, f1, out_T),
        "eps_S_hf2": (h, f2, out_S),
    }
    comps: dict[str, Tensor] = {}
    total: Tensor | None = None
    for name in terms:
        a, b, outs = pairs[name]
        if a is b:
            value = Tensor(0.0)
        else:
            value = pair_discrepancy(outs[id(a)], outs[id(b)], kind)
        comps[name] = value
        signed = ad.mul(value, TERM_SIGNS[name])
        total = signed if total is None else ad.add(total, signed)
    comps["total"] = total if total is not None else Tensor(0.0)
    return comps


def adversarial_term(feats_S: Tensor, feats_T: Tensor, h: Network, f1: Network, f2: Network,
                     kind: DiscrepancyKind, terms=TERM_NAMES, seed: int | None = None) -> Tensor:
    """Scalar adversarial term on given extractor features."""
    out_S = head_outputs([h, f1, f2], feats_S, seed)
    out_T = head_outputs([h, f1, f2], feats_T, None if seed is None else seed + 1)
    return adversarial_components(out_S, out_T, h, f1, f2, kind, terms)["total"]


def head_outputs(nets, feats: Tensor, seed: int | None = None) -> dict[int, ScoreBatch]:
    """Run each distinct network once on ``feats``."""
    out: dict[int, ScoreBatch] = {}
    for i, net in enumerate(nets):
        if net is None or id(net) in out:
            continue
        s = None if seed is None else sub_seed(seed, i)
        out[id(net)] = ScoreBatch.from_scores(net(feats, s))
    return out


def _constraint(state: TrainState, out_S, out_T, y_s, pseudo_T) -> tuple[Tensor | None, Tensor | None, Tensor | None]:
    obj = state.objective
    if obj.constraint is None:
        return None, None, None
    f1_S, f2_S = out_S[id(state.f1)], out_S[id(state.f2)]
    c1 = nll(f1_S, y_s)
    c2 = nll(f2_S, y_s)
    if obj.constraint == "original":
        total = constraint_loss_original(f1_S, f2_S, y_s, obj.gamma)
    else:
        total = constraint_loss_alternative(f1_S, f2_S, y_s, out_T[id(state.f2)], pseudo_T, obj.eta)
    return total, c1, c2


def _check_finite(name: str, t: Tensor, step: int) -> None:
    if not np.all(np.isfinite(t.data)):
        raise TrainingDiverged(f"non-finite {name} at step {step}: {t.data}")


def _apply(state: TrainState, loss: Tensor, nets: list[Network]) -> None:
    params = [p for net in nets for p in net.parameters()]
    all_params = [p for net in [state.g, *state.heads()] for p in net.parameters()]
    ad.zero_grads(all_params)
    ad.backward(loss)
    state.optimizer.step(params)
    ad.zero_grads(all_params)


def domain_outputs(state: TrainState, x_s: np.ndarray, x_t: np.ndarray | None,
                   seed: int | None = None) -> tuple[dict, dict]:
    """Head outputs on source and target features, keyed by ``id(network)``.

    Without batch norm both domains go through one joint forward pass and the
    rows are split afterwards; with batch norm each domain keeps its own
    batch statistics.
    """
    heads = state.heads()
    if x_t is None:
        return head_outputs(heads, state.g(x_s, seed), None if seed is None else seed + 1), {}
    if state.g.spec.batch_norm:
        s2 = None if seed is None else seed + 2
        s3 = None if seed is None else seed + 3
        return (head_outputs(heads, state.g(x_s, seed), None if seed is None else seed + 1),
                head_outputs(heads, state.g(x_t, s2), s3))
    n = len(x_s)
    feats = state.g(np.concatenate([x_s, x_t]), seed)
    out_S, out_T = {}, {}
    for i, net in enumerate(heads):
        lp = ad.log_softmax(net(feats, None if seed is None else sub_seed(seed, i)))
        p = ad.exp(lp)
        m = len(lp.data)
        out_S[id(net)] = ScoreBatch(ad.take_rows(p, 0, n), ad.take_rows(lp, 0, n))
        out_T[id(net)] = ScoreBatch(ad.take_rows(p, n, m), ad.take_rows(lp, n, m))
    return out_S, out_T


def step_minimax(state: TrainState, batch_S: tuple[np.ndarray, np.ndarray], batch_T: np.ndarray,
                 hp: Hyperparams) -> dict[str, float]:
    """One A/B/C round; returns the loss components seen during it."""
    obj = state.objective
    x_s, y_s = batch_S
    x_t = np.asarray(batch_T)
    if len(x_s) == 0 or len(x_t) == 0:
        raise ContractError("batches must be non-empty")
    step = state.step
    cw = hp.constraint_weight
    metrics: dict[str, float] = {"step": step}
    drop = hp.dropout_rate > 0

    def seed(phase: int, k: int = 0) -> int | None:
        return sub_seed(hp.seed, 7, step, phase, k) if drop else None

    # A: classification
    need_T = obj.constraint == "alternative"
    out_S, out_T = domain_outputs(state, x_s, x_t if need_T else None, seed(0))
    pseudo = induced_label(out_T[id(state.h)]) if need_T else None
    h_S = out_S[id(state.h)]
    eps_S_h = nll(h_S, y_s)
    loss_a = eps_S_h
    cons, c1, c2 = _constraint(state, out_S, out_T, y_s, pseudo)
    if cons is not None:
        loss_a = ad.add(loss_a, ad.mul(cons, cw))
    _check_finite("classification loss", loss_a, step)
    metrics["eps_S_h"] = eps_S_h.item()
    metrics["constraint_f1"] = c1.item() if c1 is not None else math.nan
    metrics["constraint_f2"] = c2.item() if c2 is not None else math.nan
    metrics["src_acc_h"] = float(np.mean(induced_label(h_S) == y_s))
    _apply(state, loss_a, [state.g, *state.heads()])

    metrics["adv_term"] = math.nan
    for name in TERM_NAMES:
        metrics[name] = math.nan
    if obj.adversarial:
        # B: adversaries maximise the adversarial term under the constraint
        out_S, out_T = domain_outputs(state, x_s, x_t, seed(1))
        comps = adversarial_components(out_S, out_T, state.h, state.f1, state.f2, obj.discrepancy, obj.terms)
        loss_b = ad.neg(comps["total"])
        if obj.constraint is not None:
            pseudo = induced_label(out_T[id(state.h)]) if need_T else None
            cons, _, _ = _constraint(state, out_S, out_T, y_s, pseudo)
            loss_b = ad.add(loss_b, ad.mul(cons, cw))
        _check_finite("adversary loss", loss_b, step)
        metrics["adv_term"] = comps["total"].item()
        for name in obj.terms:
            metrics[name] = comps[name].item()
        adversaries = [n for n in state.heads() if n is state.f1 or n is state.f2]
        _apply(state, loss_b, adversaries)

        # C: extractor minimises it
        for k in range(hp.inner_g_steps):
            out_S, out_T = domain_outputs(state, x_s, x_t, seed(2, k))
            adv = adversarial_components(out_S, out_T, state.h, state.f1, state.f2, obj.discrepancy,
                                         obj.terms)["total"]
            _check_finite("extractor loss", adv, step)
            _apply(state, adv, [state.g])

    state.step += 1
    state.metrics.append(metrics)
    return metrics


def evaluate_objective(state: TrainState, x_s: np.ndarray, y_s: np.ndarray, x_t: np.ndarray,
                       objective: Objective | None = None) -> dict[str, float]:
    """Objective values on a batch with every network in eval mode; nothing is updated."""
    obj = objective or state.objective
    modes = _set_eval(state)
    try:
        heads = [state.h, state.f1, state.f2]
        out_S = head_outputs(heads, state.g(x_s))
        out_T = head_outputs(heads, state.g(x_t))
        res = {"eps_S_h": nll(out_S[id(state.h)], y_s).item()}
        if obj.adversarial:
            comps = adversarial_components(out_S, out_T, state.h, state.f1, state.f2, obj.discrepancy, obj.terms)
            res.update({k: v.item() for k, v in comps.items()})
        return res
    finally:
        _restore(modes)


def _set_eval(state: TrainState) -> list[tuple[Network, str]]:
    nets = [state.g, *state.heads()]
    modes = [(n, n.mode) for n in nets]
    for n in nets:
        n.eval()
    return modes


def _restore(modes) -> None:
    for n, m in modes:
        n.mode = m


def predict(state: TrainState, x: np.ndarray) -> np.ndarray:
    """Labels from ``h`` on extracted features, eval mode."""
    modes = [(state.g, state.g.mode), (state.h, state.h.mode)]
    state.g.eval()
    state.h.eval()
    try:
        return induced_label(ScoreBatch.from_scores(state.h(state.g(x))))
    finally:
        _restore(modes)


def accuracy(state: TrainState, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict(state, x) == np.asarray(y)))


# ---------------------------------------------------------------------- train

@dataclass
class TrainResult:
    state: TrainState
    history: list[dict[str, float]]
    final_source_acc: float
    final_target_acc: float


def _batches(n: int, size: int, rng: np.random.Generator):
    size = min(size, n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - size + 1, size):
            yield perm[i:i + size]


def train(hp: Hyperparams, data: DomainPair, objective: Objective | None = None,
          eval_every: int = 1) -> TrainResult:
    """Run ``hp.total_steps`` minimax steps on shuffled mini-batches.

    Target labels are read only to report ``tgt_acc_h``; losses see target points alone.
    """
    state = init_state(hp, data.d_in, data.classes, objective)
    rng = np.random.default_rng(sub_seed(hp.seed, 11))
    src_iter = _batches(len(data.source), hp.batch_size, rng)
    tgt_iter = _batches(len(data.target), hp.batch_size, rng)
    target_eval = data.eval_target()
    history: list[dict[str, float]] = []
    tgt_acc = math.nan
    for step in range(hp.total_steps):
        si = next(src_iter)
        ti = next(tgt_iter)
        m = step_minimax(state, (data.source.x[si], data.source.y[si]), data.target.x[ti], hp)
        if step % eval_every == 0 or step == hp.total_steps - 1:
            tgt_acc = accuracy(state, target_eval.x, target_eval.y)
        m["tgt_acc_h"] = tgt_acc
        history.append(m)
    src_eval = data.test_source or data.source
    return TrainResult(state, history, accuracy(state, src_eval.x, src_eval.y),
                       accuracy(state, target_eval.x, target_eval.y))


def with_overrides(hp: Hyperparams, **kw) -> Hyperparams:
    return replace(hp, **kw)
