"""Finite-difference checks of every backward rule.

Each case builds a scalar from a few leaf tensors. The analytic gradient from
:func:`tensor_ad.backward` is compared with a central difference, and the
error per leaf is ``|a - n| / (|a| + |n|)`` in the 2-norm, or ``|a - n|`` when
both are negligible. Inputs of non-smooth ops are drawn away from their kinks.

Cases look functions up on the modules at call time, so a patched op is what
gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import discrepancy as dsc
from . import nets
from . import objective as obj
from . import tensor_ad as ad

SMOOTH_TOL = 1e-4
NONSMOOTH_TOL = 1e-3
FD_STEP = 1e-6


@dataclass(frozen=True)
class GradCase:
    name: str
    module: str
    smooth: bool
    build: Callable[[np.random.Generator], tuple[Callable[..., ad.Tensor], list[np.ndarray]]]


@dataclass(frozen=True)
class GradResult:
    name: str
    module: str
    smooth: bool
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.worst < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    # both vanish (e.g. a bias feeding batch norm): compare absolutely
    return float(num / den) if den > 1e-7 else float(num)


def numeric_grad(fn: Callable[..., ad.Tensor], inputs: list[np.ndarray], k: int, step: float = FD_STEP) -> np.ndarray:
    x = inputs[k]
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(*[ad.Tensor(v) for v in inputs]).item()
        flat[i] = orig - step
        down = fn(*[ad.Tensor(v) for v in inputs]).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def check_case(case: GradCase, seed: int = 0) -> GradResult:
    rng = np.random.default_rng(seed)
    fn, inputs = case.build(rng)
    leaves = [ad.parameter(v.copy()) for v in inputs]
    ad.backward(fn(*leaves))
    worst = 0.0
    for k, leaf in enumerate(leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numeric_grad(fn, inputs, k)))
    return GradResult(case.name, case.module, case.smooth, worst, SMOOTH_TOL if case.smooth else NONSMOOTH_TOL)


# ------------------------------------------------------------------ inputs

def _away_from(rng, shape, kinks=(0.0,), gap=0.05, scale=1.0):
    x = rng.normal(scale=scale, size=shape)
    for k in kinks:
        close = np.abs(x - k) < gap
        x[close] = k + np.sign(x[close] - k + 1e-300) * gap * 2
    return x


def _distinct(rng, shape, gap=0.05):
    """Rows whose entries are pairwise separated, so argmax and max are locally fixed."""
    x = rng.normal(size=shape)
    x.sort(axis=-1)
    x += gap * np.arange(shape[-1])
    return rng.permuted(x, axis=-1)


def _weighted(rng, shape):
    w = rng.normal(size=shape)
    return lambda t: ad.sum_(ad.mul(t, w))


# ------------------------------------------------------------------- cases

def _tensor_cases() -> list[GradCase]:
    def unary(name, op, smooth, gen=lambda r: r.normal(size=(3, 4))):
        def build(r):
            red = _weighted(r, (3, 4))
            return (lambda a: red(getattr(ad, op)(a))), [gen(r)]
        return GradCase(name, "tensor_ad", smooth, build)

    def binary(name, op, smooth, shape_b=(3, 4), gen_b=None):
        def build(r):
            red = _weighted(r, (3, 4))
            b = gen_b(r, shape_b) if gen_b else r.normal(size=shape_b)
            return (lambda x, y: red(getattr(ad, op)(x, y))), [r.normal(size=(3, 4)), b]
        return GradCase(name, "tensor_ad", smooth, build)

    def positive(r, shape=(3, 4)):
        return r.uniform(0.5, 2.0, size=shape)

    cases = [
        binary("add", "add", True),
        binary("add_broadcast", "add", True, (4,)),
        binary("sub", "sub", True),
        binary("sub_broadcast", "sub", True, (3, 1)),
        binary("mul", "mul", True),
        binary("mul_broadcast", "mul", True, (1, 4)),
        binary("div", "div", True, gen_b=positive),
        binary("div_broadcast", "div", True, (4,), gen_b=positive),
        unary("neg", "neg", True),
        unary("tanh", "tanh", True),
        unary("exp", "exp", True),
        unary("log", "log", True, positive),
        unary("sqrt", "sqrt", True, positive),
        unary("relu", "relu", False, lambda r: _away_from(r, (3, 4))),
        unary("abs", "abs_", False, lambda r: _away_from(r, (3, 4))),
        unary("log_softmax", "log_softmax", True),
        unary("softmax", "softmax", True),
        unary("transpose", "transpose", True, lambda r: r.normal(size=(4, 3))),
    ]
    for pair_op in ("max_pair", "min_pair"):
        def build(r, pair_op=pair_op):
            red = _weighted(r, (3, 4))
            a = r.normal(size=(3, 4))
            b = a + _away_from(r, (3, 4), gap=0.1)
            return (lambda x, y: red(getattr(ad, pair_op)(x, y))), [a, b]
        cases.append(GradCase(pair_op, "tensor_ad", False, build))

    def build_matmul(r):
        red = _weighted(r, (3, 5))
        return (lambda a, b: red(ad.matmul(a, b))), [r.normal(size=(3, 4)), r.normal(size=(4, 5))]

    def build_clip(r):
        red = _weighted(r, (3, 4))
        x = _away_from(r, (3, 4), kinks=(-0.5, 0.5), scale=0.8)
        return (lambda a: red(ad.clip(a, -0.5, 0.5))), [x]

    def build_sum_axis(r):
        red = _weighted(r, (3, 1))
        return (lambda a: red(ad.sum_(a, axis=1, keepdims=True))), [r.normal(size=(3, 4))]

    def build_sum_all(r):
        return (lambda a: ad.mul(ad.sum_(a), ad.sum_(a))), [r.normal(size=(3, 4))]

    def build_mean(r):
        red = _weighted(r, (4,))
        return (lambda a: red(ad.mean(a, axis=0))), [r.normal(size=(3, 4))]

    def build_reshape(r):
        red = _weighted(r, (2, 6))
        return (lambda a: red(ad.reshape(a, (2, 6)))), [r.normal(size=(3, 4))]

    def build_gather(r):
        idx = r.integers(0, 4, size=3)
        red = _weighted(r, (3,))
        return (lambda a: red(ad.gather_rows(a, idx))), [r.normal(size=(3, 4))]

    def build_take(r):
        red = _weighted(r, (2, 4))
        return (lambda a: red(ad.take_rows(a, 1, 3))), [r.normal(size=(4, 4))]

    def build_masked(r):
        mask = r.random((3, 4)) < 0.3
        red = _weighted(r, (3, 4))
        return (lambda a: red(ad.masked_fill(a, mask, -2.0))), [r.normal(size=(3, 4))]

    def build_row_max(r):
        red = _weighted(r, (3,))
        return (lambda a: red(ad.row_max(a))), [_distinct(r, (3, 4))]

    cases += [
        GradCase("matmul", "tensor_ad", True, build_matmul),
        GradCase("clip", "tensor_ad", False, build_clip),
        GradCase("sum_axis", "tensor_ad", True, build_sum_axis),
        GradCase("sum_all", "tensor_ad", True, build_sum_all),
        GradCase("mean_axis", "tensor_ad", True, build_mean),
        GradCase("reshape", "tensor_ad", True, build_reshape),
        GradCase("gather_rows", "tensor_ad", True, build_gather),
        GradCase("take_rows", "tensor_ad", True, build_take),
        GradCase("masked_fill", "tensor_ad", True, build_masked),
        GradCase("row_max", "tensor_ad", False, build_row_max),
    ]
    return cases


def _net_case(name: str, smooth: bool, **spec_kw) -> GradCase:
    """Gradient of a weighted output sum with respect to every weight and bias."""
    def build(r):
        spec = nets.MlpSpec((3, 5, 2), **spec_kw)
        net = nets.init_network(spec, int(r.integers(1 << 30)))
        x = r.normal(size=(6, 3))
        red = _weighted(r, (6, 2))
        n_layers = len(net.weights)
        if spec.spectral_norm:
            net.eval()  # power-iteration vectors stay fixed, the gradient still flows through sigma
        leaves0 = [*net.weights, *net.biases, *net.bn_gamma, *net.bn_beta]

        def fn(*leaves):
            net.weights = list(leaves[:n_layers])
            net.biases = list(leaves[n_layers:2 * n_layers])
            rest = leaves[2 * n_layers:]
            net.bn_gamma = list(rest[:len(rest) // 2])
            net.bn_beta = list(rest[len(rest) // 2:])
            return red(nets.forward(net, x, seed=7))
        return fn, [p.data.copy() for p in leaves0]
    return GradCase(name, "nets", smooth, build)


def _nets_cases() -> list[GradCase]:
    return [
        _net_case("mlp_tanh", True, activation="tanh"),
        _net_case("mlp_relu", False, activation="relu"),
        _net_case("mlp_spectral_norm", True, activation="tanh", spectral_norm=True),
        _net_case("mlp_batch_norm", True, activation="tanh", batch_norm=True),
        _net_case("mlp_dropout", True, activation="tanh", dropout_rate=0.3),
    ]


def _discrepancy_cases() -> list[GradCase]:
    def from_scores(build_loss):
        def build(r):
            s1 = _distinct(r, (5, 3)) * 1.5
            s2 = _distinct(r, (5, 3)) * 1.5
            # make a few rows agree so both branches are exercised
            s2[:2] = s1[:2] + _away_from(r, (2, 3), gap=0.05) * 0.1
            labels = r.integers(0, 3, size=5)
            return (lambda a, b: build_loss(dsc.ScoreBatch.from_scores(a), dsc.ScoreBatch.from_scores(b), labels)), [s1, s2]
        return build

    return [
        GradCase("cmd_primitive", "discrepancy", False,
                 from_scores(lambda a, b, y: dsc.cmd_batch(a, b, "primitive"))),
        GradCase("cmd_dual", "discrepancy", False, from_scores(lambda a, b, y: dsc.cmd_batch(a, b, "dual"))),
        GradCase("l1", "discrepancy", False, from_scores(lambda a, b, y: dsc.l1_discrepancy(a, b))),
        GradCase("margin_loss", "discrepancy", False, from_scores(lambda a, b, y: dsc.margin_loss(a, y))),
        GradCase("margin_disparity", "discrepancy", False,
                 from_scores(lambda a, b, y: dsc.pair_discrepancy(a, b, dsc.DiscrepancyKind("margin_disparity")))),
        GradCase("nll", "objective", True, from_scores(lambda a, b, y: obj.nll(a, y))),
        GradCase("constraint_alternative", "objective", True,
                 from_scores(lambda a, b, y: obj.constraint_loss_alternative(a, b, y, b, y[::-1].copy(), 0.9))),
    ]


def all_cases() -> list[GradCase]:
    return _tensor_cases() + _nets_cases() + _discrepancy_cases()


@dataclass
class SuiteReport:
    results: list[GradResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def worst(self) -> float:
        return max(r.worst for r in self.results)

    def table(self) -> str:
        lines = [f"{'case':<24}{'module':<13}{'kind':<11}{'worst rel err':>15}  status"]
        for r in self.results:
            kind = "smooth" if r.smooth else "nonsmooth"
            lines.append(f"{r.name:<24}{r.module:<13}{kind:<11}{r.worst:>15.3e}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"worst overall: {self.worst:.3e}")
        return "\n".join(lines)


def run_suite(seed: int = 0, cases: list[GradCase] | None = None) -> SuiteReport:
    start = time.perf_counter()
    results = [check_case(c, seed) for c in (cases if cases is not None else all_cases())]
    return SuiteReport(results, time.perf_counter() - start)
