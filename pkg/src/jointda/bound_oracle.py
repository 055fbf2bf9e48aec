"""Exact 0-1 evaluation of the target-risk bound on finite samples.

For a source sample S, a target sample T, true labelings f_S and f_T and any
hypothesis h, the triangle inequality of the 0-1 disagreement gives

    eps_T(h) <= eps_S(h) + C,
    C = eps_T(f_S, f_T) + eps_S(f_S, f_T) + eps_T(h, f_S) - eps_S(h, f_T).

Every check below is done on integer disagreement counts, so "holds" means
holds exactly, not up to rounding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from .tensor_ad import ContractError

LabelFn = Callable[[np.ndarray], np.ndarray]


class BoundViolation(AssertionError):
    """An inequality that must hold under 0-1 loss did not."""


@dataclass(frozen=True)
class Hypothesis:
    """A named deterministic labeling of points."""

    name: str
    fn: LabelFn

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(points)).astype(np.int64, copy=False)
        if out.shape != (len(points),):
            raise ContractError(f"hypothesis {self.name!r} is not total on the point set")
        return out


@dataclass(frozen=True)
class FiniteDomain:
    """A finite sample with the labels both true labelings assign to it (uniform weights)."""

    points: np.ndarray
    labels_S: np.ndarray
    labels_T: np.ndarray

    def __post_init__(self):
        n = len(self.points)
        if len(self.labels_S) != n or len(self.labels_T) != n:
            raise ContractError("labels_S and labels_T must match the number of points")

    @classmethod
    def label(cls, points, f_S: LabelFn, f_T: LabelFn) -> "FiniteDomain":
        points = np.asarray(points, dtype=np.float64)
        return cls(points, Hypothesis("f_S", f_S)(points), Hypothesis("f_T", f_T)(points))

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class HypothesisGrid:
    hypotheses: tuple[Hypothesis, ...]

    def __post_init__(self):
        if not self.hypotheses:
            raise ContractError("hypothesis grid is empty")

    def __len__(self) -> int:
        return len(self.hypotheses)

    def __iter__(self):
        return iter(self.hypotheses)

    def names(self) -> list[str]:
        return [h.name for h in self.hypotheses]

    def label_matrix(self, points: np.ndarray) -> np.ndarray:
        """Labels of every member on ``points``, shape (members, points)."""
        return np.stack([h(points) for h in self.hypotheses])


@dataclass(frozen=True)
class BoundReport:
    hypothesis: str
    eps_T_h: float
    eps_S_h: float
    eps_T_fSfT: float
    eps_S_fSfT: float
    eps_T_hfS: float
    eps_S_hfT: float
    c_term: float
    bound_value: float
    lambda_: float

    @property
    def holds(self) -> bool:
        return self.eps_T_h <= self.bound_value


REPORT_COLUMNS = tuple(f.name for f in fields(BoundReport))


@dataclass
class BoundCheck:
    """Outcome of :func:`verify_bound_chain`."""

    reports: list[BoundReport]
    lambda_: float
    lambda_argmin: str
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def raise_for_violations(self) -> None:
        if self.violations:
            raise BoundViolation("; ".join(self.violations))


# ------------------------------------------------------------------ risks

def _labels(fn, points: np.ndarray) -> np.ndarray:
    if callable(fn):
        return Hypothesis(getattr(fn, "name", "h"), fn)(points)
    arr = np.asarray(fn).astype(np.int64, copy=False)
    if arr.shape != (len(points),):
        raise ContractError("label array does not cover the point set")
    return arr


def _points(domain) -> np.ndarray:
    return domain.points if isinstance(domain, FiniteDomain) else np.asarray(domain, dtype=np.float64)


def disagreements(h, ref, domain) -> int:
    points = _points(domain)
    if len(points) == 0:
        raise ContractError("risk over an empty domain")
    return int(np.count_nonzero(_labels(h, points) != _labels(ref, points)))


def risk01(h, ref, domain) -> float:
    """Fraction of points where ``h`` and ``ref`` disagree.

    ``h`` and ``ref`` may be label functions or label arrays aligned with the points.
    """
    return disagreements(h, ref, domain) / len(_points(domain))


def _c_fraction(f_S, f_T, h, domain_S, domain_T) -> Fraction:
    nS, nT = len(_points(domain_S)), len(_points(domain_T))
    return (Fraction(disagreements(f_S, f_T, domain_T), nT) + Fraction(disagreements(f_S, f_T, domain_S), nS)
            + Fraction(disagreements(h, f_S, domain_T), nT) - Fraction(disagreements(h, f_T, domain_S), nS))


def c_term(f_S, f_T, h, domain_S, domain_T) -> float:
    """``eps_T(f_S,f_T) + eps_S(f_S,f_T) + eps_T(h,f_S) - eps_S(h,f_T)``, summed exactly."""
    return float(_c_fraction(f_S, f_T, h, domain_S, domain_T))


def lambda_enumerate(grid: HypothesisGrid, domain_S: FiniteDomain, domain_T: FiniteDomain
                     ) -> tuple[float, Hypothesis]:
    """Smallest joint error ``eps_S(h, f_S) + eps_T(h, f_T)`` over the grid; ties keep grid order."""
    nS, nT = len(domain_S), len(domain_T)
    if nS == 0 or nT == 0:
        raise ContractError("lambda over an empty domain")
    errS = np.count_nonzero(grid.label_matrix(domain_S.points) != domain_S.labels_S, axis=1)
    errT = np.count_nonzero(grid.label_matrix(domain_T.points) != domain_T.labels_T, axis=1)
    # compare on the common denominator so ties are exact
    joint = errS.astype(np.int64) * nT + errT.astype(np.int64) * nS
    best = int(np.argmin(joint))
    return float(Fraction(int(joint[best]), nS * nT)), grid.hypotheses[best]


def verify_bound_chain(grid: HypothesisGrid, f_S: LabelFn, f_T: LabelFn, domain_S: FiniteDomain,
                       domain_T: FiniteDomain) -> BoundCheck:
    """Evaluate every bound term for each grid member and check the three inequalities.

    Checked exactly on integer counts: the bound itself for every member, its
    tightness at ``h = f_S``, and ``lambda <= eps_T(f_S, f_T)``.
    """
    PS, PT = domain_S.points, domain_T.points
    nS, nT = len(PS), len(PT)
    if nS == 0 or nT == 0:
        raise ContractError("bound over an empty domain")
    fS_S, fT_S = _labels(f_S, PS), _labels(f_T, PS)
    fS_T, fT_T = _labels(f_S, PT), _labels(f_T, PT)
    if not (np.array_equal(fS_S, domain_S.labels_S) and np.array_equal(fT_T, domain_T.labels_T)):
        raise ContractError("domain labels disagree with the supplied labeling functions")
    HS, HT = grid.label_matrix(PS), grid.label_matrix(PT)
    member_S = np.all(HS == fS_S, axis=1) & np.all(HT == fS_T, axis=1)
    member_T = np.all(HS == fT_S, axis=1) & np.all(HT == fT_T, axis=1)
    if not member_S.any() or not member_T.any():
        raise ContractError("grid must contain f_S and f_T")

    a = np.count_nonzero(HT != fT_T, axis=1).astype(np.int64)     # eps_T(h)
    b = np.count_nonzero(HS != fS_S, axis=1).astype(np.int64)     # eps_S(h)
    d = np.count_nonzero(HT != fS_T, axis=1).astype(np.int64)     # eps_T(h, f_S)
    e = np.count_nonzero(HS != fT_S, axis=1).astype(np.int64)     # eps_S(h, f_T)
    cT = int(np.count_nonzero(fS_T != fT_T))                       # eps_T(f_S, f_T)
    cS = int(np.count_nonzero(fS_S != fT_S))                       # eps_S(f_S, f_T)

    # everything scaled by nS * nT
    lhs = a * nS
    c_scaled = cT * nS + cS * nT + d * nS - e * nT
    rhs = b * nT + c_scaled
    joint = b * nT + a * nS
    best = int(np.argmin(joint))
    lam = Fraction(int(joint[best]), nS * nT)

    den = nS * nT
    reports = []
    violations = []
    for k, h in enumerate(grid.hypotheses):
        reports.append(BoundReport(
            h.name, a[k] / nT, b[k] / nS, cT / nT, cS / nS, d[k] / nT, e[k] / nS,
            float(Fraction(int(c_scaled[k]), den)), float(Fraction(int(rhs[k]), den)), float(lam)))
        if lhs[k] > rhs[k]:
            violations.append(f"bound violated for {h.name}: eps_T_h={a[k] / nT} > bound={rhs[k] / den}"
                              f" (eps_S_h={b[k] / nS}, eps_T_hfS={d[k] / nT}, eps_S_hfT={e[k] / nS})")
        if member_S[k] and rhs[k] != cT * nS:
            violations.append(f"bound at {h.name} (= f_S) is {rhs[k] / den}, expected eps_T(f_S,f_T)={cT / nT}")
    if lam > Fraction(cT, nT):
        violations.append(f"lambda={float(lam)} exceeds eps_T(f_S,f_T)={cT / nT}")
    return BoundCheck(reports, float(lam), grid.hypotheses[best].name, violations)


# ------------------------------------------------------------------ grids

def stump(axis: int, threshold: float, positive: int = 1, negative: int = 0) -> Hypothesis:
    def fn(x):
        return np.where(np.asarray(x)[:, axis] > threshold, positive, negative)
    return Hypothesis(f"stump[x{axis}>{threshold:.6g}:{positive}/{negative}]", fn)


def halfspace(angle: float, offset: float, positive: int = 1, negative: int = 0) -> Hypothesis:
    """``positive`` where ``x . (cos a, sin a) > offset`` (two-dimensional inputs)."""
    normal = np.array([math.cos(angle), math.sin(angle)])

    def fn(x):
        x = np.asarray(x)
        if x.shape[1] != 2:
            raise ContractError("halfspace hypotheses take two-dimensional points")
        return np.where(x @ normal > offset, positive, negative)
    return Hypothesis(f"halfspace[a={angle:.6g},b={offset:.6g}]", fn)


def _with_truth(members: list[Hypothesis], f_S: LabelFn, f_T: LabelFn) -> HypothesisGrid:
    return HypothesisGrid((Hypothesis("f_S", f_S), Hypothesis("f_T", f_T), *members))


def stump_grid(points: np.ndarray, f_S: LabelFn, f_T: LabelFn, step: float | None = None,
               n_thresholds: int = 21, classes: int = 2) -> HypothesisGrid:
    """Axis-aligned stumps for every ordered class pair, plus f_S and f_T.

    Thresholds are spaced ``step`` apart across each axis's range when given,
    otherwise ``n_thresholds`` evenly across it.
    """
    points = np.asarray(points, dtype=np.float64)
    members = []
    pairs = [(p, q) for p in range(classes) for q in range(classes) if p != q]
    for axis in range(points.shape[1]):
        lo, hi = float(points[:, axis].min()), float(points[:, axis].max())
        if step is not None:
            start = math.floor(lo / step) * step
            ts = start + step * np.arange(int(math.ceil((hi - start) / step)) + 1)
        else:
            ts = np.linspace(lo, hi, n_thresholds)
        for t in ts:
            for p, q in pairs:
                members.append(stump(axis, float(t), p, q))
    return _with_truth(members, f_S, f_T)


def halfspace_grid(points: np.ndarray, f_S: LabelFn, f_T: LabelFn, n_angles: int = 72,
                   n_offsets: int = 41) -> HypothesisGrid:
    """Binary half-planes over a full circle of normal directions and a span of offsets."""
    points = np.asarray(points, dtype=np.float64)
    radius = float(np.max(np.linalg.norm(points, axis=1))) if len(points) else 1.0
    members = []
    for angle in np.linspace(0.0, 2 * math.pi, n_angles, endpoint=False):
        for offset in np.linspace(-radius, radius, n_offsets):
            members.append(halfspace(float(angle), float(offset)))
    return _with_truth(members, f_S, f_T)


def random_domain_pair(rng: np.random.Generator, n_source: int = 60, n_target: int = 60
                       ) -> tuple[FiniteDomain, FiniteDomain, Hypothesis, Hypothesis]:
    """A random 2-D finite domain pair whose labelings are random half-planes with a random disk flipped."""
    def random_rule(tag):
        normal = rng.normal(size=2)
        offset = rng.normal(scale=0.5)
        centre = rng.uniform(-1, 1, size=2)
        r = rng.uniform(0.0, 0.8)

        def fn(x):
            x = np.asarray(x)
            base = (x @ normal > offset).astype(np.int64)
            flip = np.sum((x - centre) ** 2, axis=1) < r * r
            return np.where(flip, 1 - base, base)
        return Hypothesis(tag, fn)

    f_S, f_T = random_rule("f_S"), random_rule("f_T")
    shift = rng.normal(scale=0.7, size=2)
    ps = rng.uniform(-1.5, 1.5, size=(n_source, 2))
    pt = rng.uniform(-1.5, 1.5, size=(n_target, 2)) + shift
    return FiniteDomain.label(ps, f_S, f_T), FiniteDomain.label(pt, f_S, f_T), f_S, f_T


# ------------------------------------------------------------------ probes

def empirical_bound_probe(state, data, proxy_fS: LabelFn | None = None, proxy_fT: LabelFn | None = None,
                          grid: HypothesisGrid | None = None) -> BoundReport:
    """Bound terms for a trained ``h`` on a synthetic domain pair.

    ``lambda_`` is enumerated over ``grid`` (a half-plane grid on the pooled
    points by default for 2-D data, stumps otherwise).
    """
    from .objective import predict

    f_S = proxy_fS or data.true_fS
    f_T = proxy_fT or data.true_fT
    if f_S is None or f_T is None:
        raise ContractError("the bound probe needs known labeling functions")
    dS = FiniteDomain.label(data.source.x, f_S, f_T)
    dT = FiniteDomain.label(data.target.x, f_S, f_T)
    h_S, h_T = predict(state, dS.points), predict(state, dT.points)
    if grid is None:
        pooled = np.concatenate([dS.points, dT.points])
        grid = halfspace_grid(pooled, f_S, f_T) if pooled.shape[1] == 2 else stump_grid(pooled, f_S, f_T)
    lam, _ = lambda_enumerate(grid, dS, dT)
    nS, nT = len(dS), len(dT)

    def frac(a, b, n):
        return Fraction(int(np.count_nonzero(a != b)), n)

    eps_T_h = frac(h_T, dT.labels_T, nT)
    eps_S_h = frac(h_S, dS.labels_S, nS)
    terms = (frac(dT.labels_S, dT.labels_T, nT), frac(dS.labels_S, dS.labels_T, nS),
             frac(h_T, dT.labels_S, nT), frac(h_S, dS.labels_T, nS))
    c = terms[0] + terms[1] + terms[2] - terms[3]
    return BoundReport("h", float(eps_T_h), float(eps_S_h), *(float(t) for t in terms),
                       float(c), float(eps_S_h + c), lam)


def write_reports_csv(path, reports: Sequence[BoundReport]) -> None:
    from .records import write_versioned_csv
    write_versioned_csv(path, "bound_report", REPORT_COLUMNS, (asdict(r) for r in reports))


def summarize(check: BoundCheck) -> str:
    """Plain-text summary block for a bound check."""
    worst = max(check.reports, key=lambda r: r.eps_T_h - r.bound_value)
    at_fS = next(r for r in check.reports if r.hypothesis == "f_S")
    lines = [
        f"hypotheses checked: {len(check.reports)}",
        f"violations: {len(check.violations)}",
        f"eps_T(f_S,f_T): {at_fS.eps_T_fSfT:.6f}",
        f"bound at h=f_S: {at_fS.bound_value:.6f}",
        f"lambda: {check.lambda_:.6f} (argmin {check.lambda_argmin})",
        f"smallest slack: {worst.bound_value - worst.eps_T_h:.6f} at {worst.hypothesis}",
    ]
    lines += [f"VIOLATION: {v}" for v in check.violations]
    return "\n".join(lines) + "\n"
