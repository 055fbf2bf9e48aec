"""Dissimilarity measures between hypotheses on a batch.

All measures are returned as quantities an adversary maximizes; callers negate
as needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ad as ad
from .tensor_ad import ContractError, DimensionError, Tensor

DEFAULT_CLAMP = 1e-7
FORMS = ("cmd_primitive", "cmd_dual", "l1", "margin_disparity")
_EXCLUDED = -1e30


@dataclass(frozen=True)
class DiscrepancyKind:
    form: str = "cmd_primitive"
    clamp: float = DEFAULT_CLAMP

    def __post_init__(self):
        if self.form not in FORMS:
            raise ContractError(f"unknown discrepancy form {self.form!r}; expected one of {FORMS}")
        if not 0.0 <= self.clamp <= 1e-4:
            raise ContractError(f"clamp must lie in [0, 1e-4], got {self.clamp}")


@dataclass
class ScoreBatch:
    """Class probabilities of one hypothesis on a batch, with their logs."""

    probs: Tensor
    log_probs: Tensor
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_scores(cls, scores: Tensor) -> "ScoreBatch":
        log_probs = ad.log_softmax(scores)
        return cls(ad.exp(log_probs), log_probs)

    @classmethod
    def from_probs(cls, probs) -> "ScoreBatch":
        p = ad.as_tensor(probs)
        return cls(p, ad.log(p))

    def clamped(self, clamp: float) -> Tensor:
        key = ("p", clamp)
        if key not in self._cache:
            self._cache[key] = ad.clip(self.probs, clamp, 1.0 - clamp)
        return self._cache[key]

    def clamped_log(self, clamp: float) -> Tensor:
        """``log`` of the clamped probabilities, built once per batch."""
        key = ("log", clamp)
        if key not in self._cache:
            self._cache[key] = ad.log(self.clamped(clamp))
        return self._cache[key]

    def clamped_log_complement(self, clamp: float) -> Tensor:
        """``log(1 - p)`` of the clamped probabilities."""
        key = ("log1m", clamp)
        if key not in self._cache:
            self._cache[key] = ad.log(ad.sub(1.0, self.clamped(clamp)))
        return self._cache[key]

    @property
    def batch(self) -> int:
        return self.probs.shape[0]

    @property
    def classes(self) -> int:
        return self.probs.shape[1]


def induced_label(scores: ScoreBatch) -> np.ndarray:
    """Row-wise argmax of the probabilities; ties resolve to the smaller class index."""
    return np.argmax(scores.probs.data, axis=1)


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ContractError(f"expected {batch} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ContractError(f"labels must lie in [0, {classes})")
    return labels.astype(np.int64)


def margin_loss(scores: ScoreBatch, labels) -> Tensor:
    """Mean hinge ``max(0, 1 + max_{y' != y} s(x, y') - s(x, y))`` with ``s`` = log-probabilities."""
    s = scores.log_probs
    labels = _check_labels(labels, scores.batch, scores.classes)
    onehot = np.zeros(s.shape, dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    true = ad.gather_rows(s, labels)
    best_other = ad.row_max(ad.masked_fill(s, onehot, _EXCLUDED))
    return ad.mean(ad.relu(ad.add(ad.sub(best_other, true), 1.0)))


def margin_disparity(f_out: ScoreBatch, h_labels) -> Tensor:
    """Margin loss of ``f`` against the labels induced by another hypothesis."""
    return margin_loss(f_out, h_labels)


def cmd_pointwise(f1_row, f2_row, form: str = "primitive", clamp: float = DEFAULT_CLAMP) -> float:
    """Cross margin discrepancy of two probability vectors at a single point (plain floats)."""
    p1 = np.clip(np.asarray(f1_row, dtype=np.float64), clamp, 1.0 - clamp)
    p2 = np.clip(np.asarray(f2_row, dtype=np.float64), clamp, 1.0 - clamp)
    y1 = int(np.argmax(f1_row))
    y2 = int(np.argmax(f2_row))
    if form not in ("primitive", "dual"):
        raise ContractError(f"form must be 'primitive' or 'dual', got {form!r}")
    if y1 != y2:
        if form == "primitive":
            return (math.log(p1[y1]) - math.log(p1[y2])) + (math.log(p2[y2]) - math.log(p2[y1]))
        return math.log(p1[y1]) + math.log(1.0 - p1[y2]) + math.log(p2[y2]) + math.log(1.0 - p2[y1])
    a, b = p1[y1], p2[y1]
    if form == "primitive":
        return math.log(max(a, b)) - math.log(min(a, b))
    return math.log(max(a, b)) + math.log(max(1.0 - a, 1.0 - b))


def _same_batch(a: ScoreBatch, b: ScoreBatch) -> None:
    if a.probs.shape != b.probs.shape:
        raise DimensionError(f"score batches differ in shape: {a.probs.shape} vs {b.probs.shape}")


def cmd_rows(f1: ScoreBatch, f2: ScoreBatch, form: str = "primitive", clamp: float = DEFAULT_CLAMP) -> Tensor:
    """Per-row cross margin discrepancy, each row routed to its agree or disagree branch."""
    _same_batch(f1, f2)
    if form not in ("primitive", "dual"):
        raise ContractError(f"form must be 'primitive' or 'dual', got {form!r}")
    y1 = induced_label(f1)
    y2 = induced_label(f2)
    agree = (y1 == y2).astype(np.float64)
    # log is monotone, so log max/min of probabilities is max/min of their logs
    lp1 = f1.clamped_log(clamp)
    lp2 = f2.clamped_log(clamp)
    l11 = ad.gather_rows(lp1, y1)  # f1 at its own label
    l22 = ad.gather_rows(lp2, y2)
    l21 = ad.gather_rows(lp2, y1)  # f2 at f1's label
    if form == "primitive":
        l12 = ad.gather_rows(lp1, y2)
        disagree = ad.add(ad.sub(l11, l12), ad.sub(l22, l21))
        agreed = ad.sub(ad.max_pair(l11, l21), ad.min_pair(l11, l21))
    else:
        q1 = f1.clamped_log_complement(clamp)
        q2 = f2.clamped_log_complement(clamp)
        q12 = ad.gather_rows(q1, y2)  # log(1 - f1) at f2's label
        q21 = ad.gather_rows(q2, y1)
        q11 = ad.gather_rows(q1, y1)
        disagree = ad.add(ad.add(l11, q12), ad.add(l22, q21))
        agreed = ad.add(ad.max_pair(l11, l21), ad.max_pair(q11, q21))
    return ad.add(ad.mul(agreed, agree), ad.mul(disagree, 1.0 - agree))


def cmd_batch(f1: ScoreBatch, f2: ScoreBatch, form: str = "primitive", clamp: float = DEFAULT_CLAMP) -> Tensor:
    """Batch mean of the cross margin discrepancy."""
    return ad.mean(cmd_rows(f1, f2, form, clamp))


def l1_discrepancy(f1: ScoreBatch, f2: ScoreBatch) -> Tensor:
    """Mean absolute difference of probability rows, averaged over classes and batch."""
    _same_batch(f1, f2)
    return ad.mean(ad.abs_(ad.sub(f1.probs, f2.probs)))


def pair_discrepancy(a: ScoreBatch, b: ScoreBatch, kind: DiscrepancyKind) -> Tensor:
    """``eps(a, b)`` under the configured measure.

    For ``margin_disparity`` the first argument supplies the labels, matching
    the MDD reading where ``eps(h, f)`` scores ``f`` against ``h``'s predictions.
    """
    if kind.form == "cmd_primitive":
        return cmd_batch(a, b, "primitive", kind.clamp)
    if kind.form == "cmd_dual":
        return cmd_batch(a, b, "dual", kind.clamp)
    if kind.form == "l1":
        return l1_discrepancy(a, b)
    return margin_disparity(b, induced_label(a))
