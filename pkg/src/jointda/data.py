"""Synthetic domain pairs with known labeling functions, and IDX digit ingestion.

Target labels live in a separate :class:`EvalLabels` holder. The training
code only ever receives :class:`UnlabeledSet` objects, which carry no labels.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import norm

LabelFn = Callable[[np.ndarray], np.ndarray]


class DataFormatError(ValueError):
    """Malformed or insufficient input data."""


@dataclass(frozen=True)
class LabeledSet:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataFormatError(f"{len(self.x)} points but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class UnlabeledSet:
    """Points only. There is deliberately no label field."""

    x: np.ndarray

    def __len__(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class EvalLabels:
    """Held-out target labels, consulted only by evaluation code."""

    y: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DomainPair:
    source: LabeledSet
    target: UnlabeledSet
    target_eval: EvalLabels
    meta: dict
    true_fS: LabelFn | None = None
    true_fT: LabelFn | None = None
    test_source: LabeledSet | None = None
    test_target: LabeledSet | None = None

    @property
    def synthetic(self) -> bool:
        return self.true_fS is not None and self.true_fT is not None

    @property
    def d_in(self) -> int:
        return self.source.x.shape[1]

    @property
    def classes(self) -> int:
        return int(self.meta.get("classes", int(self.source.y.max()) + 1))

    def eval_target(self) -> LabeledSet:
        """The set target accuracy is reported on."""
        if self.test_target is not None:
            return self.test_target
        return LabeledSet(self.target.x, self.target_eval.y)


# ------------------------------------------------------------------ two moons

def _moon_label(x: np.ndarray) -> np.ndarray:
    """1 where the point is closer to the lower moon arc than to the upper one."""
    def arc_dist(p, center, upper):
        d = p - center
        ang = np.arctan2(d[:, 1], d[:, 0])
        ang = np.clip(ang, 0.0, np.pi) if upper else np.clip(ang, -np.pi, 0.0)
        nearest = center + np.stack([np.cos(ang), np.sin(ang)], axis=1)
        return np.linalg.norm(p - nearest, axis=1)

    d0 = arc_dist(x, np.array([0.0, 0.0]), True)
    d1 = arc_dist(x, np.array([1.0, 0.5]), False)
    return (d1 < d0).astype(np.int64)


MOON_CENTROID = np.array([0.5, 0.25])


def _rotation(deg: float) -> np.ndarray:
    t = np.deg2rad(deg)
    return np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])


def _sample_moons(n: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0.0, sigma, size=(n, 2))
    return x[rng.permutation(n)]


def gen_twomoons_shift(n_source: int, n_target: int, rotation_degrees: float, noise_sigma: float,
                       seed: int) -> DomainPair:
    """Two interleaved half circles; the target is the same distribution rotated about the centroid.

    Labels are given by the nearest-arc rule, so they are exact functions of
    the point: ``true_fS`` on the source, ``true_fT`` (the rotated rule) on the target.
    """
    if n_source <= 0 or n_target <= 0:
        raise ValueError("sample counts must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    rot = _rotation(rotation_degrees)

    def f_s(x):
        return _moon_label(np.asarray(x, dtype=np.float64))

    def f_t(x):
        back = (np.asarray(x, dtype=np.float64) - MOON_CENTROID) @ rot + MOON_CENTROID
        return _moon_label(back)

    xs = _sample_moons(n_source, noise_sigma, rng)
    xt = (_sample_moons(n_target, noise_sigma, rng) - MOON_CENTROID) @ rot.T + MOON_CENTROID
    meta = {"generator": "twomoons_shift", "n_source": n_source, "n_target": n_target,
            "rotation_degrees": rotation_degrees, "noise_sigma": noise_sigma, "seed": seed, "classes": 2}
    return DomainPair(LabeledSet(xs, f_s(xs)), UnlabeledSet(xt), EvalLabels(f_t(xt)), meta, f_s, f_t)


# -------------------------------------------------------------- mixing blobs

BLOB_SIGMA = 1.0


def mixing_blob_offset(flip_fraction: float, sigma: float = BLOB_SIGMA) -> float:
    """Extra translation of the target class-0 blob so that ``flip_fraction`` of its mass
    crosses into the source class-1 half-plane."""
    if flip_fraction <= 0:
        return 0.0
    return float(sigma * norm.ppf(flip_fraction))


def gen_mixing_blobs(separation: float, shift: float, flip_fraction: float, seed: int,
                     n_source: int = 2000, n_target: int = 2000) -> DomainPair:
    """Two Gaussian classes whose target copy overlaps the wrong source class.

    Source: class 0 ~ N((-separation/2, 0), I), class 1 ~ N((+separation/2, 0), I),
    labelled by the half-plane ``x0 > 0``.

    Target: both blobs move up by ``shift``; in addition the class-0 blob slides
    right until ``flip_fraction`` of its mass lies in ``x0 > 0``, i.e. on the source
    class-1 side, and the class-1 blob slides by the same amount. The target
    labelling is the half-plane ``x0 > b`` with ``b`` midway between the target
    blob centres. Any single classifier must then err on the source class-1
    points in ``0 < x0 < b`` or on the target class-0 points there.
    """
    if separation <= 0:
        raise ValueError("separation must be positive")
    if not 0.0 <= flip_fraction <= 0.5:
        raise ValueError("flip_fraction must lie in [0, 0.5]")
    rng = np.random.default_rng(seed)
    half = separation / 2.0
    if flip_fraction > 0:
        # class-0 centre c with P(N(c, 1) > 0) = flip_fraction
        slide = mixing_blob_offset(flip_fraction) + half
    else:
        slide = 0.0
    boundary_t = slide

    def f_s(x):
        return (np.asarray(x)[:, 0] > 0.0).astype(np.int64)

    def f_t(x):
        return (np.asarray(x)[:, 0] > boundary_t).astype(np.int64)

    def blobs(n, centres):
        n0 = n // 2
        lab = np.r_[np.zeros(n0, dtype=np.int64), np.ones(n - n0, dtype=np.int64)]
        x = np.array(centres)[lab] + rng.normal(0.0, BLOB_SIGMA, size=(n, 2))
        return x[rng.permutation(n)]

    xs = blobs(n_source, [(-half, 0.0), (half, 0.0)])
    xt = blobs(n_target, [(-half + slide, shift), (half + slide, shift)])
    meta = {"generator": "mixing_blobs", "separation": separation, "shift": shift,
            "flip_fraction": flip_fraction, "seed": seed, "classes": 2,
            "n_source": n_source, "n_target": n_target, "target_boundary": boundary_t,
            "implied_overlap": mixing_blobs_population_lambda(separation, flip_fraction)}
    return DomainPair(LabeledSet(xs, f_s(xs)), UnlabeledSet(xt), EvalLabels(f_t(xt)), meta, f_s, f_t)


def mixing_blobs_population_lambda(separation: float, flip_fraction: float, grid: int = 4001) -> float:
    """Population joint error of the best vertical half-plane, by closed-form Gaussian masses.

    With equal sample sizes on both domains, ``eps_S(t) + eps_T(t)`` for the
    threshold ``x0 > t`` is a sum of four normal-CDF masses; minimise over a grid.
    """
    half = separation / 2.0
    slide = mixing_blob_offset(flip_fraction) + half if flip_fraction > 0 else 0.0
    b = slide
    t = np.linspace(-half - 6, half + slide + 6, grid)

    def mass_between(lo, hi, c):
        return np.clip(norm.cdf(hi - c) - norm.cdf(lo - c), 0.0, None)

    def domain_err(c0, c1, bnd):
        # label is 1[x > bnd]; prediction 1[x > t]; disagreement is the band between t and bnd
        lo = np.minimum(t, bnd)
        hi = np.maximum(t, bnd)
        return 0.5 * (mass_between(lo, hi, c0) + mass_between(lo, hi, c1))

    es = domain_err(-half, half, 0.0)
    et = domain_err(-half + slide, half + slide, b)
    return float(np.min(es + et))


# -------------------------------------------------------------------- IDX

IDX_UBYTE = 0x08


@dataclass(frozen=True)
class IdxFile:
    magic: bytes
    dims: tuple[int, ...]
    payload: np.ndarray  # uint8, shaped by dims

    @property
    def ndim(self) -> int:
        return len(self.dims)


def parse_idx(path) -> IdxFile:
    """Read an unsigned-byte IDX file (big-endian dimension sizes)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataFormatError("truncated header at byte offset 0: fewer than 4 magic bytes")
    magic = raw[:4]
    if magic[0] != 0 or magic[1] != 0:
        raise DataFormatError(f"bad magic at byte offset 0: {magic.hex()}")
    if magic[2] != IDX_UBYTE:
        raise DataFormatError(f"unsupported element type 0x{magic[2]:02x} at byte offset 2 (only 0x08 is read)")
    ndim = magic[3]
    if ndim == 0:
        raise DataFormatError("zero dimensions declared at byte offset 3")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DataFormatError(f"truncated dimension table at byte offset {len(raw)}; need {header_end} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    need = int(np.prod(dims))
    have = len(raw) - header_end
    if have < need:
        raise DataFormatError(f"truncated payload at byte offset {len(raw)}: expected {need} bytes, found {have}")
    if have > need:
        raise DataFormatError(f"trailing bytes after payload at byte offset {header_end + need}")
    payload = np.frombuffer(raw, dtype=np.uint8, offset=header_end).reshape(dims)
    return IdxFile(bytes(magic), tuple(int(d) for d in dims), payload)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataFormatError(f"only uint8 arrays can be written, got {array.dtype}")
    header = bytes([0, 0, IDX_UBYTE, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def _resize_images(images: np.ndarray, size: int) -> np.ndarray:
    """Area-weighted resize of a stack of uint8 images to ``size`` x ``size`` floats in [0, 1]."""
    _, h, w = images.shape
    if (h, w) == (size, size):
        return images.astype(np.float64) / 255.0
    imgs = images.astype(np.float64) / 255.0
    wr = _area_weights(np.linspace(0, h, size + 1), h)
    wc = _area_weights(np.linspace(0, w, size + 1), w)
    return np.einsum("ih,nhw,jw->nij", wr, imgs, wc)


def _area_weights(edges: np.ndarray, n_in: int) -> np.ndarray:
    size = len(edges) - 1
    w = np.zeros((size, n_in))
    for i in range(size):
        lo, hi = edges[i], edges[i + 1]
        for k in range(int(np.floor(lo)), min(int(np.ceil(hi)), n_in)):
            w[i, k] = max(0.0, min(hi, k + 1) - max(lo, k))
        w[i] /= w[i].sum()
    return w


def _stratified_pick(labels: np.ndarray, total: int, rng: np.random.Generator, classes: int) -> np.ndarray:
    per = np.full(classes, total // classes)
    per[: total - per.sum()] += 1
    picks = []
    for c in range(classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < per[c]:
            raise DataFormatError(f"class {c} has {len(idx)} images, need {per[c]}")
        picks.append(rng.choice(idx, size=per[c], replace=False))
    out = np.concatenate(picks)
    return np.sort(out)


def digit_subset_protocol(mnist: tuple[IdxFile, IdxFile], usps: tuple[IdxFile, IdxFile], seed: int,
                          mnist_test: tuple[IdxFile, IdxFile] | None = None,
                          usps_test: tuple[IdxFile, IdxFile] | None = None,
                          n_source: int = 2000, n_target: int = 1800, size: int = 16) -> DomainPair:
    """MNIST -> USPS: 2000 source and 1800 target training images, class-stratified, at 16x16.

    Each argument pair is (images, labels). The test pairs, when given, are the
    evaluation sets; otherwise target accuracy is measured on the sampled target.
    """
    rng = np.random.default_rng(seed)

    def load(pair):
        images, labels = pair
        if images.ndim != 3 or labels.ndim != 1 or images.dims[0] != labels.dims[0]:
            raise DataFormatError("expected an (n, h, w) image file and a matching (n,) label file")
        return images.payload, labels.payload.astype(np.int64)

    ms_x, ms_y = load(mnist)
    us_x, us_y = load(usps)
    src_idx = _stratified_pick(ms_y, n_source, rng, 10)
    tgt_idx = _stratified_pick(us_y, n_target, rng, 10)
    xs = _resize_images(ms_x[src_idx], size).reshape(n_source, -1)
    xt = _resize_images(us_x[tgt_idx], size).reshape(n_target, -1)
    test_s = test_t = None
    if mnist_test is not None:
        tx, ty = load(mnist_test)
        test_s = LabeledSet(_resize_images(tx, size).reshape(len(tx), -1), ty)
    if usps_test is not None:
        tx, ty = load(usps_test)
        test_t = LabeledSet(_resize_images(tx, size).reshape(len(tx), -1), ty)
    meta = {"generator": "digits_mnist_usps", "seed": seed, "classes": 10, "n_source": n_source,
            "n_target": n_target, "size": size, "source_index": src_idx.tolist(),
            "target_index": tgt_idx.tolist()}
    return DomainPair(LabeledSet(xs, ms_y[src_idx]), UnlabeledSet(xt), EvalLabels(us_y[tgt_idx]), meta,
                      test_source=test_s, test_target=test_t)


# -------------------------------------------------------------------- export

def export_csv(pair: DomainPair, path) -> None:
    """Write ``x0..x{d-1}, label, domain`` rows (target rows carry their evaluation labels)."""
    d = pair.d_in
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label", "domain"])
        for x, y in zip(pair.source.x, pair.source.y):
            w.writerow([repr(float(v)) for v in x] + [int(y), "source"])
        for x, y in zip(pair.target.x, pair.target_eval.y):
            w.writerow([repr(float(v)) for v in x] + [int(y), "target"])
