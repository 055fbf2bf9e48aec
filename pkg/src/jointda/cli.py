"""``jointda`` command line: train, verify-bound, plot, grad-check, bench.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 a checked
invariant failed.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bound_oracle as bo
from . import data as dt
from . import gradcheck, nets, svg
from .config import ConfigError, ExperimentConfig, load_config
from .discrepancy import ScoreBatch, cmd_pointwise, induced_label
from .objective import METRIC_COLUMNS, Hyperparams, TrainingDiverged, init_state, step_minimax, train
from .records import SchemaError, read_versioned_csv, write_versioned_csv

log = logging.getLogger("jointda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class UnsupportedData(Exception):
    pass


class InvariantFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------------ datasets

def _load_idx_pair(images: str, labels: str) -> tuple[dt.IdxFile, dt.IdxFile]:
    if not images or not labels:
        raise UnsupportedData("digit configs need both image and label IDX paths")
    return dt.parse_idx(images), dt.parse_idx(labels)


def build_dataset(cfg: ExperimentConfig, seed: int) -> dt.DomainPair:
    d = cfg.section("data")
    data_seed = seed if d["seed"] < 0 else d["seed"]
    if d["generator"] == "twomoons":
        return dt.gen_twomoons_shift(d["n_source"], d["n_target"], d["rotation_degrees"], d["noise_sigma"], data_seed)
    if d["generator"] == "mixing_blobs":
        return dt.gen_mixing_blobs(d["separation"], d["shift"], d["flip_fraction"], data_seed,
                                   n_source=d["n_source"], n_target=d["n_target"])
    mnist = _load_idx_pair(d["mnist_images"], d["mnist_labels"])
    usps = _load_idx_pair(d["usps_images"], d["usps_labels"])
    mnist_test = _load_idx_pair(d["mnist_test_images"], d["mnist_test_labels"]) if d["mnist_test_images"] else None
    usps_test = _load_idx_pair(d["usps_test_images"], d["usps_test_labels"]) if d["usps_test_images"] else None
    return dt.digit_subset_protocol(mnist, usps, data_seed, mnist_test, usps_test,
                                    n_source=d["n_source"], n_target=d["n_target"], size=d["image_size"])


def bound_grid(cfg: ExperimentConfig, points: np.ndarray, f_S, f_T, classes: int) -> bo.HypothesisGrid:
    b = cfg.section("bound")
    if b["grid"] == "halfspace" and points.shape[1] == 2 and classes == 2:
        return bo.halfspace_grid(points, f_S, f_T, b["n_angles"], b["n_offsets"])
    return bo.stump_grid(points, f_S, f_T, n_thresholds=b["n_thresholds"], classes=classes)


# --------------------------------------------------------------------- train

def write_metrics(path, history) -> None:
    write_versioned_csv(path, "metrics", METRIC_COLUMNS, history)


def read_metrics(path) -> dict[str, np.ndarray]:
    rows = read_versioned_csv(path, "metrics", METRIC_COLUMNS)
    return {c: np.array([float(r[c]) for r in rows]) for c in METRIC_COLUMNS}


def _run_one(cfg: ExperimentConfig, hp: Hyperparams, pair: dt.DomainPair, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = train(hp, pair, eval_every=cfg["run.eval_every"])
    write_metrics(out / "metrics.csv", result.history)
    if cfg["report.checkpoint"]:
        nets.save_checkpoint(out / "checkpoint.npz", result.state.networks())
    if cfg["report.bound_probe"] and pair.synthetic:
        pooled = np.concatenate([pair.source.x, pair.target.x])
        grid = bound_grid(cfg, pooled, pair.true_fS, pair.true_fT, pair.classes)
        report = bo.empirical_bound_probe(result.state, pair, grid=grid)
        bo.write_reports_csv(out / "bound_probe.csv", [report])
        if report.eps_T_h > report.bound_value:
            raise InvariantFailure(f"trained h violates the bound in {out}")
    if cfg["report.boundary_plot"] and pair.d_in == 2:
        (out / "boundary.svg").write_text(boundary_svg(result.state.g, result.state.h, pair))
    log.info("%s: target acc %.4f, source acc %.4f (%.1fs)", out, result.final_target_acc,
             result.final_source_acc, time.perf_counter() - start)
    return {"target": result.final_target_acc, "source": result.final_source_acc}


def _stats(values: list[float]) -> str:
    v = np.asarray(values)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return f"median {med:.4f}  IQR {q3 - q1:.4f}  (q1 {q1:.4f}, q3 {q3:.4f})"


def cmd_train(cfg: ExperimentConfig) -> int:
    root = cfg.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.echo").write_text(cfg.dump())
    kind = cfg["train.objective_kind"]
    baseline = cfg["run.baseline"]
    finals: dict[str, list[float]] = {kind: []}
    if baseline != "none":
        finals[f"baseline:{baseline}"] = []
    lines = [f"experiment: {cfg['run.name']}", f"objective: {kind}", f"seeds: {list(cfg.seeds)}", ""]
    for seed in cfg.seeds:
        pair = build_dataset(cfg, seed)
        res = _run_one(cfg, cfg.hyperparams(seed), pair, root / f"seed_{seed}")
        finals[kind].append(res["target"])
        line = f"seed {seed}: target acc {res['target']:.4f}  source acc {res['source']:.4f}"
        if baseline != "none":
            base = _run_one(cfg, cfg.hyperparams(seed, baseline), pair, root / f"seed_{seed}" / "baseline")
            finals[f"baseline:{baseline}"].append(base["target"])
            line += f"  | {baseline} target acc {base['target']:.4f}"
        lines.append(line)
    lines.append("")
    lines.append("final target accuracy")
    for name, vals in finals.items():
        lines.append(f"  {name}: {_stats(vals)}")
    if baseline != "none":
        gap = np.median(finals[kind]) - np.median(finals[f"baseline:{baseline}"])
        lines.append(f"  median lift over {baseline}: {gap:+.4f}")
        lines.append(f"  adapted beats baseline: {'yes' if gap > 0 else 'no'}")
    text = "\n".join(lines) + "\n"
    (root / "summary.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


# -------------------------------------------------------------- verify-bound

def cmd_verify_bound(cfg: ExperimentConfig) -> int:
    if not cfg.synthetic:
        raise UnsupportedData("verify-bound needs a synthetic dataset with known labeling functions")
    root = cfg.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.echo").write_text(cfg.dump())
    failures = 0
    for seed in cfg.seeds:
        pair = build_dataset(cfg, seed)
        dS = bo.FiniteDomain.label(pair.source.x, pair.true_fS, pair.true_fT)
        dT = bo.FiniteDomain.label(pair.target.x, pair.true_fS, pair.true_fT)
        grid = bound_grid(cfg, np.concatenate([dS.points, dT.points]), pair.true_fS, pair.true_fT, pair.classes)
        check = bo.verify_bound_chain(grid, pair.true_fS, pair.true_fT, dS, dT)
        bo.write_reports_csv(root / f"bound_report_seed_{seed}.csv", check.reports)
        text = bo.summarize(check)
        (root / f"bound_summary_seed_{seed}.txt").write_text(text)
        print(f"seed {seed}\n{text}", end="")
        failures += len(check.violations)
    if failures:
        raise InvariantFailure(f"{failures} bound violations")
    return EXIT_OK


# ---------------------------------------------------------------------- plot

def _predict_with(g: nets.Network, h: nets.Network, x: np.ndarray) -> np.ndarray:
    modes = (g.mode, h.mode)
    g.eval()
    h.eval()
    try:
        return induced_label(ScoreBatch.from_scores(h(g(x))))
    finally:
        g.mode, h.mode = modes


def boundary_svg(g: nets.Network, h: nets.Network, pair: dt.DomainPair, resolution: int = 60) -> str:
    src = pair.source.x
    tgt = pair.eval_target()
    allx = np.concatenate([src, tgt.x])
    lo, hi = allx.min(axis=0), allx.max(axis=0)
    gx = np.linspace(lo[0], hi[0], resolution)
    gy = np.linspace(lo[1], hi[1], resolution)
    xx, yy = np.meshgrid(gx, gy)
    labels = _predict_with(g, h, np.c_[xx.ravel(), yy.ravel()]).reshape(xx.shape)
    return svg.scatter_regions({"source": (src, pair.source.y), "target": (tgt.x, tgt.y)}, gx, gy, labels,
                               title="decision regions of h")


def curve_values(gaps: np.ndarray) -> dict[str, np.ndarray]:
    """Two binary hypotheses ``f1 = sigmoid(t)``, ``f2 = sigmoid(-t)`` on class 0 for logit gap ``t``."""
    out = {"cmd_primitive": [], "cmd_dual": [], "l1": []}
    for t in gaps:
        p = 1.0 / (1.0 + np.exp(-t))
        f1 = np.array([p, 1.0 - p])
        f2 = np.array([1.0 - p, p])
        out["cmd_primitive"].append(cmd_pointwise(f1, f2, "primitive"))
        out["cmd_dual"].append(cmd_pointwise(f1, f2, "dual"))
        out["l1"].append(float(np.mean(np.abs(f1 - f2))))
    return {k: np.array(v) for k, v in out.items()}


def cmd_plot(args) -> int:
    out = Path(args.out)
    if args.kind == "curves":
        gaps = np.linspace(-args.gap_max, args.gap_max, args.points)
        body = svg.line_chart(gaps, curve_values(gaps), "discrepancy vs logit gap", "logit gap t", "value")
    elif args.kind == "marginal_discrepancy":
        if not args.metrics:
            raise UsageError("plot marginal_discrepancy needs --metrics")
        m = read_metrics(args.metrics)
        body = svg.line_chart(m["step"], {"eps_T(f1,f2) + eps_S(f1,f2)": m["eps_T_f1f2"] + m["eps_S_f1f2"]},
                              "marginal discrepancy per step", "step", "value")
    else:
        if not args.checkpoint or not args.config:
            raise UsageError("plot boundary needs --checkpoint and --config")
        cfg = load_config(args.config)
        if not cfg.synthetic:
            raise UnsupportedData("boundary plots need a two-dimensional synthetic dataset")
        loaded = nets.load_checkpoint(args.checkpoint)
        pair = build_dataset(cfg, args.seed if args.seed is not None else cfg.seeds[0])
        body = boundary_svg(loaded["g"], loaded["h"], pair)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(body)
    print(f"wrote {out}")
    return EXIT_OK


# ----------------------------------------------------------- grad-check/bench

def cmd_gradcheck(seed: int = 0) -> int:
    report = gradcheck.run_suite(seed)
    print(report.table())
    log.info("grad-check took %.2fs", report.seconds)
    if not report.passed:
        failed = [r.name for r in report.results if not r.passed]
        raise InvariantFailure(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_bench(steps: int, out: str | None) -> int:
    pair = dt.gen_twomoons_shift(512, 512, 30.0, 0.1, 0)
    rows = []
    for kind in ("source_only", "original", "alternative", "mdd", "mcd"):
        hp = Hyperparams(objective_kind=kind, total_steps=steps, eta=0.9 if kind == "alternative" else 0.0)
        state = init_state(hp, pair.d_in, pair.classes)
        xs, ys, xt = pair.source.x[:hp.batch_size], pair.source.y[:hp.batch_size], pair.target.x[:hp.batch_size]
        start = time.perf_counter()
        for _ in range(steps):
            step_minimax(state, (xs, ys), xt, hp)
        ms = 1000 * (time.perf_counter() - start) / max(steps, 1)
        rows.append({"objective": kind, "steps": steps, "ms_per_step": round(ms, 3)})
        print(f"{kind:<12} {ms:8.2f} ms/step")
    if out:
        write_versioned_csv(out, "bench", ("objective", "steps", "ms_per_step"), rows)
    return EXIT_OK


# ---------------------------------------------------------------------- main

def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jointda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    t = sub.add_parser("train", help="train every seed of a config")
    t.add_argument("config")
    v = sub.add_parser("verify-bound", help="check the 0-1 bound chain on a synthetic config")
    v.add_argument("config")
    pl = sub.add_parser("plot", help="write an SVG plot")
    pl.add_argument("kind", choices=("boundary", "curves", "marginal_discrepancy"))
    pl.add_argument("--out", required=True)
    pl.add_argument("--checkpoint")
    pl.add_argument("--config")
    pl.add_argument("--seed", type=int)
    pl.add_argument("--metrics")
    pl.add_argument("--gap-max", type=float, default=6.0)
    pl.add_argument("--points", type=int, default=121)
    g = sub.add_parser("grad-check", help="finite-difference check of every backward rule")
    g.add_argument("--seed", type=int, default=0)
    b = sub.add_parser("bench", help="time minimax steps for each objective")
    b.add_argument("--steps", type=int, default=20)
    b.add_argument("--out")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.command == "train":
            return cmd_train(load_config(args.config))
        if args.command == "verify-bound":
            return cmd_verify_bound(load_config(args.config))
        if args.command == "plot":
            return cmd_plot(args)
        if args.command == "grad-check":
            return cmd_gradcheck(args.seed)
        return cmd_bench(args.steps, args.out)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (dt.DataFormatError, UnsupportedData, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvariantFailure, bo.BoundViolation, TrainingDiverged, SchemaError) as exc:
        print(f"invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


def run() -> None:
    sys.exit(main())
