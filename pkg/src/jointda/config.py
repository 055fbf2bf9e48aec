"""Flat ``section.key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key is declared in :data:`KEYS` with its type and default, and anything
else is rejected with the offending line number. ``dump`` writes every key
(defaults included) in sorted order, which is what ``config.echo`` holds.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .discrepancy import DiscrepancyKind
from .objective import Hyperparams

OUTPUT_ROOT_ENV = "JOINTDA_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Unknown key, bad value or malformed line."""


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    items = [t.strip() for t in text.strip("[]").split(",") if t.strip()]
    if not items:
        raise ValueError("empty list")
    return tuple(int(t) for t in items)


def _opt_str(text: str) -> str:
    return text


# key -> (parser, default)
KEYS: dict[str, tuple] = {
    "run.name": (str, "experiment"),
    "run.output_dir": (str, "runs/experiment"),
    "run.seeds": (_int_list, (0,)),
    "run.baseline": (str, "none"),
    "run.eval_every": (int, 50),

    "data.generator": (str, "twomoons"),
    "data.seed": (int, -1),  # -1: use the run seed
    "data.n_source": (int, 2000),
    "data.n_target": (int, 2000),
    "data.rotation_degrees": (float, 30.0),
    "data.noise_sigma": (float, 0.1),
    "data.separation": (float, 4.0),
    "data.shift": (float, 0.0),
    "data.flip_fraction": (float, 0.3),
    "data.mnist_images": (_opt_str, ""),
    "data.mnist_labels": (_opt_str, ""),
    "data.usps_images": (_opt_str, ""),
    "data.usps_labels": (_opt_str, ""),
    "data.mnist_test_images": (_opt_str, ""),
    "data.mnist_test_labels": (_opt_str, ""),
    "data.usps_test_images": (_opt_str, ""),
    "data.usps_test_labels": (_opt_str, ""),
    "data.image_size": (int, 16),

    "train.objective_kind": (str, "original"),
    "train.gamma": (float, 1.0),
    "train.eta": (float, 0.0),
    "train.lr": (float, 1e-4),
    "train.inner_g_steps": (int, 4),
    "train.batch_size": (int, 128),
    "train.total_steps": (int, 2000),
    "train.constraint_weight": (float, 1.0),
    "train.discrepancy": (str, "cmd_primitive"),
    "train.clamp": (float, 1e-7),
    "train.width": (int, 64),
    "train.activation": (str, "relu"),
    "train.head_spectral_norm": (_bool, True),
    "train.batch_norm": (_bool, False),
    "train.dropout_rate": (float, 0.0),

    "report.checkpoint": (_bool, True),
    "report.bound_probe": (_bool, True),
    "report.boundary_plot": (_bool, False),

    "bound.grid": (str, "halfspace"),
    "bound.n_angles": (int, 72),
    "bound.n_offsets": (int, 41),
    "bound.n_thresholds": (int, 41),
}

GENERATORS = ("twomoons", "mixing_blobs", "digits")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seeds(self) -> tuple[int, ...]:
        return self.values["run.seeds"]

    @property
    def synthetic(self) -> bool:
        return self.values["data.generator"] != "digits"

    def hyperparams(self, seed: int, objective_kind: str | None = None) -> Hyperparams:
        t = self.section("train")
        return Hyperparams(
            gamma=t["gamma"], eta=t["eta"], lr=t["lr"], inner_g_steps=t["inner_g_steps"],
            batch_size=t["batch_size"], total_steps=t["total_steps"],
            discrepancy=DiscrepancyKind(t["discrepancy"], t["clamp"]),
            objective_kind=objective_kind or t["objective_kind"], constraint_weight=t["constraint_weight"],
            seed=seed, width=t["width"], activation=t["activation"],
            head_spectral_norm=t["head_spectral_norm"], batch_norm=t["batch_norm"],
            dropout_rate=t["dropout_rate"])

    def output_dir(self) -> Path:
        """``run.output_dir`` resolved against the override root when one is set."""
        out = Path(self.values["run.output_dir"])
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        if root:
            return Path(root) / out.name
        return out

    def dump(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {k: default for k, (_, default) in KEYS.items()}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        try:
            values[key] = KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    cfg = ExperimentConfig(values)
    _validate(cfg, source)
    return cfg


def _validate(cfg: ExperimentConfig, source: str) -> None:
    if cfg["data.generator"] not in GENERATORS:
        raise ConfigError(f"{source}: data.generator must be one of {GENERATORS}")
    if cfg["bound.grid"] not in ("halfspace", "stump"):
        raise ConfigError(f"{source}: bound.grid must be 'halfspace' or 'stump'")
    if cfg["run.baseline"] not in ("none", "source_only", "original", "alternative", "mdd", "mcd"):
        raise ConfigError(f"{source}: run.baseline must be 'none' or an objective kind")
    try:
        cfg.hyperparams(cfg.seeds[0])
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))
