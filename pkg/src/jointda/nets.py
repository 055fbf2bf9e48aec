"""Small MLPs used as feature extractor and classifier heads.

Layer layout per hidden layer: affine -> (batch norm) -> activation -> (dropout).
The last layer is affine only and returns raw scores.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_ad as ad
from .tensor_ad import ContractError, DimensionError, Tensor

CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.9
BN_EPS = 1e-5
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: tuple[int, ...]
    activation: str = "relu"
    dropout_rate: float = 0.0
    spectral_norm: bool = False
    batch_norm: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ContractError("an MLP needs an input width and at least one layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ContractError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ("relu", "tanh"):
            raise ContractError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must lie in [0, 1): {self.dropout_rate}")


def extractor_spec(d_in: int, width: int = 64, **kw) -> MlpSpec:
    return MlpSpec((d_in, width, width), **kw)


def head_spec(classes: int, width: int = 64, spectral_norm: bool = True, **kw) -> MlpSpec:
    return MlpSpec((width, width, classes), spectral_norm=spectral_norm, **kw)


@dataclass
class PowerIterState:
    u: np.ndarray  # right singular vector estimate, length = fan_out
    v: np.ndarray  # left singular vector estimate, length = fan_in


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / max(n, SIGMA_FLOOR)


def power_iterate(w: np.ndarray, state: PowerIterState, iters: int) -> None:
    """Run ``iters`` power-iteration rounds on ``w`` (fan_in x fan_out), updating ``state`` in place."""
    u = state.u
    for _ in range(iters):
        v = _normalize(w @ u)
        u = _normalize(w.T @ v)
    state.u[:] = u
    state.v[:] = _normalize(w @ u)


def spectral_normalize(weight: Tensor, state: PowerIterState, iters: int = 1, update: bool = True) -> Tensor:
    """Return ``weight / sigma_hat`` with ``sigma_hat = v^T W u`` from power iteration.

    ``u`` and ``v`` are treated as constants, so the gradient flows through
    ``sigma_hat`` as a linear function of the weight.
    """
    if iters < 1 and update:
        raise ContractError("spectral_normalize needs at least one power iteration")
    if update:
        power_iterate(weight.data, state, iters)
    outer = np.outer(state.v, state.u)
    sigma = ad.sum_(ad.mul(weight, outer))
    if abs(sigma.item()) < SIGMA_FLOOR:
        return weight
    return ad.div(weight, sigma)


@dataclass
class Network:
    spec: MlpSpec
    weights: list[Tensor]
    biases: list[Tensor]
    bn_gamma: list[Tensor] = field(default_factory=list)
    bn_beta: list[Tensor] = field(default_factory=list)
    running_mean: list[np.ndarray] = field(default_factory=list)
    running_var: list[np.ndarray] = field(default_factory=list)
    sn_state: list[PowerIterState] = field(default_factory=list)
    mode: str = "train"
    sn_iters: int = 1

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases, *self.bn_gamma, *self.bn_beta]

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def zero_grad(self) -> None:
        ad.zero_grads(self.parameters())

    def effective_weights(self) -> list[np.ndarray]:
        """Weights as used by an eval-mode forward (after spectral normalization)."""
        if not self.spec.spectral_norm:
            return [w.data.copy() for w in self.weights]
        return [spectral_normalize(w, s, update=False).data for w, s in zip(self.weights, self.sn_state)]

    def __call__(self, x, seed: int | None = None) -> Tensor:
        return forward(self, x, seed)


def init_network(spec: MlpSpec, seed: int, sn_warmup: int = 500) -> Network:
    """He-normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    widths = spec.layer_widths
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(ad.parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))))
        biases.append(ad.parameter(np.zeros(fan_out)))
    net = Network(spec, weights, biases)
    if spec.batch_norm:
        for width in widths[1:-1]:
            net.bn_gamma.append(ad.parameter(np.ones(width)))
            net.bn_beta.append(ad.parameter(np.zeros(width)))
            net.running_mean.append(np.zeros(width))
            net.running_var.append(np.ones(width))
    if spec.spectral_norm:
        for w in weights:
            fan_in, fan_out = w.shape
            state = PowerIterState(_normalize(rng.normal(size=fan_out)), np.zeros(fan_in))
            _converge(w.data, state, sn_warmup)
            net.sn_state.append(state)
    return net


def _converge(w: np.ndarray, state: PowerIterState, max_iters: int, tol: float = 1e-13) -> None:
    prev = 0.0
    for _ in range(max_iters):
        power_iterate(w, state, 1)
        sigma = float(state.v @ w @ state.u)
        if abs(sigma - prev) <= tol * max(abs(sigma), 1.0):
            break
        prev = sigma


def _batch_norm(z: Tensor, net: Network, i: int) -> Tensor:
    gamma, beta = net.bn_gamma[i], net.bn_beta[i]
    if net.mode == "train":
        mu = ad.mean(z, axis=0, keepdims=True)
        centered = ad.sub(z, mu)
        var = ad.mean(ad.mul(centered, centered), axis=0, keepdims=True)
        n = z.shape[0]
        unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
        net.running_mean[i] = BN_MOMENTUM * net.running_mean[i] + (1 - BN_MOMENTUM) * mu.data.reshape(-1)
        net.running_var[i] = BN_MOMENTUM * net.running_var[i] + (1 - BN_MOMENTUM) * unbiased
        xhat = ad.div(centered, ad.sqrt(ad.add(var, BN_EPS)))
    else:
        xhat = ad.div(ad.sub(z, net.running_mean[i]), np.sqrt(net.running_var[i] + BN_EPS))
    return ad.add(ad.mul(xhat, gamma), beta)


def forward(net: Network, x, seed: int | None = None) -> Tensor:
    """Scores for a batch. ``seed`` drives dropout masks and is required when dropout is active."""
    x = ad.as_tensor(x)
    spec = net.spec
    if x.data.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise DimensionError(f"expected input of width {spec.layer_widths[0]}, got shape {x.shape}")
    training = net.mode == "train"
    use_dropout = training and spec.dropout_rate > 0
    if use_dropout and seed is None:
        raise ContractError("training-mode dropout needs an explicit seed")
    rng = np.random.default_rng(seed) if use_dropout else None
    act = ad.relu if spec.activation == "relu" else ad.tanh

    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        if spec.spectral_norm:
            w = spectral_normalize(w, net.sn_state[i], net.sn_iters, update=training)
        h = ad.add(ad.matmul(h, w), b)
        if i == last:
            break
        if spec.batch_norm:
            h = _batch_norm(h, net, i)
        h = act(h)
        if use_dropout:
            keep = 1.0 - spec.dropout_rate
            mask = (rng.random(h.shape) < keep) / keep
            h = ad.mul(h, mask)
    return h


# ------------------------------------------------------------- checkpoints
#
# Layout (numpy .npz archive):
#   "format_version"          int64 scalar, currently 1
#   "names"                   JSON list of network names
#   "<name>/spec"             JSON of MlpSpec fields
#   "<name>/mode", "<name>/sn_iters"
#   "<name>/W<i>", "<name>/b<i>"              affine layers, W is fan_in x fan_out
#   "<name>/gamma<i>", "<name>/beta<i>", "<name>/rmean<i>", "<name>/rvar<i>"   batch norm
#   "<name>/u<i>", "<name>/v<i>"              power-iteration vectors

def save_checkpoint(path, nets: dict[str, Network]) -> None:
    arrays: dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "names": np.array(json.dumps(list(nets))),
    }
    for name, net in nets.items():
        arrays[f"{name}/spec"] = np.array(json.dumps(asdict(net.spec)))
        arrays[f"{name}/mode"] = np.array(net.mode)
        arrays[f"{name}/sn_iters"] = np.array(net.sn_iters)
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"{name}/W{i}"] = w.data
            arrays[f"{name}/b{i}"] = b.data
        for i in range(len(net.bn_gamma)):
            arrays[f"{name}/gamma{i}"] = net.bn_gamma[i].data
            arrays[f"{name}/beta{i}"] = net.bn_beta[i].data
            arrays[f"{name}/rmean{i}"] = net.running_mean[i]
            arrays[f"{name}/rvar{i}"] = net.running_var[i]
        for i, s in enumerate(net.sn_state):
            arrays[f"{name}/u{i}"] = s.u
            arrays[f"{name}/v{i}"] = s.v
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> dict[str, Network]:
    with np.load(Path(path), allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for name in json.loads(str(z["names"])):
            spec = MlpSpec(**json.loads(str(z[f"{name}/spec"])))
            n_layers = len(spec.layer_widths) - 1
            net = Network(
                spec,
                [ad.parameter(z[f"{name}/W{i}"]) for i in range(n_layers)],
                [ad.parameter(z[f"{name}/b{i}"]) for i in range(n_layers)],
                mode=str(z[f"{name}/mode"]),
                sn_iters=int(z[f"{name}/sn_iters"]),
            )
            if spec.batch_norm:
                for i in range(n_layers - 1):
                    net.bn_gamma.append(ad.parameter(z[f"{name}/gamma{i}"]))
                    net.bn_beta.append(ad.parameter(z[f"{name}/beta{i}"]))
                    net.running_mean.append(z[f"{name}/rmean{i}"].copy())
                    net.running_var.append(z[f"{name}/rvar{i}"].copy())
            if spec.spectral_norm:
                net.sn_state = [PowerIterState(z[f"{name}/u{i}"].copy(), z[f"{name}/v{i}"].copy())
                                for i in range(n_layers)]
            out[name] = net
    return out
