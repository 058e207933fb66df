"""Minimal dense-network machinery shared by the Koopman encoder, the PPO
critic, and the model-free policies: forward passes with explicit tapes,
exact reverse-mode gradients, Adam, global gradient clipping, and min-max
normalization. Deliberately dependency-free beyond numpy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Mlp",
    "MlpTape",
    "NormalizationSpec",
    "AdamState",
    "NonFiniteGradient",
    "mlp_forward",
    "mlp_backward",
    "adam_step",
    "global_norm_clip",
    "glorot_uniform",
    "normalize",
    "denormalize",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("tanh", "identity")


class NonFiniteGradient(ValueError):
    """Raised when an optimizer update receives non-finite gradients."""


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class Mlp:
    """Dense stack; weights[i] has shape (out_i, in_i), activation per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer lists must have equal length")
        for i, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r} in layer {i}")
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: weight {W.shape} / bias {b.shape} mismatch")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {W.shape[1]} does not chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @classmethod
    def create(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden_activation: str = "tanh",
        output_activation: str = "identity",
    ) -> "Mlp":
        """Glorot-uniform weights, zero biases; sizes = [in, h1, ..., out]."""
        weights, biases, acts = [], [], []
        for i in range(len(sizes) - 1):
            weights.append(glorot_uniform(rng, sizes[i + 1], sizes[i]))
            biases.append(np.zeros(sizes[i + 1]))
            acts.append(hidden_activation if i < len(sizes) - 2 else output_activation)
        return cls(weights, biases, acts)

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.append(W)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
        )


@dataclass
class MlpTape:
    """Activation cache from one forward pass; consumed by mlp_backward."""

    net_id: int
    inputs: list[np.ndarray]      # input to each layer, shape (B, in_i)
    outputs: list[np.ndarray]     # post-activation output of each layer
    squeezed: bool                # True if the original input was 1-D


def _as_batch(x: np.ndarray, dim: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"{what}: expected dimension {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != dim:
            raise ValueError(f"{what}: expected last dimension {dim}, got {x.shape[1]}")
        return x, False
    raise ValueError(f"{what}: expected 1-D or 2-D array, got ndim={x.ndim}")


def mlp_forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, MlpTape]:
    """Forward pass; accepts (d,) or (B, d) input. Returns (output, tape)."""
    h, squeezed = _as_batch(x, net.in_dim, "mlp_forward input")
    inputs, outputs = [], []
    for W, b, act in zip(net.weights, net.biases, net.activations):
        inputs.append(h)
        z = h @ W.T + b
        h = np.tanh(z) if act == "tanh" else z
        outputs.append(h)
    y = h[0] if squeezed else h
    return y, MlpTape(net_id=id(net), inputs=inputs, outputs=outputs, squeezed=squeezed)


@dataclass
class MlpGrads:
    dW: list[np.ndarray]
    db: list[np.ndarray]

    def params(self) -> list[np.ndarray]:
        out = []
        for dW, db in zip(self.dW, self.db):
            out.append(dW)
            out.append(db)
        return out


def mlp_backward(net: Mlp, tape: MlpTape, output_grad: np.ndarray) -> tuple[np.ndarray, MlpGrads]:
    """Exact reverse-mode gradients for a recorded forward pass.

    output_grad has the same shape the forward output had; gradients w.r.t.
    parameters are summed over the batch.
    """
    if tape.net_id != id(net):
        raise ValueError("tape does not belong to this network")
    if len(tape.inputs) != len(net.weights):
        raise ValueError("tape layer count does not match network")
    g = np.asarray(output_grad, dtype=float)
    if tape.squeezed:
        if g.shape != (net.out_dim,):
            raise ValueError(f"output_grad shape {g.shape} != ({net.out_dim},)")
        g = g[None, :]
    else:
        if g.ndim != 2 or g.shape[1] != net.out_dim:
            raise ValueError(f"output_grad shape {g.shape} incompatible with output dim {net.out_dim}")
        if g.shape[0] != tape.inputs[0].shape[0]:
            raise ValueError("output_grad batch size does not match tape")
    dW = [None] * len(net.weights)
    db = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        if net.activations[i] == "tanh":
            g = g * (1.0 - tape.outputs[i] ** 2)
        dW[i] = g.T @ tape.inputs[i]
        db[i] = g.sum(axis=0)
        g = g @ net.weights[i]
    input_grad = g[0] if tape.squeezed else g
    return input_grad, MlpGrads(dW=dW, db=db)


@dataclass
class AdamState:
    """Adam moments for a fixed list of parameter arrays."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[np.ndarray], lr: float, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            lr=lr,
            **kw,
        )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], opt: AdamState):
    """Standard Adam update with bias correction; mutates params and opt in
    place and returns them. Raises NonFiniteGradient before touching state.
    """
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ValueError("params/grads/state length mismatch")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("non-finite gradient; update rejected")
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return params, opt


def global_norm_clip(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale the gradient list so its global L2 norm is at most max_norm.

    Returns (grads, pre_clip_norm); scaling happens in place.
    """
    total = 0.0
    for g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return grads, norm


@dataclass(frozen=True)
class NormalizationSpec:
    """Per-variable (lower, upper) reference ranges; maps to [0, 1]."""

    names: tuple[str, ...]
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo.shape != (len(self.names),) or hi.shape != (len(self.names),):
            raise ValueError("lower/upper must match the number of names")
        if not np.all(hi > lo):
            raise ValueError("every range must have upper > lower")

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def normalize(self, value: np.ndarray) -> np.ndarray:
        v = np.asarray(value, dtype=float)
        if v.shape[-1] != len(self.names):
            raise ValueError(f"expected last dimension {len(self.names)}, got {v.shape}")
        return (v - self.lower) / self.width

    def denormalize(self, value: np.ndarray) -> np.ndarray:
        v = np.asarray(value, dtype=float)
        if v.shape[-1] != len(self.names):
            raise ValueError(f"expected last dimension {len(self.names)}, got {v.shape}")
        return self.lower + v * self.width

    def subset(self, names: list[str]) -> "NormalizationSpec":
        idx = [self.names.index(n) for n in names]
        return NormalizationSpec(tuple(names), self.lower[idx], self.upper[idx])


def normalize(value: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return spec.normalize(value)


def denormalize(value: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    return spec.denormalize(value)


# ---------------------------------------------------------------------------
# Checkpoint container: npz with a format-version tag and a JSON meta block.
# Arrays round-trip bit-exactly; meta holds structure (shapes, activations,
# normalization names) and arbitrary JSON-serializable extras.
# ---------------------------------------------------------------------------

def mlp_state(net: Mlp, prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {}
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"{prefix}.W{i}"] = W
        arrays[f"{prefix}.b{i}"] = b
    meta = {"n_layers": len(net.weights), "activations": list(net.activations)}
    return arrays, meta


def mlp_from_state(arrays: dict[str, np.ndarray], meta: dict, prefix: str) -> Mlp:
    n = meta["n_layers"]
    weights = [np.array(arrays[f"{prefix}.W{i}"]) for i in range(n)]
    biases = [np.array(arrays[f"{prefix}.b{i}"]) for i in range(n)]
    return Mlp(weights, biases, list(meta["activations"]))


def norm_state(spec: NormalizationSpec) -> tuple[dict[str, np.ndarray], dict]:
    return (
        {"norm.lower": spec.lower, "norm.upper": spec.upper},
        {"norm_names": list(spec.names)},
    )


def norm_from_state(arrays: dict[str, np.ndarray], meta: dict) -> NormalizationSpec:
    return NormalizationSpec(
        tuple(meta["norm_names"]),
        np.array(arrays["norm.lower"]),
        np.array(arrays["norm.upper"]),
    )


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    header = {"format_version": CHECKPOINT_VERSION, "kind": kind, "meta": meta}
    payload = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    payload.update(arrays)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {header.get('format_version')!r}"
            )
        arrays = {k: data[k] for k in data.files if k != "__header__"}
    return header["kind"], arrays, header["meta"]
