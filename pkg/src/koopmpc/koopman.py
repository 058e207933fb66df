"""Koopman surrogate model: nonlinear MLP encoder, linear latent dynamics
(z+ = A z + B u), linear decoder (x_hat = C z), plus multi-step rollout and
the three system-identification losses (autoencoder, latent prediction,
combined state prediction) with exact reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics
from .nn_core import (
    Mlp,
    MlpGrads,
    NormalizationSpec,
    load_checkpoint,
    mlp_backward,
    mlp_forward,
    mlp_from_state,
    mlp_state,
    norm_from_state,
    norm_state,
    save_checkpoint,
)

__all__ = [
    "KoopmanModel",
    "KoopmanGrads",
    "SiLossWeights",
    "default_cstr_norm",
    "encode",
    "latent_step",
    "decode",
    "rollout",
    "si_losses",
    "si_loss_and_grads",
    "save_model",
    "load_model",
]


def default_cstr_norm() -> NormalizationSpec:
    """Feasible-range normalization for (c, T, rho, F)."""
    return NormalizationSpec(
        names=("c", "T", "rho", "F"),
        lower=np.array(
            [dynamics.C_BOUNDS[0], dynamics.T_BOUNDS[0], dynamics.RHO_BOUNDS[0], dynamics.F_BOUNDS[0]]
        ),
        upper=np.array(
            [dynamics.C_BOUNDS[1], dynamics.T_BOUNDS[1], dynamics.RHO_BOUNDS[1], dynamics.F_BOUNDS[1]]
        ),
    )


@dataclass
class SiLossWeights:
    w_ae: float = 1.0
    w_pred: float = 1.0
    w_comb: float = 1.0

    def __post_init__(self):
        if min(self.w_ae, self.w_pred, self.w_comb) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_ae == self.w_pred == self.w_comb == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class KoopmanModel:
    encoder: Mlp
    A: np.ndarray  # (N, N)
    B: np.ndarray  # (N, m)
    C: np.ndarray  # (n, N)
    norm: NormalizationSpec  # states followed by controls

    def __post_init__(self):
        N = self.A.shape[0]
        if self.A.shape != (N, N):
            raise ValueError("A must be square")
        if self.B.shape[0] != N or self.C.shape[1] != N:
            raise ValueError("B/C latent dimension does not match A")
        if self.encoder.out_dim != N:
            raise ValueError("encoder output dimension does not match A")
        if self.encoder.in_dim != self.C.shape[0]:
            raise ValueError("encoder input dimension does not match C rows")
        for name, M in (("A", self.A), ("B", self.B), ("C", self.C)):
            if not np.all(np.isfinite(M)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def latent_dim(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.C.shape[0]

    @property
    def control_dim(self) -> int:
        return self.B.shape[1]

    @property
    def state_norm(self) -> NormalizationSpec:
        return self.norm.subset(list(self.norm.names[: self.state_dim]))

    @property
    def control_norm(self) -> NormalizationSpec:
        return self.norm.subset(list(self.norm.names[self.state_dim :]))

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + [self.A, self.B, self.C]

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(
            encoder=self.encoder.copy(),
            A=self.A.copy(),
            B=self.B.copy(),
            C=self.C.copy(),
            norm=self.norm,
        )

    @classmethod
    def create(
        cls,
        rng: np.random.Generator,
        latent_dim: int = 8,
        hidden: tuple[int, ...] = (4, 6),
        state_dim: int = 2,
        control_dim: int = 2,
        norm: NormalizationSpec | None = None,
    ) -> "KoopmanModel":
        encoder = Mlp.create([state_dim, *hidden, latent_dim], rng)
        A = 0.99 * np.eye(latent_dim)
        B = np.zeros((latent_dim, control_dim))
        C = np.sqrt(6.0 / (latent_dim + state_dim)) * rng.uniform(-1, 1, size=(state_dim, latent_dim))
        return cls(encoder, A, B, C, norm if norm is not None else default_cstr_norm())


@dataclass
class KoopmanGrads:
    encoder: MlpGrads
    dA: np.ndarray
    dB: np.ndarray
    dC: np.ndarray

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + [self.dA, self.dB, self.dC]

    @classmethod
    def zeros_like(cls, model: KoopmanModel) -> "KoopmanGrads":
        enc = MlpGrads(
            dW=[np.zeros_like(W) for W in model.encoder.weights],
            db=[np.zeros_like(b) for b in model.encoder.biases],
        )
        return cls(enc, np.zeros_like(model.A), np.zeros_like(model.B), np.zeros_like(model.C))

    def add_(self, other: "KoopmanGrads", scale: float = 1.0):
        for a, b in zip(self.params(), other.params()):
            a += scale * b
        return self


def encode(model: KoopmanModel, x: np.ndarray) -> np.ndarray:
    """Lift normalized state(s) into the latent space: z = psi(x)."""
    z, _ = mlp_forward(model.encoder, x)
    return z


def latent_step(model: KoopmanModel, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One linear latent transition z+ = A z + B u (batched on leading axis)."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent dimension {z.shape[-1]} != {model.latent_dim}")
    if u.shape[-1] != model.control_dim:
        raise ValueError(f"control dimension {u.shape[-1]} != {model.control_dim}")
    return z @ model.A.T + u @ model.B.T


def decode(model: KoopmanModel, z: np.ndarray) -> np.ndarray:
    """Linear readout x_hat = C z."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != model.latent_dim:
        raise ValueError(f"latent dimension {z.shape[-1]} != {model.latent_dim}")
    return z @ model.C.T


def rollout(model: KoopmanModel, x0: np.ndarray, controls: np.ndarray) -> np.ndarray:
    """Closed-loop prediction from a normalized initial state under a
    normalized control sequence of length H; returns H+1 predicted states.
    """
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or controls.shape[1] != model.control_dim:
        raise ValueError(f"controls must be (H, {model.control_dim}), got {controls.shape}")
    z = encode(model, np.asarray(x0, dtype=float))
    states = [decode(model, z)]
    for u in controls:
        z = latent_step(model, z, u)
        states.append(decode(model, z))
    return np.stack(states)


def _check_windows(model: KoopmanModel, X: np.ndarray, U: np.ndarray):
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    if X.ndim != 3 or U.ndim != 3:
        raise ValueError("window batch must be X:(B,H+1,n), U:(B,H,m)")
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if X.shape[0] != U.shape[0] or X.shape[1] != U.shape[1] + 1:
        raise ValueError(f"inconsistent window shapes X{X.shape} U{U.shape}")
    if X.shape[2] != model.state_dim or U.shape[2] != model.control_dim:
        raise ValueError("state/control dimensions do not match the model")
    return X, U


def si_losses(model: KoopmanModel, X: np.ndarray, U: np.ndarray) -> tuple[float, float, float]:
    """Mean-squared autoencoder, latent-prediction, and combined losses over a
    batch of H-step windows (closed-loop latents for H > 1). Inputs normalized.
    """
    X, U = _check_windows(model, X, U)
    B_, Hp1, n = X.shape
    H = Hp1 - 1
    Xf = X.reshape(B_ * Hp1, n)
    Psi_f = encode(model, Xf)
    Psi = Psi_f.reshape(B_, Hp1, model.latent_dim)
    recon = Psi_f @ model.C.T
    loss_ae = float(np.mean((recon - Xf) ** 2))
    z = Psi[:, 0]
    se_pred = 0.0
    se_comb = 0.0
    for t in range(H):
        z = z @ model.A.T + U[:, t] @ model.B.T
        se_pred += float(np.sum((z - Psi[:, t + 1]) ** 2))
        se_comb += float(np.sum((z @ model.C.T - X[:, t + 1]) ** 2))
    loss_pred = se_pred / (B_ * H * model.latent_dim)
    loss_comb = se_comb / (B_ * H * n)
    return loss_ae, loss_pred, loss_comb


def si_loss_and_grads(
    model: KoopmanModel,
    X: np.ndarray,
    U: np.ndarray,
    weights: SiLossWeights = SiLossWeights(),
) -> tuple[tuple[float, float, float], KoopmanGrads]:
    """Losses plus exact gradients of w_ae*ae + w_pred*pred + w_comb*comb
    w.r.t. every parameter group (encoder weights, A, B, C).
    """
    X, U = _check_windows(model, X, U)
    B_, Hp1, n = X.shape
    H = Hp1 - 1
    N = model.latent_dim
    Xf = X.reshape(B_ * Hp1, n)
    Psi_f, tape = mlp_forward(model.encoder, Xf)
    Psi = Psi_f.reshape(B_, Hp1, N)

    # forward closed loop, caching latents
    Z = np.empty((B_, Hp1, N))
    Z[:, 0] = Psi[:, 0]
    for t in range(H):
        Z[:, t + 1] = Z[:, t] @ model.A.T + U[:, t] @ model.B.T

    recon = Psi_f @ model.C.T
    loss_ae = float(np.mean((recon - Xf) ** 2))
    resid_pred = Z[:, 1:] - Psi[:, 1:]
    resid_comb = Z[:, 1:] @ model.C.T - X[:, 1:]
    loss_pred = float(np.mean(resid_pred**2))
    loss_comb = float(np.mean(resid_comb**2))

    dC = np.zeros_like(model.C)
    dA = np.zeros_like(model.A)
    dB = np.zeros_like(model.B)
    dPsi = np.zeros_like(Psi)

    # autoencoder path
    d_recon = (2.0 * weights.w_ae / recon.size) * (recon - Xf)
    dC += d_recon.T @ Psi_f
    dPsi_ae = d_recon @ model.C

    # prediction / combined paths on closed-loop latents
    dZ = np.zeros_like(Z)
    if H > 0:
        dZ[:, 1:] += (2.0 * weights.w_pred / resid_pred.size) * resid_pred
        dPsi[:, 1:] -= (2.0 * weights.w_pred / resid_pred.size) * resid_pred
        d_comb = (2.0 * weights.w_comb / resid_comb.size) * resid_comb
        for t in range(H):
            dC += d_comb[:, t].T @ Z[:, t + 1]
        dZ[:, 1:] += d_comb @ model.C

    # BPTT through z_{t+1} = A z_t + B u_t
    g = dZ[:, H].copy()
    for t in range(H, 0, -1):
        dA += g.T @ Z[:, t - 1]
        dB += g.T @ U[:, t - 1]
        g = g @ model.A
        if t - 1 > 0:
            g += dZ[:, t - 1]
    dPsi[:, 0] += g

    dPsi_total = dPsi.reshape(B_ * Hp1, N) + dPsi_ae
    _, enc_grads = mlp_backward(model.encoder, tape, dPsi_total)
    return (loss_ae, loss_pred, loss_comb), KoopmanGrads(enc_grads, dA, dB, dC)


def save_model(path, model: KoopmanModel, extra_meta: dict | None = None) -> None:
    arrays, enc_meta = mlp_state(model.encoder, "encoder")
    arrays.update({"A": model.A, "B": model.B, "C": model.C})
    n_arrays, n_meta = norm_state(model.norm)
    arrays.update(n_arrays)
    meta = {"encoder": enc_meta, **n_meta}
    if extra_meta:
        meta["extra"] = extra_meta
    save_checkpoint(path, "koopman", arrays, meta)


def load_model(path) -> KoopmanModel:
    kind, arrays, meta = load_checkpoint(path)
    if kind != "koopman":
        raise ValueError(f"checkpoint kind {kind!r} is not a Koopman model")
    return KoopmanModel(
        encoder=mlp_from_state(arrays, meta["encoder"], "encoder"),
        A=np.array(arrays["A"]),
        B=np.array(arrays["B"]),
        C=np.array(arrays["C"]),
        norm=norm_from_state(arrays, meta),
    )
