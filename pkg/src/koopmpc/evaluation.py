"""Deterministic test harnesses and metrics: tracking scores over shared
episode seeds, demand-response cost/violation/storage statistics on one
continuous test episode, autoencoder sensitivity/specificity analysis with
encoder/decoder cross-pairings, the adapted-bounds study, and CSV/SVG report
emission.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics
from .environments import EnmpcEnv, NmpcEnv, PriceSeries
from .koopman import KoopmanModel, decode, encode
from .mpc_policy import KoopmanMpcPolicy, OcpConfig, PolicyInput
from .ppo import MlpActor

__all__ = [
    "BoundsVariant",
    "TABLE_VARIANTS",
    "NmpcReport",
    "EnmpcReport",
    "EmbeddingReport",
    "KoopmanController",
    "MlpController",
    "SteadyStateController",
    "evaluate_nmpc",
    "evaluate_enmpc",
    "collect_embedding_dataset",
    "analyze_embedding",
    "emit_report",
]


@dataclass(frozen=True)
class BoundsVariant:
    name: str
    c_lb: float
    c_ub: float

    def __post_init__(self):
        if self.c_lb >= self.c_ub:
            raise ValueError("variant bounds must satisfy lb < ub")

    @property
    def c_bounds(self) -> tuple[float, float]:
        return (self.c_lb, self.c_ub)


TABLE_VARIANTS = {
    "tightened": BoundsVariant("tightened", 0.1299, 0.1435),
    "relaxed": BoundsVariant("relaxed", 0.1162, 0.1572),
    "shifted": BoundsVariant("shifted", 0.1504, 0.1777),
}


# ---------------------------------------------------------------------------
# Deterministic controllers
# ---------------------------------------------------------------------------

class KoopmanController:
    """Deterministic receding-horizon controller around a Koopman model."""

    def __init__(self, model: KoopmanModel, task: str, ocp_cfg: OcpConfig | None = None,
                 price_scale: float = 1.0, name: str = "koopman"):
        self.model = model
        self.task = task
        self.price_scale = price_scale
        self.name = name
        if ocp_cfg is None:
            ocp_cfg = (
                OcpConfig.nmpc() if task == "nmpc" else OcpConfig.enmpc(price_scale=price_scale)
            )
        self.cfg = ocp_cfg
        self.policy = KoopmanMpcPolicy(model, ocp_cfg)
        self.last_output = None

    def with_bounds(self, variant: BoundsVariant) -> "KoopmanController":
        if self.task != "enmpc":
            raise ValueError("bounds variants apply to the demand-response task")
        cfg = OcpConfig.enmpc(
            c_bounds=variant.c_bounds,
            price_scale=self.cfg.price_scale,
            slack_penalty=self.cfg.slack_penalty,
        )
        return KoopmanController(self.model, self.task, cfg, self.price_scale,
                                 name=f"{self.name}[{variant.name}]")

    def act(self, obs) -> np.ndarray:
        if self.task == "nmpc":
            inp = PolicyInput(state=obs.state, rho_ext=obs.rho_ext)
        else:
            inp = PolicyInput(state=obs.state, storage=obs.storage, prices=obs.prices)
        out = self.policy.act(inp)
        self.last_output = out
        return out.u_star

    @property
    def fallback_count(self) -> int:
        return self.policy.fallback_count


class MlpController:
    """Deterministic wrapper around a trained model-free policy; cannot adapt
    to bound changes (its constraints were learned implicitly)."""

    def __init__(self, actor: MlpActor, name: str = "mlp"):
        self.actor = actor
        self.task = actor.task
        self.name = name
        self.last_output = None

    def with_bounds(self, variant: BoundsVariant) -> "MlpController":
        return self

    def act(self, obs) -> np.ndarray:
        return self.actor.mean(obs)


class SteadyStateController:
    """Holds the steady-state controls; the cost baseline by definition."""

    def __init__(self, task: str = "enmpc"):
        self.task = task
        self.name = "steady-state"
        self.last_output = None

    def with_bounds(self, variant: BoundsVariant):
        return self

    def act(self, obs) -> np.ndarray:
        if self.task == "nmpc":
            return np.array([dynamics.STEADY_CONTROL.F])
        return np.array([dynamics.STEADY_CONTROL.rho, dynamics.STEADY_CONTROL.F])


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class NmpcReport:
    controller: str
    scores: np.ndarray
    failures: int = 0
    trajectory: dict | None = None

    @property
    def avg(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if self.scores.size > 1 else 0.0

    @property
    def min(self) -> float:
        return float(np.min(self.scores))

    @property
    def max(self) -> float:
        return float(np.max(self.scores))

    def summary(self) -> dict:
        return {"controller": self.controller, "avg": self.avg, "std": self.std,
                "min": self.min, "max": self.max, "episodes": int(self.scores.size),
                "failures": self.failures}


@dataclass
class EnmpcReport:
    controller: str
    relative_cost: float
    violation_pct: float
    avg_storage: float
    steps: int
    violations_by_var: dict
    total_cost: float
    baseline_cost: float
    trajectory: dict | None = None

    def summary(self) -> dict:
        return {
            "controller": self.controller,
            "relative_cost": self.relative_cost,
            "violation_pct": self.violation_pct,
            "avg_storage": self.avg_storage,
            "steps": self.steps,
            "viol_c_pct": self.violations_by_var["c"],
            "viol_T_pct": self.violations_by_var["T"],
            "viol_storage_pct": self.violations_by_var["storage"],
        }


@dataclass
class EmbeddingReport:
    pairings: dict  # (enc, dec) -> {"mse", "sensitivity", "specificity"}
    n_points: int
    n_positive: int

    def summary_rows(self) -> list[dict]:
        rows = []
        for (enc, dec), vals in self.pairings.items():
            rows.append({"encoder": enc, "decoder": dec, **vals})
        return rows


# ---------------------------------------------------------------------------
# Evaluation drivers
# ---------------------------------------------------------------------------

def evaluate_nmpc(controller, n_episodes: int = 100, seed: int = 0,
                  keep_trajectory: bool = False) -> NmpcReport:
    """Deterministic scores over shared-seed episodes; the same seed hands
    every controller the identical production-rate schedule."""
    scores = np.empty(n_episodes)
    failures = 0
    trajectory = None
    for ep in range(n_episodes):
        env = NmpcEnv(seed=np.random.SeedSequence((seed, ep)))
        obs = env.reset()
        total = 0.0
        track = None
        if keep_trajectory and ep == 0:
            track = {"time": [0.0], "c": [obs.state.c], "T": [obs.state.T],
                     "rho_ext": [obs.rho_ext], "F": [np.nan]}
        done = False
        step = 0
        while not done:
            u = controller.act(obs)
            obs, r, done, info = env.step(float(np.atleast_1d(u)[0]))
            if info.get("integration_failure"):
                failures += 1
            total += r
            if track is not None:
                track["time"].append((step + 1) * env.grid.dt_ctrl)
                track["c"].append(obs.state.c)
                track["T"].append(obs.state.T)
                track["rho_ext"].append(info["applied"].rho)
                track["F"].append(info["applied"].F)
            step += 1
        scores[ep] = total
        if track is not None:
            trajectory = track
    return NmpcReport(controller=getattr(controller, "name", "controller"),
                      scores=scores, failures=failures, trajectory=trajectory)


def evaluate_enmpc(
    controller,
    prices: PriceSeries,
    n_days: int = 30,
    variant: BoundsVariant | None = None,
    keep_trajectory: bool = False,
    price_scale: float | None = None,
) -> EnmpcReport:
    """Single continuous deterministic episode starting from steady state and
    empty storage. Violation accounting uses the (possibly adapted) bounds and
    inspects every discretization sub-step; MPC controllers receive adapted
    bounds in their OCPs while model-free ones are unchanged."""
    steps = n_days * 24
    c_bounds = variant.c_bounds if variant is not None else dynamics.C_BOUNDS
    if variant is not None:
        controller = controller.with_bounds(variant)
    env = EnmpcEnv(prices, seed=0, episode_steps=steps, c_bounds=c_bounds,
                   price_scale=price_scale)
    obs = env.reset("test")
    total_cost = 0.0
    baseline = 0.0
    violations = 0
    by_var = {"c": 0, "T": 0, "storage": 0}
    storage_sum = 0.0
    track = None
    if keep_trajectory:
        track = {"time": [0.0], "c": [obs.state.c], "T": [obs.state.T],
                 "rho": [np.nan], "F": [np.nan], "price": [env.current_price()],
                 "storage": [obs.storage], "violated": [0]}
    done = False
    step = 0
    while not done:
        u = controller.act(obs)
        obs, _r, done, info = env.step(u)
        total_cost += info["cost"]
        baseline += info["cost_ss"]
        if info["violated"]:
            violations += 1
        for k in by_var:
            by_var[k] += bool(info["violations"][k])
        storage_sum += info["storage"]
        if track is not None:
            track["time"].append((step + 1) * env.grid.dt_ctrl)
            track["c"].append(obs.state.c)
            track["T"].append(obs.state.T)
            track["rho"].append(info["applied"].rho)
            track["F"].append(info["applied"].F)
            track["price"].append(info["price"])
            track["storage"].append(info["storage"])
            track["violated"].append(int(info["violated"]))
        step += 1
    return EnmpcReport(
        controller=getattr(controller, "name", "controller"),
        relative_cost=total_cost / baseline,
        violation_pct=100.0 * violations / steps,
        avg_storage=storage_sum / steps,
        steps=steps,
        violations_by_var={k: 100.0 * v / steps for k, v in by_var.items()},
        total_cost=total_cost,
        baseline_cost=baseline,
        trajectory=track,
    )


# ---------------------------------------------------------------------------
# Koopman embedding analysis
# ---------------------------------------------------------------------------

def collect_embedding_dataset(controller, prices: PriceSeries, n_steps: int = 20_000,
                              seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Roll the given controller in the demand-response environment and record
    every discretization sub-step state, labeled by true bound violation."""
    states = np.empty((n_steps, 2))
    env = EnmpcEnv(prices, seed=np.random.SeedSequence((seed, 7)))
    obs = env.reset("train")
    k = 0
    while k < n_steps:
        u = controller.act(obs)
        obs, _r, done, info = env.step(u)
        for s in info["substates"]:
            if k >= n_steps:
                break
            states[k] = (s.c, s.T)
            k += 1
        if done:
            obs = env.reset("train")
    labels = _violates(states)
    return states, labels


def _violates(states: np.ndarray) -> np.ndarray:
    return (
        (states[:, 0] < dynamics.C_BOUNDS[0])
        | (states[:, 0] > dynamics.C_BOUNDS[1])
        | (states[:, 1] < dynamics.T_BOUNDS[0])
        | (states[:, 1] > dynamics.T_BOUNDS[1])
    )


def analyze_embedding(si_model: KoopmanModel, rl_model: KoopmanModel,
                      states: np.ndarray, labels: np.ndarray) -> EmbeddingReport:
    """Autoencoder MSE, sensitivity, and specificity for every encoder/decoder
    pairing of the two models (SI/SI, RL/RL, SI/RL, RL/SI)."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("embedding dataset must contain both violation classes")
    models = {"SI": si_model, "RL": rl_model}
    norm = si_model.state_norm
    x_norm = norm.normalize(states)
    pairings = {}
    for enc_name, enc_model in models.items():
        z = encode(enc_model, x_norm)
        for dec_name, dec_model in models.items():
            recon_norm = z @ dec_model.C.T
            mse = float(np.mean((recon_norm - x_norm) ** 2))
            recon = norm.denormalize(recon_norm)
            recon_viol = _violates(recon)
            sensitivity = float(np.mean(recon_viol[labels]))
            specificity = float(np.mean(~recon_viol[~labels]))
            pairings[(enc_name, dec_name)] = {
                "mse": mse, "sensitivity": sensitivity, "specificity": specificity,
            }
    return EmbeddingReport(pairings=pairings, n_points=int(labels.size),
                           n_positive=int(labels.sum()))


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _trajectory_rows(report) -> list[dict]:
    t = report.trajectory
    if not t:
        return []
    keys = list(t.keys())
    return [dict(zip(keys, vals)) for vals in zip(*(t[k] for k in keys))]


def emit_report(reports: list, out_dir, formats: tuple[str, ...] = ("csv",)) -> list[Path]:
    """Write summary and trajectory CSVs (and optional SVG line plots) for a
    mixed list of NmpcReport / EnmpcReport / EmbeddingReport objects."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    nmpc = [r for r in reports if isinstance(r, NmpcReport)]
    enmpc = [r for r in reports if isinstance(r, EnmpcReport)]
    embed = [r for r in reports if isinstance(r, EmbeddingReport)]

    if nmpc:
        path = out_dir / "nmpc_summary.csv"
        _write_csv(path, [r.summary() for r in nmpc])
        written.append(path)
        scores_rows = []
        for r in nmpc:
            for i, s in enumerate(r.scores):
                scores_rows.append({"controller": r.controller, "episode": i, "score": s})
        path = out_dir / "nmpc_scores.csv"
        _write_csv(path, scores_rows)
        written.append(path)
    if enmpc:
        path = out_dir / "enmpc_summary.csv"
        _write_csv(path, [r.summary() for r in enmpc])
        written.append(path)
    if embed:
        path = out_dir / "embedding_summary.csv"
        rows = []
        for r in embed:
            rows.extend(r.summary_rows())
        _write_csv(path, rows)
        written.append(path)

    for r in nmpc + enmpc:
        rows = _trajectory_rows(r)
        if rows:
            safe = r.controller.replace("/", "_").replace(" ", "_")
            path = out_dir / f"trajectory_{safe}.csv"
            _write_csv(path, rows)
            written.append(path)
            if "svg" in formats:
                written.append(_plot_trajectory(out_dir, r))
    return written


def _plot_trajectory(out_dir: Path, report) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = report.trajectory
    time = np.asarray(t["time"])
    is_enmpc = "price" in t
    n_rows = 4 if is_enmpc else 3
    fig, axes = plt.subplots(n_rows, 1, figsize=(9, 2.2 * n_rows), sharex=True)
    axes[0].plot(time, t["c"], label="c")
    if is_enmpc:
        axes[0].axhline(dynamics.C_BOUNDS[0], ls=":", c="k", lw=0.8)
        axes[0].axhline(dynamics.C_BOUNDS[1], ls=":", c="k", lw=0.8)
    else:
        axes[0].axhline(dynamics.STEADY_STATE.c, ls=":", c="k", lw=0.8)
    axes[0].set_ylabel("c")
    axes[1].plot(time, t["T"], label="T", color="tab:red")
    axes[1].set_ylabel("T")
    if is_enmpc:
        axes[2].plot(time, t["F"], color="tab:blue")
        ax2 = axes[2].twinx()
        ax2.plot(time, t["price"], color="tab:gray", alpha=0.6)
        axes[2].set_ylabel("F / price")
        axes[3].plot(time, t["storage"], color="tab:green")
        axes[3].set_ylabel("storage [h]")
    else:
        axes[2].plot(time, t["F"], color="tab:blue")
        ax2 = axes[2].twinx()
        ax2.plot(time, t["rho_ext"], color="tab:gray", alpha=0.7)
        axes[2].set_ylabel("F / rho_ext")
    axes[-1].set_xlabel("time [h]")
    fig.suptitle(report.controller)
    fig.tight_layout()
    safe = report.controller.replace("/", "_").replace(" ", "_")
    path = out_dir / f"trajectory_{safe}.svg"
    fig.savefig(path)
    plt.close(fig)
    return path
