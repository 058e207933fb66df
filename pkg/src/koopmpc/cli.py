"""Command-line entry point orchestrating the full workflow: datagen ->
train-si -> train-rl -> evaluate / analyze-autoencoder / adapted-bounds ->
plot. Every command writes its artifacts plus a manifest carrying the config
hash, seed, and versions; commands are idempotent for a fixed config and
seed. Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, dynamics, environments, evaluation, koopman, ppo, sysid
from .config import ConfigError, RunConfig, config_hash, load_config
from .mpc_policy import OcpConfig

CONFIG_ENV_VAR = "KOOPMPC_CONFIG"


class UsageError(Exception):
    """Invalid invocation or missing upstream artifact (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="koopmpc",
        description=(
            "Koopman surrogate models for CSTR control: data generation, "
            "system identification, end-to-end RL refinement, and evaluation."
        ),
    )
    parser.add_argument("--version", action="version", version=f"koopmpc {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", default=os.environ.get(CONFIG_ENV_VAR),
                       help=f"YAML config path (default: ${CONFIG_ENV_VAR})")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override config out_dir")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
        return p

    common(sub.add_parser("datagen", help="generate the SI trajectory dataset"))
    common(sub.add_parser("train-si", help="curriculum system identification"))
    p = common(sub.add_parser("train-rl", help="PPO refinement / model-free training"))
    p.add_argument("--task", choices=("nmpc", "enmpc"), default=None)
    p.add_argument("--actor", choices=("koopman", "mlp"), default="koopman")
    p.add_argument("--episodes", type=int, default=None, help="override ppo.total_episodes")
    p = common(sub.add_parser("evaluate", help="deterministic test protocol"))
    p.add_argument("--task", choices=("nmpc", "enmpc"), default=None)
    p.add_argument("--variant", choices=tuple(evaluation.TABLE_VARIANTS), default=None)
    p.add_argument("--episodes", type=int, default=None, help="override evaluation.nmpc_episodes")
    p.add_argument("--plots", action="store_true", help="also render SVG plots")
    common(sub.add_parser("analyze-autoencoder", help="embedding sensitivity/specificity study"))
    common(sub.add_parser("adapted-bounds", help="distribution-shift study over all variants"))
    common(sub.add_parser("plot", help="render SVG plots from evaluation CSVs"))
    return parser


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    if getattr(args, "task", None):
        cfg.task = args.task
    return cfg


def _write_manifest(directory: Path, command: str, cfg: RunConfig, t0: float,
                    artifacts: list[str], extra: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": cfg.seed,
        "versions": {
            "koopmpc": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
        },
        "wall_clock_s": round(time.time() - t0, 3),
        "artifacts": artifacts,
    }
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, default=str)


def _build_prices(cfg: RunConfig):
    pc = cfg.price
    if pc.source == "csv":
        full = environments.load_prices(pc.csv_path, pc.timestamp_col, pc.price_col)
    else:
        full = environments.synthetic_prices(
            start=pc.train_start, end=pc.test_end, seed=pc.synthetic_seed
        )
    train = full.slice_range(pc.train_start, pc.train_end)
    test = full.slice_range(pc.test_start, pc.test_end)
    return train, test, train.mean()


def _dataset_dir(cfg) -> Path:
    return Path(cfg.out_dir) / "dataset"


def _si_path(cfg) -> Path:
    return Path(cfg.out_dir) / "si" / "model.npz"


def _rl_dir(cfg, task: str, actor: str, seed: int) -> Path:
    return Path(cfg.out_dir) / f"rl_{task}_{actor}_seed{seed}"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing artifact {path}; run `koopmpc {producer}` first")
    return path


def _datagen_config(cfg: RunConfig) -> sysid.DatagenConfig:
    d = cfg.datagen
    return sysid.DatagenConfig(
        n_trajectories=d.n_trajectories, n_train=d.n_train, traj_len=d.traj_len,
        c_target=d.c_target, w_rho=d.w_rho, w_F=d.w_F, lookahead=d.lookahead,
        terminal_weight=d.terminal_weight, gs_iters=d.gs_iters, seed=cfg.seed,
    )


def _ocp_config(cfg: RunConfig, task: str, price_scale: float = 1.0,
                c_bounds=None) -> OcpConfig:
    o = cfg.ocp
    if task == "nmpc":
        return OcpConfig.nmpc(horizon=o.nmpc_horizon, block=o.block,
                              tikhonov=o.tikhonov, qp_tol=o.qp_tol,
                              qp_max_iter=o.qp_max_iter)
    return OcpConfig.enmpc(
        c_bounds=c_bounds, horizon=o.enmpc_horizon, block=o.block,
        slack_penalty=o.slack_penalty, tikhonov=o.tikhonov, qp_tol=o.qp_tol,
        qp_max_iter=o.qp_max_iter, price_scale=price_scale,
    )


def _ppo_config(cfg: RunConfig, actor_kind: str, episodes: int | None) -> ppo.PpoConfig:
    p = cfg.ppo
    return ppo.PpoConfig(
        gamma=p.gamma, gae_lambda=p.gae_lambda, clip_eps=p.clip_eps,
        actor_lr=p.koopman_actor_lr if actor_kind == "koopman" else p.mlp_actor_lr,
        critic_lr=p.critic_lr, steps_per_update=p.steps_per_update, epochs=p.epochs,
        minibatch=p.minibatch, clip_norm=p.clip_norm,
        sigma_init_frac=p.sigma_init_frac, sigma_final_frac=p.sigma_final_frac,
        sigma_decay_portion=p.sigma_decay_portion,
        total_episodes=episodes if episodes is not None else p.total_episodes,
        n_envs=p.n_envs, seed=cfg.seed,
    )


def _find_best_checkpoint(cfg, task: str, actor: str) -> Path | None:
    """Among all seeds trained for (task, actor), the snapshot with the
    highest recorded best running score."""
    root = Path(cfg.out_dir)
    best_path, best_score = None, -np.inf
    for d in sorted(root.glob(f"rl_{task}_{actor}_seed*")):
        mpath = d / "manifest.json"
        ckpt = d / "best.npz"
        if not (mpath.exists() and ckpt.exists()):
            continue
        with open(mpath) as fh:
            score = json.load(fh).get("best_score", -np.inf)
        if score > best_score:
            best_score, best_path = score, ckpt
    return best_path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_datagen(cfg: RunConfig) -> int:
    t0 = time.time()
    out = _dataset_dir(cfg)
    dcfg = _datagen_config(cfg)
    trajectories = sysid.generate_dataset(dcfg)
    sysid.save_dataset(out, trajectories, dcfg)
    cov = sysid.coverage_fraction(trajectories)
    if cov < 0.9:
        warnings.warn(f"dataset coverage {cov:.3f} below 0.9 of the feasible box")
    # merge the dataset-format manifest into the command manifest
    with open(out / "manifest.json") as fh:
        dataset_manifest = json.load(fh)
    dataset_manifest["coverage"] = cov
    _write_manifest(out, "datagen", cfg, t0,
                    artifacts=[f.name for f in sorted(out.glob('trajectory_*.csv'))],
                    extra=dataset_manifest)
    print(f"datagen: {dcfg.n_trajectories} trajectories -> {out} (coverage {cov:.3f})")
    return 0


def cmd_train_si(cfg: RunConfig) -> int:
    t0 = time.time()
    dataset_dir = _require(_dataset_dir(cfg) / "manifest.json", "datagen").parent
    trajectories, manifest = sysid.load_dataset(dataset_dir)
    train_idx = manifest["train_indices"]
    val_idx = manifest["val_indices"]
    rng = np.random.default_rng(cfg.seed)
    model = koopman.KoopmanModel.create(rng)
    c = cfg.curriculum
    schedule = sysid.CurriculumSchedule(
        ramp_epochs=c.ramp_epochs, long_horizon=c.long_horizon, max_epochs=c.max_epochs,
        min_epochs_before_stop=c.min_epochs_before_stop, patience=c.patience, lr=c.lr,
        minibatch=c.minibatch, windows_per_traj=c.windows_per_traj, seed=cfg.seed,
    )
    result = sysid.train_si(
        model,
        [trajectories[i] for i in train_idx],
        [trajectories[i] for i in val_idx],
        schedule,
    )
    out = _si_path(cfg).parent
    out.mkdir(parents=True, exist_ok=True)
    koopman.save_model(_si_path(cfg), result.model,
                       extra_meta={"best_epoch": result.best_epoch,
                                   "best_val": result.best_val})
    with open(out / "training_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.log[0].keys()))
        writer.writeheader()
        writer.writerows(result.log)
    _write_manifest(out, "train-si", cfg, t0, artifacts=["model.npz", "training_log.csv"],
                    extra={"best_epoch": result.best_epoch, "best_val": result.best_val,
                           "val_comb_240": result.val_comb_240})
    print(f"train-si: best validation loss {result.best_val:.3e} "
          f"(240-step state MSE {result.val_comb_240:.3e}) at epoch {result.best_epoch}")
    return 0


def cmd_train_rl(cfg: RunConfig, actor_kind: str, episodes: int | None) -> int:
    t0 = time.time()
    task = cfg.task
    rng = np.random.default_rng(cfg.seed)
    prices = price_scale = None
    if task == "enmpc":
        train_prices, _test, price_scale = _build_prices(cfg)
        prices = train_prices
    if actor_kind == "koopman":
        si_path = _require(_si_path(cfg), "train-si")
        model = koopman.load_model(si_path)
        ocp_cfg = _ocp_config(cfg, task, price_scale=price_scale or 1.0)
        actor = ppo.KoopmanActor(model, task, ocp_cfg)
    else:
        actor = ppo.MlpActor.create(rng, task, price_scale=price_scale or 1.0)
    critic = ppo.CriticNet.create(rng, task, price_scale=price_scale or 1.0)
    pcfg = _ppo_config(cfg, actor_kind, episodes)
    out = _rl_dir(cfg, task, actor_kind, cfg.seed)
    result = ppo.train(actor, critic, pcfg, task, prices=prices,
                       price_scale=price_scale, out_dir=out)
    actor.load_snapshot(result.best_params)
    if actor_kind == "koopman":
        koopman.save_model(out / "best.npz", actor.model,
                           extra_meta={"task": task, "best_score": result.best_score})
    else:
        ppo.save_policy(out / "best.npz", actor)
    _write_manifest(
        out, "train-rl", cfg, t0,
        artifacts=["best.npz", "training_log.csv", "update_log.csv"],
        extra={"task": task, "actor": actor_kind, "best_score": result.best_score,
               "best_episode": result.best_episode, "episodes": len(result.score_history),
               "fallbacks": result.fallback_count, "degenerate": result.degenerate_count},
    )
    print(f"train-rl[{task}/{actor_kind}] seed {cfg.seed}: best running score "
          f"{result.best_score:.3f} at episode {result.best_episode} "
          f"({len(result.score_history)} episodes)")
    return 0


def _load_controllers(cfg: RunConfig, task: str, price_scale: float) -> list:
    controllers = []
    si_path = _require(_si_path(cfg), "train-si")
    si_model = koopman.load_model(si_path)
    controllers.append(evaluation.KoopmanController(
        si_model, task, _ocp_config(cfg, task, price_scale), price_scale, name="koopman-si"))
    rl_path = _find_best_checkpoint(cfg, task, "koopman")
    if rl_path is not None:
        rl_model = koopman.load_model(rl_path)
        controllers.append(evaluation.KoopmanController(
            rl_model, task, _ocp_config(cfg, task, price_scale), price_scale,
            name="koopman-rl"))
    mlp_path = _find_best_checkpoint(cfg, task, "mlp")
    if mlp_path is not None:
        controllers.append(evaluation.MlpController(ppo.load_policy(mlp_path), name="mlp"))
    return controllers


def cmd_evaluate(cfg: RunConfig, variant_name: str | None, episodes: int | None,
                 plots: bool) -> int:
    t0 = time.time()
    task = cfg.task
    variant = evaluation.TABLE_VARIANTS[variant_name] if variant_name else None
    suffix = f"_variant_{variant_name}" if variant_name else ""
    out = Path(cfg.out_dir) / f"eval_{task}{suffix}"
    reports = []
    formats = ("csv", "svg") if plots else ("csv",)
    if task == "nmpc":
        n_eps = episodes if episodes is not None else cfg.evaluation.nmpc_episodes
        for controller in _load_controllers(cfg, task, 1.0):
            rep = evaluation.evaluate_nmpc(controller, n_episodes=n_eps,
                                           seed=cfg.evaluation.seed, keep_trajectory=True)
            reports.append(rep)
            print(f"nmpc {rep.controller}: avg {rep.avg:.3f} std {rep.std:.3f} "
                  f"min {rep.min:.3f} max {rep.max:.3f}")
    else:
        _train, test_prices, price_scale = _build_prices(cfg)
        controllers = _load_controllers(cfg, task, price_scale)
        controllers.append(evaluation.SteadyStateController())
        for controller in controllers:
            rep = evaluation.evaluate_enmpc(
                controller, test_prices, n_days=cfg.evaluation.enmpc_days,
                variant=variant, keep_trajectory=True, price_scale=price_scale)
            reports.append(rep)
            print(f"enmpc {rep.controller}: cost {rep.relative_cost:.3f} "
                  f"violations {rep.violation_pct:.2f}% storage {rep.avg_storage:.2f} h")
    written = evaluation.emit_report(reports, out, formats=formats)
    _write_manifest(out, "evaluate", cfg, t0, artifacts=[p.name for p in written],
                    extra={"task": task, "variant": variant_name})
    return 0


def cmd_analyze_autoencoder(cfg: RunConfig) -> int:
    t0 = time.time()
    si_model = koopman.load_model(_require(_si_path(cfg), "train-si"))
    rl_path = _find_best_checkpoint(cfg, "enmpc", "koopman")
    if rl_path is None:
        raise UsageError(
            "no demand-response RL checkpoint found; run `koopmpc train-rl --task enmpc`"
        )
    rl_model = koopman.load_model(rl_path)
    train_prices, _test, price_scale = _build_prices(cfg)
    controller = evaluation.KoopmanController(
        si_model, "enmpc", _ocp_config(cfg, "enmpc", price_scale), price_scale,
        name="koopman-si")
    states, labels = evaluation.collect_embedding_dataset(
        controller, train_prices, n_steps=cfg.evaluation.embedding_steps,
        seed=cfg.evaluation.seed)
    report = evaluation.analyze_embedding(si_model, rl_model, states, labels)
    out = Path(cfg.out_dir) / "embedding"
    written = evaluation.emit_report([report], out)
    _write_manifest(out, "analyze-autoencoder", cfg, t0,
                    artifacts=[p.name for p in written],
                    extra={"n_points": report.n_points, "n_positive": report.n_positive})
    for (enc, dec), vals in report.pairings.items():
        print(f"encoder {enc} / decoder {dec}: mse {vals['mse']:.2e} "
              f"sens {vals['sensitivity']:.3f} spec {vals['specificity']:.3f}")
    return 0


def cmd_adapted_bounds(cfg: RunConfig) -> int:
    t0 = time.time()
    _train, test_prices, price_scale = _build_prices(cfg)
    controllers = _load_controllers(cfg, "enmpc", price_scale)
    out = Path(cfg.out_dir) / "bounds_study"
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for vname, variant in evaluation.TABLE_VARIANTS.items():
        for controller in controllers:
            rep = evaluation.evaluate_enmpc(
                controller, test_prices, n_days=cfg.evaluation.enmpc_days,
                variant=variant, price_scale=price_scale)
            rows.append({"variant": vname, "c_lb": variant.c_lb, "c_ub": variant.c_ub,
                         "controller": rep.controller.split("[")[0],
                         "violation_pct": rep.violation_pct})
            print(f"{vname} {rep.controller}: violations {rep.violation_pct:.2f}%")
    path = out / "bounds_variants.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(out, "adapted-bounds", cfg, t0, artifacts=[path.name])
    return 0


def cmd_plot(cfg: RunConfig) -> int:
    t0 = time.time()
    root = Path(cfg.out_dir)
    made = []
    for traj_csv in sorted(root.glob("eval_*/trajectory_*.csv")):
        made.append(_plot_from_csv(traj_csv))
    if not made:
        raise UsageError(f"no trajectory CSVs under {root}; run `koopmpc evaluate` first")
    for p in made:
        print(f"wrote {p}")
    return 0


def _plot_from_csv(path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(path) as fh:
        reader = csv.DictReader(fh)
        cols = {k: [] for k in reader.fieldnames}
        for row in reader:
            for k, v in row.items():
                cols[k].append(float(v))
    time_ax = cols["time"]
    keys = [k for k in cols if k != "time"]
    fig, axes = plt.subplots(len(keys), 1, figsize=(9, 1.8 * len(keys)), sharex=True)
    for ax, key in zip(np.atleast_1d(axes), keys):
        ax.plot(time_ax, cols[key])
        ax.set_ylabel(key)
    np.atleast_1d(axes)[-1].set_xlabel("time [h]")
    fig.suptitle(path.stem)
    fig.tight_layout()
    out = path.with_suffix(".svg")
    fig.savefig(out)
    plt.close(fig)
    return out


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        cfg = _resolve_config(args)
        if args.command == "datagen":
            return cmd_datagen(cfg)
        if args.command == "train-si":
            return cmd_train_si(cfg)
        if args.command == "train-rl":
            return cmd_train_rl(cfg, args.actor, args.episodes)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.variant, args.episodes, args.plots)
        if args.command == "analyze-autoencoder":
            return cmd_analyze_autoencoder(cfg)
        if args.command == "adapted-bounds":
            return cmd_adapted_bounds(cfg)
        if args.command == "plot":
            return cmd_plot(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help/--version
        code = exc.code if isinstance(exc.code, int) else 0
        return code
    except Exception as exc:  # noqa: BLE001 - top-level CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
