#!/usr/bin/env python3
"""Run the complete desk-scale workflow end to end:

dataset -> system identification -> RL refinement (both tasks, both actor
types) -> evaluation tables -> autoencoder analysis -> adapted-bounds study
-> plots. Expect a few hours on one core; pass --quick for a tiny smoke
version of the same chain (~2 minutes).
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from koopmpc.cli import main as koopmpc  # noqa: E402

QUICK = [
    "--set", "datagen.n_trajectories=4", "--set", "datagen.n_train=3",
    "--set", "datagen.traj_len=32", "--set", "datagen.gs_iters=8",
    "--set", "curriculum.max_epochs=40", "--set", "curriculum.ramp_epochs=8",
    "--set", "curriculum.min_epochs_before_stop=10", "--set", "curriculum.patience=20",
    "--set", "curriculum.long_horizon=16", "--set", "curriculum.windows_per_traj=2",
    "--set", "ppo.total_episodes=2", "--set", "ppo.steps_per_update=72",
    "--set", "ppo.epochs=2", "--set", "ppo.minibatch=36",
    "--set", "evaluation.nmpc_episodes=2", "--set", "evaluation.enmpc_days=1",
    "--set", "evaluation.embedding_steps=400",
]


def run(args, extra):
    argv = args + extra
    rc = koopmpc(argv)
    if rc != 0:
        print(f"command failed ({rc}): {' '.join(argv)}", file=sys.stderr)
        sys.exit(rc)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/workflow")
    parser.add_argument("--config", default=None)
    parser.add_argument("--quick", action="store_true", help="tiny smoke-scale run")
    parser.add_argument("--nmpc-seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--enmpc-seeds", type=int, nargs="+", default=[0])
    ns = parser.parse_args()

    extra = ["--out", ns.out]
    if ns.config:
        extra += ["--config", ns.config]
    if ns.quick:
        extra += QUICK

    run(["datagen"], extra)
    run(["train-si"], extra)
    for seed in ns.nmpc_seeds:
        run(["train-rl", "--task", "nmpc", "--actor", "koopman", "--seed", str(seed)], extra)
    run(["train-rl", "--task", "nmpc", "--actor", "mlp", "--seed", "0"], extra)
    for seed in ns.enmpc_seeds:
        run(["train-rl", "--task", "enmpc", "--actor", "koopman", "--seed", str(seed)], extra)
    mlp_eps = [] if ns.quick else ["--episodes", "2000"]
    run(["train-rl", "--task", "enmpc", "--actor", "mlp", "--seed", "0"] + mlp_eps, extra)
    run(["evaluate", "--task", "nmpc", "--plots"], extra)
    run(["evaluate", "--task", "enmpc", "--plots"], extra)
    run(["analyze-autoencoder"], extra)
    run(["adapted-bounds"], extra)
    run(["plot"], extra)
    print("workflow complete:", ns.out)


if __name__ == "__main__":
    main()
