"""Fit a single 20-in/20-out sequence and report when test-mode MSE drops below the target."""

from __future__ import annotations

import argparse

from tempee.experiments import OverfitConfig, overfit_experiment


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--d-model", type=int, default=8)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--data-seed", type=int, default=7)
    ap.add_argument("--model-seed", type=int, default=0)
    ap.add_argument("--full", action="store_true", help="keep training after the target is met")
    args = ap.parse_args()
    cfg = OverfitConfig(
        steps=args.steps, d_model=args.d_model, lr_max=args.lr, data_seed=args.data_seed,
        model_seed=args.model_seed, stop_at_target=not args.full,
    )
    res = overfit_experiment(cfg)
    for step, mse in res.curve[:: max(1, len(res.curve) // 20)]:
        print(f"step {step:5d}  test-mode MSE {mse:10.3f}")
    print(f"best MSE {res.best_mse:.3f}; target {cfg.target_mse:g} reached at step {res.steps_to_target}; {res.steps} steps in {res.seconds:.1f} s")


if __name__ == "__main__":
    main()
