# rope_budget_sweep.py
import sys
import os
import argparse
import tempfile

# Add project root to path
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, project_root)

from rich.table import Table

from models import Variant, AttentionConfig, TrainConfig, DEFAULT_SEED, DEFAULT_STEPS, DEFAULT_LOG_EVERY
from mpstats import distribution_summary
from training_engine import run_training
from utils import configure_logging, console, get_worker_count

# Decoupled rotary budgets compared against the other variants
ROPE_FRACS = (0.25, 0.5, 0.75)


def sweep_configs(steps, log_every, seed):
    """(label, TrainConfig) for every variant in the sweep, same corpus and seed"""
    configs = []
    for frac in ROPE_FRACS:
        model = AttentionConfig(variant=Variant.MLA_DEC, rope_frac=frac)
        configs.append((f"dec-{frac:.2f}", TrainConfig(model=model, steps=steps, log_every=log_every, seed=seed)))
    for variant in (Variant.MLA_NOPE, Variant.MLA_PRE, Variant.MHA):
        model = AttentionConfig(variant=variant)
        configs.append((variant.value, TrainConfig(model=model, steps=steps, log_every=log_every, seed=seed)))
    return configs


def main():
    parser = argparse.ArgumentParser(description="Train every variant and compare final-step spectra.")
    parser.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    parser.add_argument("--log-every", type=int, default=DEFAULT_LOG_EVERY)
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED)
    parser.add_argument("--out", default=None, help="keep run directories here (default: temporary)")
    args = parser.parse_args()

    configure_logging()
    workers = get_worker_count()

    table = Table(title=f"Rotary budget sweep ({args.steps} steps, seed {args.seed})")
    for col in ("variant", "energy min", "energy median", "energy max", "mean outliers", "held-out ppl"):
        table.add_column(col, justify="right")

    with tempfile.TemporaryDirectory() as tmp:
        root = args.out or tmp
        for label, config in sweep_configs(args.steps, args.log_every, args.seed):
            result = run_training(config, os.path.join(root, label), workers=workers)
            final_step = max(r.step for r in result.rows)
            final = [r for r in result.rows if r.step == final_step]
            energy = distribution_summary([r.outlier_energy for r in final])
            mean_outliers = sum(r.outlier_count for r in final) / len(final)
            table.add_row(
                label,
                f"{energy['min']:.4f}",
                f"{energy['median']:.4f}",
                f"{energy['max']:.4f}",
                f"{mean_outliers:.2f}",
                f"{result.perplexity:.3f}",
            )

    console.print(table)


if __name__ == "__main__":
    main()
