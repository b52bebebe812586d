"""Run a staged training pass from a plan file and a mask-artifact file.

    python -m drs_trainer --plan plan.json --artifacts masks.jsonl \
        --log metrics.jsonl [--base-epochs 8] [--batch-size 8] [--seed 0] \
        [--adapter-config adapter.json]
"""

from __future__ import annotations

import argparse
import sys

from .adapter_config import AdapterConfig
from .artifacts import load_plan, load_samples
from .train import TrainConfig, staged_train


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="drs_trainer", description=__doc__)
    parser.add_argument("--plan", required=True)
    parser.add_argument("--artifacts", required=True)
    parser.add_argument("--log", required=True)
    parser.add_argument("--base-epochs", type=float, default=8.0)
    parser.add_argument("--batch-size", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--adapter-config", help="also emit a fine-tuning descriptor JSON")
    args = parser.parse_args(argv)

    plan = load_plan(args.plan)
    samples = load_samples(args.artifacts)
    config = TrainConfig(base_epochs=args.base_epochs, batch_size=args.batch_size, seed=args.seed)
    result = staged_train(plan, samples, config=config, log_path=args.log)
    reduction = 1.0 - result.final_full_nll / result.initial_full_nll
    print(
        f"phases {result.phase_order}: full-supervision NLL "
        f"{result.initial_full_nll:.2f} -> {result.final_full_nll:.2f} "
        f"({100 * reduction:.1f}% reduction), {len(result.logs)} steps logged"
    )
    if args.adapter_config:
        AdapterConfig.from_plan(plan).emit(args.adapter_config)
        print(f"wrote adapter descriptor to {args.adapter_config}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
