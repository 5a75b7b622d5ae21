""" Directional reproduction on the synthetic benchmark: trains the reference
presets, a few methods and two ablated variants over several seeds, prints
the final target AP50 of each and checks the expected orderings.

    $ python benchmark/reproduce.py --seeds 0 1 2 --iterations 600
"""
import argparse
import logging

import numpy as np

from daodet.datamodel import SyntheticConfig, make_synthetic_shift
from daodet.evalmetrics import convergence_time
from daodet.trainer import run_training

# label -> (preset, extra overrides)
VARIANTS = {
    "source_only": ("source_only", {}),
    "oracle": ("oracle", {}),
    "mean_teacher_base": ("mean_teacher_base", {}),
    "mean_teacher_no_update": ("mean_teacher_base", {"teacher_update": "none"}),
    "sada_style": ("sada_style", {}),
    "aldi_pp": ("aldi_pp", {}),
    "aldi_pp_ratio_1.0": ("aldi_pp", {"target_fraction": 1.0}),
}

# (better, worse, strict)
CHECKS = [
    ("aldi_pp", "source_only", True),
    ("oracle", "aldi_pp", False),
    ("mean_teacher_base", "mean_teacher_no_update", True),
    ("aldi_pp", "aldi_pp_ratio_1.0", False),
]


def run(labels, seeds, iterations, image_size):
    pair = make_synthetic_shift(
        SyntheticConfig(
            image_size=image_size, source_train=150, target_train=150, target_test=80, target_train_labeled=150
        ),
        seed=0,
    )
    overrides = {"iterations": iterations, "eval_every": max(1, iterations // 10), "batch_size": 8}
    results = {}
    for label in labels:
        preset, extra = VARIANTS[label]
        for seed in seeds:
            run = run_training(preset, pair, dict(overrides, seed=seed, **extra), progress=True)
            results.setdefault(label, []).append((run.metric_curve[-1][1], convergence_time(run.metric_curve)))
    return results


def report(results):
    print("{:<24} {:>8} {:>8} {:>12}".format("variant", "AP50", "std", "convergence"))
    means = {}
    for label, rows in results.items():
        ap = np.array([r[0] for r in rows])
        means[label] = ap.mean()
        std = ap.std(ddof=1) if len(ap) > 1 else 0.0
        print("{:<24} {:>8.4f} {:>8.4f} {:>12.1f}".format(label, ap.mean(), std, np.mean([r[1] for r in rows])))
    for better, worse, strict in CHECKS:
        if better in means and worse in means:
            holds = means[better] > means[worse] if strict else means[better] >= means[worse]
            print("{} {} {}: {}".format(better, ">" if strict else ">=", worse, "ok" if holds else "NOT REPRODUCED"))


def main():
    parser = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    parser.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    parser.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    parser.add_argument("--iterations", type=int, default=600)
    parser.add_argument("--image-size", type=int, default=64)
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)
    report(run(args.variants, args.seeds, args.iterations, args.image_size))


if __name__ == "__main__":
    main()
