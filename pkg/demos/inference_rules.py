"""Train the three basic strategies on one skewed synthetic split and compare
what each inference rule makes of the same scores.

    python demos/inference_rules.py [--epochs 30] [--seed 0]
"""
import argparse

from skewbench import datagen, inference, metrics, strategies
from skewbench.nncore import OptimConfig
from skewbench.strategies import StrategyKind

RULES = {
    strategies.BASELINE: ["argmax"],
    strategies.DOMAIN_DISCRIMINATIVE: ["sum_joint_train", "max_joint_shifted", "sum_joint_shifted", "known_domain"],
    strategies.DOMAIN_INDEPENDENT: ["max_conditional", "known_domain", "sum_activations"],
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rho", type=float, default=0.95)
    args = ap.parse_args()

    parts = datagen.build_synthetic(datagen.SyntheticConfig(), datagen.SkewSpec.half_split(args.rho, 10), args.seed)
    test = datagen.concat([parts["test_d0"], parts["test_d1"]], "test")
    print(f"train skew: {metrics.dataset_skew(parts['train'].y, parts['train'].d)[1]:.3f}")

    for kind, rules in RULES.items():
        model = strategies.train(parts["train"], StrategyKind(kind), OptimConfig(epochs=args.epochs), seed=args.seed)
        table = inference.ScoreTable(test.ids, model.head_layout, model.activations(test.features),
                                     y_true=test.y, d_true=test.d)
        for rule in rules:
            pred = inference.decide(table, rule, model.train_prior)
            acc = 100 * metrics.mean_class_domain_accuracy(pred, test.y, test.d)
            bias = metrics.bias_amplification(pred, test.d, 10)
            print(f"{kind:<24} {rule:<20} acc {acc:6.2f}  bias {bias:.3f}")


if __name__ == "__main__":
    main()
