"""
AdaBoost with decision stumps
=============================

The grading stage boosts exhaustive decision stumps on flattened CNN
features. On a quadrant ("XOR-like") problem no single stump works, but
the weighted vote improves round by round.
"""
import numpy as np

from gliopipe.boost import adaboost_fit, weighted_error

rng = np.random.default_rng(0)
Z = rng.uniform(-1, 1, (60, 2))
y = np.where(Z[:, 0] * Z[:, 1] > 0, 1.0, -1.0)


def show(t, stump, eps, alpha, w):
    # after reweighting, the stump just fitted is exactly a coin flip
    print(f"round {t + 1:2d}: feature {stump.feature} t={stump.threshold:+.3f} "
          f"eps={eps:.3f} alpha={alpha:.3f} reweighted err={weighted_error(stump, Z, y, w):.3f}")


ens = adaboost_fit(Z, y, rounds=10, on_round=show)
for t in (1, 5, 10):
    acc = np.mean(ens.truncated(t).predict_sign(Z) == y)
    print(f"training accuracy after {t:2d} rounds: {acc:.3f}")
print(ens.to_text())
