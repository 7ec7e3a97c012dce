"""Out-of-sample evaluation: link-wise cross-validation and the
equilibrium-weight sweep.

Hides whole sensors (links) from training, scores predictions on them, and
compares against a historical-mean and a linear-regression baseline. Then
sweeps the equilibrium-loss weight to show its regularizing effect.
"""

import numpy as np

from mate import TrainConfig, LossWeights, load_sioux_falls
from mate import eval as evaluation
from mate.datagen import PeriodSpec, SyntheticSpec, generate
from mate.params import default_spec

net, od_table = load_sioux_falls()
data = generate(net, od_table, SyntheticSpec(
    periods=[PeriodSpec("peak", 1.0, 10), PeriodSpec("offpeak", 0.8, 5)],
    seed=7,
))
spec = default_spec(n_z_features=2, n_poly=4, capacities=net.capacities)

# small O-D reference penalty regularizes the demand on unseen links
config = TrainConfig(epochs=30, learning_rate=0.05, seed=0,
                     weights=LossWeights(lx=1, lt=1, le=1, lq=0.01))

records, info = evaluation.kfold(net, data.inc, data.obs, spec, config,
                                 n_folds=5, seed=0)
hist, _ = evaluation.baseline_historical_mean(data.inc, data.obs, 5, seed=0)
lin, _ = evaluation.baseline_linear_regression(net, data.inc, data.obs, 5, seed=0)


def median_mape(rs, source, scope):
    vals = [r.mape for r in rs if r.source == source and r.scope == scope]
    return float(np.median(vals))


print("median out-of-sample MAPE (5 folds):")
print(f"{'':16s}{'flow':>8s}{'time':>8s}")
for name, rs in (("model", records), ("historical mean", hist),
                 ("linear regr.", lin)):
    print(f"{name:16s}{median_mape(rs, 'flow', 'out'):7.1f}%"
          f"{median_mape(rs, 'time', 'out'):7.1f}%")

print("\nequilibrium-weight sweep (out-of-sample flow MSE, training gap):")
sweep = evaluation.lambda_sweep(net, data.inc, data.obs, spec, config,
                                grid=evaluation.LAMBDA_GRID, n_folds=5, seed=0)
for r in sweep:
    print(f"  weight {r.lam:<7g} MSE {r.mse_out_flow:.3e}  "
          f"gap {r.mean_train_gap:.3f}")
