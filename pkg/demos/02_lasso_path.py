"""The channel-selection solver on a synthetic system.

Shows how the support shrinks as the l1 penalty grows, how the lambda
search lands on a budget, and how the pick compares with brute force over
all subsets of that size.
"""

from itertools import combinations

import numpy as np

from prunekit import solvers

rng = np.random.default_rng(3)
rows, cols, budget = 60, 8, 3

a = rng.normal(size=(rows, cols))
true_beta = np.zeros(cols)
true_beta[[1, 4, 6]] = [2.0, -1.5, 1.0]
b = a @ true_beta + 0.2 * rng.normal(size=rows)
system = solvers.WeightedSystem(a, b)

print("support along a lambda path:")
lam = 1e-4
beta = None
while lam < 2 * np.abs(system.corr()).max():
    beta, _ = solvers.lasso_coordinate_descent(system, lam, beta_init=beta)
    print(f"  lambda {lam:9.4f} -> support {np.flatnonzero(beta).tolist()}")
    lam *= 4.0

result = solvers.lambda_search(system, budget=budget)
print(f"\nlambda search at budget {budget}: support {list(result.support)} "
      f"(lambda {result.lambda_final:.4f}, residual {result.residual_norm:.4f})")

def restricted_residual(sup):
    w, *_ = np.linalg.lstsq(a[:, list(sup)], b, rcond=None)
    return np.linalg.norm(b - a[:, list(sup)] @ w)

best = min(combinations(range(cols), budget), key=restricted_residual)
print(f"exhaustive best subset: {list(best)} "
      f"(residual {restricted_residual(best):.4f})")
