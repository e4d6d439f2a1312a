"""Numerical engines for channel selection and weight reconstruction.

Two solvers: an l1-penalised weighted least-squares (LASSO) coordinate
descent with a geometric lambda search that enforces a cardinality budget,
and an ordinary least-squares refitter for the kept-channel conv weights.

All solves are deterministic: coordinates are visited in ascending index
order and every tie-break picks the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-9
DEFAULT_MAX_SWEEPS = 10000
DEFAULT_GRID_RATIO = 1.3
LAMBDA_FLOOR_FRACTION = 1e-6
_MAX_GRID_STEPS = 500


@dataclass
class WeightedSystem:
    """Design matrix / target pair for one layer's channel-selection LASSO.

    Rows are (probe, output-channel) pairs, columns are the layer's input
    channels.  The objective at beta is ||b - A beta||^2 + lambda * |beta|_1.
    Squared column norms are cached; the Gram matrix and correlation vector
    are computed lazily so cheap uses never pay for them.
    """

    a: np.ndarray
    b: np.ndarray
    col_sq_norms: np.ndarray = field(init=False)
    _gram: np.ndarray | None = field(default=None, init=False, repr=False)
    _corr: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.a = np.ascontiguousarray(self.a, dtype=np.float64)
        self.b = np.ascontiguousarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 1:
            raise ValueError("system requires a 2-d design matrix and 1-d target")
        if self.a.shape[0] != self.b.shape[0]:
            raise ValueError(f"row mismatch: A has {self.a.shape[0]} rows, "
                             f"b has {self.b.shape[0]}")
        if self.a.shape[0] < 1 or self.a.shape[1] < 1:
            raise ValueError("system must have at least one row and one column")
        self.col_sq_norms = (self.a * self.a).sum(axis=0)

    @property
    def rows(self) -> int:
        return self.a.shape[0]

    @property
    def cols(self) -> int:
        return self.a.shape[1]

    def gram(self) -> np.ndarray:
        if self._gram is None:
            self._gram = self.a.T @ self.a
        return self._gram

    def corr(self) -> np.ndarray:
        if self._corr is None:
            self._corr = self.a.T @ self.b
        return self._corr

    def objective(self, beta: np.ndarray, lam: float) -> float:
        r = self.b - self.a @ beta
        return float(r @ r + lam * np.abs(beta).sum())


@dataclass
class SelectionResult:
    """Outcome of a budgeted channel selection.

    `beta` is the LASSO solution at `lambda_final` (KKT-stationary there);
    `support` is the selected channel set.  When the LASSO support came in
    under budget, `support` additionally holds greedily backfilled columns
    whose beta entries stay zero.  `residual_norm` is the unpenalised
    least-squares residual restricted to `support`.
    """

    beta: np.ndarray
    support: tuple[int, ...]
    lambda_final: float
    residual_norm: float
    converged: bool = True
    budget_warning: bool = False


def _soft_threshold(z: float, t: float) -> float:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


def lasso_coordinate_descent(system: WeightedSystem, lam: float,
                             beta_init: np.ndarray | None = None,
                             max_sweeps: int = DEFAULT_MAX_SWEEPS,
                             tol: float = DEFAULT_TOL):
    """Cyclic coordinate descent for ||b - A beta||^2 + lam * |beta|_1.

    Returns (beta, converged).  Stops when the largest coordinate change in
    a sweep falls below `tol`; running out of sweeps is reported via the
    flag, not an exception.  All-zero columns are pinned at beta_j = 0.
    The objective never increases relative to beta_init.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if not (np.isfinite(system.a).all() and np.isfinite(system.b).all()):
        raise ValueError("system contains non-finite entries")
    gram = system.gram()
    corr = system.corr()
    d = system.col_sq_norms
    cols = system.cols

    if beta_init is None:
        beta = np.zeros(cols)
    else:
        beta = np.array(beta_init, dtype=np.float64, copy=True)
        if beta.shape != (cols,):
            raise ValueError(f"beta_init length: expected {cols}, got {beta.shape}")
        beta[d == 0.0] = 0.0

    active = np.flatnonzero(d > 0.0)
    half_lam = 0.5 * lam
    converged = False
    for _ in range(max_sweeps):
        # q_j = (A^T A beta)_j; recomputed per sweep to stop drift, then
        # updated incrementally inside the sweep.
        q = gram @ beta
        max_delta = 0.0
        for j in active:
            old = beta[j]
            rho = corr[j] - q[j] + gram[j, j] * old
            new = _soft_threshold(rho, half_lam) / d[j]
            if new != old:
                q += gram[:, j] * (new - old)
                beta[j] = new
                delta = abs(new - old)
                if delta > max_delta:
                    max_delta = delta
        if max_delta < tol:
            converged = True
            break
    return beta, converged


def _ols_residual(a: np.ndarray, b: np.ndarray, support: list[int]) -> np.ndarray:
    if not support:
        return b.copy()
    w, *_ = np.linalg.lstsq(a[:, support], b, rcond=None)
    return b - a[:, support] @ w


def lambda_search(system: WeightedSystem, budget: int,
                  grid_ratio: float = DEFAULT_GRID_RATIO,
                  lambda_floor: float | None = None,
                  tol: float = DEFAULT_TOL,
                  max_sweeps: int = DEFAULT_MAX_SWEEPS) -> SelectionResult:
    """Walk a geometric lambda grid until the LASSO support fits the budget.

    Solves are warm-started from the previous grid point.  The first feasible
    grid point wins; if its support is under budget, excluded columns are
    backfilled greedily by correlation with the current restricted
    least-squares residual until |support| = min(budget, nonzero columns).
    Requesting more columns than are nonzero sets `budget_warning`.
    """
    cols = system.cols
    if not 1 <= budget <= cols:
        raise ValueError(f"budget must be in [1, {cols}], got {budget}")
    if grid_ratio <= 1.0:
        raise ValueError(f"grid_ratio must exceed 1, got {grid_ratio}")
    nonzero_cols = np.flatnonzero(system.col_sq_norms > 0.0)
    budget_warning = budget > len(nonzero_cols)
    target = min(budget, len(nonzero_cols))

    corr_peak = np.abs(system.corr()[nonzero_cols]).max() if len(nonzero_cols) else 0.0
    floor = LAMBDA_FLOOR_FRACTION * 2.0 * corr_peak if lambda_floor is None else lambda_floor

    lam = floor
    beta = None
    converged = True
    for _ in range(_MAX_GRID_STEPS):
        beta, converged = lasso_coordinate_descent(system, lam, beta_init=beta,
                                                   max_sweeps=max_sweeps, tol=tol)
        if np.count_nonzero(beta) <= budget:
            break
        lam *= grid_ratio
    else:
        raise RuntimeError("lambda grid exhausted without meeting the budget")

    support = sorted(np.flatnonzero(beta).tolist())
    excluded = [j for j in nonzero_cols.tolist() if j not in support]
    while len(support) < target:
        r = _ols_residual(system.a, system.b, support)
        scores = np.abs(system.a[:, excluded].T @ r)
        pick = excluded[int(np.argmax(scores))]  # argmax ties -> lowest index
        support.append(pick)
        excluded.remove(pick)
        support.sort()

    residual = float(np.linalg.norm(_ols_residual(system.a, system.b, support)))
    return SelectionResult(beta=beta, support=tuple(support), lambda_final=lam,
                           residual_norm=residual, converged=converged,
                           budget_warning=budget_warning)


@dataclass
class RefitResult:
    """Least-squares weights reshaped to conv filters plus the damping used."""

    weights: np.ndarray
    damping: float


def least_squares_refit(patches: np.ndarray, targets: np.ndarray,
                        kernel: tuple[int, int],
                        damping: float = 0.0) -> RefitResult:
    """Fit kept-channel conv filters minimising ||targets - patches @ w||^2.

    Solves (P^T P + eps I) w_i = P^T t_i per output channel via Cholesky.
    A rank-deficient system with eps = 0 is retried with
    eps = 1e-8 * trace(P^T P) / cols, escalating if needed; the damping
    actually used is reported in the result.
    """
    p = np.ascontiguousarray(patches, dtype=np.float64)
    t = np.ascontiguousarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    if p.ndim != 2 or p.shape[0] != t.shape[0]:
        raise ValueError(f"patches {p.shape} and targets {t.shape} disagree on rows")
    kh, kw = int(kernel[0]), int(kernel[1])
    cols = p.shape[1]
    if cols % (kh * kw) != 0:
        raise ValueError(f"{cols} patch columns do not split into {kh}x{kw} kernels")
    if damping < 0:
        raise ValueError(f"damping must be nonnegative, got {damping}")

    gram = p.T @ p
    rhs = p.T @ t
    eps = damping
    trace = float(np.trace(gram))
    fallback = 1e-8 * trace / cols if trace > 0 else 1e-12
    sol = None
    for attempt in range(5):
        try:
            cf = scipy.linalg.cho_factor(gram + eps * np.eye(cols), lower=True)
            sol = scipy.linalg.cho_solve(cf, rhs)
            break
        except np.linalg.LinAlgError:
            eps = fallback if eps < fallback else eps * 100.0
    if sol is None:
        raise np.linalg.LinAlgError("normal equations not positive definite even "
                                    f"with damping {eps}")
    weights = sol.T.reshape(t.shape[1], cols // (kh * kw), kh, kw)
    return RefitResult(weights=weights, damping=eps)
