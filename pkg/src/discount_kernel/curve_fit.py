"""First-step calibration: kernel ridge regression of a zero-coupon curve on coupon-bond prices.

For one observation day with prices ``P`` (length M), cashflow matrix ``C``
(M x N) on tenors ``x`` (length N) and observation weights ``w``, the curve
minimizing ``sum_i w_i (P_i - C_i h(x))^2 + ridge * ||h||^2`` over the RKHS
is ``h = sum_j coef_j k(., x_j)`` with ``coef = C^T (C K C^T + Lambda)^{-1} P``
and ``Lambda = diag(ridge / w_i)``.  Infinite weights mark hard constraints.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import product
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.linalg.lapack import dpocon

from .kernels import (
    DUPLICATE_TENOR_TOL,
    AnyKernel,
    KernelSpec,
    eval_kernel,
    eval_kernel_dx,
    gram_matrix,
    kernel_from_dict,
)

log = logging.getLogger(__name__)

HARD = math.inf
DEFAULT_TERMINAL_WEIGHT = 1e4  # relative to the median contract weight
REFINE_STEPS = 2  # iterative refinement passes on the ridge solve


class IllPosedFitError(RuntimeError):
    """The ridge system could not be factorized."""

    def __init__(self, msg: str, condition_number: float):
        super().__init__(f"ill-posed fit: {msg} (condition number {condition_number:.3e})")
        self.condition_number = condition_number


class NegativeDiscountError(ValueError):
    pass


@dataclass(frozen=True)
class CashflowSystem:
    """One day's contracts: prices, cashflow matrix, tenor grid, weights."""

    prices: np.ndarray
    cashflows: np.ndarray
    tenors: np.ndarray
    obs_weights: Optional[np.ndarray] = None
    date: Optional[str] = None
    labels: Optional[tuple] = None

    def __post_init__(self):
        P = np.atleast_1d(np.asarray(self.prices, dtype=float))
        C = np.atleast_2d(np.asarray(self.cashflows, dtype=float))
        x = np.atleast_1d(np.asarray(self.tenors, dtype=float))
        if P.size == 0:
            C = C.reshape(0, x.size)
        w = np.ones_like(P) if self.obs_weights is None else np.atleast_1d(np.asarray(self.obs_weights, dtype=float))
        if C.shape != (P.size, x.size) or w.shape != P.shape:
            raise ValueError(
                f"dimension mismatch: prices {P.shape}, cashflows {C.shape}, tenors {x.shape}, weights {w.shape}"
            )
        if np.any(x < 0) or np.any(np.diff(x) <= 0):
            raise ValueError("tenors must be nonnegative and strictly increasing")
        if np.any(~(w > 0)):
            raise ValueError("observation weights must lie in (0, inf]")
        if P.size and np.any(~np.any(C != 0, axis=1)):
            raise ValueError("every contract needs at least one nonzero cashflow")
        for name, arr in (("prices", P), ("cashflows", C), ("tenors", x), ("obs_weights", w)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_contracts(self) -> int:
        return self.prices.size

    @property
    def n_tenors(self) -> int:
        return self.tenors.size

    def subset(self, rows) -> "CashflowSystem":
        """Contracts ``rows`` only, keeping the tenor grid."""
        rows = np.asarray(rows)
        labels = None if self.labels is None else tuple(self.labels[i] for i in rows)
        return CashflowSystem(self.prices[rows], self.cashflows[rows], self.tenors,
                              self.obs_weights[rows], self.date, labels)

    def to_dict(self) -> dict:
        return {
            "date": self.date,
            "prices": self.prices.tolist(),
            "cashflows": self.cashflows.tolist(),
            "tenors": self.tenors.tolist(),
            "obs_weights": [None if math.isinf(v) else v for v in self.obs_weights.tolist()],
            "labels": None if self.labels is None else list(self.labels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CashflowSystem":
        w = [math.inf if v is None else v for v in d["obs_weights"]]
        n = len(d["tenors"])
        C = np.asarray(d["cashflows"], dtype=float).reshape(len(d["prices"]), n)
        labels = d.get("labels")
        return cls(d["prices"], C, d["tenors"], w, d.get("date"), None if labels is None else tuple(labels))


@dataclass(frozen=True)
class FitConfig:
    """Kernel, ridge and terminal-constraint settings for :func:`fit_curve`.

    ``terminal_weight`` is the weight of the synthetic ``h(0) = 1`` contract,
    expressed relative to the median contract weight; ``math.inf`` makes it a
    hard constraint and ``None`` disables it.
    """

    kernel: AnyKernel
    ridge: float = 1e-3
    terminal_weight: Optional[float] = DEFAULT_TERMINAL_WEIGHT

    def __post_init__(self):
        if not (self.ridge > 0 and np.isfinite(self.ridge)):
            raise ValueError(f"ridge must be finite and > 0, got {self.ridge}")
        if self.terminal_weight is not None and not self.terminal_weight > 0:
            raise ValueError("terminal_weight must be > 0, inf (hard) or None")


@dataclass(frozen=True)
class FitDiagnostics:
    condition_number: float
    jitter: float = 0.0
    n_hard: int = 0


@dataclass(frozen=True)
class FittedCurve:
    """Representer expansion ``h(x) = sum_j coef_j k(x, x_j)``."""

    kernel: AnyKernel
    tenors: np.ndarray
    coef: np.ndarray
    diagnostics: Optional[FitDiagnostics] = field(default=None, compare=False)

    def __post_init__(self):
        x = np.asarray(self.tenors, dtype=float).ravel()
        c = np.asarray(self.coef, dtype=float).ravel()
        if x.shape != c.shape:
            raise ValueError("tenors and coef must have equal length")
        object.__setattr__(self, "tenors", x)
        object.__setattr__(self, "coef", c)

    def __call__(self, x):
        return evaluate_curve(self, x)

    def rkhs_norm(self) -> float:
        K = gram_matrix(self.kernel, self.tenors)
        return math.sqrt(max(float(self.coef @ K @ self.coef), 0.0))

    def to_dict(self) -> dict:
        return {"kernel": self.kernel.to_dict(), "tenors": self.tenors.tolist(), "coef": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FittedCurve":
        return cls(kernel_from_dict(d["kernel"]), d["tenors"], d["coef"])


def add_terminal_constraint(system: CashflowSystem, weight: float = HARD) -> CashflowSystem:
    """Append a synthetic contract paying 1 at tenor 0 with price 1.

    Tenor 0 is inserted into the grid when absent; an existing tenor within
    the duplicate tolerance of 0 is reused.
    """
    x = system.tenors
    C = system.cashflows
    if x.size and x[0] < DUPLICATE_TENOR_TOL:
        new_x = x
        C_ext = C
        col = 0
    else:
        new_x = np.concatenate([[0.0], x])
        C_ext = np.hstack([np.zeros((C.shape[0], 1)), C])
        col = 0
    row = np.zeros((1, new_x.size))
    row[0, col] = 1.0
    labels = None if system.labels is None else system.labels + ("__terminal__",)
    return CashflowSystem(
        np.concatenate([system.prices, [1.0]]),
        np.vstack([C_ext, row]),
        new_x,
        np.concatenate([system.obs_weights, [weight]]),
        system.date,
        labels,
    )


def _cholesky_with_jitter(A: np.ndarray):
    try:
        return cho_factor(A, lower=True, check_finite=True), 0.0
    except LinAlgError:
        n = A.shape[0]
        jitter = 1e-12 * np.trace(A) / max(n, 1)
        try:
            f = cho_factor(A + jitter * np.eye(n), lower=True)
        except LinAlgError:
            raise IllPosedFitError("factorization failed after jitter", np.linalg.cond(A)) from None
        log.warning("ridge system needed jitter %.3e to factorize", jitter)
        return f, jitter


def _rcond_estimate(M: np.ndarray, factor) -> float:
    """LAPACK 1-norm reciprocal condition estimate from a lower Cholesky factor."""
    rcond, info = dpocon(factor[0], np.abs(M).sum(axis=0).max(), uplo="L")
    return float(rcond) if info == 0 else 0.0


class RidgeSolver:
    """Factor ``A + diag(reg)`` once, with exact rows where ``reg == 0``.

    Hard rows are eliminated by a Schur complement so no large finite weight
    is ever formed.  ``solve`` reuses the factorization.
    """

    def __init__(self, A: np.ndarray, reg: np.ndarray):
        self.hard = reg == 0
        self.soft = ~self.hard
        hard, soft = self.hard, self.soft
        self.jitter = 0.0
        if not hard.any():
            self._M = A + np.diag(reg)
            self._f, self.jitter = _cholesky_with_jitter(self._M)
            return
        A11 = A[np.ix_(hard, hard)]
        self._f1, jit1 = _cholesky_with_jitter(A11)
        if jit1:
            raise IllPosedFitError("hard constraints are degenerate", np.linalg.cond(A11))
        self._M, self._f = A11, self._f1
        if soft.any():
            self._A10 = A[np.ix_(hard, soft)]
            self._X = cho_solve(self._f1, self._A10)
            S = A[np.ix_(soft, soft)] - self._A10.T @ self._X + np.diag(reg[soft])
            self._M = 0.5 * (S + S.T)
            self._f, self.jitter = _cholesky_with_jitter(self._M)

    def solve(self, P: np.ndarray) -> np.ndarray:
        hard, soft = self.hard, self.soft
        if not hard.any():
            return cho_solve(self._f, P)
        beta = np.empty_like(P)
        if not soft.any():
            beta[hard] = cho_solve(self._f1, P[hard])
            return beta
        b0 = cho_solve(self._f, P[soft] - self._X.T @ P[hard])
        beta[soft] = b0
        beta[hard] = cho_solve(self._f1, P[hard] - self._A10 @ b0)
        return beta

    def condition_estimate(self) -> float:
        """Estimated condition number of the factored (soft or Schur) block."""
        rc = _rcond_estimate(self._M, self._f)
        return 1.0 / rc if rc > 0 else math.inf


def solve_ridge_system(A: np.ndarray, P: np.ndarray, reg: np.ndarray):
    """Solve ``(A + diag(reg)) beta = P``; returns ``(beta, jitter)``."""
    solver = RidgeSolver(A, reg)
    return solver.solve(P), solver.jitter


def _with_terminal(system: CashflowSystem, config: FitConfig) -> CashflowSystem:
    if config.terminal_weight is None:
        return system
    finite = system.obs_weights[np.isfinite(system.obs_weights)]
    base = float(np.median(finite)) if finite.size else 1.0
    return add_terminal_constraint(system, config.terminal_weight * base)


def fit_curve(system: CashflowSystem, config: FitConfig, *, terminal: bool = True) -> FittedCurve:
    """Kernel ridge fit of one day's contracts.

    When ``terminal`` is true and ``config.terminal_weight`` is set, the
    synthetic ``h(0) = 1`` contract is appended first.
    """
    sysm = _with_terminal(system, config) if terminal else system
    if sysm.n_contracts == 0:
        raise ValueError("cannot fit an empty system")
    C = sysm.cashflows
    with np.errstate(over="ignore", invalid="ignore"):
        K = gram_matrix(config.kernel, sysm.tenors)
        A = C @ K @ C.T
    if not np.all(np.isfinite(A)):
        raise IllPosedFitError("kernel Gram matrix overflows on this tenor grid", math.inf)
    A = 0.5 * (A + A.T)
    w = sysm.obs_weights
    reg = np.where(np.isinf(w), 0.0, config.ridge / np.where(np.isinf(w), 1.0, w))
    solver = RidgeSolver(A, reg)
    beta = solver.solve(sysm.prices)
    for _ in range(REFINE_STEPS):
        # residual through the evaluation path so hard rows reprice as evaluated
        resid = sysm.prices - C @ (K @ (C.T @ beta)) - reg * beta
        beta = beta + solver.solve(resid)
    coef = C.T @ beta
    if not np.all(np.isfinite(coef)):
        raise IllPosedFitError("non-finite coefficients", solver.condition_estimate())
    diag = FitDiagnostics(condition_number=solver.condition_estimate(), jitter=solver.jitter,
                          n_hard=int(np.isinf(w).sum()))
    return FittedCurve(config.kernel, sysm.tenors, coef, diag)


def evaluate_curve(curve: FittedCurve, x):
    """``h(x) = sum_j coef_j k(x, x_j)``; vectorized over ``x``."""
    xa = np.asarray(x, dtype=float)
    vals = np.asarray(eval_kernel(curve.kernel, xa[..., None], curve.tenors)) @ curve.coef
    return float(vals) if np.ndim(vals) == 0 else vals


def curve_derivative_at_zero(curve: FittedCurve) -> float:
    """Short rate ``r = -h'(0)`` of a fitted curve."""
    return -float(np.asarray(eval_kernel_dx(curve.kernel, 0.0, curve.tenors)) @ curve.coef)


def model_prices(system: CashflowSystem, curve) -> np.ndarray:
    """``C h(x)`` for any callable curve."""
    return system.cashflows @ np.asarray(curve(system.tenors), dtype=float)


def yield_from_price(price, tenor):
    """Continuously compounded yield ``-ln(price)/tenor``."""
    p = np.asarray(price, dtype=float)
    t = np.asarray(tenor, dtype=float)
    if np.any(p <= 0):
        raise NegativeDiscountError("negative discount: price must be positive")
    if np.any(t <= 0):
        raise ValueError("tenor must be positive")
    y = -np.log(p) / t
    return float(y) if y.ndim == 0 else y


def contract_yields(system: CashflowSystem, prices) -> np.ndarray:
    """Per-contract yield from prices normalized by total notional.

    Each contract is treated as a single payment of its total cashflow at its
    cashflow-weighted mean tenor.
    """
    C = system.cashflows
    notional = C.sum(axis=1)
    tenor = (C @ system.tenors) / notional
    return yield_from_price(np.asarray(prices) / notional, tenor)


def rmse_yield(system: CashflowSystem, curve) -> float:
    if system.n_contracts == 0:
        return 0.0
    obs = contract_yields(system, system.prices)
    mod = contract_yields(system, model_prices(system, curve))
    return float(np.sqrt(np.mean((obs - mod) ** 2)))


@dataclass
class RMSEReport:
    dates: list
    rmse: np.ndarray
    n_contracts: np.ndarray

    @property
    def average(self) -> float:
        return float(np.mean(self.rmse)) if len(self.rmse) else 0.0

    def rows(self):
        return [(d, float(r), int(n)) for d, r, n in zip(self.dates, self.rmse, self.n_contracts)]


def rmse_yield_report(systems: Sequence[CashflowSystem], curves: Sequence) -> RMSEReport:
    """Per-day yield RMSE of ``curves`` against the observed contracts."""
    if len(systems) != len(curves):
        raise ValueError("systems and curves must have matching lengths")
    rmse = np.array([rmse_yield(s, c) for s, c in zip(systems, curves)])
    return RMSEReport([s.date for s in systems], rmse, np.array([s.n_contracts for s in systems]))


def theta_check(alpha: float, beta: float, tenors) -> bool:
    """True iff every exponential-kernel section decays: ``alpha/beta > max tenor``."""
    return bool(alpha / beta > float(np.max(tenors)))


# -- cross-validation ----------------------------------------------------------


@dataclass
class CVResult:
    best: tuple
    table: list  # rows (alpha, beta, ridge, score)


def _fold_indices(n: int, folds: int) -> list:
    idx = np.arange(n)
    return [idx[i::folds] for i in range(folds)]


def cv_score(systems: Sequence[CashflowSystem], config: FitConfig, folds: int) -> float:
    """Mean squared held-out price residual, k-fold over contracts, averaged across days."""
    day_scores = []
    for s in systems:
        k = min(folds, s.n_contracts)
        if k < 2:
            continue
        sq = []
        for test in _fold_indices(s.n_contracts, k):
            train = np.setdiff1d(np.arange(s.n_contracts), test)
            curve = fit_curve(s.subset(train), config)
            resid = s.prices[test] - model_prices(s.subset(test), curve)
            sq.extend((resid ** 2).tolist())
        day_scores.append(np.mean(sq))
    if not day_scores:
        raise ValueError("no day has enough contracts for cross-validation")
    return float(np.mean(day_scores))


def cross_validate(
    systems: Sequence[CashflowSystem],
    grid: dict,
    folds: int = 5,
    terminal_weight: Optional[float] = DEFAULT_TERMINAL_WEIGHT,
    poly: tuple = (1.0,),
) -> CVResult:
    """Grid search over ``grid = {"alpha": [...], "beta": [...], "ridge": [...]}``.

    Returns the argmin triple and the full score table.  Ties go to the
    larger ridge.  Invalid grid entries raise ``ValueError``.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    cells = list(product(grid["alpha"], grid["beta"], grid["ridge"]))
    if not cells:
        raise ValueError("empty grid")
    configs = [FitConfig(KernelSpec(a, b, poly), r, terminal_weight) for a, b, r in cells]
    table = []
    for (a, b, r), cfg in zip(cells, configs):
        try:
            score = cv_score(systems, cfg, folds)
        except (IllPosedFitError, np.linalg.LinAlgError) as exc:
            log.warning("grid cell (%g, %g, %g) failed: %s", a, b, r, exc)
            score = math.inf
        table.append((float(a), float(b), float(r), score))
    best = min(table, key=lambda row: (row[3], -row[2]))
    return CVResult(best=best[:3], table=table)


# -- sensitivity ---------------------------------------------------------------


@dataclass
class SensitivitySlice:
    fixed: str
    param_a: str
    param_b: str
    values_a: np.ndarray
    values_b: np.ndarray
    rmse: np.ndarray
    rkhs_norm: np.ndarray

    def rows(self):
        for i, va in enumerate(self.values_a):
            for j, vb in enumerate(self.values_b):
                yield float(va), float(vb), float(self.rmse[i, j]), float(self.rkhs_norm[i, j])


def _fit_metrics(systems, alpha, beta, ridge, terminal_weight):
    cfg = FitConfig(KernelSpec(alpha, beta), ridge, terminal_weight)
    rm, nm = [], []
    for s in systems:
        try:
            c = fit_curve(s, cfg)
            rm.append(rmse_yield(s, c))
            nm.append(c.rkhs_norm())
        except (IllPosedFitError, NegativeDiscountError, np.linalg.LinAlgError):
            rm.append(math.nan)
            nm.append(math.nan)
    return float(np.mean(rm)), float(np.mean(nm))


def sensitivity_grid(
    base: dict,
    systems: Sequence[CashflowSystem],
    lo: float = 0.2,
    hi: float = 5.0,
    steps: int = 5,
    terminal_weight: Optional[float] = DEFAULT_TERMINAL_WEIGHT,
) -> list:
    """Three heat-map slices: one parameter fixed, the other two scaled over ``[lo, hi]``.

    Multipliers are log-spaced and always include 1.  Cells whose curve prices
    nonpositively are reported as NaN.
    """
    if steps < 2:
        raise ValueError("steps must be >= 2")
    mult = np.unique(np.concatenate([np.geomspace(lo, hi, steps), [1.0]]))
    names = ("alpha", "beta", "ridge")
    slices = []
    for fixed in names:
        a_name, b_name = [n for n in names if n != fixed]
        va, vb = base[a_name] * mult, base[b_name] * mult
        rmse = np.empty((mult.size, mult.size))
        norm = np.empty_like(rmse)
        for i, j in product(range(mult.size), repeat=2):
            params = dict(base)
            params[a_name], params[b_name] = va[i], vb[j]
            rmse[i, j], norm[i, j] = _fit_metrics(systems, params["alpha"], params["beta"],
                                                  params["ridge"], terminal_weight)
        slices.append(SensitivitySlice(fixed, a_name, b_name, va, vb, rmse, norm))
    return slices
