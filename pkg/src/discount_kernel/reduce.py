"""Second-step calibration: projection of daily kernel fits onto exponential sums.

A reduced model on day ``t`` is ``h_t(x) = sum_i Z_{t,i} exp(lambda_i x)`` with
rates shared across days.  For fixed rates the RKHS-closest coefficients are
``Z_t = (K'')^{-1} (K'_t)^T c_t`` where ``K''_ij = <e^{lambda_i .}, e^{lambda_j .}>``
and ``K'_t`` holds ``e^{lambda_j x_i}`` on the day's tenor grid.  The outer
search over rates is non-convex and only local optimality is claimed.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigh
from scipy.optimize import least_squares, minimize

from .curve_fit import CashflowSystem, FittedCurve, add_terminal_constraint, contract_yields
from .kernels import KernelSpec, gram_matrix

log = logging.getLogger(__name__)

RATE_GAP = 1e-8
MAX_COND = 1e12


class SingularBasisError(ValueError):
    """Rates too close together (or otherwise degenerate) for a usable basis."""


def _exp_kernel(kernel) -> KernelSpec:
    if not isinstance(kernel, KernelSpec) or not kernel.is_exponential:
        raise ValueError("model reduction needs a pure exponential KernelSpec")
    return kernel


def _check_rates(rates) -> np.ndarray:
    r = np.asarray(rates, dtype=float).ravel()
    if r.size > 1:
        s = np.sort(r)
        if np.any(np.diff(s) < RATE_GAP):
            raise SingularBasisError(f"rates must be pairwise distinct (gap >= {RATE_GAP}), got {r}")
    return r


def basis_gram(rates, kernel: KernelSpec) -> np.ndarray:
    """``K''_ij = exp((lambda_i + alpha)(lambda_j + alpha)/beta) / a_0``."""
    spec = _exp_kernel(kernel)
    r = _check_rates(rates) + spec.alpha
    return np.exp(np.outer(r, r) / spec.beta) / spec.poly[0]


def cross_gram(tenors, rates) -> np.ndarray:
    """``K'_ij = exp(lambda_j x_i)``, i.e. ``<k_{x_i}, e^{lambda_j .}>``."""
    return np.exp(np.multiply.outer(np.asarray(tenors, dtype=float), np.asarray(rates, dtype=float)))


def _equilibrate(G):
    s = 1.0 / np.sqrt(np.diag(G))
    return G * np.outer(s, s), s


def reduce_day(full: FittedCurve, rates) -> np.ndarray:
    """RKHS projection coefficients ``Z`` of one daily fit onto ``span{exp(lambda_i .)}``.

    Raises
    ------
    SingularBasisError
        When the equilibrated ``K''`` has condition number above 1e12.
    """
    r = _check_rates(rates)
    G = basis_gram(r, full.kernel)
    Ge, s = _equilibrate(G)
    cond = np.linalg.cond(Ge)
    if not cond <= MAX_COND:
        raise SingularBasisError(
            f"basis Gram ill-conditioned (cond {cond:.3e}) for rates {np.round(r, 6).tolist()}; "
            f"min pairwise gap {np.min(np.diff(np.sort(r))) if r.size > 1 else np.inf:.3e}"
        )
    b = cross_gram(full.tenors, r).T @ full.coef
    try:
        f = cho_factor(Ge, lower=True)
    except LinAlgError:
        jitter = 1e-12 * np.trace(Ge)
        log.warning("basis Gram needed jitter %.3e", jitter)
        f = cho_factor(Ge + jitter * np.eye(r.size), lower=True)
    return s * cho_solve(f, s * b)


def reduction_loss(full: FittedCurve, rates, Z) -> float:
    """``||h_full - sum_i Z_i e^{lambda_i .}||^2 = c'Kc - 2c'K'Z + Z'K''Z``."""
    c = full.coef
    K = gram_matrix(full.kernel, full.tenors)
    Kp = cross_gram(full.tenors, rates)
    Z = np.asarray(Z, dtype=float)
    return float(c @ K @ c - 2 * c @ Kp @ Z + Z @ basis_gram(rates, full.kernel) @ Z)


@dataclass
class ReducedModel:
    """Shared rates, per-day coefficients and the ambient kernel."""

    rates: np.ndarray
    daily_coefs: np.ndarray
    kernel: KernelSpec
    loss: float = math.nan
    dates: Optional[list] = None

    def __post_init__(self):
        self.rates = np.asarray(self.rates, dtype=float).ravel()
        self.daily_coefs = np.atleast_2d(np.asarray(self.daily_coefs, dtype=float))
        if self.daily_coefs.shape[1] != self.rates.size:
            raise ValueError("daily_coefs must have one column per rate")

    @property
    def d(self) -> int:
        return self.rates.size - 1

    def curve(self, t: int):
        return lambda x: reduced_price(self, t, x)

    def to_dict(self) -> dict:
        return {
            "rates": self.rates.tolist(),
            "daily_coefs": self.daily_coefs.tolist(),
            "kernel": self.kernel.to_dict(),
            "loss": self.loss,
            "dates": self.dates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReducedModel":
        return cls(d["rates"], d["daily_coefs"], KernelSpec.from_dict(d["kernel"]),
                   d.get("loss", math.nan), d.get("dates"))


@dataclass
class ReductionLossReport:
    per_day: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = True
    elapsed: float = 0.0

    @property
    def total(self) -> float:
        return float(np.sum(self.per_day))


def reduced_price(model: ReducedModel, t: int, x):
    """``h_t(x) = sum_i Z_{t,i} exp(lambda_i x)`` (the discount is ``1 - h``)."""
    xa = np.asarray(x, dtype=float)
    vals = np.exp(np.multiply.outer(xa, model.rates)) @ model.daily_coefs[t]
    return float(vals) if np.ndim(vals) == 0 else vals


def canonical_order(rates, coefs):
    """Sort rates decreasing and permute coefficient columns to match."""
    order = np.argsort(-np.asarray(rates))
    return np.asarray(rates)[order], np.asarray(coefs)[..., order]


class _Objective:
    """Variable-projection loss over rates for a fixed set of daily fits.

    Coefficients are held in a sparse days-by-union-grid matrix, so each
    exponential is evaluated once per distinct tenor.
    """

    def __init__(self, fits: Sequence[FittedCurve]):
        kernel = _exp_kernel(fits[0].kernel)
        if any(f.kernel != kernel for f in fits):
            raise ValueError("all daily fits must share one kernel")
        self.alpha, self.beta, self.a0 = kernel.alpha, kernel.beta, kernel.poly[0]
        x = np.concatenate([f.tenors for f in fits])
        self.grid, col = np.unique(x, return_inverse=True)
        row = np.repeat(np.arange(len(fits)), [f.tenors.size for f in fits])
        self.S = csr_matrix((np.concatenate([f.coef for f in fits]), (row, col)), shape=(len(fits), self.grid.size))
        self.horizon = float(self.grid.max())
        self.norm2 = np.array([f.coef @ gram_matrix(kernel, f.tenors) @ f.coef for f in fits])
        self.n_eval = 0

    def _solve(self, G, B):
        # same conditioning rule as reduce_day; beyond it rounding error in the
        # solve can push the loss below zero and the search would exploit that
        Ge, s = _equilibrate(G)
        w, V = eigh(Ge)
        if not w[0] > w[-1] / MAX_COND:
            raise SingularBasisError("basis Gram ill-conditioned")
        return s[:, None] * (V @ ((V.T @ (s[:, None] * B)) / w[:, None]))

    def coefs(self, rates):
        G = np.exp(np.outer(rates + self.alpha, rates + self.alpha) / self.beta) / self.a0
        B = (self.S @ np.exp(np.multiply.outer(self.grid, rates))).T  # (d+1, T)
        return self._solve(G, B), B, G

    def per_day(self, rates):
        U, B, _ = self.coefs(rates)
        return self.norm2 - np.sum(U * B, axis=0)

    def __call__(self, rates):
        self.n_eval += 1
        rates = np.asarray(rates, dtype=float)
        penalty = float(np.sum(self.norm2)) * 10 + 1.0
        if not np.all(np.isfinite(rates)) or (rates.size > 1 and np.min(np.diff(np.sort(rates))) < RATE_GAP):
            return penalty
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                val = float(np.sum(self.per_day(rates)))
            except (ValueError, LinAlgError):
                return penalty
        return val if np.isfinite(val) else penalty

    def gradient(self, rates):
        rates = np.asarray(rates, dtype=float)
        U, B, G = self.coefs(rates)
        E = np.exp(np.multiply.outer(self.grid, rates))
        dB = (self.S @ (self.grid[:, None] * E)).T  # (d+1, T)
        a = (rates + self.alpha) / self.beta
        GU = (G * a[None, :]) @ U  # sum_k G_jk a_k u_k
        return np.sum(-2 * U * dB + 2 * U * GU, axis=1)


@dataclass(frozen=True)
class OptimizerConfig:
    n_starts: int = 8
    max_iter: int = 2000
    rel_tol: float = 1e-10
    rate_lo: float = -0.5
    rate_hi: float = 0.05
    polish: bool = True
    seed: int = 0
    jobs: int = 1


def _initial_rates(d: int, cfg: OptimizerConfig, horizon: float, rng) -> list:
    scale = 30.0 / max(horizon, 1e-6)
    lo, hi = cfg.rate_lo * scale, cfg.rate_hi * scale
    n = d + 1
    base = -np.geomspace(-lo, max(-lo / 100.0, 1e-3 * scale), n)
    starts = [base]
    for _ in range(cfg.n_starts - 1):
        u = np.sort(rng.uniform(0.0, 1.0, n))
        starts.append(lo + (hi - lo) * u)
    return starts


def _run_start(obj: _Objective, x0, cfg: OptimizerConfig):
    f0 = obj(x0)
    res = minimize(obj, x0, method="Nelder-Mead",
                   options={"maxiter": cfg.max_iter, "xatol": 1e-10,
                            "fatol": cfg.rel_tol * max(f0, 1e-300), "adaptive": len(x0) > 2})
    x, fx, ok = res.x, res.fun, res.success
    if cfg.polish:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                pol = minimize(obj, x, jac=obj.gradient, method="BFGS", options={"gtol": 1e-14, "maxiter": 500})
            if pol.fun < fx and np.all(np.isfinite(pol.x)):
                x, fx = pol.x, obj(pol.x)
        except (ValueError, LinAlgError):
            pass
    return x, fx, ok


def optimize_rates(
    daily_fits: Sequence[FittedCurve],
    d: int,
    config: OptimizerConfig = OptimizerConfig(),
    init: Optional[Sequence[float]] = None,
):
    """Find ``d + 1`` shared rates minimizing the summed projection loss.

    ``init`` (if given) is used as the first start; the remaining starts are
    drawn from ``config``.  Returns ``(ReducedModel, ReductionLossReport)``;
    the report's ``converged`` flag is false when no start converged.
    """
    if not daily_fits:
        raise ValueError("need at least one daily fit")
    if d + 1 > 64:
        raise ValueError("d + 1 must not exceed 64")
    t0 = time.perf_counter()
    obj = _Objective(daily_fits)
    rng = np.random.default_rng(config.seed)
    starts = _initial_rates(d, config, obj.horizon, rng)
    if init is not None:
        init = np.asarray(init, dtype=float)
        if init.size != d + 1:
            raise ValueError(f"init must have {d + 1} rates")
        starts = [init] + starts[: max(config.n_starts - 1, 0)]
    if config.jobs > 1:
        with ThreadPoolExecutor(config.jobs) as ex:
            results = list(ex.map(lambda s: _run_start(obj, s, config), starts))
    else:
        results = [_run_start(obj, s, config) for s in starts]
    trace = [{"start": i, "loss": float(fx), "converged": bool(ok)} for i, (_, fx, ok) in enumerate(results)]
    best = min(range(len(results)), key=lambda i: results[i][1])
    rates = results[best][0]
    if rates.size > 1 and np.min(np.diff(np.sort(rates))) < RATE_GAP:
        raise SingularBasisError("optimizer collapsed two rates")
    U, _, _ = obj.coefs(rates)
    per_day = np.maximum(obj.per_day(rates), 0.0)
    rates, Z = canonical_order(rates, U.T)
    converged = any(ok for _, _, ok in results)
    if not converged:
        log.warning("rate search did not converge for d=%d; returning best found", d)
    model = ReducedModel(rates, Z, daily_fits[0].kernel, float(per_day.sum()))
    report = ReductionLossReport(per_day, trace, converged, time.perf_counter() - t0)
    return model, report


def sweep_dimensions(daily_fits, d_values: Sequence[int], config: OptimizerConfig = OptimizerConfig()):
    """Fit each ``d`` in increasing order, seeding ``d + 1`` with the ``d`` result plus one rate.

    Seeding by augmentation makes the loss nonincreasing in ``d``.
    """
    out = {}
    prev = None
    for d in sorted(d_values):
        init = None
        if prev is not None and prev.rates.size == d:
            extra = _new_rate(prev.rates, config)
            init = np.concatenate([prev.rates, [extra]])
        # the simplex keeps its best vertex, so the augmented seed bounds the loss from above
        model, report = optimize_rates(daily_fits, d, config, init=init)
        out[d] = (model, report)
        prev = model
    return out


def _new_rate(rates, cfg: OptimizerConfig) -> float:
    """A rate in the widest gap of the current set (or beyond its ends)."""
    cand = np.sort(np.concatenate([rates, [cfg.rate_lo, cfg.rate_hi]]))
    gaps = np.diff(cand)
    i = int(np.argmax(gaps))
    new = 0.5 * (cand[i] + cand[i + 1])
    if np.min(np.abs(rates - new)) < 1e-3:
        new = float(np.min(rates) - 0.05)
    return float(new)


# -- naive direct regression ---------------------------------------------------


@dataclass
class NaiveResult:
    rates: np.ndarray
    daily_coefs: np.ndarray
    price_rmse: np.ndarray
    yield_rmse: np.ndarray
    converged: bool
    rank_deficient_days: list
    elapsed: float

    def curve(self, t: int):
        r, z = self.rates, self.daily_coefs[t]
        return lambda x: np.exp(np.multiply.outer(np.asarray(x, dtype=float), r)) @ z


def naive_fit(
    systems: Sequence[CashflowSystem],
    d: int,
    init: Sequence[float],
    terminal_weight: float = 1e4,
    max_nfev: int = 2000,
) -> NaiveResult:
    """Direct least-squares fit of ``d`` shared exponentials to all days' prices.

    Per day the coefficients solve a linear least-squares problem; the rates
    are refined by a trust-region nonlinear least-squares search.  A synthetic
    ``h(0) = 1`` contract with weight ``terminal_weight`` is appended per day.
    """
    init = np.asarray(init, dtype=float)
    if init.size != d:
        raise ValueError(f"init must have length d={d}")
    t0 = time.perf_counter()
    aug = [add_terminal_constraint(s, terminal_weight) for s in systems]
    T = len(aug)
    sw = [np.sqrt(s.obs_weights) for s in aug]
    deficient: set = set()

    def day_solve(rates, t):
        s = aug[t]
        A = s.cashflows @ np.exp(np.multiply.outer(s.tenors, rates))
        z, _, rank, _ = np.linalg.lstsq(sw[t][:, None] * A, sw[t] * s.prices, rcond=None)
        if rank < rates.size:
            deficient.add(t)
        return z, A

    def residuals(rates):
        out = []
        for t in range(T):
            z, A = day_solve(rates, t)
            out.append(sw[t] * (aug[t].prices - A @ z) / math.sqrt(T))
        return np.concatenate(out)

    res = least_squares(residuals, init, method="trf", x_scale="jac", max_nfev=max_nfev,
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    rates = res.x
    deficient.clear()
    Z = np.array([day_solve(rates, t)[0] for t in range(T)])
    if deficient:
        log.warning("rank-deficient naive design on %d day(s); least-norm coefficients used", len(deficient))
    price_rmse, yield_rmse = [], []
    for t, s in enumerate(systems):
        curve = lambda x, t=t: np.exp(np.multiply.outer(np.asarray(x, dtype=float), rates)) @ Z[t]
        mp = s.cashflows @ curve(s.tenors)
        price_rmse.append(float(np.sqrt(np.mean((s.prices - mp) ** 2))))
        try:
            yo, ym = contract_yields(s, s.prices), contract_yields(s, mp)
            yield_rmse.append(float(np.sqrt(np.mean((yo - ym) ** 2))))
        except ValueError:
            yield_rmse.append(math.nan)
    rates_sorted, Z = canonical_order(rates, Z)
    return NaiveResult(rates_sorted, Z, np.array(price_rmse), np.array(yield_rmse), bool(res.success),
                       sorted(deficient), time.perf_counter() - t0)
