"""Fully consistent polynomial-exponential kernels and their RKHS geometry.

A kernel is parameterized by a shift ``alpha >= 0``, a curvature ``beta > 0``
and a polynomial ``p(t) = sum_k a_k t^k`` with nonnegative coefficients::

    k(x, y) = p(u(x) u(y)) * exp(beta*x*y - alpha*(x + y)),
    u(x)    = sqrt(beta)*x - alpha/sqrt(beta).

Every section ``x -> k(x, y)`` is a quasi-exponential ``q_y(x) exp((beta*y - alpha) x)``
with ``deg q_y <= deg p``, which is what makes the kernel usable as a regression
basis for arbitrage-free discount curves.
"""
from __future__ import annotations

import decimal
import math
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

__all__ = [
    "KernelSpec",
    "SumKernelSpec",
    "WeightSequence",
    "ConsistencyReport",
    "OutsideRKHSError",
    "eval_kernel",
    "eval_kernel_dx",
    "gram_matrix",
    "weight_sequence",
    "rkhs_inner_product_exp",
    "rkhs_inner_product_series",
    "rkhs_inner_product_polyexp",
    "exp_taylor_coeffs",
    "section_taylor_coeffs",
    "check_full_consistency",
    "kernel_from_dict",
    "DUPLICATE_TENOR_TOL",
]

DUPLICATE_TENOR_TOL = 1e-9
MAX_POLYEXP_DEGREE = 6
SERIES_DIGITS = 60  # decimal precision of the exact series path


class OutsideRKHSError(ValueError):
    """A function has a Taylor coefficient the RKHS norm cannot carry."""


@dataclass(frozen=True)
class KernelSpec:
    """Parameters of one polynomial-exponential kernel.

    Parameters
    ----------
    alpha : float
        Shift, ``alpha >= 0`` (1/years).
    beta : float
        Curvature, ``beta > 0`` (1/years^2).
    poly : tuple of float
        Ascending coefficients ``a_0..a_D`` of ``p``; all ``>= 0``, not all zero.
    """

    alpha: float
    beta: float
    poly: tuple = (1.0,)

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "poly", tuple(float(a) for a in self.poly))
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ValueError(f"alpha must be finite and >= 0, got {self.alpha}")
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValueError(f"beta must be finite and > 0, got {self.beta}")
        if len(self.poly) == 0 or any(a < 0 or not np.isfinite(a) for a in self.poly):
            raise ValueError(f"poly coefficients must be finite and >= 0, got {self.poly}")
        if not any(a > 0 for a in self.poly):
            raise ValueError("poly must have at least one positive coefficient")

    @property
    def degree(self) -> int:
        nz = [k for k, a in enumerate(self.poly) if a > 0]
        return nz[-1]

    @property
    def is_exponential(self) -> bool:
        """True when ``p`` is a positive constant."""
        return self.degree == 0

    @property
    def center(self) -> float:
        """Expansion point ``alpha/beta`` of the RKHS Taylor norm."""
        return self.alpha / self.beta

    def section_rate(self, y):
        return self.beta * np.asarray(y, dtype=float) - self.alpha

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "poly": list(self.poly)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(alpha=d["alpha"], beta=d["beta"], poly=tuple(d.get("poly", (1.0,))))


@dataclass(frozen=True)
class SumKernelSpec:
    """Finite sum of polynomial-exponential kernels (direct-sum RKHS)."""

    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if not parts:
            raise ValueError("SumKernelSpec needs at least one part")
        if not all(isinstance(p, KernelSpec) for p in parts):
            raise TypeError("SumKernelSpec parts must be KernelSpec instances")
        object.__setattr__(self, "parts", parts)

    def to_dict(self) -> dict:
        return {"parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, d: dict) -> "SumKernelSpec":
        return cls(parts=tuple(KernelSpec.from_dict(p) for p in d["parts"]))


AnyKernel = Union[KernelSpec, SumKernelSpec]


def kernel_from_dict(d: dict) -> AnyKernel:
    if "parts" in d:
        return SumKernelSpec.from_dict(d)
    return KernelSpec.from_dict(d)


@dataclass(frozen=True)
class WeightSequence:
    """Truncated Taylor weights ``h_0..h_K`` and their reciprocals ``w_k``."""

    h: np.ndarray
    w: np.ndarray = field(repr=False)

    @property
    def truncation(self) -> int:
        return len(self.h) - 1


def _check_domain(x):
    if np.any(np.asarray(x) < 0):
        raise ValueError("kernel arguments must be nonnegative tenors")


def _eval_part(spec: KernelSpec, x, y):
    # x*y and x+y are commutative in IEEE arithmetic, so the result is exactly symmetric
    sb = math.sqrt(spec.beta)
    shift = spec.alpha / sb
    t = (sb * x - shift) * (sb * y - shift)
    expo = np.exp(spec.beta * (x * y) - spec.alpha * (x + y))
    if spec.is_exponential:
        return spec.poly[0] * expo
    return np.polynomial.polynomial.polyval(t, spec.poly) * expo


def eval_kernel(spec: AnyKernel, x, y):
    """Evaluate ``k(x, y)``; broadcasts over array arguments."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_domain(x)
    _check_domain(y)
    if isinstance(spec, SumKernelSpec):
        out = _eval_part(spec.parts[0], x, y)
        for part in spec.parts[1:]:
            out = out + _eval_part(part, x, y)
    else:
        out = _eval_part(spec, x, y)
    return out if out.ndim else float(out)


def _eval_part_dx(spec: KernelSpec, x, y):
    sb = math.sqrt(spec.beta)
    shift = spec.alpha / sb
    t = (sb * x - shift) * (sb * y - shift)
    expo = np.exp(spec.beta * (x * y) - spec.alpha * (x + y))
    pval = np.polynomial.polynomial.polyval(t, spec.poly)
    dp = np.polynomial.polynomial.polyder(spec.poly) if len(spec.poly) > 1 else [0.0]
    dpval = np.polynomial.polynomial.polyval(t, dp)
    return (spec.beta * y - spec.alpha) * (pval + dpval) * expo


def eval_kernel_dx(spec: AnyKernel, x, y):
    """Partial derivative of ``k(x, y)`` in its first argument."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    parts = spec.parts if isinstance(spec, SumKernelSpec) else (spec,)
    out = sum(_eval_part_dx(p, x, y) for p in parts)
    return out if np.ndim(out) else float(out)


def _validate_tenors(tenors) -> np.ndarray:
    x = np.asarray(tenors, dtype=float).ravel()
    _check_domain(x)
    if x.size > 1:
        s = np.sort(x)
        if np.any(np.diff(s) < DUPLICATE_TENOR_TOL):
            raise ValueError("duplicate tenors produce degenerate Gram rows")
    return x


def gram_matrix(spec: AnyKernel, tenors) -> np.ndarray:
    """Gram matrix ``K_ij = k(x_i, x_j)`` over distinct nonnegative tenors."""
    x = _validate_tenors(tenors)
    return np.asarray(eval_kernel(spec, x[:, None], x[None, :]), dtype=float).reshape(x.size, x.size)


def weight_sequence(spec: KernelSpec, K: int) -> WeightSequence:
    """Taylor weights of the RKHS norm, truncated at order ``K``.

    ``h_k = exp(-alpha^2/beta) * sum_{l <= min(k, deg p)} C(k, l) l! a_l`` and
    ``w_k = 1/h_k`` where ``h_k > 0`` (zero otherwise).
    """
    if K < 1:
        raise ValueError("truncation K must be >= 1")
    scale = math.exp(-spec.alpha ** 2 / spec.beta)
    h = np.empty(K + 1)
    for k in range(K + 1):
        acc = 0.0
        for l in range(min(k, len(spec.poly) - 1) + 1):
            acc += math.comb(k, l) * math.factorial(l) * spec.poly[l]
        h[k] = scale * acc
    w = np.zeros_like(h)
    pos = h > 0
    w[pos] = 1.0 / h[pos]
    return WeightSequence(h=h, w=w)


def rkhs_inner_product_exp(spec: KernelSpec, lam: float, mu: float) -> float:
    """Closed-form ``<exp(lam .), exp(mu .)>`` for a pure exponential kernel.

    Equals ``exp((lam + alpha)(mu + alpha)/beta) / a_0``; symmetric in
    ``(lam, mu)`` and consistent with the reproducing property.
    """
    if not spec.is_exponential:
        raise ValueError("closed-form exponential inner product needs a constant polynomial")
    a, b = spec.alpha, spec.beta
    return math.exp((lam + a) * (mu + a) / b) / spec.poly[0]


def exp_taylor_coeffs(lam: float, center: float, K: int, exact: bool = False):
    """Taylor coefficients of ``exp(lam x)`` about ``center`` up to order ``K``.

    With ``exact=True`` the coefficients are returned as a list of
    :class:`decimal.Decimal` computed with ``SERIES_DIGITS`` significant
    digits, for use with :func:`rkhs_inner_product_series` when the series
    alternates strongly (``lam * mu < 0`` with ``|lam * mu| / beta`` large).
    """
    if exact:
        with decimal.localcontext() as ctx:
            ctx.prec = SERIES_DIGITS
            lam_d = Decimal(lam)
            out, term = [], (lam_d * Decimal(center)).exp()
            for k in range(K + 1):
                out.append(+term)
                term = term * lam_d / (k + 1)
            return out
    k = np.arange(K + 1)
    with np.errstate(divide="ignore"):
        logabs = k * np.log(abs(lam)) if lam != 0 else np.where(k == 0, 0.0, -np.inf)
    sign = np.where((lam < 0) & (k % 2 == 1), -1.0, 1.0)
    lg = np.array([math.lgamma(i + 1) for i in k])
    return sign * np.exp(lam * center + logabs - lg)


def section_taylor_coeffs(spec: KernelSpec, y: float, K: int) -> np.ndarray:
    """Taylor coefficients of the section ``k(., y)`` about ``alpha/beta``.

    ``b_k = h_k (beta*y - alpha)^k / k!`` with ``h_k`` from :func:`weight_sequence`.
    """
    ws = weight_sequence(spec, K)
    rho = spec.beta * y - spec.alpha
    return ws.h * exp_taylor_coeffs(rho, 0.0, K)


def _series_decimal(spec: KernelSpec, f, g, K: int) -> float:
    with decimal.localcontext() as ctx:
        ctx.prec = SERIES_DIGITS
        a, b = Decimal(spec.alpha), Decimal(spec.beta)
        scale = (-(a * a) / b).exp()
        poly = [Decimal(c) for c in spec.poly]
        total = Decimal(0)
        fact_over_beta = Decimal(1)  # k! / beta^k
        for k in range(K + 1):
            if k:
                fact_over_beta = fact_over_beta * k / b
            h = scale * sum(math.comb(k, l) * math.factorial(l) * poly[l] for l in range(min(k, len(poly) - 1) + 1))
            fk, gk = Decimal(f[k]), Decimal(g[k])
            if h == 0:
                if fk != 0 or gk != 0:
                    raise OutsideRKHSError(
                        f"function outside RKHS: nonzero Taylor coefficient at order {k} with h_k = 0")
                continue
            total += fact_over_beta / h * fk * gk
        return float(total)


def rkhs_inner_product_series(spec: KernelSpec, f_coeffs, g_coeffs, K: int = 500) -> float:
    """Truncated weighted-series inner product from Taylor coefficients.

    Computes ``sum_{k<=K} w_k k!/beta^k b_k(f) b_k(g)`` where ``b_k`` are Taylor
    coefficients about ``alpha/beta``.  For float input the ``k!/beta^k``
    factor is applied in log space (split evenly across both coefficients) to
    avoid overflow, and the sum is accumulated with :func:`math.fsum`.  If
    either coefficient list holds :class:`decimal.Decimal` values the whole
    series, weights included, is evaluated in decimal arithmetic instead.
    """
    if len(f_coeffs) < K + 1 or len(g_coeffs) < K + 1:
        raise ValueError("coefficient lists must have length >= K + 1")
    if isinstance(f_coeffs[0], Decimal) or isinstance(g_coeffs[0], Decimal):
        return _series_decimal(spec, f_coeffs, g_coeffs, K)
    f = np.asarray(f_coeffs, dtype=float)
    g = np.asarray(g_coeffs, dtype=float)
    f, g = f[: K + 1], g[: K + 1]
    ws = weight_sequence(spec, K)
    dead = ws.h == 0
    if np.any(dead & ((f != 0) | (g != 0))):
        k = int(np.flatnonzero(dead & ((f != 0) | (g != 0)))[0])
        raise OutsideRKHSError(f"function outside RKHS: nonzero Taylor coefficient at order {k} with h_k = 0")
    k = np.arange(K + 1)
    half_log = 0.5 * (np.array([math.lgamma(i + 1) for i in k]) - k * math.log(spec.beta))

    def scaled(c):
        out = np.zeros_like(c)
        nz = c != 0
        out[nz] = np.sign(c[nz]) * np.exp(np.log(np.abs(c[nz])) + half_log[nz])
        return out

    terms = ws.w * scaled(f) * scaled(g)
    return math.fsum(terms.tolist())


def _poly_coeffs(p) -> np.ndarray:
    c = np.atleast_1d(np.asarray(p, dtype=float))
    if c.size - 1 > MAX_POLYEXP_DEGREE:
        raise ValueError(f"polynomial degree {c.size - 1} exceeds supported bound {MAX_POLYEXP_DEGREE}")
    return c


def rkhs_inner_product_polyexp(spec: KernelSpec, p1, lam: float, p2, mu: float) -> float:
    """``<p1 exp(lam .), p2 exp(mu .)>`` for a pure exponential kernel.

    Applies ``p1(d/dlam) p2(d/dmu)`` to ``F = exp(A B / beta)`` with
    ``A = lam + alpha``, ``B = mu + alpha``.  Derivatives are tracked as
    ``F * Q(A, B)`` with ``Q`` a bivariate coefficient array::

        d/dlam (F Q) = F (B/beta Q + dQ/dA)
        d/dmu  (F Q) = F (A/beta Q + dQ/dB)
    """
    if not spec.is_exponential:
        raise ValueError("polyexp inner product needs a constant-polynomial kernel")
    c1, c2 = _poly_coeffs(p1), _poly_coeffs(p2)
    beta = spec.beta
    A, B = lam + spec.alpha, mu + spec.alpha
    n = c1.size + c2.size + 1
    P = np.polynomial.polynomial

    def d_lam(Q):
        out = np.zeros_like(Q)
        out[:, 1:] += Q[:, :-1] / beta          # multiply by B
        out[:-1, :] += P.polyder(Q, axis=0) if Q.shape[0] > 1 else 0.0
        return out

    def d_mu(Q):
        out = np.zeros_like(Q)
        out[1:, :] += Q[:-1, :] / beta          # multiply by A
        out[:, :-1] += P.polyder(Q, axis=1) if Q.shape[1] > 1 else 0.0
        return out

    base = math.exp(A * B / beta) / spec.poly[0]
    total = 0.0
    Qk = np.zeros((n, n))
    Qk[0, 0] = 1.0
    for k, a in enumerate(c1):
        Ql = Qk.copy()
        for l, b in enumerate(c2):
            if a != 0 and b != 0:
                total += a * b * P.polyval2d(A, B, Ql)
            Ql = d_mu(Ql)
        Qk = d_lam(Qk)
    return base * total


@dataclass(frozen=True)
class ConsistencyReport:
    """Outcome of :func:`check_full_consistency`."""

    section_residual: float
    derivative_residual: float
    tol: float
    per_tenor: tuple

    @property
    def residual(self) -> float:
        return max(self.section_residual, self.derivative_residual)

    @property
    def passed(self) -> bool:
        return bool(self.residual <= self.tol)


def _projection_residual(values: np.ndarray, basis: np.ndarray) -> float:
    scale = np.max(np.abs(values))
    if scale == 0:
        return 0.0
    # column equilibration keeps lstsq well scaled when x^l e^{rho x} spans decades
    norms = np.linalg.norm(basis, axis=0)
    norms[norms == 0] = 1.0
    coef, *_ = np.linalg.lstsq(basis / norms, values, rcond=None)
    return float(np.max(np.abs(values - (basis / norms) @ coef)) / scale)


def _quasi_exp_basis(x, rates, degree):
    cols = [x ** l * np.exp(r * x) for r in rates for l in range(degree + 1)]
    return np.column_stack(cols)


def _best_single_rate(values, x, degree, bracket=(-5.0, 5.0)):
    grid = np.linspace(*bracket, 201)
    res = [_projection_residual(values, _quasi_exp_basis(x, [r], degree)) for r in grid]
    i = int(np.argmin(res))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    opt = minimize_scalar(lambda r: _projection_residual(values, _quasi_exp_basis(x, [r], degree)),
                          bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return float(opt.x)


def check_full_consistency(
    kernel: Union[AnyKernel, Callable],
    tenors: Sequence[float],
    x_grid: Sequence[float],
    tol: float = 1e-9,
    degree: int = 1,
) -> ConsistencyReport:
    """Numerically verify that kernel sections live in a derivative-invariant quasi-exponential span.

    For each tenor ``y`` the section ``x -> k(x, y)`` and its derivative are
    projected (least squares on ``x_grid``) onto ``span{x^l exp(rho x)}``.  For
    a :class:`KernelSpec` the rates are ``rho = beta*y - alpha`` and
    ``l <= deg p``; for a generic callable kernel ``k(x, y)`` a single rate is
    searched and ``degree`` bounds ``l``.  Residuals are relative to the
    section's sup norm on the grid.  Failure is reported, never raised.
    """
    x = np.asarray(x_grid, dtype=float)
    per_tenor = []
    sec_max = der_max = 0.0
    for y in np.asarray(tenors, dtype=float):
        if isinstance(kernel, (KernelSpec, SumKernelSpec)):
            parts = kernel.parts if isinstance(kernel, SumKernelSpec) else (kernel,)
            cols = [_quasi_exp_basis(x, [p.section_rate(y)], p.degree) for p in parts]
            basis = np.column_stack(cols)
            sec = np.asarray(eval_kernel(kernel, x, y))
            der = np.asarray(eval_kernel_dx(kernel, x, y))
        else:
            sec = np.asarray([kernel(xi, y) for xi in x], dtype=float)
            eps = 1e-6
            der = np.asarray([(kernel(xi + eps, y) - kernel(xi - eps, y)) / (2 * eps) for xi in x])
            rate = _best_single_rate(sec, x, degree)
            basis = _quasi_exp_basis(x, [rate], degree)
        r_sec = _projection_residual(sec, basis)
        r_der = _projection_residual(der, basis)
        per_tenor.append((float(y), r_sec, r_der))
        sec_max = max(sec_max, r_sec)
        der_max = max(der_max, r_der)
    return ConsistencyReport(sec_max, der_max, float(tol), tuple(per_tenor))
