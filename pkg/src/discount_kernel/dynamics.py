"""No-arbitrage factor dynamics of the quasi-exponential discount model.

Zero-coupon prices are ``h_t(x) = sum_i Z_{t,i} exp(lambda_i x)`` (discount
``H = 1 - h``), the short rate is ``r_t = -sum_i lambda_i Z_{t,i}``, and the
discounted bond ``exp(-int r) h_t(T - t)`` is a local martingale exactly when
the factor drift is

    b(Z) = (diag(lambda) + r) Z = (diag(lambda) - <lambda, Z>) Z.

Simulation is Euler-Maruyama with a constant diffusion matrix.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import eigh, expm

log = logging.getLogger(__name__)

BLOCK_PATHS = 1024
TRADING_DAYS = 252


class DegenerateNumeraireError(ValueError):
    pass


class DiagnosticInvalidError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineModelSpec:
    """Diagonal affine discount model: rates ``lambda`` and initial factors ``Z_0``."""

    rates: np.ndarray
    z0: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rates, dtype=float).ravel()
        z = np.asarray(self.z0, dtype=float).ravel()
        if r.shape != z.shape:
            raise ValueError("rates and z0 must have equal length")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(z))):
            raise ValueError("rates and z0 must be finite")
        object.__setattr__(self, "rates", r)
        object.__setattr__(self, "z0", z)

    @property
    def dim(self) -> int:
        return self.rates.size

    @classmethod
    def from_generator(cls, M, y0) -> "AffineModelSpec":
        """Diagonalize a real-diagonalizable generator ``M`` with state ``(1, y0)``.

        ``Z = diag(p) P^T (1, y0)`` with ``p = P^{-1} e_0`` and ``M = P D P^{-1}``.
        """
        M = np.asarray(M, dtype=float)
        w, P = np.linalg.eig(M)
        if np.max(np.abs(w.imag)) > 1e-12 or np.max(np.abs(P.imag)) > 1e-12:
            raise ValueError("generator is not diagonalizable over the reals")
        w, P = w.real, P.real
        if np.linalg.cond(P) > 1e12:
            raise ValueError("generator eigenbasis is numerically defective")
        e0 = np.zeros(M.shape[0])
        e0[0] = 1.0
        p = np.linalg.solve(P, e0)
        x = np.concatenate([[1.0], np.asarray(y0, dtype=float).ravel()])
        return cls(w, p * (P.T @ x))

    def to_dict(self) -> dict:
        return {"rates": self.rates.tolist(), "z0": self.z0.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineModelSpec":
        return cls(d["rates"], d["z0"])


@dataclass(frozen=True)
class DiffusionSpec:
    """Constant diffusion ``sigma`` and Euler grid settings."""

    sigma: np.ndarray
    dt: float = 1.0 / TRADING_DAYS
    horizon: float = 1.0
    n_paths: int = 1000
    seed: int = 0

    def __post_init__(self):
        s = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if s.shape[0] != s.shape[1] or not np.all(np.isfinite(s)):
            raise ValueError("sigma must be a finite square matrix")
        if not (self.dt > 0 and self.horizon > 0 and self.dt <= self.horizon):
            raise ValueError("need 0 < dt <= horizon")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        object.__setattr__(self, "sigma", s)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def to_dict(self) -> dict:
        return {"sigma": self.sigma.tolist(), "dt": self.dt, "horizon": self.horizon,
                "n_paths": self.n_paths, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSpec":
        return cls(d["sigma"], d["dt"], d["horizon"], d["n_paths"], d["seed"])


@dataclass
class SimulationResult:
    """Recorded Euler paths.

    ``paths`` has shape ``(n_paths, n_records, d + 1)``; ``log_discount[p, k]``
    is ``-int_0^{t_k} r_s ds`` by trapezoidal quadrature on the full grid;
    ``log_density`` is set when a forward-measure maturity was requested.
    """

    times: np.ndarray
    paths: np.ndarray
    exploded: np.ndarray
    log_discount: np.ndarray
    log_density: Optional[np.ndarray] = None
    density_maturity: Optional[float] = None

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]


def g_curve(M, x) -> np.ndarray:
    """``g(x) = (I - expm(x M)) e_0``; ``g(0) = 0`` exactly."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    n = M.shape[0]
    if x == 0:
        return np.zeros(n)
    with np.errstate(over="ignore", invalid="ignore"):
        E = expm(float(x) * M)
    g = -E[:, 0]
    g[0] += 1.0
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite matrix exponential")
    return g


def drift_Z(spec: AffineModelSpec, Z) -> np.ndarray:
    """No-arbitrage drift ``(lambda_i - <lambda, Z>) Z_i``; broadcasts over leading axes."""
    Z = np.asarray(Z, dtype=float)
    lam = spec.rates
    return (lam - (Z @ lam)[..., None]) * Z


def drift_Z_jordan(J, p, Z) -> np.ndarray:
    """Drift ``(J^T - <J p, Z>) Z`` for ``h(x) = <expm(x J) p, Z>`` in a general basis."""
    J = np.asarray(J, dtype=float)
    Z = np.asarray(Z, dtype=float)
    Jp = J @ np.asarray(p, dtype=float)
    return Z @ J - (Z @ Jp)[..., None] * Z


def short_rate(spec: AffineModelSpec, Z):
    return -(np.asarray(Z, dtype=float) @ spec.rates)


def term_structure(spec: AffineModelSpec, Z, x):
    """Price ``h = sum_i Z_i exp(lambda_i x)`` and discount ``H = 1 - h``."""
    Z = np.asarray(Z, dtype=float)
    E = np.exp(np.multiply.outer(np.asarray(x, dtype=float), spec.rates))
    h = Z @ E.T if E.ndim > 1 else Z @ E
    return h, 1.0 - h


def girsanov_kernel(spec: AffineModelSpec, diff: DiffusionSpec, Z, t: float, T: float):
    """Integrand of the forward-measure density ``eta_t = P(t,T) / (B_t P(0,T))``.

    Returns ``e(T - t)^T sigma / h_t(T - t)`` with ``e(x) = (exp(lambda_i x))_i``,
    the relative diffusion of the ``T``-bond.  Broadcasts over leading axes of ``Z``.
    """
    if not t < T:
        raise ValueError("need t < T")
    e = np.exp(spec.rates * (T - t))
    Z = np.asarray(Z, dtype=float)
    price = Z @ e
    if np.any(price <= 0):
        raise DegenerateNumeraireError("degenerate numeraire: nonpositive bond price")
    return np.multiply.outer(1.0 / price, e @ diff.sigma)


def _simulate_block(spec, diff, n, seed_seq, record_idx, bound, density_T, drift_fn):
    rng = np.random.Generator(np.random.Philox(seed_seq))
    dim = spec.dim
    dt, steps = diff.dt, diff.n_steps
    sig = diff.sigma
    Z = np.tile(spec.z0, (n, 1))
    alive = np.ones(n, dtype=bool)
    logdisc = np.zeros(n)
    logeta = np.zeros(n) if density_T is not None else None
    rec = np.empty((n, len(record_idx), dim))
    rec_ld = np.empty((n, len(record_idx)))
    rec_eta = np.empty((n, len(record_idx))) if density_T is not None else None
    sqdt = math.sqrt(dt)
    ri = 0
    r_prev = short_rate(spec, Z)
    for k in range(steps + 1):
        if ri < len(record_idx) and record_idx[ri] == k:
            rec[:, ri] = Z
            rec_ld[:, ri] = logdisc
            if rec_eta is not None:
                rec_eta[:, ri] = logeta
            ri += 1
        if k == steps:
            break
        dW = rng.standard_normal((n, dim)) * sqdt
        if logeta is not None:
            t = k * dt
            if t < density_T:
                e = np.exp(spec.rates * (density_T - t))
                price = Z @ e
                with np.errstate(divide="ignore", invalid="ignore"):
                    kern = (e @ sig)[None, :] / price[:, None]
                ok = alive & (price > 0)
                upd = np.einsum("ij,ij->i", kern, dW) - 0.5 * np.einsum("ij,ij->i", kern, kern) * dt
                logeta = np.where(ok, logeta + upd, logeta)
        Znew = Z + drift_fn(spec, Z) * dt + dW @ sig.T
        boom = alive & ~(np.linalg.norm(Znew, axis=1) <= bound)
        alive &= ~boom
        Znew = np.where(alive[:, None], Znew, Z)
        r_new = short_rate(spec, Znew)
        logdisc = np.where(alive, logdisc - 0.5 * (r_prev + r_new) * dt, logdisc)
        Z, r_prev = Znew, r_new
    return rec, ~alive, rec_ld, rec_eta


def simulate(
    spec: AffineModelSpec,
    diff: DiffusionSpec,
    record_every: int = 1,
    explosion_factor: float = 1e6,
    density_maturity: Optional[float] = None,
    jobs: int = 1,
    drift=None,
) -> SimulationResult:
    """Euler-Maruyama paths ``Z_{k+1} = Z_k + b(Z_k) dt + sigma dW_k``.

    Paths are generated in fixed blocks of 1024, each with its own Philox
    stream spawned from ``diff.seed``, so output is identical for any ``jobs``.
    A path whose norm exceeds ``explosion_factor * |Z_0|`` is frozen and flagged.
    ``drift`` overrides the no-arbitrage drift (used for negative controls).
    """
    if diff.sigma.shape[0] != spec.dim:
        raise ValueError("sigma dimension must match the model")
    drift_fn = drift_Z if drift is None else drift
    steps = diff.n_steps
    record_idx = list(range(0, steps + 1, max(int(record_every), 1)))
    if record_idx[-1] != steps:
        record_idx.append(steps)
    norm0 = float(np.linalg.norm(spec.z0))
    bound = explosion_factor * (norm0 if norm0 > 0 else 1.0)
    n_blocks = -(-diff.n_paths // BLOCK_PATHS)
    seqs = np.random.SeedSequence(diff.seed).spawn(n_blocks)
    sizes = [min(BLOCK_PATHS, diff.n_paths - b * BLOCK_PATHS) for b in range(n_blocks)]

    def run(b):
        return _simulate_block(spec, diff, sizes[b], seqs[b], record_idx, bound, density_maturity, drift_fn)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            parts = list(ex.map(run, range(n_blocks)))
    else:
        parts = [run(b) for b in range(n_blocks)]
    paths = np.concatenate([p[0] for p in parts])
    exploded = np.concatenate([p[1] for p in parts])
    ld = np.concatenate([p[2] for p in parts])
    eta = np.concatenate([p[3] for p in parts]) if density_maturity is not None else None
    if exploded.any():
        log.warning("%d of %d paths exploded", int(exploded.sum()), exploded.size)
    times = np.asarray(record_idx, dtype=float) * diff.dt
    return SimulationResult(times, paths, exploded, ld, eta, density_maturity)


@dataclass
class MartingaleReport:
    """Standardized deviations of the mean discounted bond price per maturity."""

    maturities: list
    times: dict  # T -> monitoring times
    means: dict
    stderr: dict
    stats: dict
    n_valid: int
    threshold: float = 3.0

    @property
    def max_abs_stat(self) -> float:
        vals = [np.max(np.abs(v)) for v in self.stats.values() if len(v)]
        return float(max(vals)) if vals else 0.0

    @property
    def passed(self) -> bool:
        return self.max_abs_stat <= self.threshold

    def rows(self):
        for T in self.maturities:
            for t, m, s, z in zip(self.times[T], self.means[T], self.stderr[T], self.stats[T]):
                yield T, float(t), float(m), float(s), float(z)


def discounted_bond(spec: AffineModelSpec, result: SimulationResult, T: float):
    """``exp(-int_0^t r) h_t(T - t)`` at every recorded time ``t <= T``."""
    mask = result.times <= T + 1e-12
    t = result.times[mask]
    E = np.exp(np.multiply.outer(T - t, spec.rates))  # (n_t, d+1)
    h = np.einsum("ptd,td->pt", result.paths[:, mask], E)
    return t, np.exp(result.log_discount[:, mask]) * h


def martingale_diagnostic(
    spec: AffineModelSpec,
    diff: DiffusionSpec,
    maturities: Sequence[float],
    n_monitor: int = 10,
    result: Optional[SimulationResult] = None,
    drift=None,
    stderr_floor: float = 0.0,
) -> MartingaleReport:
    """Monte-Carlo check that discounted bond prices keep a constant mean.

    For each maturity ``T`` the statistic ``(mean_t - P(0, T)) / stderr_t`` is
    reported at ``n_monitor`` equally spaced times in ``(0, T]`` (snapped to the
    simulation grid).  With ``sigma = 0`` the stderr is zero; ``stderr_floor``
    then sets the deviation scale.
    """
    if any(T > diff.horizon + 1e-12 for T in maturities):
        raise ValueError("every maturity must lie within the simulation horizon")
    if result is None:
        steps_per = max(int(round(min(maturities) / n_monitor / diff.dt)), 1)
        result = simulate(spec, diff, record_every=steps_per, drift=drift)
    valid = ~result.exploded
    if valid.sum() < 0.5 * valid.size:
        raise DiagnosticInvalidError(f"{int((~valid).sum())} of {valid.size} paths exploded")
    times, means, errs, stats = {}, {}, {}, {}
    for T in maturities:
        t, disc = discounted_bond(spec, result, T)
        disc = disc[valid]
        want = np.linspace(0, T, n_monitor + 1)[1:]
        idx = np.unique([int(np.argmin(np.abs(t - w))) for w in want])
        idx = idx[t[idx] > 0]
        m = disc[:, idx].mean(axis=0)
        se = disc[:, idx].std(axis=0, ddof=1) / math.sqrt(disc.shape[0]) if disc.shape[0] > 1 else np.zeros(idx.size)
        p0 = float(term_structure(spec, spec.z0, T)[0])
        scale = np.maximum(se, stderr_floor)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(scale > 0, (m - p0) / scale, np.where(m == p0, 0.0, np.inf))
        times[T], means[T], errs[T], stats[T] = t[idx], m, se, z
    return MartingaleReport(list(maturities), times, means, errs, stats, int(valid.sum()))


def _sym_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = eigh(0.5 * (S + S.T))
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def estimate_covariance(coef_series, dt: float = 1.0 / TRADING_DAYS) -> np.ndarray:
    """Constant diffusion ``sigma`` from a daily factor series.

    Sample covariance of increments divided by ``dt``, then the symmetric
    square root with negative eigenvalues clipped to zero.
    """
    Z = np.atleast_2d(np.asarray(coef_series, dtype=float))
    if Z.shape[0] < 2:
        raise ValueError("need at least two observations")
    dZ = np.diff(Z, axis=0)
    if not np.any(dZ):
        log.warning("constant coefficient series; diffusion estimate is zero")
        return np.zeros((Z.shape[1], Z.shape[1]))
    cov = np.atleast_2d(np.cov(dZ, rowvar=False)) if dZ.shape[0] > 1 else np.outer(dZ[0], dZ[0])
    return _sym_sqrt(cov / dt)
