"""Growth rates mu(t) and the scalar quantities derived from them.

A growth rate is a strictly increasing positive function with mu(0) = 1 and
mu(t) -> +inf as t -> +inf (and mu(t) -> 0 as t -> -inf on the full line).
Every quantity in this package is evaluated in log space: we carry log mu and
(log mu)' = mu'/mu and never materialize mu(t) itself, so that powers like
mu(t)^70 stay representable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

FULL_LINE = "full-line"
HALF_LINE = "half-line"

BUILTIN_RATE_NAMES = (
    "exponential",
    "polynomial-full",
    "polynomial-half",
    "sqrt-exp-half",
    "custom",
)


class DomainError(ValueError):
    """A time argument lies outside the domain of a rate or system."""


class RateValidationError(ValueError):
    """A candidate growth rate failed monotonicity or normalization checks."""


@dataclass(frozen=True)
class GrowthRate:
    """A growth rate given through log mu and its derivative.

    ``log_mu`` and ``dlog_mu`` accept floats or numpy arrays.  ``inv_log_mu``
    (inverse of log mu, optional) lets grid builders place nodes uniformly in
    log mu without a numeric inversion.
    """

    name: str
    domain: str
    log_mu: Callable
    dlog_mu: Callable
    inv_log_mu: Optional[Callable] = None

    def check_domain(self, t) -> None:
        t = np.asarray(t, dtype=float)
        if self.domain == HALF_LINE and np.any(t < 0.0):
            raise DomainError(
                f"rate {self.name!r} is defined on the half-line; got t < 0"
            )

    def L(self, t):
        """log mu(t) with domain checking."""
        self.check_domain(t)
        return self.log_mu(np.asarray(t, dtype=float))

    def invert_L(self, level: float) -> float:
        """Time t with log mu(t) = level (closed form or bisection)."""
        if self.inv_log_mu is not None:
            return float(self.inv_log_mu(level))
        lo = 0.0 if self.domain == HALF_LINE else -1.0
        hi = 1.0
        while self.log_mu(hi) < level:
            hi *= 2.0
            if hi > 1e18:
                raise RateValidationError("log_mu never reaches requested level")
        if self.domain == FULL_LINE:
            while self.log_mu(lo) > level:
                lo *= 2.0
                if lo < -1e18:
                    raise RateValidationError("log_mu never reaches requested level")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.log_mu(mid) < level:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)


def mu_pow_ratio(rate: GrowthRate, t, s, gamma: float):
    """log of (mu(t)/mu(s))**gamma, i.e. gamma * (log mu(t) - log mu(s))."""
    return gamma * (rate.L(t) - rate.L(s))


def sign_weight(rate: GrowthRate, s):
    """log of mu(s)^{sign(s)} on the full line, log mu(s) on the half-line.

    This is the exponent weight of the nonuniformity factors mu(s)^{sign(s) theta}
    and mu(s)^{sign(s) nu}; it is nonnegative for every builtin rate.
    """
    Ls = rate.L(s)
    if rate.domain == HALF_LINE:
        return Ls
    return np.sign(np.asarray(s, dtype=float)) * Ls


def validate_rate(rate: GrowthRate, t_max: float = 50.0, n: int = 400) -> None:
    """Check the GrowthRate invariants on a sampled grid; raise on failure."""
    if rate.domain not in (FULL_LINE, HALF_LINE):
        raise RateValidationError(f"unknown domain {rate.domain!r}")
    if abs(float(rate.log_mu(0.0))) > 1e-9:
        raise RateValidationError("log_mu(0) must be 0 (mu(0) = 1)")
    t_lo = 0.0 if rate.domain == HALF_LINE else -t_max
    ts = np.linspace(t_lo, t_max, n)
    Ls = np.asarray(rate.log_mu(ts), dtype=float)
    if not np.all(np.isfinite(Ls)):
        raise RateValidationError("log_mu produced non-finite values")
    if np.any(np.diff(Ls) <= 0.0):
        raise RateValidationError("log_mu is not strictly increasing")
    if Ls[-1] < 1.0:
        raise RateValidationError("log_mu grows too slowly to be a growth rate")
    # central difference of log_mu against dlog_mu at interior points
    interior = ts[5:-5:7]
    h = 1e-4 * (1.0 + np.abs(interior))
    num = (rate.log_mu(interior + h) - rate.log_mu(interior - h)) / (2.0 * h)
    ana = np.asarray(rate.dlog_mu(interior), dtype=float)
    if np.any(ana <= 0.0):
        raise RateValidationError("dlog_mu must be positive")
    rel = np.abs(num - ana) / np.maximum(np.abs(ana), 1e-30)
    if np.max(rel) > 1e-5:
        raise RateValidationError(
            f"dlog_mu inconsistent with log_mu (max rel err {np.max(rel):.2e})"
        )


def _exponential() -> GrowthRate:
    return GrowthRate(
        name="exponential",
        domain=FULL_LINE,
        log_mu=lambda t: np.asarray(t, dtype=float) + 0.0,
        dlog_mu=lambda t: np.ones_like(np.asarray(t, dtype=float)),
        inv_log_mu=lambda L: L,
    )


def _polynomial_full() -> GrowthRate:
    # p(t) = t + 1 for t >= 0 and 1/(1 - t) for t < 0, so log p = sign(t) log(1+|t|)
    def log_mu(t):
        t = np.asarray(t, dtype=float)
        return np.sign(t) * np.log1p(np.abs(t))

    def dlog_mu(t):
        t = np.asarray(t, dtype=float)
        return 1.0 / (1.0 + np.abs(t))

    def inv(L):
        L = np.asarray(L, dtype=float)
        return np.sign(L) * np.expm1(np.abs(L))

    return GrowthRate("polynomial-full", FULL_LINE, log_mu, dlog_mu, inv)


def _polynomial_half() -> GrowthRate:
    return GrowthRate(
        name="polynomial-half",
        domain=HALF_LINE,
        log_mu=lambda t: np.log1p(np.asarray(t, dtype=float)),
        dlog_mu=lambda t: 1.0 / (1.0 + np.asarray(t, dtype=float)),
        inv_log_mu=lambda L: np.expm1(L),
    )


def _sqrt_exp_half() -> GrowthRate:
    # mu0(t) = exp(sqrt(1+t) - 1)
    return GrowthRate(
        name="sqrt-exp-half",
        domain=HALF_LINE,
        log_mu=lambda t: np.sqrt(1.0 + np.asarray(t, dtype=float)) - 1.0,
        dlog_mu=lambda t: 0.5 / np.sqrt(1.0 + np.asarray(t, dtype=float)),
        inv_log_mu=lambda L: (1.0 + L) ** 2 - 1.0,
    )


def rate_from_table(
    t: np.ndarray,
    log_mu: np.ndarray,
    domain: str = HALF_LINE,
    name: str = "custom-table",
) -> GrowthRate:
    """Build a rate from (t, log mu) samples, interpolated monotone-cubically.

    The PCHIP interpolant preserves strict monotonicity of the data; dlog_mu
    comes from its derivative.  Queries outside the table range are errors.
    """
    from scipy.interpolate import PchipInterpolator

    t = np.asarray(t, dtype=float)
    vals = np.asarray(log_mu, dtype=float)
    if t.ndim != 1 or t.shape != vals.shape or t.size < 4:
        raise RateValidationError("table needs >= 4 rows of (t, log_mu)")
    if np.any(np.diff(t) <= 0.0):
        raise RateValidationError("table times must be strictly increasing")
    if np.any(np.diff(vals) <= 0.0):
        raise RateValidationError("table log_mu must be strictly increasing")
    interp = PchipInterpolator(t, vals)
    deriv = interp.derivative()
    t_lo, t_hi = float(t[0]), float(t[-1])

    def bounded(f):
        def g(x):
            x = np.asarray(x, dtype=float)
            if np.any(x < t_lo - 1e-12) or np.any(x > t_hi + 1e-12):
                raise DomainError("query outside custom rate table range")
            return f(np.clip(x, t_lo, t_hi))

        return g

    rate = GrowthRate(name, domain, bounded(interp), bounded(deriv))
    validate_rate(rate, t_max=min(t_hi, 50.0), n=min(400, 4 * t.size))
    return rate


def rate_from_csv(path: str, domain: str = HALF_LINE) -> GrowthRate:
    """Read a custom rate from CSV with header ``t,log_mu`` sorted by t."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header[:2]] != ["t", "log_mu"]:
            raise RateValidationError("rate CSV must start with header 't,log_mu'")
        rows = [(float(r[0]), float(r[1])) for r in reader if r]
    arr = np.asarray(rows, dtype=float)
    return rate_from_table(arr[:, 0], arr[:, 1], domain=domain, name="custom-csv")


def builtin_rate(name: str, params: Optional[dict] = None) -> GrowthRate:
    """Return a named builtin rate (or a validated custom one).

    custom requires either ``log_mu``/``dlog_mu`` callables (plus ``domain``)
    or ``table`` = (t, log_mu arrays) / ``path`` = CSV file.
    """
    params = dict(params or {})
    if name == "exponential":
        rate = _exponential()
    elif name == "polynomial-full":
        rate = _polynomial_full()
    elif name == "polynomial-half":
        rate = _polynomial_half()
    elif name == "sqrt-exp-half":
        rate = _sqrt_exp_half()
    elif name == "custom":
        if "path" in params:
            return rate_from_csv(params["path"], params.get("domain", HALF_LINE))
        if "table" in params:
            t, vals = params["table"]
            return rate_from_table(t, vals, params.get("domain", HALF_LINE))
        if "log_mu" in params and "dlog_mu" in params:
            rate = GrowthRate(
                "custom",
                params.get("domain", FULL_LINE),
                params["log_mu"],
                params["dlog_mu"],
                params.get("inv_log_mu"),
            )
            validate_rate(rate, t_max=params.get("validate_t_max", 50.0))
            return rate
        raise RateValidationError("custom rate needs callables, a table or a path")
    else:
        raise ValueError(f"unknown growth rate {name!r}; choose from {BUILTIN_RATE_NAMES}")
    return rate
