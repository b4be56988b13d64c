"""Linear nonautonomous systems x' = A(t)x and the builtin test systems.

Builtins with a known evolution operator also carry it in log-scaled form
(``closed_form_log`` returning ``(body, log)`` with Phi = exp(log) * body),
which is what the propagator grid consumes; the plain ``closed_form`` returns
a dense matrix and can overflow for extreme arguments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from .growth import (
    FULL_LINE,
    HALF_LINE,
    DomainError,
    GrowthRate,
    builtin_rate,
)

BUILTIN_SYSTEM_NAMES = (
    "example1",
    "example2",
    "triangular-halfline",
    "constant",
    "rotation2d",
    "random-smooth",
    "table",
)


@dataclass(frozen=True)
class LinearSystem:
    """A linear system defined by its coefficient matrix A(t).

    ``closed_form(t, s)`` returns the exact evolution operator Phi(t, s) when
    one is known; ``closed_form_log(t, s)`` returns the same operator as a
    ``(body, log)`` pair.  ``breakpoints`` are times the integrator must not
    step across (piecewise definitions such as sign(t)).
    """

    name: str
    dim: int
    domain: str
    coeff: Callable[[float], np.ndarray]
    closed_form: Optional[Callable[[float, float], np.ndarray]] = None
    closed_form_log: Optional[Callable[[float, float], Tuple[np.ndarray, float]]] = None
    breakpoints: Tuple[float, ...] = ()

    def check_domain(self, t) -> None:
        if self.domain == HALF_LINE and np.any(np.asarray(t, dtype=float) < 0.0):
            raise DomainError(f"system {self.name!r} lives on the half-line")


@dataclass(frozen=True)
class ShiftedSystem:
    """The gamma-shifted system x' = (A(t) - gamma * mu'(t)/mu(t) * I) x."""

    base: LinearSystem
    rate: GrowthRate
    gamma: float

    @property
    def name(self) -> str:
        return f"{self.base.name}[gamma={self.gamma:g}]"

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def domain(self) -> str:
        return self.base.domain

    @property
    def breakpoints(self) -> Tuple[float, ...]:
        return self.base.breakpoints

    def coeff(self, t: float) -> np.ndarray:
        A = np.asarray(self.base.coeff(t), dtype=float)
        return A - self.gamma * float(self.rate.dlog_mu(t)) * np.eye(self.base.dim)

    @property
    def closed_form_log(self):
        inner = self.base.closed_form_log
        if inner is None:
            return None

        def shifted(t: float, s: float):
            body, log = inner(t, s)
            return body, log - self.gamma * float(self.rate.L(t) - self.rate.L(s))

        return shifted

    @property
    def closed_form(self):
        inner = self.closed_form_log
        if inner is None:
            return None

        def dense(t: float, s: float) -> np.ndarray:
            body, log = inner(t, s)
            return body * np.exp(log)

        return dense

    def check_domain(self, t) -> None:
        self.base.check_domain(t)


def shift(system: LinearSystem, rate: GrowthRate, gamma: float) -> ShiftedSystem:
    """Shift a system by gamma along the rate; exact in the closed form."""
    if system.domain != rate.domain:
        raise DomainError(
            f"system domain {system.domain!r} incompatible with rate domain {rate.domain!r}"
        )
    return ShiftedSystem(system, rate, float(gamma))


def _scaled_expm(A: np.ndarray, delta: float) -> Tuple[np.ndarray, float]:
    """exp(A * delta) as (body, log) via scaling-and-squaring with renorm."""
    scale = np.linalg.norm(A, 2) * abs(delta)
    k = max(0, int(np.ceil(np.log2(max(scale, 1e-300)))) if scale > 1.0 else 0)
    body = scipy.linalg.expm(A * (delta / 2**k))
    log = 0.0
    for _ in range(k):
        body = body @ body
        nrm = np.linalg.norm(body, 2)
        body = body / nrm
        log += np.log(nrm)
    nrm = np.linalg.norm(body, 2)
    return body / nrm, log + np.log(nrm)


def _dense_from_log(fn) -> Callable[[float, float], np.ndarray]:
    def dense(t: float, s: float) -> np.ndarray:
        body, log = fn(t, s)
        return body * np.exp(log)

    return dense


def example1(
    alpha: float,
    beta: float,
    theta: float,
    nu: float,
    rate: GrowthRate,
) -> LinearSystem:
    """Diagonal 2x2 system whose spectrum is [alpha-theta, alpha+theta] u [beta-nu, beta+nu].

    The diagonal entries modulate the pure rates alpha, beta with an
    oscillation whose amplitude grows like log mu(t), which produces genuine
    nonuniformity of size theta (resp. nu) on the two axes.
    """
    if not (alpha < 0.0 < beta and theta >= 0.0 and nu >= 0.0):
        raise ValueError("example1 requires alpha < 0 < beta and theta, nu >= 0")
    if not (alpha + theta < 0.0 < beta - nu):
        raise ValueError("example1 requires alpha + theta < 0 and beta - nu > 0")
    if rate.domain != FULL_LINE:
        raise DomainError("example1 is defined on the full line")

    def osc(t):
        t = np.asarray(t, dtype=float)
        return np.sign(t) * 0.5 * (np.cos(t) - 1.0) * rate.log_mu(t)

    def diag_coeff(t: float, base: float, amp: float) -> float:
        dl = float(rate.dlog_mu(t))
        sgn = np.sign(t)
        return base * dl + amp * sgn * (dl * 0.5 * (np.cos(t) - 1.0) - rate.log_mu(t) * 0.5 * np.sin(t))

    def coeff(t: float) -> np.ndarray:
        return np.diag([diag_coeff(t, alpha, theta), diag_coeff(t, beta, nu)])

    def closed_log(t: float, s: float) -> Tuple[np.ndarray, float]:
        dL = float(rate.L(t) - rate.L(s))
        do = float(osc(t) - osc(s))
        lu = alpha * dL + theta * do
        lv = beta * dL + nu * do
        m = max(lu, lv)
        return np.diag([np.exp(lu - m), np.exp(lv - m)]), m

    return LinearSystem(
        name=f"example1(a={alpha:g},b={beta:g},th={theta:g},nu={nu:g},{rate.name})",
        dim=2,
        domain=FULL_LINE,
        coeff=coeff,
        closed_form=_dense_from_log(closed_log),
        closed_form_log=closed_log,
        breakpoints=(0.0,),
    )


def example2() -> Tuple[LinearSystem, GrowthRate]:
    """example1 specialized to the polynomial rate, alpha=-2, beta=2, theta=nu=1.

    Returns the system together with the polynomial rate it is built on; its
    nonuniform polynomial spectrum is [-3, -1] u [1, 3].
    """
    rate = builtin_rate("polynomial-full")
    sys1 = example1(-2.0, 2.0, 1.0, 1.0, rate)
    object.__setattr__(sys1, "name", "example2")
    return sys1, rate


def triangular_halfline() -> LinearSystem:
    """Upper-triangular half-line system with rates +-1/2 under mu0 = exp(sqrt(1+t)-1).

    The evolution operator follows from integrating the coefficient; the
    uncoupled part contracts/expands like mu0^{-1/2} and mu0^{+1/2}.
    """

    def coeff(t: float) -> np.ndarray:
        r = np.sqrt(1.0 + t)
        c = 0.25 / r
        return np.array([[-c, np.exp(1.0 - r) * 2.0 * c], [0.0, c]])

    def closed_log(t: float, s: float) -> Tuple[np.ndarray, float]:
        phi = np.sqrt(1.0 + t)
        sig = np.sqrt(1.0 + s)
        x = 0.5 * (phi - sig)
        # Phi = exp(x) * [[e^{-2x}, e^{1-sig}(phi-sig)e^{-2x}], [0, 1]]
        e2 = np.exp(-2.0 * x)
        body = np.array([[e2, np.exp(1.0 - sig) * (phi - sig) * e2], [0.0, 1.0]])
        return body, x

    return LinearSystem(
        name="triangular-halfline",
        dim=2,
        domain=HALF_LINE,
        coeff=coeff,
        closed_form=_dense_from_log(closed_log),
        closed_form_log=closed_log,
    )


def constant(matrix, domain: str = FULL_LINE) -> LinearSystem:
    A = np.array(matrix, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("constant system needs a square matrix")
    A.setflags(write=False)

    def closed_log(t: float, s: float) -> Tuple[np.ndarray, float]:
        return _scaled_expm(A, t - s)

    return LinearSystem(
        name="constant",
        dim=A.shape[0],
        domain=domain,
        coeff=lambda t: A,
        closed_form=_dense_from_log(closed_log),
        closed_form_log=closed_log,
    )


def rotation2d() -> LinearSystem:
    """A = [[0, 1], [-1, 0]]; orthogonal propagator, one-point spectrum {0}."""
    A = np.array([[0.0, 1.0], [-1.0, 0.0]])

    def closed_log(t: float, s: float) -> Tuple[np.ndarray, float]:
        d = t - s
        return np.array([[np.cos(d), np.sin(d)], [-np.sin(d), np.cos(d)]]), 0.0

    return LinearSystem(
        name="rotation2d",
        dim=2,
        domain=FULL_LINE,
        coeff=lambda t: A,
        closed_form=_dense_from_log(closed_log),
        closed_form_log=closed_log,
    )


def random_smooth(dim: int = 3, seed: int = 0, scale: float = 0.8) -> LinearSystem:
    """Seeded smooth bounded coefficient: A(t) = C0 + C1 sin(w1 t) + C2 cos(w2 t)."""
    rng = np.random.default_rng(seed)
    C0 = scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    C1 = scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    C2 = scale * rng.standard_normal((dim, dim)) / np.sqrt(dim)
    w1, w2 = rng.uniform(0.5, 2.0, size=2)

    def coeff(t: float) -> np.ndarray:
        return C0 + np.sin(w1 * t) * C1 + np.cos(w2 * t) * C2

    return LinearSystem(
        name=f"random-smooth(dim={dim},seed={seed})",
        dim=dim,
        domain=FULL_LINE,
        coeff=coeff,
    )


def table_system(
    path: Optional[str] = None,
    times: Optional[Sequence[float]] = None,
    matrices: Optional[np.ndarray] = None,
    domain: str = FULL_LINE,
    interpolation: str = "linear",
) -> LinearSystem:
    """Coefficient sampled at knots: CSV rows (t, A entries row-major).

    Linear interpolation by default, cubic by flag; queries outside the
    sampled range are errors.
    """
    if path is not None:
        with open(path, newline="") as fh:
            rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
        arr = np.asarray(rows, dtype=float)
        times = arr[:, 0]
        n = int(round(np.sqrt(arr.shape[1] - 1)))
        if n * n != arr.shape[1] - 1:
            raise ValueError("table rows must contain t plus n*n matrix entries")
        matrices = arr[:, 1:].reshape(-1, n, n)
    ts = np.asarray(times, dtype=float)
    mats = np.asarray(matrices, dtype=float)
    if ts.ndim != 1 or mats.shape[0] != ts.size or mats.ndim != 3:
        raise ValueError("table needs matching times and stacked square matrices")
    if np.any(np.diff(ts) <= 0.0):
        raise ValueError("table times must be strictly increasing")
    n = mats.shape[1]

    if interpolation == "cubic":
        from scipy.interpolate import CubicSpline

        spline = CubicSpline(ts, mats.reshape(ts.size, -1), axis=0)

        def coeff(t: float) -> np.ndarray:
            if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
                raise DomainError("query outside table system range")
            return spline(np.clip(t, ts[0], ts[-1])).reshape(n, n)

    else:
        flat = mats.reshape(ts.size, -1)

        def coeff(t: float) -> np.ndarray:
            if t < ts[0] - 1e-12 or t > ts[-1] + 1e-12:
                raise DomainError("query outside table system range")
            out = np.array([np.interp(t, ts, flat[:, j]) for j in range(n * n)])
            return out.reshape(n, n)

    return LinearSystem(
        name="table",
        dim=n,
        domain=domain,
        coeff=coeff,
        breakpoints=tuple(ts) if interpolation == "linear" and ts.size <= 64 else (),
    )


def builtin_system(name: str, params: Optional[dict] = None):
    """Instantiate a builtin system by name.

    Returns the LinearSystem; for ``example2`` the paired polynomial rate is
    fixed by definition and can be obtained from :func:`example2` directly.
    """
    params = dict(params or {})
    if name == "example1":
        rate = params.pop("rate")
        if isinstance(rate, str):
            rate = builtin_rate(rate, params.pop("rate_params", None))
        return example1(
            float(params["alpha"]),
            float(params["beta"]),
            float(params.get("theta", 0.0)),
            float(params.get("nu", 0.0)),
            rate,
        )
    if name == "example2":
        return example2()[0]
    if name == "triangular-halfline":
        return triangular_halfline()
    if name == "constant":
        return constant(params["matrix"], params.get("domain", FULL_LINE))
    if name == "rotation2d":
        return rotation2d()
    if name == "random-smooth":
        return random_smooth(
            int(params.get("dim", 3)),
            int(params.get("seed", 0)),
            float(params.get("scale", 0.8)),
        )
    if name == "table":
        return table_system(
            path=params.get("path"),
            times=params.get("times"),
            matrices=params.get("matrices"),
            domain=params.get("domain", FULL_LINE),
            interpolation=params.get("interpolation", "linear"),
        )
    raise ValueError(f"unknown system {name!r}; choose from {BUILTIN_SYSTEM_NAMES}")
