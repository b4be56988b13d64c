"""Numerically realized evolution operators with log-scaled storage.

A PropagatorGrid stores per-interval transition matrices Phi(t_{i+1}, t_i) as
ScaledMatrix values (body of unit spectral norm times exp(log_scale)), so that
compositions over ranges where gamma * log mu spans [-80, 80] never overflow.
Long-range operators are assembled on demand from segment-tree products of the
per-step transitions; the reverse direction composes step inverses, never the
inverse of a long product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .growth import GrowthRate

DEFAULT_TOL = 1e-9
TOL_RANGE = (1e-12, 1e-3)
DEFAULT_NODE_DL = 0.01
MAX_NODES = 400_000


class IntegrationError(RuntimeError):
    """The matrix ODE integrator could not meet its tolerance."""


class StiffnessError(IntegrationError):
    """Step size underflow: the problem looks stiff at this tolerance."""


class ScaledMatrix:
    """exp(log) * body with spectral norm of body kept at 1 by renormalization."""

    __slots__ = ("body", "log")

    def __init__(self, body: np.ndarray, log: float = 0.0, normalize: bool = True):
        body = np.asarray(body, dtype=float)
        if normalize:
            nrm = np.linalg.norm(body, 2)
            if not np.isfinite(nrm) or nrm == 0.0:
                raise IntegrationError("non-finite or zero matrix in scaled arithmetic")
            body = body / nrm
            log = log + np.log(nrm)
        self.body = body
        self.log = float(log)

    @staticmethod
    def identity(n: int) -> "ScaledMatrix":
        return ScaledMatrix(np.eye(n), 0.0, normalize=False)

    @property
    def dim(self) -> int:
        return self.body.shape[0]

    def matmul(self, other: "ScaledMatrix") -> "ScaledMatrix":
        return ScaledMatrix(self.body @ other.body, self.log + other.log)

    def __matmul__(self, other: "ScaledMatrix") -> "ScaledMatrix":
        return self.matmul(other)

    def inv(self) -> "ScaledMatrix":
        return ScaledMatrix(np.linalg.inv(self.body), -self.log)

    def apply(self, block: np.ndarray, block_log: float = 0.0) -> Tuple[np.ndarray, float]:
        """Multiply a log-scaled n x k block from the left; renormalized."""
        out = self.body @ block
        nrm = np.linalg.norm(out, 2)
        if nrm == 0.0 or not np.isfinite(nrm):
            raise IntegrationError("degenerate block in scaled apply")
        return out / nrm, self.log + block_log + np.log(nrm)

    def log_norm(self) -> float:
        return self.log + np.log(np.linalg.norm(self.body, 2))

    def to_dense(self, max_log: float = 700.0) -> np.ndarray:
        if abs(self.log) > max_log:
            raise OverflowError(f"dense value out of range (log scale {self.log:.1f})")
        return self.body * np.exp(self.log)

    def rcond(self) -> float:
        sv = np.linalg.svd(self.body, compute_uv=False)
        return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0

    def rel_diff(self, other: "ScaledMatrix") -> float:
        m = max(self.log, other.log)
        a = self.body * np.exp(self.log - m)
        b = other.body * np.exp(other.log - m)
        denom = max(np.linalg.norm(a, 2), np.linalg.norm(b, 2), 1e-300)
        return float(np.linalg.norm(a - b, 2) / denom)

    def __repr__(self) -> str:  # pragma: no cover
        return f"ScaledMatrix(log={self.log:.3f}, body=\n{self.body})"


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
]
_DP_E = np.array(
    [
        35 / 384 - 5179 / 57600,
        0.0,
        500 / 1113 - 7571 / 16695,
        125 / 192 - 393 / 640,
        -2187 / 6784 + 92097 / 339200,
        11 / 84 - 187 / 2100,
        -1 / 40,
    ]
)


def default_max_step(t: float) -> float:
    # resolves cos(t) modulations while letting steps grow away from the origin
    return 0.25 * (1.0 + abs(t))


def _integrate_transition(
    coeff: Callable[[float], np.ndarray],
    t0: float,
    t1: float,
    tol: float,
    max_step: Callable[[float], float],
    stats: dict,
) -> ScaledMatrix:
    """Adaptive DP5(4) for X' = A(t) X over [t0, t1], renormalizing as it goes."""
    n = np.asarray(coeff(t0)).shape[0]
    body = np.eye(n)
    log = 0.0
    t = t0
    f0 = np.asarray(coeff(t), dtype=float) @ body
    if not np.all(np.isfinite(f0)):
        raise IntegrationError(f"non-finite coefficient at t={t}")
    a_scale = np.linalg.norm(f0, 2) + 1e-12
    h = min(t1 - t0, max_step(t0), 0.1 / a_scale)
    K = [None] * 7
    K[0] = f0
    while t < t1:
        h = min(h, t1 - t, max_step(t))
        if h < 1e-14 * (1.0 + abs(t)):
            raise StiffnessError(f"step underflow at t={t}; system too stiff for tol={tol}")
        for i in range(1, 7):
            yi = body.copy()
            for j, a in enumerate(_DP_A[i]):
                if a != 0.0:
                    yi = yi + (h * a) * K[j]
            K[i] = np.asarray(coeff(t + _DP_C[i] * h), dtype=float) @ yi
            stats["nfev"] = stats.get("nfev", 0) + 1
        y_new = body.copy()
        for j, a in enumerate(_DP_A[6]):
            if a != 0.0:
                y_new = y_new + (h * a) * K[j]
        err = np.zeros_like(body)
        for j in range(7):
            if _DP_E[j] != 0.0:
                err = err + (h * _DP_E[j]) * K[j]
        scale = tol * max(1.0, np.linalg.norm(body, "fro"), np.linalg.norm(y_new, "fro"))
        ratio = np.linalg.norm(err, "fro") / scale
        if not np.isfinite(ratio):
            raise IntegrationError(f"non-finite state during integration at t={t}")
        if ratio <= 1.0:
            t = t + h
            body = y_new
            K[0] = K[6]
            stats["accepted"] = stats.get("accepted", 0) + 1
            stats["max_local_error"] = max(
                stats.get("max_local_error", 0.0), ratio * tol
            )
            nrm = np.linalg.norm(body, 2)
            if nrm > 2.0 or nrm < 0.5:
                body = body / nrm
                K[0] = K[0] / nrm
                log += np.log(nrm)
            factor = 0.9 * ratio ** -0.2 if ratio > 0 else 5.0
        else:
            stats["rejected"] = stats.get("rejected", 0) + 1
            factor = max(0.2, 0.9 * ratio ** -0.2)
            h *= factor
            K[0] = np.asarray(coeff(t), dtype=float) @ body
            continue
        h *= min(5.0, max(0.2, factor))
    return ScaledMatrix(body, log)


class _SegTree:
    """Segment tree of ScaledMatrix products.

    With ``left_to_right`` the product over [l, r) is items[l] @ ... @ items[r-1];
    otherwise items[r-1] @ ... @ items[l] (composition order of forward steps).
    """

    def __init__(self, items: List[ScaledMatrix], left_to_right: bool):
        self.n = len(items)
        self.ltr = left_to_right
        size = 1
        while size < max(self.n, 1):
            size *= 2
        self.size = size
        ident = ScaledMatrix.identity(items[0].dim) if items else None
        self.nodes: List[Optional[ScaledMatrix]] = [None] * (2 * size)
        for i, it in enumerate(items):
            self.nodes[size + i] = it
        for i in range(size + self.n, 2 * size):
            self.nodes[i] = ident
        for i in range(size - 1, 0, -1):
            a, b = self.nodes[2 * i], self.nodes[2 * i + 1]
            if a is None or b is None:
                continue
            self.nodes[i] = a @ b if self.ltr else b @ a

    def product(self, lo: int, hi: int) -> ScaledMatrix:
        """Product over item indices [lo, hi)."""
        if hi <= lo:
            return ScaledMatrix.identity(self.nodes[self.size].dim)
        left_acc: Optional[ScaledMatrix] = None
        right_acc: Optional[ScaledMatrix] = None
        lo += self.size
        hi += self.size
        while lo < hi:
            if lo & 1:
                left_acc = self.nodes[lo] if left_acc is None else (
                    left_acc @ self.nodes[lo] if self.ltr else self.nodes[lo] @ left_acc
                )
                lo += 1
            if hi & 1:
                hi -= 1
                right_acc = self.nodes[hi] if right_acc is None else (
                    self.nodes[hi] @ right_acc if self.ltr else right_acc @ self.nodes[hi]
                )
            lo >>= 1
            hi >>= 1
        if left_acc is None:
            return right_acc  # type: ignore[return-value]
        if right_acc is None:
            return left_acc
        return left_acc @ right_acc if self.ltr else right_acc @ left_acc


def node_times(
    t_min: float,
    t_max: float,
    rate: Optional[GrowthRate] = None,
    node_dl: float = DEFAULT_NODE_DL,
    min_nodes: int = 400,
    breakpoints: Tuple[float, ...] = (),
) -> np.ndarray:
    """Grid nodes, uniform in log mu when a rate is given, else in t."""
    if not t_max > t_min:
        raise ValueError("need t_max > t_min")
    if rate is not None:
        L_lo, L_hi = float(rate.L(t_min)), float(rate.L(t_max))
        count = int(np.ceil((L_hi - L_lo) / node_dl))
        count = min(max(count, min_nodes), MAX_NODES)
        levels = np.linspace(L_lo, L_hi, count + 1)
        ts = np.array([rate.invert_L(l) for l in levels[1:-1]])
        times = np.concatenate([[t_min], ts, [t_max]])
    else:
        count = min(max(int(np.ceil((t_max - t_min) / 0.25)), min_nodes), MAX_NODES)
        times = np.linspace(t_min, t_max, count + 1)
    extra = [b for b in breakpoints if t_min < b < t_max]
    if extra:
        times = np.concatenate([times, np.asarray(extra, dtype=float)])
    times = np.unique(times)
    # drop near-duplicate nodes (inverse of log mu can land on existing nodes)
    keep = np.concatenate([[True], np.diff(times) > 1e-12 * (1.0 + np.abs(times[1:]))])
    return times[keep]


@dataclass
class PropagatorGrid:
    """Per-interval transitions steps[i] = Phi(times[i+1], times[i]).

    Immutable by convention after construction; the lazy trees and caches only
    memoize pure derived data.
    """

    system: object
    times: np.ndarray
    steps: List[ScaledMatrix]
    stats: dict = field(default_factory=dict)
    tol: float = DEFAULT_TOL
    _fwd: Optional[_SegTree] = field(default=None, repr=False)
    _bwd: Optional[_SegTree] = field(default=None, repr=False)
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.steps[0].dim

    @property
    def t_min(self) -> float:
        return float(self.times[0])

    @property
    def t_max(self) -> float:
        return float(self.times[-1])

    def node_index(self, t: float, exact: bool = True) -> int:
        if t < self.t_min - 1e-9 or t > self.t_max + 1e-9:
            raise ValueError(f"time {t} outside grid range [{self.t_min}, {self.t_max}]")
        i = int(np.searchsorted(self.times, t))
        for j in (i - 1, i, i + 1):
            if 0 <= j < self.times.size and abs(self.times[j] - t) <= 1e-9 * (1.0 + abs(t)):
                return j
        if exact:
            raise ValueError(f"time {t} is not a grid node")
        return int(np.clip(i - 1, 0, self.times.size - 2))

    def _fwd_tree(self) -> _SegTree:
        if self._fwd is None:
            self._fwd = _SegTree(self.steps, left_to_right=False)
        return self._fwd

    def _bwd_tree(self) -> _SegTree:
        if self._bwd is None:
            inv = [s.inv() for s in self.steps]
            self._bwd = _SegTree(inv, left_to_right=True)
        return self._bwd

    def compose_nodes(self, i: int, j: int) -> ScaledMatrix:
        """Phi(times[j], times[i]) from tree products of step transitions."""
        if j >= i:
            return self._fwd_tree().product(i, j)
        return self._bwd_tree().product(j, i)

    def _partial(self, t_from: float, t_to: float) -> ScaledMatrix:
        """Phi(t_to, t_from) over a short off-node stretch."""
        if abs(t_to - t_from) <= 1e-14 * (1.0 + abs(t_from)):
            return ScaledMatrix.identity(self.dim)
        cf = getattr(self.system, "closed_form_log", None)
        if cf is not None:
            body, log = cf(t_to, t_from)
            return ScaledMatrix(body, log)
        stats: dict = {}
        if t_to > t_from:
            return _integrate_transition(
                self.system.coeff, t_from, t_to, self.tol, default_max_step, stats
            )
        return _integrate_transition(
            self.system.coeff, t_to, t_from, self.tol, default_max_step, stats
        ).inv()

    def phi(self, t: float, s: float) -> ScaledMatrix:
        """Phi(t, s), resolving off-node endpoints by partial integration."""
        for x in (t, s):
            if x < self.t_min - 1e-9 or x > self.t_max + 1e-9:
                raise ValueError(f"time {x} outside grid range")
        ti = int(np.clip(np.searchsorted(self.times, t) - 1, 0, self.times.size - 2))
        si = int(np.clip(np.searchsorted(self.times, s) - 1, 0, self.times.size - 2))
        t_node = self.node_index(t, exact=False)
        s_node = self.node_index(s, exact=False)
        t_exact = abs(self.times[t_node] - t) <= 1e-9 * (1.0 + abs(t))
        s_exact = abs(self.times[s_node] - s) <= 1e-9 * (1.0 + abs(s))
        a = t_node if t_exact else ti
        b = s_node if s_exact else si
        out = self.compose_nodes(b, a)
        if not t_exact:
            out = self._partial(self.times[a], t) @ out
        if not s_exact:
            out = out @ self._partial(s, self.times[b])
        return out

    def phi_shifted(self, rate: GrowthRate, gamma: float, t: float, s: float) -> ScaledMatrix:
        """(mu(t)/mu(s))^{-gamma} Phi(t, s); pure log-scale arithmetic, no re-integration."""
        base = self.phi(t, s)
        offset = gamma * float(rate.L(t) - rate.L(s))
        return ScaledMatrix(base.body, base.log - offset, normalize=False)


def integrate(
    system,
    t_min: float,
    t_max: float,
    tol: float = DEFAULT_TOL,
    rate: Optional[GrowthRate] = None,
    node_dl: float = DEFAULT_NODE_DL,
    min_nodes: int = 400,
    use_closed_form: str = "auto",
    max_step: Callable[[float], float] = default_max_step,
    check_samples: int = 3,
) -> PropagatorGrid:
    """Build a PropagatorGrid for the system over [t_min, t_max].

    Transitions are integrated with an adaptive embedded Runge-Kutta 5(4) pair
    per node interval.  When the system carries a closed-form operator and
    ``use_closed_form`` permits, the transitions are sampled from it instead
    and a few intervals are spot-checked against the integrator.
    """
    if not (TOL_RANGE[0] <= tol <= TOL_RANGE[1]):
        raise ValueError(f"tol must lie in {TOL_RANGE}")
    system.check_domain(np.array([t_min, t_max]))
    times = node_times(
        t_min,
        t_max,
        rate=rate,
        node_dl=node_dl,
        min_nodes=min_nodes,
        breakpoints=tuple(getattr(system, "breakpoints", ())),
    )
    cf = getattr(system, "closed_form_log", None)
    from_closed = cf is not None and use_closed_form in ("auto", True, "always")
    stats: dict = {"accepted": 0, "rejected": 0, "max_local_error": 0.0, "nfev": 0}
    steps: List[ScaledMatrix] = []
    if from_closed:
        for i in range(times.size - 1):
            body, log = cf(times[i + 1], times[i])
            steps.append(ScaledMatrix(body, log))
        stats["source"] = "closed-form"
        if check_samples > 0:
            idx = np.unique(
                np.linspace(0, times.size - 2, min(check_samples, times.size - 1)).astype(int)
            )
            for i in idx:
                num = _integrate_transition(
                    system.coeff, times[i], times[i + 1], tol, max_step, dict(stats)
                )
                rel = steps[i].rel_diff(num)
                if rel > 1e-6:
                    raise IntegrationError(
                        f"closed form disagrees with integration on [{times[i]}, {times[i+1]}]"
                        f" (rel {rel:.2e})"
                    )
    else:
        for i in range(times.size - 1):
            steps.append(
                _integrate_transition(system.coeff, times[i], times[i + 1], tol, max_step, stats)
            )
        stats["source"] = "runge-kutta"
    for i, st in enumerate(steps):
        if st.rcond() <= 1e-13:
            raise IntegrationError(f"transition over [{times[i]}, {times[i+1]}] is singular")
    return PropagatorGrid(system=system, times=times, steps=steps, stats=stats, tol=tol)


def phi(grid: PropagatorGrid, t: float, s: float) -> ScaledMatrix:
    return grid.phi(t, s)


def phi_shifted(
    grid: PropagatorGrid, rate: GrowthRate, gamma: float, t: float, s: float
) -> ScaledMatrix:
    return grid.phi_shifted(rate, gamma, t, s)


def qr_exponents(
    grid: PropagatorGrid,
    rate: GrowthRate,
    i0: int = 0,
    i1: Optional[int] = None,
) -> np.ndarray:
    """Per-direction growth exponents over [times[i0], times[i1]], sorted descending.

    Discrete QR sweep: accumulate log |diag R| of the reorthonormalized
    transition chain and divide by the log mu span.  Unlike singular values of
    the full product, these sums do not hit the floating-point floor for long
    horizons.
    """
    if i1 is None:
        i1 = len(grid.steps)
    key = ("qr_exponents", rate.name, i0, i1)
    if key in grid.cache:
        return grid.cache[key]
    n = grid.dim
    Q = np.eye(n)
    acc = np.zeros(n)
    for i in range(i0, i1):
        W = grid.steps[i].body @ Q
        Q, R = np.linalg.qr(W)
        d = np.abs(np.diag(R))
        d[d == 0.0] = 1e-300
        acc += np.log(d) + grid.steps[i].log
    span = float(rate.L(grid.times[i1]) - rate.L(grid.times[i0]))
    if span <= 0.0:
        raise ValueError("empty span for exponent estimation")
    out = np.sort(acc / span)[::-1]
    grid.cache[key] = out
    return out
