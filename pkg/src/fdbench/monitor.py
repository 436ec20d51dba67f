"""Runtime classification of detector traces against invariant ellipsoids.

Given a simulated :class:`~fdbench.plant.Trace`, the monitor reconstructs the
estimation error ``e``, its rate, the fault-forcing signal ``theta`` and the
Lyapunov value ``V = e^T P e``, then labels every sample as Nominal,
Transient, Faulty or ConvergenceIssue.
"""

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .gains import EllipsoidSet
from .linalg import left_annihilator

__all__ = [
    "Mode",
    "BackwardDifference",
    "HighPassFilter",
    "RecordedDerivative",
    "SettlingSpec",
    "SlidingSpec",
    "MonitorConfig",
    "Verdict",
    "VerdictSeries",
    "IsolabilityResult",
    "SlidingReport",
    "error_and_rate",
    "theta_signal",
    "isolability_check",
    "classify_point",
    "classify",
    "settling_check",
    "steady_error",
    "sliding_sets",
    "sliding_check",
    "default_eps_v",
]


class Mode(enum.Enum):
    Nominal = "Nominal"
    Transient = "Transient"
    Faulty = "Faulty"
    ConvergenceIssue = "ConvergenceIssue"


_MODES = list(Mode)


@dataclass(frozen=True)
class BackwardDifference:
    """``(e_k - e_{k-1}) / dt``; the first sample reuses the second difference."""

    def apply(self, e, dt):
        d = np.empty_like(e)
        if len(e) < 2:
            d[:] = 0.0
            return d
        d[1:] = np.diff(e, axis=0) / dt
        d[0] = d[1]
        return d


@dataclass(frozen=True)
class HighPassFilter:
    """Filtered derivative ``s / (1 + a s)`` discretised exactly for
    piecewise-linear input.

    The filter starts in steady state for a ramp with the first-difference
    slope, so a smooth signal produces no start-up spike.
    """

    a: float = 1e-3

    def __post_init__(self):
        if not self.a > 0:
            raise InputError("filter constant must be positive")

    def apply(self, e, dt):
        a = self.a
        phi = math.exp(-dt / a)
        c = 1.0 - (a / dt) * (1.0 - phi)
        xi = np.empty_like(e)
        xi[0] = e[0] - (a / dt) * (e[1] - e[0]) if len(e) > 1 else e[0]
        for k in range(len(e) - 1):
            xi[k + 1] = phi * xi[k] + (1 - phi) * e[k] + c * (e[k + 1] - e[k])
        return (e - xi) / a


@dataclass(frozen=True)
class RecordedDerivative:
    """Exact rate from the right-hand sides stored by the simulator."""

    def apply(self, e, dt):  # pragma: no cover - dispatch handled in error_and_rate
        raise InputError("recorded derivatives need the trace; use error_and_rate")


def _trace_cols(trace, name, *cols):
    out = []
    for c in cols:
        key = f"{name}.{c}" if c not in ("x", "dx", "u", "y") else c
        if key not in trace:
            raise InputError(f"trace is missing column {key!r}")
        out.append(trace[key])
    return out


def error_and_rate(trace, name, observer, deriv=None):
    """Estimation error ``e`` (observer convention) and its rate."""
    deriv = BackwardDifference() if deriv is None else deriv
    (e,) = _trace_cols(trace, name, "e")
    if isinstance(deriv, RecordedDerivative):
        dstate, dx = _trace_cols(trace, name, "dstate", "dx")
        ydot = dx @ observer.model.C.T
        edot = np.array([observer.error_rate(ds, d, yd) for ds, d, yd in zip(dstate, dx, ydot)])
    else:
        edot = deriv.apply(e, trace.dt)
    return e, edot


def theta_signal(trace, name, observer, deriv=None):
    """Fault-forcing estimate ``theta`` for a linear observer.

    Output observer: ``theta = e' - (A - L C) e``. UIO: the four-term form
    that also removes the z-, u- and y-terms of the raw error equation.
    """
    e, edot = error_and_rate(trace, name, observer, deriv)
    if observer.kind == "output":
        return edot - e @ observer.A_err.T
    if observer.kind == "uio":
        state, u, y = _trace_cols(trace, name, "state", "u", "y")
        M = observer.model
        n = M.n
        A1K = observer._A1K
        Tres = observer.T - (np.eye(n) - observer.H @ M.C)
        return (edot - e @ A1K.T
                - state @ (observer.F - A1K).T
                - u @ (Tres @ M.B).T
                - y @ (observer.K2 - A1K @ observer.H).T)
    raise InputError(f"theta is defined for linear observers, not {observer.kind!r}")


@dataclass(frozen=True)
class IsolabilityResult:
    passed: np.ndarray
    residue: np.ndarray
    annihilator: np.ndarray
    vacuous: bool = False

    @property
    def all_passed(self):
        return bool(np.all(self.passed))


def isolability_check(trace, name, uio, eps=None, deriv=None):
    """Per-sample test ``|N theta| <= eps`` where ``N`` annihilates ``T E_f``.

    With the kept fault projected out, what remains of ``theta`` can only come
    from the decoupled inputs, so a pass certifies that those do not leak into
    the error dynamics.
    """
    eps = uio.eps_algebra if eps is None else eps
    deriv = RecordedDerivative() if deriv is None else deriv
    N = left_annihilator(uio.T @ uio.model.E_f) if uio.model.n_f else np.eye(uio.model.n)
    theta = theta_signal(trace, name, uio, deriv)
    if N.shape[0] == 0:
        warnings.warn("T E_f has full row rank; isolability check is vacuous", stacklevel=2)
        res = np.zeros(len(theta))
        return IsolabilityResult(np.ones(len(theta), bool), res, N, True)
    res = np.linalg.norm(theta @ N.T, axis=1)
    return IsolabilityResult(res <= eps, res, N)


@dataclass(frozen=True)
class SettlingSpec:
    E_t: EllipsoidSet
    t_s: float


@dataclass(frozen=True)
class SlidingSpec:
    E_s: EllipsoidSet
    E_e: EllipsoidSet
    t_s: float


def default_eps_v(zeta, t_s):
    return 1e-3 * zeta / t_s


@dataclass(frozen=True)
class MonitorConfig:
    E_n: EllipsoidSet
    E_f: EllipsoidSet
    theta_th: float
    eps_V: float
    deriv: object = field(default_factory=BackwardDifference)
    settling: SettlingSpec = None
    sliding: SlidingSpec = None

    def __post_init__(self):
        if not np.array_equal(self.E_n.P, self.E_f.P):
            raise InputError("E_n and E_f must share the same matrix")
        if self.E_n.level > self.E_f.level:
            raise InputError("E_n level exceeds E_f level")
        if not self.theta_th > 0:
            raise InputError("theta_th must be positive")
        if not self.eps_V >= 0:
            raise InputError("eps_V must be nonnegative")


@dataclass(frozen=True)
class Verdict:
    time: float
    mode: Mode
    V: float
    Vdot: float
    theta_norm: float
    memberships: dict


def classify_point(theta_high, in_n, in_f, vdot_active):
    """Decision table for one sample; total over all boolean inputs.

    ``in_n`` implies ``in_f`` for nested sets; if a caller passes an
    inconsistent pair the sample is treated as outside ``E_f``.
    """
    if not in_f or (in_n and not in_f):
        return Mode.ConvergenceIssue
    if not theta_high:
        return Mode.Nominal if in_n else Mode.ConvergenceIssue
    if in_n:
        return Mode.Transient if vdot_active else Mode.ConvergenceIssue
    return Mode.Faulty


def _classify_arrays(theta_high, in_n, in_f, active):
    conds = [
        ~in_f,
        ~theta_high & in_n,
        ~theta_high & ~in_n,
        theta_high & in_n & active,
        theta_high & in_n & ~active,
        theta_high & ~in_n,
    ]
    picks = [3, 0, 3, 1, 3, 2]
    return np.select(conds, picks, default=3)


@dataclass
class VerdictSeries:
    """Column-oriented verdicts; iterating yields :class:`Verdict` objects."""

    t: np.ndarray
    mode_index: np.ndarray
    V: np.ndarray
    Vdot: np.ndarray
    theta_norm: np.ndarray
    memberships: dict

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        return Verdict(float(self.t[k]), _MODES[self.mode_index[k]], float(self.V[k]),
                       float(self.Vdot[k]), float(self.theta_norm[k]),
                       {n: bool(v[k]) for n, v in self.memberships.items()})

    def __iter__(self):
        return (self[k] for k in range(len(self)))

    @property
    def modes(self):
        return [_MODES[i] for i in self.mode_index]

    def is_mode(self, mode):
        return self.mode_index == _MODES.index(Mode(mode))

    def tally(self):
        return {m.value: int(np.sum(self.mode_index == i)) for i, m in enumerate(_MODES)}

    def to_csv(self, path=None, stride=1):
        names = list(self.memberships)
        lines = [",".join(["t", "mode", "V", "Vdot", "theta_norm"] + [f"in_{n}" for n in names])]
        for k in range(0, len(self), int(stride)):
            row = ["%.17g" % self.t[k], _MODES[self.mode_index[k]].value,
                   "%.17g" % self.V[k], "%.17g" % self.Vdot[k], "%.17g" % self.theta_norm[k]]
            row += [str(int(self.memberships[n][k])) for n in names]
            lines.append(",".join(row))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def classify(trace, name, observer, config):
    """Label every sample of observer `name` in `trace`."""
    e, edot = error_and_rate(trace, name, observer, config.deriv)
    theta = theta_signal(trace, name, observer, config.deriv)
    return classify_signals(trace.t, e, edot, theta, config)


def classify_signals(t, e, edot, theta, config):
    P = config.E_n.P
    V = np.einsum("ti,ij,tj->t", e, P, e)
    Vdot = 2 * np.einsum("ti,ij,tj->t", e, P, edot)
    tn = np.linalg.norm(theta, axis=1)
    in_n = V <= config.E_n.level
    in_f = V <= config.E_f.level
    mem = {"E_n": in_n, "E_f": in_f}
    if config.settling is not None:
        mem["E_t"] = config.settling.E_t.value(e) <= config.settling.E_t.level
    idx = _classify_arrays(tn >= config.theta_th, in_n, in_f, np.abs(Vdot) > config.eps_V)
    return VerdictSeries(np.asarray(t), idx, V, Vdot, tn, mem)


def steady_error(A_err, E_col):
    """Equilibrium of ``e' = A_err e + E_col`` (unit step forcing)."""
    A_err = np.asarray(A_err, float)
    try:
        return -np.linalg.solve(A_err, np.asarray(E_col, float).ravel())
    except np.linalg.LinAlgError as exc:
        raise NumericError("error dynamics matrix is singular") from exc


def settling_check(t, e, E_t, t_s, step_time):
    """True iff ``e(t)`` stays in the shifted ellipsoid for all ``t >= step_time + t_s``."""
    t = np.asarray(t, float)
    e = np.asarray(e, float)
    if e.ndim == 1:
        e = e[:, None]
    mask = t >= step_time + t_s - 1e-12
    if not np.any(mask):
        return True
    return bool(np.all(E_t.value(e[mask]) <= E_t.level))


@dataclass(frozen=True)
class SlidingReport:
    E_e_invariant: bool
    E_s_invariant_after_ts: bool
    first_entry_time: float
    nu_bound_ok: bool
    nu_max_ratio: float


def _slide_norms(observer):
    lmin2 = float(np.min(np.linalg.eigvalsh(observer.P2)))
    lmax2 = float(np.max(np.linalg.eigvalsh(observer.P2)))
    return lmin2, lmax2


def sliding_sets(observer, fault_bound, t_s=None, init_level=0.0, margin=0.05):
    """Levels ``alpha`` and ``beta`` of the sliding ellipsoids.

    ``beta`` makes ``{e1' P1 e1 + e_y' P2 e_y <= beta}`` invariant for faults
    up to `fault_bound`; ``alpha`` makes ``{e_y' P2 e_y <= alpha}`` invariant
    once ``e1`` has decayed for `t_s` seconds from inside the first set.
    """
    k = observer.rho * observer.D2_norm
    d = observer.D2_norm * float(fault_bound)
    if not d < k:
        raise InputError("fault bound must be smaller than rho for sliding to hold")
    sigma = observer.sigma
    lmin2, lmax2 = _slide_norms(observer)
    r0 = sigma * d / (k - d)
    n1 = observer.n1
    if n1:
        P1, Q1 = observer.P1, observer.Q1
        lmax1 = float(np.max(np.linalg.eigvalsh(P1)))
        lminq1 = float(np.min(np.linalg.eigvalsh(Q1)))
        beta_min = lmax1 * 2 * r0 * d / lminq1 + r0**2 * lmax2 / lmin2**2
    else:
        beta_min = r0**2 * lmax2 / lmin2**2
    beta = max(init_level, beta_min) * (1 + margin)
    if t_s is None:
        from .gains import settling_time_bound
        t_s = settling_time_bound(observer.A11) if n1 else 0.0
    if n1:
        w1, V1 = np.linalg.eigh(P1)
        P1_isqrt = (V1 / np.sqrt(w1)) @ V1.T
        decay = float(np.min(np.linalg.eigvalsh(observer.Qhat))) / lmax1
        g = d + np.linalg.norm(observer.A21 @ P1_isqrt, 2) * math.sqrt(beta * math.exp(-decay * t_s))
    else:
        g = d
    if not g < k:
        raise InputError("t_s too short: residual e1 coupling exceeds the injection gain")
    r_b = sigma * g / (k - g)
    alpha = r_b**2 * lmax2 / lmin2**2 * (1 + margin)
    p = observer.P2.shape[0]
    E_s = EllipsoidSet(observer.P2, alpha)
    Pe = np.zeros((n1 + p, n1 + p))
    Pe[:n1, :n1] = observer.P1
    Pe[n1:, n1:] = observer.P2
    E_e = EllipsoidSet(Pe, beta)
    return SlidingSpec(E_s, E_e, float(t_s))


def sliding_check(trace, name, observer, spec):
    """Invariance report for the sliding ellipsoids along a trace."""
    (e,) = _trace_cols(trace, name, "e")
    e1, ey = observer.split_error(e)
    z = np.hstack([e1, ey])
    in_e = spec.E_e.value(z) <= spec.E_e.level
    entered = np.flatnonzero(in_e)
    E_e_ok = bool(entered.size and np.all(in_e[entered[0]:]))
    in_s = spec.E_s.value(ey) <= spec.E_s.level
    after = trace.t >= spec.t_s - 1e-12
    E_s_ok = bool(np.all(in_s[after]))
    first = float(trace.t[np.argmax(in_s)]) if np.any(in_s) else math.inf
    k = observer.rho * observer.D2_norm
    nu = ey @ observer.P2.T
    nrm = np.linalg.norm(nu, axis=1)
    nu_mag = k * nrm / (nrm + observer.sigma)
    ratio = float(np.max(nu_mag) / k) if len(nu_mag) else 0.0
    return SlidingReport(E_e_ok, E_s_ok, first, bool(np.all(nu_mag < k)), ratio)
