"""Induced-gain bounds, invariant ellipsoids and their block-LMI certificates.

Every bound is computed constructively (Gramians, shifted Lyapunov
equations, Hamiltonian bisection) and comes with a witness matrix that makes
the corresponding block matrix inequality hold strictly. The inequalities
themselves are re-assembled and checked by :func:`check_lmi_feasibility`.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    InputError,
    NoSolutionError,
    NumericError,
    ThresholdUndefinedError,
    UnboundedGainError,
)
from .linalg import as_matrix, eig, solve_lyapunov, solve_riccati, sqrtm_psd

__all__ = [
    "NormKind",
    "Lemma",
    "GainBounds",
    "EllipsoidSet",
    "LmiCertificate",
    "LmiCheck",
    "DetectionThresholds",
    "energy_to_peak_state_bound",
    "energy_to_peak_output_bound",
    "peak_to_peak_bound",
    "hinf_bound",
    "check_lmi_feasibility",
    "compute_detection_thresholds",
    "settling_time_bound",
    "settling_level",
]

# relative slack added to certificate levels so the inequalities are strict
CERT_SLACK = 1e-6
# relative regularisation of the input covariance used for witnesses
CERT_REG = 1e-3
HINF_RTOL = 1e-9


class NormKind(enum.Enum):
    L2toL2 = "L2toL2"
    L2toPeak = "L2toPeak"
    PeakToPeak = "PeakToPeak"


class Lemma(enum.Enum):
    Lemma1State = "Lemma1State"
    Lemma1Output = "Lemma1Output"
    Lemma2State = "Lemma2State"
    Lemma2Output = "Lemma2Output"
    Lemma3 = "Lemma3"

    @property
    def uses_metric(self):
        return self in (Lemma.Lemma1State, Lemma.Lemma2State)


@dataclass(frozen=True)
class GainBounds:
    """Residual gain ``pi`` and state-metric gain ``pi_bar`` for one norm pairing."""

    pi: float
    pi_bar: float
    norm_kind: NormKind

    def __post_init__(self):
        for name in ("pi", "pi_bar"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InputError(f"{name} must be finite and nonnegative, got {v}")


@dataclass(frozen=True)
class EllipsoidSet:
    """The set ``{e : (e - c)^T P (e - c) <= level}``."""

    P: np.ndarray
    level: float
    center: np.ndarray = None

    def __post_init__(self):
        P = as_matrix(self.P, "P")
        if P.shape[0] != P.shape[1]:
            raise DimensionError("ellipsoid matrix must be square")
        scale = max(1.0, np.linalg.norm(P, "fro"))
        if np.linalg.norm(P - P.T, "fro") > 1e-10 * scale:
            raise InputError("ellipsoid matrix is not symmetric")
        if P.size and np.min(np.linalg.eigvalsh(P)) <= 0:
            raise InputError("ellipsoid matrix is not positive definite")
        if not (math.isfinite(self.level) and self.level >= 0):
            raise InputError(f"ellipsoid level must be finite and >= 0, got {self.level}")
        c = np.zeros(P.shape[0]) if self.center is None else np.asarray(self.center, float).ravel()
        if c.shape != (P.shape[0],):
            raise DimensionError("ellipsoid center has the wrong length")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "level", float(self.level))
        object.__setattr__(self, "center", c)

    @property
    def dim(self):
        return self.P.shape[0]

    def value(self, e):
        """Quadratic form of `e`; accepts one vector or a stack of row vectors."""
        d = np.asarray(e, float) - self.center
        if d.ndim == 1:
            return float(d @ self.P @ d)
        return np.einsum("ti,ij,tj->t", d, self.P, d)

    def contains(self, e, rtol=0.0):
        return self.value(e) <= self.level * (1 + rtol)

    def scaled(self, factor):
        return EllipsoidSet(self.P, self.level * factor, self.center)


@dataclass(frozen=True)
class LmiCertificate:
    lemma: Lemma
    rho: float
    witnesses: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise InputError(f"certificate rho must be positive, got {self.rho}")
        for k, v in self.witnesses.items():
            if isinstance(v, np.ndarray) and v.ndim == 2:
                if np.linalg.norm(v - v.T) > 1e-10 * max(1.0, np.linalg.norm(v)):
                    raise InputError(f"witness {k} is not symmetric")
            elif not np.isscalar(v) or not v > 0:
                raise InputError(f"witness scalar {k} must be positive")

    @property
    def Q(self):
        return self.witnesses["Q"]

    def with_rho(self, rho):
        return LmiCertificate(self.lemma, rho, dict(self.witnesses))


@dataclass(frozen=True)
class LmiCheck:
    feasible: bool
    margin: float
    blocks: tuple = ()

    def __bool__(self):
        return self.feasible


def _system(A, E, M=None):
    A = as_matrix(A, "A")
    E = as_matrix(E, "E")
    if A.shape[0] != A.shape[1]:
        raise DimensionError("A must be square")
    if E.shape[0] != A.shape[0]:
        raise DimensionError(f"E must have {A.shape[0]} rows, got {E.shape}")
    if M is not None:
        M = as_matrix(M, "C")
        if M.shape[1] != A.shape[0]:
            raise DimensionError(f"output/metric matrix must have {A.shape[0]} columns")
    return A, E, M


def _require_hurwitz(A):
    rep = eig(A)
    if not rep.is_hurwitz:
        raise UnboundedGainError(
            f"gain is unbounded: A has an eigenvalue with real part {rep.max_real_part:.6g}")
    return rep


def _metric_root(P):
    P = as_matrix(P, "P_metric")
    if P.shape[0] != P.shape[1]:
        raise DimensionError("metric must be square")
    if np.min(np.linalg.eigvalsh((P + P.T) / 2)) <= 0:
        raise InputError("metric must be positive definite")
    return sqrtm_psd(P)


def _peak(W, M, metric):
    """sqrt(lambda_max(R W R^T)) with R = P^{1/2} (metric) or R = C (output)."""
    R = _metric_root(M) if metric else M
    if R.shape[0] == 0:
        return 0.0
    S = R @ W @ R.T
    return math.sqrt(max(0.0, float(np.max(np.linalg.eigvalsh((S + S.T) / 2)))))


def _reg(E):
    """Regularisation size for witness construction."""
    n = E.shape[0]
    s = np.linalg.norm(E, 2) ** 2
    return CERT_REG * (s if s > 0 else 1.0), np.eye(n)


def _gramian(A, EEt):
    # A W + W A^T = -EEt   <=>   (A^T)^T W + W (A^T) = -EEt
    return solve_lyapunov(A.T, EEt)


def _energy_to_peak(A, E, M, metric):
    A, E, M = _system(A, E, M)
    _require_hurwitz(A)
    EEt = E @ E.T
    bound = _peak(_gramian(A, EEt), M, metric)
    eps, I = _reg(E)
    W = _gramian(A, EEt + eps * I)
    rho = max(_peak(W, M, metric), 1e-12) * (1 + CERT_SLACK)
    Q = rho * np.linalg.inv(W)
    lemma = Lemma.Lemma1State if metric else Lemma.Lemma1Output
    return bound, LmiCertificate(lemma, rho, {"Q": (Q + Q.T) / 2})


def energy_to_peak_state_bound(A, E, P_metric):
    """Energy-to-peak gain from ``d`` to ``sqrt(x^T P x)`` for ``x' = A x + E d``.

    Returns ``(rho1, certificate)``; the bound is exact,
    ``sqrt(lambda_max(P^{1/2} W P^{1/2}))`` with `W` the controllability
    Gramian.
    """
    return _energy_to_peak(A, E, P_metric, True)


def energy_to_peak_output_bound(A, E, C):
    """Energy-to-peak gain from ``d`` to ``y = C x``."""
    return _energy_to_peak(A, E, C, False)


def _shifted_reach(A, EEt, ups):
    n = A.shape[0]
    As = A + 0.5 * ups * np.eye(n)
    return solve_lyapunov(As.T, EEt / ups)


def _golden(f, a, b, tol=1e-12, maxit=200):
    g = (math.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(maxit):
        if abs(b - a) <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def peak_to_peak_bound(A, E, M, metric=False, grid=64):
    """Peak-to-peak (star-norm) upper bound for ``x' = A x + E d``.

    For each ``upsilon`` in ``(0, 2 alpha)`` the reachable-set ellipsoid
    ``S`` of the shifted system bounds the peak of the output; the minimum
    over a log grid, refined by golden-section search, is returned together
    with a certificate holding ``Q``, ``upsilon`` and ``phi``.

    Parameters
    ----------
    M : array
        Output matrix ``C`` or, with ``metric=True``, the metric ``P``.
    """
    A, E, M = _system(A, E, M)
    rep = _require_hurwitz(A)
    alpha = -rep.max_real_part
    if not alpha > 0:
        raise NoSolutionError("empty search interval for upsilon")
    lemma = Lemma.Lemma2State if metric else Lemma.Lemma2Output
    EEt = E @ E.T
    hi = 2 * alpha
    R = _metric_root(M) if metric else M

    def bound_at(ups, cov):
        S = _shifted_reach(A, cov, ups)
        if R.shape[0] == 0:
            return 0.0, S
        T = R @ S @ R.T
        return math.sqrt(max(0.0, float(np.max(np.linalg.eigvalsh((T + T.T) / 2))))), S

    ts = np.logspace(-4, math.log10(1 - 1e-4), grid)
    ts = np.unique(np.concatenate([ts, 1 - ts]))
    vals = [bound_at(t * hi, EEt)[0] for t in ts]
    k = int(np.argmin(vals))
    lo_t = ts[max(k - 1, 0)]
    hi_t = ts[min(k + 1, len(ts) - 1)]
    t_best, val = _golden(lambda t: bound_at(t * hi, EEt)[0], lo_t, hi_t)
    if vals[k] < val:
        t_best, val = ts[k], vals[k]
    ups = t_best * hi

    eps, I = _reg(E)
    b, S = bound_at(ups, EEt + eps * I)
    b = max(b, 1e-12)
    phi = b / (1 + CERT_SLACK)
    rho = b * (1 + CERT_SLACK) ** 2
    Q = (phi / ups) * np.linalg.inv(S)
    cert = LmiCertificate(lemma, rho, {"Q": (Q + Q.T) / 2, "upsilon": float(ups), "phi": float(phi)})
    return float(val), cert


def _has_imag_axis_eig(A, EEt, CtC, gamma):
    H = np.block([[A, EEt / gamma**2], [-CtC, -A.T]])
    lam = np.linalg.eigvals(H)
    scale = max(1.0, np.linalg.norm(H, 1))
    return bool(np.any(np.abs(lam.real) <= 1e-9 * scale))


def _freq_gain(A, E, C, w):
    n = A.shape[0]
    G = C @ np.linalg.solve(1j * w * np.eye(n) - A, E)
    return float(np.linalg.norm(G, 2))


def _zero_transfer(A, E, C):
    """True when every Markov parameter ``C A^k E`` vanishes."""
    scale = max(1.0, np.linalg.norm(A, 2))
    tol = 1e-14 * max(np.linalg.norm(C, 2) * np.linalg.norm(E, 2), np.finfo(float).tiny)
    X = E / scale
    for _ in range(A.shape[0]):
        if np.linalg.norm(C @ X, 2) > tol:
            return False
        X = A @ X / scale
    return True


def hinf_bound(A, E, C, rtol=HINF_RTOL):
    """H-infinity norm of ``(A, E, C)`` by Hamiltonian bisection.

    Returns ``(rho3, certificate)``. The returned value is the upper end of
    the final bracket, so it never underestimates the norm by more than the
    floating-point resolution of the imaginary-axis test.
    """
    A, E, C = _system(A, E, C)
    rep = _require_hurwitz(A)
    if _zero_transfer(A, E, C):
        gamma = 0.0
    else:
        EEt, CtC = E @ E.T, C.T @ C
        # lower bound from a few frequencies including DC and the modal ones
        ws = [0.0] + [abs(l.imag) for l in rep.eigenvalues] + [abs(l) for l in rep.eigenvalues]
        lo = max(_freq_gain(A, E, C, w) for w in ws)
        hi = max(lo, 1e-12 * np.linalg.norm(C, 2) * np.linalg.norm(E, 2)) * 2
        while _has_imag_axis_eig(A, EEt, CtC, hi):
            lo = hi
            hi *= 2
            if hi > 1e300:
                raise NumericError("H-infinity bisection failed to bracket")
        while hi - lo > rtol * hi:
            mid = 0.5 * (lo + hi)
            if _has_imag_axis_eig(A, EEt, CtC, mid):
                lo = mid
            else:
                hi = mid
        gamma = hi
    return gamma, _hinf_certificate(A, E, C, gamma)


def _hinf_certificate(A, E, C, gamma):
    n = A.shape[0]
    EEt, CtC = E @ E.T, C.T @ C
    # a vanishing transfer is certified at a small positive level instead of 0
    nc, ne = np.linalg.norm(C, 2), np.linalg.norm(E, 2)
    floor = 1e-2 * max(nc * ne, nc, ne, 1.0)
    rho = max(gamma, floor) * (1 + 1e-4)
    eps = 1e-2 * max(np.linalg.norm(CtC, 2) / rho, np.linalg.norm(EEt, 2) / rho, 1.0)
    for _ in range(80):
        try:
            X = solve_riccati(A, -EEt / rho, CtC / rho + eps * np.eye(n))
            if np.min(np.linalg.eigvalsh(X)) > 0:
                res = A.T @ X + X @ A + X @ EEt @ X / rho + CtC / rho
                if np.max(np.linalg.eigvalsh((res + res.T) / 2)) < 0:
                    return LmiCertificate(Lemma.Lemma3, rho, {"Q": (X + X.T) / 2})
        except NoSolutionError:
            pass
        eps /= 2
    raise NumericError("could not build a strictly feasible H-infinity witness")


def _block_margins(cert, A, E, M):
    """Assemble the block inequalities of `cert` as ``[(name, matrix)]``.

    Each returned matrix must be positive definite for the certificate to
    hold (negative-definite conditions are negated).
    """
    n, q = E.shape
    Q = as_matrix(cert.witnesses["Q"], "Q")
    if Q.shape != (n, n):
        raise InputError(f"witness Q must be {n}x{n}, got {Q.shape}")
    rho = cert.rho
    blocks = [("Q > 0", Q)]
    lem = cert.lemma
    if lem.uses_metric:
        R = _metric_root(M)
        if R.shape != (n, n):
            raise InputError(f"metric must be {n}x{n}")
    else:
        R = M
    p = R.shape[0]
    if lem in (Lemma.Lemma1State, Lemma.Lemma1Output):
        B1 = np.block([[A.T @ Q + Q @ A, Q @ E], [E.T @ Q, -rho * np.eye(q)]])
        blocks.append(("dissipation", -B1))
        B2 = np.block([[Q, R.T], [R, rho * np.eye(p)]])
        blocks.append(("output coupling", B2))
    elif lem in (Lemma.Lemma2State, Lemma.Lemma2Output):
        ups, phi = cert.witnesses["upsilon"], cert.witnesses["phi"]
        B1 = np.block([[A.T @ Q + Q @ A + ups * Q, Q @ E], [E.T @ Q, -phi * np.eye(q)]])
        blocks.append(("decay dissipation", -B1))
        B2 = np.block([
            [ups * Q, np.zeros((n, q)), R.T],
            [np.zeros((q, n)), (rho - phi) * np.eye(q), np.zeros((q, p))],
            [R, np.zeros((p, q)), rho * np.eye(p)],
        ])
        blocks.append(("peak coupling", B2))
    else:
        B = np.block([
            [A.T @ Q + Q @ A, Q @ E, R.T],
            [E.T @ Q, -rho * np.eye(q), np.zeros((q, p))],
            [R, np.zeros((p, q)), -rho * np.eye(p)],
        ])
        blocks.append(("bounded real", -B))
    return blocks


def check_lmi_feasibility(cert, A, E, M):
    """Check the strict block inequalities behind `cert`.

    `M` is the metric ``P`` for the state-metric lemmas and the output map
    ``C`` otherwise. The margin is the smallest eigenvalue over all blocks
    (after negating the ``< 0`` ones); feasibility requires it to exceed
    the floating-point noise of the assembled blocks.
    """
    A, E, M = _system(A, E, M)
    blocks = _block_margins(cert, A, E, M)
    margins = []
    feasible = True
    for name, B in blocks:
        Bs = (B + B.T) / 2
        m = float(np.min(np.linalg.eigvalsh(Bs))) if Bs.size else np.inf
        noise = 64 * np.finfo(float).eps * max(1.0, np.linalg.norm(Bs, 2))
        margins.append((name, m))
        if not m > noise:
            feasible = False
    return LmiCheck(feasible, min(m for _, m in margins), tuple(margins))


@dataclass(frozen=True)
class DetectionThresholds:
    zeta: float
    zeta_bar: float
    theta_th: float
    f_max: float
    gains: GainBounds
    certificates: tuple = ()


def compute_detection_thresholds(A_err, E_bar, C, P, r_th, sigma_bar,
                                 norm_kind=NormKind.L2toL2):
    """Ellipsoid levels and the theta threshold implied by a residual threshold.

    ``f_max = r_th / pi`` is the largest fault norm that stays below the
    alarm, ``zeta = (pi_bar f_max)^2`` and
    ``zeta_bar = (sqrt(zeta) + pi_bar sigma_bar)^2``.
    """
    A_err, E_bar, C = _system(A_err, E_bar, C)
    norm_kind = NormKind(norm_kind)
    if not r_th > 0:
        raise InputError("r_th must be positive")
    if not sigma_bar >= 0:
        raise InputError("sigma_bar must be nonnegative")
    if norm_kind is NormKind.L2toL2:
        pi, c1 = hinf_bound(A_err, E_bar, C)
        pi_bar, c2 = energy_to_peak_state_bound(A_err, E_bar, P)
    elif norm_kind is NormKind.L2toPeak:
        pi, c1 = energy_to_peak_output_bound(A_err, E_bar, C)
        pi_bar, c2 = energy_to_peak_state_bound(A_err, E_bar, P)
    else:
        pi, c1 = peak_to_peak_bound(A_err, E_bar, C)
        pi_bar, c2 = peak_to_peak_bound(A_err, E_bar, P, metric=True)
    if pi <= 0:
        raise ThresholdUndefinedError("fault channel does not reach the residual (pi = 0)")
    f_max = r_th / pi
    zeta = (pi_bar * f_max) ** 2
    zeta_bar = (math.sqrt(zeta) + pi_bar * sigma_bar) ** 2
    theta_th = float(np.linalg.norm(E_bar, 2)) * f_max
    return DetectionThresholds(zeta, zeta_bar, theta_th, f_max,
                               GainBounds(pi, pi_bar, norm_kind), (c1, c2))


def settling_time_bound(A_err, band=0.02):
    """Dominant-pole settling time ``ceil(-ln band) / |max Re eig|`` (4/|a| at 2%)."""
    if not 0 < band < 1:
        raise InputError("band must lie in (0, 1)")
    rep = eig(A_err)
    if not rep.is_hurwitz:
        raise UnboundedGainError("settling time undefined for a non-Hurwitz matrix")
    return math.ceil(-math.log(band)) / abs(rep.max_real_part)


def settling_level(P, e_s, band=0.02):
    """Level ``band^2 e_s^T P e_s`` of the settling ellipsoid around `e_s`."""
    P = as_matrix(P, "P")
    e_s = np.asarray(e_s, float).ravel()
    return float(band ** 2 * (e_s @ P @ e_s))
