"""Plant model container and the three residual generators.

Error conventions differ per observer and are kept on purpose:

* :class:`OutputObserver` uses ``e = x - xhat`` and ``r = y - C xhat = C e``.
* :class:`Uio` and :class:`SlidingModeObserver` use ``e = xhat - x``; the UIO
  residual is ``r = y - C xhat = -C e``.

Every observer exposes ``derivative(state, u, y)`` (the exact right-hand side
used by the integrator), ``estimate(state, y)`` and ``residual(state, y)``.
"""

import hashlib
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    DimensionError,
    InputError,
    NoUioExists,
    NotDetectable,
    StructureError,
    SynthesisError,
)
from .linalg import (
    as_matrix,
    detectability_decomposition,
    eig,
    invariant_zeros,
    numerical_rank,
    pbh_unobservable_modes,
    place_observer_poles,
    solve_care,
    solve_lyapunov,
)

__all__ = [
    "LtiModel",
    "OutputObserver",
    "Uio",
    "SlidingModeObserver",
    "UioAlgebraReport",
    "default_poles",
    "synth_output_observer",
    "synth_uio",
    "check_uio_algebra",
    "synth_sliding",
    "sliding_from_transform",
    "nu_injection",
    "sliding_fault_estimate",
    "sliding_fault_estimates",
    "observer_derivative",
]


def default_poles(n, start=-2.0, step=-1.0, avoid=None):
    """``start, start + step, ...``; shifted left in half steps until every
    pole is clear of the eigenvalues of `avoid`."""
    poles = np.array([start + k * step for k in range(n)])
    if avoid is not None and n:
        lam = np.linalg.eigvals(np.asarray(avoid, float))
        while np.min(np.abs(lam[:, None] - poles[None, :])) < 0.05 * abs(step):
            poles = poles + step / 2
    return poles.tolist()


def _matrix_bytes(M):
    M = np.ascontiguousarray(M, dtype="<f8")
    return f"{M.shape[0]}x{M.shape[1]}:".encode() + M.tobytes()


@dataclass(frozen=True)
class LtiModel:
    """``x' = A x + B u + E_f f + E_d f_d``, ``y = C x``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    E_f: np.ndarray
    E_d: np.ndarray = None
    name: str = "model"
    check_observable: bool = True

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        B = as_matrix(self.B, "B")
        C = as_matrix(self.C, "C")
        E_f = as_matrix(self.E_f, "E_f") if self.E_f is not None else np.zeros((n, 0))
        E_d = as_matrix(self.E_d, "E_d") if self.E_d is not None else np.zeros((n, 0))
        if E_f.size == 0:
            E_f = np.zeros((n, 0))
        if E_d.size == 0:
            E_d = np.zeros((n, 0))
        for name, M in (("B", B), ("E_f", E_f), ("E_d", E_d)):
            if M.shape[0] != n:
                raise DimensionError(f"{name} must have {n} rows, got {M.shape}")
        if C.shape[1] != n:
            raise DimensionError(f"C must have {n} columns, got {C.shape}")
        for k, v in (("A", A), ("B", B), ("C", C), ("E_f", E_f), ("E_d", E_d)):
            v.setflags(write=False)
            object.__setattr__(self, k, v)
        if self.check_observable:
            bad = pbh_unobservable_modes(A, C)
            if bad:
                raise InputError(
                    f"(A, C) is not observable: PBH rank test fails at eigenvalue {bad[0]:.6g}")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def p(self):
        return self.C.shape[0]

    @property
    def n_f(self):
        return self.E_f.shape[1]

    @property
    def n_d(self):
        return self.E_d.shape[1]

    @property
    def E_bar(self):
        return np.hstack([self.E_f, self.E_d])

    def with_fault_split(self, keep):
        """Model that keeps the listed ``E_f`` columns as faults.

        The remaining ``E_f`` columns join ``E_d`` (ahead of the existing
        ``E_d`` columns), so the result has the same ``E_bar`` up to column
        order.
        """
        keep = [int(k) for k in np.atleast_1d(keep)]
        if any(k < 0 or k >= self.n_f for k in keep) or len(set(keep)) != len(keep):
            raise InputError(f"invalid fault channel selection {keep}")
        rest = [k for k in range(self.n_f) if k not in keep]
        return LtiModel(self.A, self.B, self.C, self.E_f[:, keep],
                        np.hstack([self.E_f[:, rest], self.E_d]),
                        name=f"{self.name}[keep={','.join(map(str, keep))}]",
                        check_observable=False)

    def digest(self):
        """SHA-256 over ``A, B, C`` and the column-sorted ``E_bar``.

        Sorting makes the digest independent of how the fault columns are
        split between ``E_f`` and ``E_d``.
        """
        h = hashlib.sha256()
        cols = sorted(self.E_bar.T.tolist())
        Eb = np.array(cols).T if cols else np.zeros((self.n, 0))
        for M in (self.A, self.B, self.C, Eb):
            h.update(_matrix_bytes(M))
        return h.hexdigest()


# output observer ------------------------------------------------------------

@dataclass
class OutputObserver:
    """Luenberger observer ``xhat' = A xhat + B u + L (y - C xhat)``."""

    model: LtiModel
    L: np.ndarray
    kind: str = field(default="output", init=False)

    @property
    def A_err(self):
        return self.model.A - self.L @ self.model.C

    @property
    def state_dim(self):
        return self.model.n

    def initial_state(self, xhat0=None):
        return np.zeros(self.model.n) if xhat0 is None else np.asarray(xhat0, float).copy()

    def derivative(self, state, u, y):
        M = self.model
        return M.A @ state + M.B @ u + self.L @ (y - M.C @ state)

    def linear_form(self):
        """``(Ao, Bu, By)`` with ``state' = Ao state + Bu u + By y``."""
        M = self.model
        return self.A_err, M.B, self.L

    def estimate(self, state, y):
        return state

    def residual(self, state, y):
        return y - self.model.C @ state

    def error(self, state, x):
        """Estimation error in this observer's convention (``x - xhat``)."""
        return x - state

    def error_rate(self, dstate, dx, y_rate=None):
        return dx - dstate

    def theta(self, e, edot, state=None, u=None, y=None):
        return edot - self.A_err @ e

    @property
    def fault_input(self):
        """Matrix through which faults drive the error dynamics."""
        return self.model.E_bar


def synth_output_observer(model, desired_poles=None):
    if desired_poles is None:
        desired_poles = default_poles(model.n, avoid=model.A)
    if np.any(np.real(desired_poles) >= 0):
        raise InputError("observer poles must lie in the open left half plane")
    L = place_observer_poles(model.A, model.C, desired_poles)
    if not eig(model.A - L @ model.C).is_hurwitz:
        raise SynthesisError("A - L C is not Hurwitz after placement")
    return OutputObserver(model, L)


# unknown input observer -----------------------------------------------------

@dataclass
class Uio:
    """Full-order UIO ``z' = F z + T B u + K y``, ``xhat = z + H y``."""

    model: LtiModel
    F: np.ndarray
    T: np.ndarray
    K: np.ndarray
    H: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    eps_algebra: float = 1e-10
    unobservable_dim: int = 0
    kind: str = field(default="uio", init=False)

    @property
    def A_err(self):
        return self.F

    @property
    def state_dim(self):
        return self.model.n

    def initial_state(self, xhat0=None, y0=None):
        """``z(0)`` such that ``xhat(0) = xhat0`` given the first output ``y0``."""
        n = self.model.n
        xhat0 = np.zeros(n) if xhat0 is None else np.asarray(xhat0, float)
        y0 = np.zeros(self.model.p) if y0 is None else np.asarray(y0, float)
        return xhat0 - self.H @ y0

    def derivative(self, state, u, y):
        return self.F @ state + self.T @ (self.model.B @ u) + self.K @ y

    def linear_form(self):
        return self.F, self.T @ self.model.B, self.K

    def estimate(self, state, y):
        return state + self.H @ y

    def residual(self, state, y):
        return y - self.model.C @ self.estimate(state, y)

    def error(self, state, x):
        """``xhat - x``."""
        return self.estimate(state, self.model.C @ x) - x

    def error_rate(self, dstate, dx, y_rate=None):
        y_rate = self.model.C @ dx if y_rate is None else y_rate
        return dstate + self.H @ y_rate - dx

    @property
    def _A1K(self):
        M = self.model
        return M.A - self.H @ M.C @ M.A - self.K1 @ M.C

    def theta(self, e, edot, state, u, y):
        """Four-term forcing estimate: what is left of ``e'`` after the model terms."""
        M = self.model
        A1K = self._A1K
        n = M.n
        return (edot - A1K @ e
                - (self.F - A1K) @ state
                - (self.T - (np.eye(n) - self.H @ M.C)) @ (M.B @ u)
                - (self.K2 - A1K @ self.H) @ y)

    @property
    def fault_input(self):
        """``-T E_f``: the kept fault's path into ``e = xhat - x``."""
        return -self.T @ self.model.E_f


def synth_uio(model, desired_poles=None, eps_algebra=1e-10):
    """Full-order UIO decoupled from ``E_d``.

    Raises
    ------
    NoUioExists
        When ``rank(C E_d) != rank(E_d)`` or there are more unknown inputs
        than outputs.
    NotDetectable
        When ``(C, A - H C A)`` has an unstable unobservable mode.
    """
    A, B, C, E_d = model.A, model.B, model.C, model.E_d
    n, p, n_d = model.n, model.p, model.n_d
    if n_d > p:
        raise NoUioExists(
            f"UIO existence condition violated: {n_d} unknown inputs exceed {p} outputs")
    CE = C @ E_d
    r_ce, r_e = numerical_rank(CE), numerical_rank(E_d)
    if r_ce != r_e or r_e != n_d:
        raise NoUioExists(
            f"UIO existence condition violated: rank(C E_d) = {r_ce} but rank(E_d) = {r_e}"
            + ("" if r_e == n_d else f" with {n_d} columns"))
    if n_d:
        H = E_d @ np.linalg.solve(CE.T @ CE, CE.T)
    else:
        H = np.zeros((n, p))
    T = np.eye(n) - H @ C
    A1 = A - H @ C @ A
    unobs = 0
    if not pbh_unobservable_modes(A1, C):
        poles = default_poles(n, avoid=A1) if desired_poles is None else list(desired_poles)
        K1 = place_observer_poles(A1, C, poles)
    else:
        dec = detectability_decomposition(A1, C)
        if not dec.detectable:
            bad = eig(dec.A11).eigenvalues
            worst = bad[np.argmax(bad.real)]
            raise NotDetectable(
                f"(C, A - HCA) is not detectable: unobservable mode at {worst:.6g}")
        unobs = dec.unobservable_dim
        k_obs = n - unobs
        poles = default_poles(k_obs, avoid=dec.A22) if desired_poles is None else list(desired_poles)[:k_obs]
        if len(poles) != k_obs:
            raise InputError(f"need {k_obs} poles for the observable part")
        Kp2 = place_observer_poles(dec.A22, dec.C2, poles)
        Kp = np.vstack([np.zeros((unobs, p)), Kp2])
        K1 = dec.P_inv @ Kp
    F = A1 - K1 @ C
    if not eig(F).is_hurwitz:
        raise SynthesisError("UIO matrix F is not Hurwitz")
    K2 = F @ H
    return Uio(model, F, T, K1 + K2, H, K1, K2, eps_algebra, unobs)


@dataclass(frozen=True)
class UioAlgebraReport:
    eps: float
    residues: dict
    passed: bool

    def failures(self):
        return [k for k, v in self.residues.items() if not v < self.eps]


def check_uio_algebra(uio, model=None, eps=None):
    """Norms of the four UIO identities, each required to be strictly below `eps`.

    A zero tolerance therefore always fails: floating-point residue is never
    assumed to vanish.
    """
    model = uio.model if model is None else model
    eps = uio.eps_algebra if eps is None else eps
    A, C, E_d = model.A, model.C, model.E_d
    n = model.n
    H = uio.H
    res = {
        "decoupling": float(np.linalg.norm((H @ C - np.eye(n)) @ E_d, 2)) if E_d.size else 0.0,
        "T": float(np.linalg.norm(uio.T - (np.eye(n) - H @ C), 2)),
        "F": float(np.linalg.norm(uio.F - (A - H @ C @ A - uio.K1 @ C), 2)),
        "K2": float(np.linalg.norm(uio.K2 - uio.F @ H, 2)),
    }
    return UioAlgebraReport(eps, res, all(v < eps for v in res.values()))


# sliding-mode observer ------------------------------------------------------

@dataclass
class SlidingModeObserver:
    """Sliding-mode observer in original coordinates.

    ``xhat' = A xhat + B u - G_l e_y + G_n nu(e_y)`` with ``e_y = C xhat - y``.
    In the regular-form coordinates ``T_o x = [x1; y]`` the error obeys
    ``e1' = A11 e1`` and ``e_y' = A21 e1 + A22s e_y + nu - D2 fbar``.
    """

    model: LtiModel
    T_o: np.ndarray
    A11: np.ndarray
    A12: np.ndarray
    A21: np.ndarray
    A22: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    D2: np.ndarray
    A22s: np.ndarray
    P2: np.ndarray
    Q2: np.ndarray
    P1: np.ndarray
    Q1: np.ndarray
    Qhat: np.ndarray
    G_l: np.ndarray
    G_n: np.ndarray
    rho: float
    sigma: float
    kind: str = field(default="sliding", init=False)

    @property
    def state_dim(self):
        return self.model.n

    @cached_property
    def D2_norm(self):
        return float(np.linalg.norm(self.D2, 2))

    @cached_property
    def D2_pinv(self):
        return np.linalg.pinv(self.D2)

    @property
    def n1(self):
        return self.A11.shape[0]

    def initial_state(self, xhat0=None):
        return np.zeros(self.model.n) if xhat0 is None else np.asarray(xhat0, float).copy()

    def output_error(self, state, y):
        return self.model.C @ state - y

    def derivative(self, state, u, y):
        M = self.model
        e_y = M.C @ state - y
        return M.A @ state + M.B @ u - self.G_l @ e_y + self.G_n @ nu_injection(self, e_y)

    def linear_form(self):
        """Linear part; the injection ``G_n nu(C state - y)`` is added separately."""
        M = self.model
        return M.A - self.G_l @ M.C, M.B, self.G_l

    def estimate(self, state, y):
        return state

    def residual(self, state, y):
        return sliding_fault_estimate(self, self.output_error(state, y))

    def error(self, state, x):
        return state - x

    def error_rate(self, dstate, dx, y_rate=None):
        return dstate - dx

    def split_error(self, e):
        """``(e1, e_y)`` in regular-form coordinates; accepts stacked rows."""
        z = np.asarray(e, float) @ self.T_o.T
        return z[..., : self.n1], z[..., self.n1:]

    @property
    def A_err(self):
        return self.model.A - self.G_l @ self.model.C


def _regular_form(model, q_cols):
    """Transformation ``T_o`` with ``C inv(T_o) = [0 I]`` and ``T_o E_bar = [0; D2]``."""
    A, C, Eb = model.A, model.C, q_cols
    n, p = model.n, model.p
    k = n - p
    U, s, Vt = np.linalg.svd(C)
    N0 = Vt[p:].T
    if k:
        # rotate the null-space basis towards the leading coordinate axes
        Uj, _, Vj = np.linalg.svd(N0.T @ np.eye(n)[:, :k])
        Nc = N0 @ (Uj @ Vj)
    else:
        Nc = np.zeros((n, 0))
    Tc = np.vstack([Nc.T, C])
    Tc_inv = np.linalg.inv(Tc)
    Ac = Tc @ A @ Tc_inv
    Ec = Tc @ Eb
    E1, E2 = Ec[:k], Ec[k:]
    L0 = E1 @ np.linalg.pinv(E2)
    A11_0 = Ac[:k, :k] - L0 @ Ac[k:, :k]
    L = L0
    if k and not eig(A11_0).is_hurwitz:
        U2, s2, _ = np.linalg.svd(E2)
        r = int(np.sum(s2 > 1e-12 * max(1.0, s2[0])))
        Nl = U2[:, r:].T
        C0 = Nl @ Ac[k:, :k]
        if C0.shape[0] == 0 or not np.any(C0):
            raise SynthesisError("sliding design: reduced-order dynamics cannot be stabilized")
        try:
            P = solve_care(A11_0.T, C0.T, np.eye(k), np.eye(C0.shape[0]))
        except Exception as exc:
            raise SynthesisError(
                f"sliding design: invariant zeros prevent a stable reduced-order block ({exc})"
            ) from exc
        Mgain = P @ C0.T
        L = L0 + Mgain @ Nl
    TL = np.eye(n)
    TL[:k, k:] = -L
    return TL @ Tc


def synth_sliding(model, decay_rate=10.0, rho=None, sigma=1e-3, A22s=None,
                  max_fault_norm=None, Q1=None):
    """Sliding-mode fault estimator for faults entering through ``E_bar``.

    Parameters
    ----------
    decay_rate : float
        ``A22s = -decay_rate * I`` unless `A22s` is given.
    rho : float, optional
        Injection gain; defaults to ``1.5 * max_fault_norm``.
    sigma : float
        Smoothing constant of the injection.
    """
    n, p = model.n, model.p
    Eb = model.E_bar
    q = Eb.shape[1]
    if q == 0:
        raise SynthesisError("sliding design needs at least one fault channel")
    if numerical_rank(Eb) != q:
        raise SynthesisError("sliding design assumption violated: E_bar is not full column rank")
    if numerical_rank(model.C) != p:
        raise SynthesisError("sliding design assumption violated: C is not full row rank")
    if not q <= p <= n:
        raise SynthesisError(
            f"sliding design assumption violated: need faults ({q}) <= outputs ({p}) <= states ({n})")
    if numerical_rank(model.C @ Eb) != q:
        raise SynthesisError("sliding design assumption violated: rank(C E_bar) < number of faults")
    try:
        zeros = invariant_zeros(model.A, Eb, model.C)
    except StructureError as exc:
        raise SynthesisError(f"sliding design assumption violated: {exc}") from exc
    if zeros.size and np.max(zeros.real) >= 0:
        raise SynthesisError(
            f"sliding design assumption violated: unstable invariant zero {zeros[np.argmax(zeros.real)]:.6g}")
    if rho is None:
        if max_fault_norm is None:
            raise InputError("give rho or max_fault_norm")
        rho = 1.5 * float(max_fault_norm)
    if not rho > 0 or not sigma > 0:
        raise InputError("rho and sigma must be positive")

    T_o = _regular_form(model, Eb)
    return sliding_from_transform(model, T_o, rho, sigma, decay_rate=decay_rate,
                                  A22s=A22s, Q1=Q1)


def sliding_from_transform(model, T_o, rho, sigma, decay_rate=10.0, A22s=None, Q1=None):
    """Assemble a sliding-mode observer from a given regular-form transformation."""
    n, p = model.n, model.p
    T_o = as_matrix(T_o, "T_o")
    if T_o.shape != (n, n):
        raise DimensionError(f"T_o must be {n}x{n}")
    T_inv = np.linalg.inv(T_o)
    k = n - p
    At = T_o @ model.A @ T_inv
    Bt = T_o @ model.B
    A11, A12, A21, A22 = At[:k, :k], At[:k, k:], At[k:, :k], At[k:, k:]
    B1, B2 = Bt[:k], Bt[k:]
    D2 = model.C @ model.E_bar
    if k and not eig(A11).is_hurwitz:
        raise SynthesisError("sliding design: A11 is not Hurwitz")
    if A22s is None:
        A22s = -float(decay_rate) * np.eye(p)
    A22s = as_matrix(A22s, "A22s")
    if A22s.shape != (p, p) or not eig(A22s).is_hurwitz:
        raise SynthesisError("A22s must be a Hurwitz p x p matrix")
    Q2 = np.eye(p)
    P2 = solve_lyapunov(A22s, Q2)
    Q1 = np.eye(k) if Q1 is None else as_matrix(Q1, "Q1")
    Qhat = A21.T @ P2 @ np.linalg.solve(Q2, P2 @ A21) + Q1
    Qhat = (Qhat + Qhat.T) / 2
    P1 = solve_lyapunov(A11, Qhat) if k else np.zeros((0, 0))
    G_n = T_inv @ np.vstack([np.zeros((k, p)), np.eye(p)])
    G_l = T_inv @ np.vstack([A12, A22 - A22s])
    return SlidingModeObserver(model, T_o, A11, A12, A21, A22, B1, B2, D2, A22s,
                               P2, Q2, P1, Q1, Qhat, G_l, G_n, float(rho), float(sigma))


def nu_injection(observer, e_y):
    """Smoothed unit-vector injection ``-rho |D2| P2 e_y / (|P2 e_y| + sigma)``."""
    e_y = np.asarray(e_y, float).ravel()
    if not np.any(e_y):
        return np.zeros_like(e_y)
    v = observer.P2 @ e_y
    return -observer.rho * observer.D2_norm * v / (np.linalg.norm(v) + observer.sigma)


def sliding_fault_estimate(observer, e_y):
    """Fault estimate ``pinv(D2) nu``; tends to ``fbar`` once sliding holds."""
    return observer.D2_pinv @ nu_injection(observer, e_y)


def sliding_fault_estimates(observer, E_y):
    """Row-wise :func:`sliding_fault_estimate` for a stack of output errors."""
    E_y = np.atleast_2d(np.asarray(E_y, float))
    V = E_y @ observer.P2.T
    nrm = np.linalg.norm(V, axis=1, keepdims=True)
    nu = -observer.rho * observer.D2_norm * V / (nrm + observer.sigma)
    nu[nrm[:, 0] == 0] = 0.0
    return nu @ observer.D2_pinv.T


def observer_derivative(observer, state, u, y):
    """Right-hand side of `observer`'s ODE with dimension checks."""
    M = observer.model
    state = np.asarray(state, float).ravel()
    u = np.asarray(u, float).ravel()
    y = np.asarray(y, float).ravel()
    if state.shape != (observer.state_dim,):
        raise DimensionError(f"state must have length {observer.state_dim}")
    if u.shape != (M.m,):
        raise DimensionError(f"u must have length {M.m}")
    if y.shape != (M.p,):
        raise DimensionError(f"y must have length {M.p}")
    return observer.derivative(state, u, y)
