"""Dense linear-algebra primitives for observer synthesis and certificate checks.

All routines take and return plain ``numpy`` arrays (binary64). They are pure
functions; nothing here keeps state between calls.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionError,
    InputError,
    NoSolutionError,
    NumericError,
    SingularSystemError,
    StructureError,
    SynthesisError,
)

TOL_LYAP = 1e-10
TOL_DECOMP = 1e-9
TOL_POLE = 1e-6

__all__ = [
    "SpectrumReport",
    "DetectabilityDecomposition",
    "as_matrix",
    "eig",
    "is_hurwitz",
    "spectral_abscissa",
    "solve_lyapunov",
    "solve_sylvester",
    "place_observer_poles",
    "solve_care",
    "solve_riccati",
    "detectability_decomposition",
    "left_annihilator",
    "invariant_zeros",
    "pbh_unobservable_modes",
    "sqrtm_psd",
    "numerical_rank",
    "match_spectra",
    "care_residual",
]


def as_matrix(M, name="M", ndim=2):
    """Return `M` as a finite float64 array with `ndim` dimensions.

    Scalars and 1-D sequences are promoted: a scalar becomes 1x1, a flat
    sequence becomes a column when ``ndim == 2``.
    """
    a = np.array(M, dtype=float)
    if ndim == 2:
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(-1, 1)
    if a.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InputError(f"{name} has non-finite entries")
    return a


def _square(M, name):
    M = as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got {M.shape}")
    return M


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    max_real_part: float
    is_hurwitz: bool

    def __len__(self):
        return len(self.eigenvalues)


def eig(M):
    """Eigenvalues of a square matrix with a Hurwitz verdict."""
    M = _square(M, "M")
    if M.shape[0] == 0:
        return SpectrumReport(np.zeros(0, complex), -np.inf, True)
    try:
        lam = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigenvalue iteration did not converge: {exc}") from exc
    lam = np.asarray(lam, dtype=complex)
    alpha = float(np.max(lam.real))
    return SpectrumReport(lam, alpha, alpha < 0.0)


def spectral_abscissa(M):
    return eig(M).max_real_part


def is_hurwitz(M):
    return eig(M).is_hurwitz


def numerical_rank(M, rtol=None):
    M = as_matrix(M, "M")
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if rtol is None:
        rtol = max(M.shape) * np.finfo(float).eps
    return int(np.sum(s > rtol * s[0])) if s[0] > 0 else 0


def sqrtm_psd(P):
    """Symmetric square root of a symmetric positive semidefinite matrix."""
    P = _square(P, "P")
    w, V = np.linalg.eigh((P + P.T) / 2)
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def _check_symmetric(Q, name, tol=1e-10):
    scale = max(1.0, np.linalg.norm(Q, "fro"))
    if np.linalg.norm(Q - Q.T, "fro") > tol * scale:
        raise InputError(f"{name} is not symmetric")


def solve_lyapunov(A, Q):
    """Solve ``A.T @ P + P @ A = -Q`` for symmetric `P`.

    Bartels-Stewart (scipy) followed by one residual-correction sweep when the
    relative residual misses ``TOL_LYAP``.

    Raises
    ------
    NoSolutionError
        If `A` is not Hurwitz.
    InputError
        If `Q` is not symmetric.
    """
    A = _square(A, "A")
    Q = _square(Q, "Q")
    if A.shape != Q.shape:
        raise DimensionError(f"A {A.shape} and Q {Q.shape} differ in size")
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    _check_symmetric(Q, "Q")
    if not eig(A).is_hurwitz:
        raise NoSolutionError("Lyapunov equation requires a Hurwitz A")
    P = sla.solve_continuous_lyapunov(A.T, -Q)
    P = (P + P.T) / 2
    qn = np.linalg.norm(Q, "fro")
    for _ in range(2):
        R = A.T @ P + P @ A + Q
        if np.linalg.norm(R, "fro") <= TOL_LYAP * max(qn, np.finfo(float).tiny):
            break
        dP = sla.solve_continuous_lyapunov(A.T, -R)
        P = P + (dP + dP.T) / 2
    return P


def solve_sylvester(A, B, C):
    """Solve ``A @ X - X @ B = C``.

    Raises `SingularSystemError` when `A` and `B` share an eigenvalue.
    """
    A = _square(A, "A")
    B = _square(B, "B")
    C = as_matrix(C, "C")
    if C.shape != (A.shape[0], B.shape[0]):
        raise DimensionError(f"C must be {A.shape[0]}x{B.shape[0]}, got {C.shape}")
    if C.size == 0:
        return np.zeros(C.shape)
    la = eig(A).eigenvalues
    lb = eig(B).eigenvalues
    scale = 1.0 + max(np.max(np.abs(la)), np.max(np.abs(lb)))
    gap = np.min(np.abs(la[:, None] - lb[None, :]))
    if gap <= 1e-10 * scale:
        raise SingularSystemError(
            f"spectra of A and B are not disjoint (closest pair {gap:.3g} apart)")
    X = sla.solve_sylvester(A, -B, C)
    cn = np.linalg.norm(C, "fro")
    for _ in range(2):
        R = C - (A @ X - X @ B)
        if np.linalg.norm(R, "fro") <= TOL_LYAP * max(cn, np.finfo(float).tiny):
            break
        X = X + sla.solve_sylvester(A, -B, R)
    return X


def pbh_unobservable_modes(A, C, rtol=1e-9):
    """Eigenvalues of `A` that fail the PBH observability rank test."""
    A = _square(A, "A")
    C = as_matrix(C, "C")
    n = A.shape[0]
    bad = []
    scale = max(1.0, np.linalg.norm(A, 2), np.linalg.norm(C, 2))
    for lam in eig(A).eigenvalues:
        M = np.vstack([A - lam * np.eye(n), C.astype(complex)])
        s = np.linalg.svd(M, compute_uv=False)
        if s[-1] <= rtol * scale:
            if not any(abs(lam - b) <= 1e-8 * scale for b in bad):
                bad.append(lam)
    return bad


def _target_block(poles):
    """Real block-diagonal matrix whose spectrum is `poles`.

    Complex pairs become 2x2 rotation blocks; repeated values are chained
    with unit superdiagonals so the target is non-derogatory.
    """
    poles = list(poles)
    reals = sorted([p.real for p in poles if abs(p.imag) == 0.0])
    upper = sorted([p for p in poles if p.imag > 0], key=lambda z: (z.real, z.imag))
    blocks = [np.array([[r]]) for r in reals]
    blocks += [np.array([[z.real, z.imag], [-z.imag, z.real]]) for z in upper]
    F = sla.block_diag(*blocks) if blocks else np.zeros((0, 0))
    # chain equal neighbours
    sizes = [b.shape[0] for b in blocks]
    starts = np.cumsum([0] + sizes[:-1])
    for k in range(1, len(blocks)):
        if sizes[k] == sizes[k - 1] and np.allclose(blocks[k], blocks[k - 1]):
            i, j = starts[k - 1], starts[k]
            F[i:i + sizes[k], j:j + sizes[k]] += np.eye(sizes[k])
    return F


def _normalize_poles(desired, n):
    poles = np.atleast_1d(np.asarray(desired, dtype=complex))
    if poles.ndim != 1 or len(poles) != n:
        raise InputError(f"need exactly {n} desired poles, got {len(poles)}")
    if not np.all(np.isfinite(poles)):
        raise InputError("desired poles must be finite")
    poles = np.where(np.abs(poles.imag) <= 1e-12 * (1 + np.abs(poles)), poles.real + 0j, poles)
    up = sorted([p for p in poles if p.imag > 0], key=lambda z: (z.real, z.imag))
    lo = sorted([p.conjugate() for p in poles if p.imag < 0], key=lambda z: (z.real, z.imag))
    if len(up) != len(lo) or not np.allclose(up, lo, rtol=1e-10, atol=1e-12):
        raise InputError("desired poles must be closed under complex conjugation")
    return poles


def match_spectra(actual, desired):
    """Largest distance after optimal one-to-one matching of two pole sets."""
    from scipy.optimize import linear_sum_assignment

    actual = np.asarray(actual, complex)
    desired = np.asarray(desired, complex)
    D = np.abs(actual[:, None] - desired[None, :])
    r, c = linear_sum_assignment(D)
    return float(D[r, c].max()) if len(r) else 0.0


def place_observer_poles(A, C, desired, seed=0, attempts=40):
    """Output-injection gain `L` with ``eig(A - L @ C) == desired``.

    Sylvester-equation placement on the dual pair: with a real target block
    `F` carrying the desired spectrum and a generic `G`, solve
    ``A.T @ X - X @ F = C.T @ G`` and set ``L = (G @ inv(X)).T``. The desired
    set must avoid the spectrum of `A`.
    """
    A = _square(A, "A")
    C = as_matrix(C, "C")
    n = A.shape[0]
    if C.shape[1] != n:
        raise DimensionError(f"C must have {n} columns, got {C.shape}")
    poles = _normalize_poles(desired, n)
    bad = pbh_unobservable_modes(A, C)
    if bad:
        raise SynthesisError(
            f"(A, C) is not observable: PBH rank test fails at eigenvalue {bad[0]:.6g}")
    lam_a = eig(A).eigenvalues
    scale = 1.0 + np.max(np.abs(lam_a)) + np.max(np.abs(poles))
    if np.min(np.abs(lam_a[:, None] - poles[None, :])) <= 1e-8 * scale:
        raise InputError("desired poles must be disjoint from eig(A) for Sylvester placement")
    F = _target_block(poles)
    p = C.shape[0]
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(attempts):
        G = rng.standard_normal((p, n))
        try:
            X = solve_sylvester(A.T, F, C.T @ G)
        except SingularSystemError:
            continue
        cond = np.linalg.cond(X)
        if not np.isfinite(cond):
            continue
        L = np.linalg.solve(X.T, G.T)  # (G X^-1)^T
        err = match_spectra(eig(A - L @ C).eigenvalues, poles)
        if best is None or err < best[0]:
            best = (err, L)
        if err <= TOL_POLE * 1e-2:
            break
    if best is None or best[0] > TOL_POLE * max(1.0, np.max(np.abs(poles))):
        err = np.inf if best is None else best[0]
        raise NumericError(f"pole placement missed the targets by {err:.3g}")
    return best[1]


def solve_riccati(A, G, Q):
    """Stabilizing solution of ``A.T X + X A - X G X + Q = 0``.

    `G` and `Q` are symmetric and may be indefinite. The solution is read off
    the stable invariant subspace of the Hamiltonian ``[[A, -G], [-Q, -A.T]]``
    (ordered real Schur form).

    Raises `NoSolutionError` if the Hamiltonian has eigenvalues on the
    imaginary axis or the subspace is not a graph.
    """
    A = _square(A, "A")
    G = _square(G, "G")
    Q = _square(Q, "Q")
    n = A.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    H = np.block([[A, -G], [-Q, -A.T]])
    lam = np.linalg.eigvals(H)
    hscale = max(1.0, np.linalg.norm(H, 1))
    if np.min(np.abs(lam.real)) <= 1e-10 * hscale:
        raise NoSolutionError("Hamiltonian has eigenvalues on the imaginary axis")
    T, Z, sdim = sla.schur(H, output="real", sort="lhp")
    if sdim != n:
        raise NoSolutionError(f"stable subspace has dimension {sdim}, expected {n}")
    Z11, Z21 = Z[:n, :n], Z[n:, :n]
    if np.linalg.cond(Z11) > 1e12:
        raise NoSolutionError("stable invariant subspace is not a graph")
    X = np.linalg.solve(Z11.T, Z21.T).T
    X = (X + X.T) / 2
    # Newton refinement
    for _ in range(3):
        R = A.T @ X + X @ A - X @ G @ X + Q
        scale = np.linalg.norm(Q, "fro") + 2 * np.linalg.norm(A.T @ X, "fro") \
            + np.linalg.norm(X @ G @ X, "fro")
        if np.linalg.norm(R, "fro") <= 1e-2 * TOL_LYAP * max(scale, 1e-300):
            break
        Acl = A - G @ X
        if not eig(Acl).is_hurwitz:
            break
        dX = sla.solve_continuous_lyapunov(Acl.T, -R)
        X = X + (dX + dX.T) / 2
    return X


def care_residual(A, B, Q, R, P):
    """Relative residual of the CARE, normalised by the sum of term norms."""
    G = B @ np.linalg.solve(R, B.T)
    terms = [A.T @ P, P @ A, P @ G @ P, Q]
    res = A.T @ P + P @ A - P @ G @ P + Q
    scale = sum(np.linalg.norm(t, "fro") for t in terms)
    return np.linalg.norm(res, "fro") / max(scale, np.finfo(float).tiny)


def solve_care(A, B, Q, R):
    """Stabilizing solution of ``A.T P + P A - P B R^-1 B.T P + Q = 0``."""
    A = _square(A, "A")
    B = as_matrix(B, "B")
    Q = _square(Q, "Q")
    R = _square(R, "R")
    n, m = B.shape
    if A.shape[0] != n or Q.shape[0] != n or R.shape[0] != m:
        raise DimensionError("inconsistent CARE dimensions")
    _check_symmetric(Q, "Q")
    _check_symmetric(R, "R")
    if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
        raise InputError("R must be positive definite")
    if np.min(np.linalg.eigvalsh((Q + Q.T) / 2)) < -1e-12 * max(1.0, np.linalg.norm(Q)):
        raise InputError("Q must be positive semidefinite")
    G = B @ np.linalg.solve(R, B.T)
    P = solve_riccati(A, (G + G.T) / 2, (Q + Q.T) / 2)
    if not eig(A - G @ P).is_hurwitz:
        raise NoSolutionError("Riccati solution is not stabilizing")
    return P


@dataclass(frozen=True)
class DetectabilityDecomposition:
    """Orthogonal split of ``(M, C)`` into unobservable and observable parts.

    ``P_sim @ M @ inv(P_sim) == [[A11, A12], [0, A22]]`` and
    ``C @ inv(P_sim) == [0, C2]``; the leading block is unobservable.
    """

    P_sim: np.ndarray
    A11: np.ndarray
    A12: np.ndarray
    A22: np.ndarray
    C2: np.ndarray
    unobservable_dim: int
    detectable: bool

    @property
    def P_inv(self):
        return self.P_sim.T


def _null_basis(M, tol):
    if M.shape[1] == 0:
        return np.zeros((0, 0))
    if M.shape[0] == 0:
        return np.eye(M.shape[1])
    U, s, Vt = np.linalg.svd(M)
    r = int(np.sum(s > tol))
    return Vt[r:].T


def detectability_decomposition(A, C):
    """Staircase split of ``(A, C)``.

    The unobservable subspace is the largest `A`-invariant subspace inside
    ``ker C``; it is computed by the orthogonal recursion
    ``V <- V @ null((I - V V^T) A V)`` starting from ``V = null(C)``.
    """
    A = _square(A, "A")
    C = as_matrix(C, "C")
    n = A.shape[0]
    if C.shape[1] != n:
        raise DimensionError(f"C must have {n} columns, got {C.shape}")
    scale = max(1.0, np.linalg.norm(A, 2), np.linalg.norm(C, 2))
    tol = 1e-10 * scale
    V = _null_basis(C, tol)
    for _ in range(n + 1):
        k = V.shape[1]
        if k == 0:
            break
        W = A @ V - V @ (V.T @ A @ V)
        Vn = V @ _null_basis(W, tol)
        if Vn.shape[1] == k:
            break
        V = Vn
    k = V.shape[1]
    if k:
        V, _ = np.linalg.qr(V)
        Vo = _null_basis(V.T, 1e-12)
    else:
        Vo = np.eye(n)
    Pinv = np.hstack([V, Vo])
    P = Pinv.T
    M = P @ A @ Pinv
    A11, A12, A22 = M[:k, :k], M[:k, k:], M[k:, k:]
    lower = M[k:, :k]
    if lower.size and np.linalg.norm(lower, 2) > TOL_DECOMP * scale:
        raise NumericError("staircase reduction lost block-triangular structure")
    C2 = (C @ Pinv)[:, k:]
    detectable = eig(A11).is_hurwitz if k else True
    return DetectabilityDecomposition(P, A11, A12, A22, C2, k, detectable)


def left_annihilator(M):
    """Rows spanning the left null space of `M` (orthonormal, possibly empty)."""
    M = as_matrix(M, "M")
    r, c = M.shape
    if r == 0:
        raise DimensionError("M must have at least one row")
    if c == 0 or not np.any(M):
        return np.eye(r)
    U, s, _ = np.linalg.svd(M)
    rank = int(np.sum(s > max(r, c) * np.finfo(float).eps * s[0]))
    return U[:, rank:].T.copy()


def _pencil_finite_eigs(Ma, Mb):
    alpha, beta = sla.eigvals(Ma, Mb, homogeneous_eigvals=True)
    scale = max(1.0, np.linalg.norm(Ma, 1))
    degenerate = (np.abs(alpha) <= 1e-10 * scale) & (np.abs(beta) <= 1e-10)
    if np.any(degenerate):
        raise StructureError("Rosenbrock pencil is singular (degenerate system)")
    finite = np.abs(beta) > 1e-10 * np.maximum(np.abs(alpha), 1.0) / scale
    return alpha[finite] / beta[finite]


def invariant_zeros(A, E, C, seed=0):
    """Finite invariant zeros of the triple ``(A, E, C)``.

    These are the points where the Rosenbrock pencil
    ``[[A - sI, E], [C, 0]]`` loses rank. Non-square triples are squared down
    with a random compression; candidate zeros are then kept only if the full
    pencil drops rank there.
    """
    A = _square(A, "A")
    E = as_matrix(E, "E")
    C = as_matrix(C, "C")
    n = A.shape[0]
    q, p = E.shape[1], C.shape[0]
    if E.shape[0] != n or C.shape[1] != n:
        raise DimensionError("E and C must conform with A")
    if numerical_rank(E) < q:
        raise InputError("E must have full column rank")
    if numerical_rank(C) < p:
        raise InputError("C must have full row rank")

    def pencil(E_, C_):
        k = E_.shape[1]
        Ma = np.block([[A, E_], [C_, np.zeros((C_.shape[0], k))]])
        Mb = sla.block_diag(np.eye(n), np.zeros((C_.shape[0], k)))
        return Ma, Mb

    if p == q:
        return _pencil_finite_eigs(*pencil(E, C))
    rng = np.random.default_rng(seed)
    if p > q:
        cand = _pencil_finite_eigs(*pencil(E, rng.standard_normal((q, p)) @ C))
    else:
        cand = _pencil_finite_eigs(*pencil(E @ rng.standard_normal((q, p)), C))
    scale = max(1.0, np.linalg.norm(A, 2), np.linalg.norm(E, 2), np.linalg.norm(C, 2))
    zeros = []
    for s in cand:
        M = np.block([[A - s * np.eye(n), E], [C, np.zeros((p, q))]])
        sv = np.linalg.svd(M, compute_uv=False)
        if sv[min(M.shape) - 1] <= 1e-7 * scale:
            zeros.append(s)
    return np.array(zeros, dtype=complex)
