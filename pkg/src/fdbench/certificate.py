"""``.fdcert`` detector certificates: serialisation, parsing and re-verification.

The format is line-oriented text. Sections open with ``[name]``; inside a
section a line is either ``key = value`` or ``matrix NAME ROWS COLS``
followed by ``ROWS`` lines of ``COLS`` numbers. Numbers use 17 significant
digits so every float round-trips exactly. The last line is
``digest = sha256:<hex>`` over all preceding bytes.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificateError, CertificateParseError, InputError
from .gains import (
    GainBounds,
    Lemma,
    LmiCertificate,
    NormKind,
    check_lmi_feasibility,
)
from .linalg import eig, solve_lyapunov
from .monitor import sliding_sets

__all__ = [
    "FORMAT_VERSION",
    "CertificateFile",
    "Check",
    "VerificationReport",
    "certificate_from_detector",
    "serialize_certificate",
    "parse_certificate",
    "load_certificate",
    "verify_certificate",
    "observer_from_certificate",
    "detector_from_certificate",
]

FORMAT_VERSION = 1
MAGIC = "# fdcert"
LEVEL_RTOL = 1e-12
MATRIX_RTOL = 1e-9


def _num(x):
    return "%.17g" % float(x)


@dataclass
class CertificateFile:
    """Parsed content of a ``.fdcert`` file.

    ``sections`` maps section names to ``{key: value}`` where values are
    floats, strings or 2-D arrays. ``digest_ok`` records whether the stored
    digest matched the payload when the file was parsed.
    """

    sections: dict
    digest: str = ""
    digest_ok: bool = True

    @property
    def meta(self):
        return self.sections["meta"]

    @property
    def kind(self):
        return self.meta["kind"]

    @property
    def name(self):
        return self.meta["name"]

    def sets(self):
        return {k[4:]: v for k, v in self.sections.items() if k.startswith("set ")}

    def lmis(self):
        return {k[4:]: v for k, v in self.sections.items() if k.startswith("lmi ")}

    def lmi_certificate(self, label):
        sec = self.sections[f"lmi {label}"]
        wit = {"Q": sec["Q"]}
        for key in ("upsilon", "phi"):
            if key in sec:
                wit[key] = sec[key]
        return LmiCertificate(Lemma(sec["lemma"]), sec["rho"], wit)


# emission -------------------------------------------------------------------

def _lmi_section(cert, target):
    sec = {"lemma": cert.lemma.value, "target": target, "rho": float(cert.rho)}
    for key in ("upsilon", "phi"):
        if key in cert.witnesses:
            sec[key] = float(cert.witnesses[key])
    sec["Q"] = np.asarray(cert.witnesses["Q"], float)
    return sec


def certificate_from_detector(det, model, keep=None, envelope=None):
    """Collect everything needed to re-check `det` against `model`."""
    ob = det.observer
    meta = {
        "schema_version": FORMAT_VERSION,
        "name": det.name,
        "kind": det.kind,
        "model_digest": model.digest(),
        "n": model.n, "m": model.m, "p": model.p,
    }
    secs = {"meta": meta}
    if det.kind == "output":
        secs["observer"] = {"L": ob.L}
    elif det.kind == "uio":
        keep = _uio_keep(model, ob) if keep is None else keep
        secs["observer"] = {
            "keep": " ".join(str(i) for i in keep),
            "eps_algebra": ob.eps_algebra,
            "F": ob.F, "T": ob.T, "K": ob.K, "H": ob.H, "K1": ob.K1, "K2": ob.K2,
        }
    else:
        secs["observer"] = {
            "rho": ob.rho, "sigma": ob.sigma, "fault_bound": det.sigma_bar,
            "T_o": ob.T_o, "A22s": ob.A22s, "Q1": ob.Q1, "G_l": ob.G_l, "G_n": ob.G_n,
        }
    if det.kind in ("output", "uio"):
        th = det.thresholds
        meta["norm_kind"] = th.gains.norm_kind.value
        secs["thresholds"] = {
            "r_th": det.r_th, "sigma_bar": det.sigma_bar, "f_max": th.f_max,
            "zeta": th.zeta, "zeta_bar": th.zeta_bar, "theta_th": th.theta_th,
            "eps_V": det.eps_V, "t_s": det.t_s,
            "eps": getattr(ob, "eps_algebra", 1e-10),
        }
        secs["gains"] = {"pi": th.gains.pi, "pi_bar": th.gains.pi_bar}
        secs["set E_n"] = {"level": det.monitor.E_n.level, "P": det.P}
        secs["set E_f"] = {"level": det.monitor.E_f.level, "P": det.P}
        c1, c2 = th.certificates
        secs["lmi residual"] = _lmi_section(c1, "residual")
        secs["lmi metric"] = _lmi_section(c2, "metric")
    else:
        sp = det.sliding
        secs["thresholds"] = {"t_s": sp.t_s}
        secs["set E_s"] = {"level": sp.E_s.level, "P": sp.E_s.P}
        secs["set E_e"] = {"level": sp.E_e.level, "P": sp.E_e.P}
    if envelope:
        secs["envelope"] = {k: float(v) for k, v in sorted(envelope.items())}
    return CertificateFile(secs)


def _uio_keep(model, uio):
    """Indices of the base model's fault columns that the UIO keeps."""
    keep = []
    for j in range(model.n_f):
        col = model.E_f[:, j]
        if any(np.array_equal(col, uio.model.E_f[:, i]) for i in range(uio.model.n_f)):
            keep.append(j)
    return keep


def _render_value(v):
    if isinstance(v, str):
        if "\n" in v:
            raise InputError("certificate strings must be single-line")
        return v
    if isinstance(v, (bool, np.bool_)):
        raise InputError("booleans are not a certificate value type")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _num(v)


def _payload(cert):
    out = [MAGIC]
    for sec_name, sec in cert.sections.items():
        out.append(f"[{sec_name}]")
        for key, v in sec.items():
            if isinstance(v, np.ndarray):
                v = np.atleast_2d(v) if v.ndim < 2 else v
                r, c = v.shape
                out.append(f"matrix {key} {r} {c}")
                out.extend(" ".join(_num(x) for x in row) for row in v)
            else:
                out.append(f"{key} = {_render_value(v)}")
    return "\n".join(out) + "\n"


def _digest(text):
    return "sha256:" + hashlib.sha256(text.encode("utf-8")).hexdigest()


def serialize_certificate(cert):
    body = _payload(cert)
    return body + f"digest = {_digest(body)}\n"


# parsing --------------------------------------------------------------------

def _parse_scalar(text):
    try:
        if text.lstrip("-").isdigit():
            return int(text)
        return float(text)
    except ValueError:
        return text


def parse_certificate(text):
    """Parse ``.fdcert`` text into a :class:`CertificateFile`.

    Structural problems (bad syntax, truncation, dimension mismatches,
    negative levels, matrices whose symmetric part is not positive definite)
    raise :class:`CertificateParseError` with a 1-based line number.
    """
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != MAGIC:
        raise CertificateParseError("missing '# fdcert' header", 1)
    sections = {}
    cur = None
    i = 1
    digest = None
    digest_line = None
    while i < len(lines):
        ln = lines[i]
        lineno = i + 1
        if ln.startswith("digest = "):
            digest = ln[len("digest = "):]
            digest_line = i
            if i != len(lines) - 1:
                raise CertificateParseError("content after the digest line", lineno + 1)
            break
        if ln.startswith("[") and ln.endswith("]"):
            cur = ln[1:-1]
            if not cur or cur in sections:
                raise CertificateParseError(f"empty or duplicate section [{cur}]", lineno)
            sections[cur] = {}
            i += 1
            continue
        if cur is None:
            raise CertificateParseError("content before the first section", lineno)
        if ln.startswith("matrix "):
            parts = ln.split()
            if len(parts) != 4:
                raise CertificateParseError("matrix header needs NAME ROWS COLS", lineno)
            try:
                r, c = int(parts[2]), int(parts[3])
            except ValueError:
                raise CertificateParseError("matrix dimensions must be integers", lineno) from None
            if r < 0 or c < 0:
                raise CertificateParseError("negative matrix dimension", lineno)
            rows = []
            for k in range(r):
                j = i + 1 + k
                if j >= len(lines) or lines[j].startswith("digest = "):
                    raise CertificateParseError(f"matrix {parts[1]} is truncated", j + 1)
                toks = lines[j].split()
                if len(toks) != c:
                    raise CertificateParseError(
                        f"matrix {parts[1]} row {k + 1} has {len(toks)} entries, expected {c}", j + 1)
                try:
                    rows.append([float(t) for t in toks])
                except ValueError:
                    raise CertificateParseError(f"non-numeric entry in matrix {parts[1]}", j + 1) from None
            M = np.array(rows, float).reshape(r, c)
            if not np.all(np.isfinite(M)):
                raise CertificateParseError(f"non-finite entry in matrix {parts[1]}", lineno)
            sections[cur][parts[1]] = M
            i += 1 + r
            continue
        if " = " not in ln:
            raise CertificateParseError(f"cannot parse line {ln!r}", lineno)
        key, val = ln.split(" = ", 1)
        sections[cur][key] = _parse_scalar(val)
        i += 1
    if digest is None:
        raise CertificateParseError("file is truncated: no digest line", len(lines) + 1)
    body = "\n".join(lines[:digest_line]) + "\n"
    cert = CertificateFile(sections, digest, digest == _digest(body))
    _validate_structure(cert, lines)
    return cert


def _line_of(lines, needle):
    for k, ln in enumerate(lines):
        if ln.startswith(needle):
            return k + 1
    return 0


def _validate_structure(cert, lines):
    secs = cert.sections
    if "meta" not in secs:
        raise CertificateParseError("missing [meta] section", 2)
    meta = secs["meta"]
    if meta.get("schema_version") != FORMAT_VERSION:
        raise CertificateParseError(
            f"unsupported schema_version {meta.get('schema_version')!r}",
            _line_of(lines, "schema_version"))
    for key in ("name", "kind", "model_digest", "n", "m", "p"):
        if key not in meta:
            raise CertificateParseError(f"[meta] lacks {key}", _line_of(lines, "[meta]"))
    kind = meta["kind"]
    if kind not in ("output", "uio", "sliding"):
        raise CertificateParseError(f"unknown kind {kind!r}", _line_of(lines, "kind"))
    n, m, p = meta["n"], meta["m"], meta["p"]
    if "observer" not in secs:
        raise CertificateParseError("missing [observer] section", len(lines))
    shapes = {
        "output": {"L": (n, p)},
        "uio": {"F": (n, n), "T": (n, n), "K": (n, p), "H": (n, p), "K1": (n, p), "K2": (n, p)},
        "sliding": {"T_o": (n, n), "A22s": (p, p), "Q1": (n - p, n - p),
                    "G_l": (n, p), "G_n": (n, p)},
    }[kind]
    for key, shape in shapes.items():
        M = secs["observer"].get(key)
        if not isinstance(M, np.ndarray):
            raise CertificateParseError(f"observer matrix {key} missing", _line_of(lines, "[observer]"))
        if M.shape != shape:
            raise CertificateParseError(
                f"observer matrix {key} is {M.shape}, expected {shape}",
                _line_of(lines, f"matrix {key} "))
    wanted = ("E_n", "E_f") if kind != "sliding" else ("E_s", "E_e")
    sets = cert.sets()
    for s in wanted:
        if s not in sets:
            raise CertificateParseError(f"missing [set {s}] section", len(lines))
    for s, sec in sets.items():
        where = _line_of(lines, f"[set {s}]")
        lev = sec.get("level")
        if not isinstance(lev, (int, float)) or not math.isfinite(lev) or lev < 0:
            raise CertificateParseError(f"set {s}: level must be a finite nonnegative number", where)
        P = sec.get("P")
        if not isinstance(P, np.ndarray) or P.shape[0] != P.shape[1]:
            raise CertificateParseError(f"set {s}: P must be a square matrix", where)
        dim = p if s == "E_s" else n
        if P.shape[0] != dim:
            raise CertificateParseError(f"set {s}: P is {P.shape}, expected {dim}x{dim}", where)
        if dim and _min_sym_eig(P) <= 0:
            raise CertificateParseError(f"set {s}: P is not positive definite", where)
    for label, sec in cert.lmis().items():
        where = _line_of(lines, f"[lmi {label}]")
        try:
            Lemma(sec.get("lemma"))
        except ValueError:
            raise CertificateParseError(f"lmi {label}: unknown lemma", where) from None
        rho = sec.get("rho")
        if not isinstance(rho, (int, float)) or not rho > 0:
            raise CertificateParseError(f"lmi {label}: rho must be positive", where)
        Q = sec.get("Q")
        if not isinstance(Q, np.ndarray) or Q.shape != (n, n):
            raise CertificateParseError(f"lmi {label}: Q must be {n}x{n}", where)


def load_certificate(path):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CertificateParseError(f"cannot read certificate: {exc}", 0) from exc
    return parse_certificate(text)


# verification ---------------------------------------------------------------

@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    margin: float = math.nan
    detail: str = ""


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return bool(self.checks) and all(c.passed for c in self.checks)

    def add(self, name, passed, margin=math.nan, detail=""):
        self.checks.append(Check(name, bool(passed), float(margin), detail))

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def text(self):
        rows = []
        for c in self.checks:
            tag = "PASS" if c.passed else "FAIL"
            m = "" if math.isnan(c.margin) else f" margin={c.margin:.6g}"
            d = f" ({c.detail})" if c.detail else ""
            rows.append(f"CHECK {tag} {c.name}{m}{d}")
        rows.append(f"RESULT {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(rows) + "\n"


def observer_from_certificate(cert, model):
    """Rebuild the observer object stored in `cert` for `model`."""
    from .observers import OutputObserver, Uio, sliding_from_transform

    ob = cert.sections["observer"]
    if cert.kind == "output":
        return OutputObserver(model, ob["L"])
    if cert.kind == "uio":
        keep = [int(t) for t in str(ob["keep"]).split()] if str(ob["keep"]).strip() else []
        sub = model.with_fault_split(keep)
        return Uio(sub, ob["F"], ob["T"], ob["K"], ob["H"], ob["K1"], ob["K2"],
                   float(ob["eps_algebra"]))
    return sliding_from_transform(model, ob["T_o"], float(ob["rho"]), float(ob["sigma"]),
                                  A22s=ob["A22s"], Q1=ob["Q1"])


def detector_from_certificate(cert, model, deriv=None):
    """Monitorable :class:`~fdbench.design.Detector` rebuilt from a certificate."""
    from .design import Detector
    from .gains import DetectionThresholds, EllipsoidSet
    from .monitor import BackwardDifference, MonitorConfig, SlidingSpec

    ob = observer_from_certificate(cert, model)
    th = cert.sections["thresholds"]
    sets = cert.sets()
    if cert.kind == "sliding":
        spec = SlidingSpec(EllipsoidSet(sets["E_s"]["P"], sets["E_s"]["level"]),
                           EllipsoidSet(sets["E_e"]["P"], sets["E_e"]["level"]), float(th["t_s"]))
        return Detector(cert.name, "sliding", ob, t_s=spec.t_s, sliding=spec,
                        sigma_bar=float(cert.sections["observer"]["fault_bound"]))
    g = cert.sections["gains"]
    gains = GainBounds(float(g["pi"]), float(g["pi_bar"]), NormKind(cert.meta["norm_kind"]))
    lm = (cert.lmi_certificate("residual"), cert.lmi_certificate("metric"))
    thr = DetectionThresholds(float(th["zeta"]), float(th["zeta_bar"]), float(th["theta_th"]),
                              float(th["f_max"]), gains, lm)
    P = sets["E_n"]["P"]
    mon = MonitorConfig(EllipsoidSet(P, sets["E_n"]["level"]), EllipsoidSet(P, sets["E_f"]["level"]),
                        thr.theta_th, float(th["eps_V"]),
                        BackwardDifference() if deriv is None else deriv)
    return Detector(cert.name, cert.kind, ob, P, thr, float(th["r_th"]), float(th["sigma_bar"]),
                    float(th["t_s"]), float(th["eps_V"]), mon)


def _rel_close(a, b, rtol):
    return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-300)


def _min_sym_eig(M):
    """Smallest eigenvalue of the symmetric part; -inf when M is not finite."""
    if not M.size:
        return math.inf
    with np.errstate(over="ignore", invalid="ignore"):
        S = (M + M.T) / 2
    if not np.all(np.isfinite(S)):
        return -math.inf
    try:
        return float(np.min(np.linalg.eigvalsh(S)))
    except np.linalg.LinAlgError:
        return -math.inf


def _sym_check(rep, label, P):
    with np.errstate(over="ignore", invalid="ignore"):
        scale = max(np.linalg.norm(P, "fro"), 1e-300)
        asym = float(np.linalg.norm(P - P.T, "fro")) / scale
    rep.add(f"{label} symmetric", asym <= 1e-14, 1e-14 - asym)
    lam = _min_sym_eig(P)
    rep.add(f"{label} positive definite", lam > 0, lam)


def verify_certificate(cert, model):
    """Re-check a parsed certificate against `model`; never raises on failure."""
    rep = VerificationReport()
    rep.add("payload digest", cert.digest_ok, detail="" if cert.digest_ok else "payload was modified")
    meta = cert.meta
    same = meta["model_digest"] == model.digest()
    rep.add("model binding", same, detail="" if same else "certificate was issued for a different model")
    dims_ok = (meta["n"], meta["m"], meta["p"]) == (model.n, model.m, model.p)
    rep.add("dimensions", dims_ok)
    if not (same and dims_ok):
        return rep
    try:
        ob = observer_from_certificate(cert, model)
    except (CertificateError, InputError, ValueError, np.linalg.LinAlgError) as exc:
        rep.add("observer reconstruction", False, detail=str(exc))
        return rep
    except Exception as exc:  # synthesis errors from an inconsistent transform
        rep.add("observer reconstruction", False, detail=f"{type(exc).__name__}: {exc}")
        return rep
    for name, sec in cert.sets().items():
        _sym_check(rep, f"set {name} P", sec["P"])
    if cert.kind == "sliding":
        _verify_sliding(rep, cert, ob, model)
    else:
        _verify_linear(rep, cert, ob)
    return rep


def _hurwitz(rep, label, A):
    a = float(eig(A).max_real_part) if A.size else -math.inf
    rep.add(f"{label} Hurwitz", a < 0, -a)


def _verify_linear(rep, cert, ob):
    model = ob.model
    if cert.kind == "uio":
        from .observers import check_uio_algebra

        eps = float(cert.sections["thresholds"]["eps"])
        alg = check_uio_algebra(ob, eps=eps)
        for k, v in alg.residues.items():
            rep.add(f"uio identity {k}", v < eps, eps - v)
    A = ob.A_err
    _hurwitz(rep, "error dynamics", A)
    sets = cert.sets()
    P = sets["E_n"]["P"]
    same_P = np.array_equal(P, sets["E_f"]["P"])
    rep.add("E_n and E_f share P", same_P)
    with np.errstate(over="ignore", invalid="ignore"):
        D = -(A.T @ P + P @ A)
    lam = _min_sym_eig(D)
    rep.add("Lyapunov decrease", lam > 0, lam)
    try:
        ref = solve_lyapunov(A, np.eye(A.shape[0]))
        dev = float(np.linalg.norm(ref - P)) / max(float(np.linalg.norm(ref)), 1e-300)
        rep.add("P matches design equation", dev <= MATRIX_RTOL, MATRIX_RTOL - dev)
    except Exception as exc:
        rep.add("P matches design equation", False, detail=str(exc))
    E = ob.fault_input
    g = cert.sections["gains"]
    th = cert.sections["thresholds"]
    for label, M, gain in (("residual", model.C, g["pi"]), ("metric", P, g["pi_bar"])):
        try:
            lc = cert.lmi_certificate(label)
            chk = check_lmi_feasibility(lc, A, E, M)
            rep.add(f"lmi {label} feasible", chk.feasible, chk.margin)
            rep.add(f"lmi {label} bounds gain", lc.rho >= gain, lc.rho - gain)
        except Exception as exc:
            rep.add(f"lmi {label} feasible", False, detail=str(exc))
    pi, pi_bar = float(g["pi"]), float(g["pi_bar"])
    r_th, sigma_bar = float(th["r_th"]), float(th["sigma_bar"])
    ok = pi > 0 and r_th > 0 and sigma_bar >= 0
    rep.add("threshold inputs positive", ok)
    if not ok:
        return
    f_max = r_th / pi
    zeta = (pi_bar * f_max) ** 2
    zeta_bar = (math.sqrt(zeta) + pi_bar * sigma_bar) ** 2
    theta_th = float(np.linalg.norm(E, 2)) * f_max
    for key, val in (("f_max", f_max), ("zeta", zeta), ("zeta_bar", zeta_bar), ("theta_th", theta_th)):
        rep.add(f"threshold {key} consistent", _rel_close(float(th[key]), val, LEVEL_RTOL))
    rep.add("E_n level equals zeta", float(sets["E_n"]["level"]) == float(th["zeta"]))
    rep.add("E_f level equals zeta_bar", float(sets["E_f"]["level"]) == float(th["zeta_bar"]))
    rep.add("eps_V positive", float(th["eps_V"]) > 0, float(th["eps_V"]))


def _verify_sliding(rep, cert, ob, model):
    n, p = model.n, model.p
    k = n - p
    T_inv = np.linalg.inv(ob.T_o)
    form = np.hstack([np.zeros((p, k)), np.eye(p)])
    d1 = float(np.linalg.norm(model.C @ T_inv - form))
    d2 = float(np.linalg.norm((ob.T_o @ model.E_bar)[:k]))
    tol = 1e-9 * max(1.0, float(np.linalg.norm(ob.T_o)))
    rep.add("regular form output map", d1 <= tol, tol - d1)
    rep.add("regular form fault map", d2 <= tol, tol - d2)
    _hurwitz(rep, "reduced-order block A11", ob.A11)
    _hurwitz(rep, "output block A22s", ob.A22s)
    stored = cert.sections["observer"]
    for key in ("G_l", "G_n"):
        ref = getattr(ob, key)
        dev = float(np.linalg.norm(ref - stored[key])) / max(float(np.linalg.norm(ref)), 1.0)
        rep.add(f"gain {key} consistent", dev <= MATRIX_RTOL, MATRIX_RTOL - dev)
    sets = cert.sets()
    Pe = np.zeros((n, n))
    Pe[:k, :k], Pe[k:, k:] = ob.P1, ob.P2
    for label, P, ref in (("E_s", sets["E_s"]["P"], ob.P2), ("E_e", sets["E_e"]["P"], Pe)):
        dev = float(np.linalg.norm(ref - P)) / max(float(np.linalg.norm(ref)), 1e-300)
        rep.add(f"set {label} P matches design", dev <= MATRIX_RTOL, MATRIX_RTOL - dev)
    bound = float(stored["fault_bound"])
    rho_ok = 0 < bound < ob.rho
    rep.add("injection gain exceeds fault bound", rho_ok, ob.rho - bound)
    if not rho_ok:
        return
    t_s = float(cert.sections["thresholds"]["t_s"])
    try:
        ref = sliding_sets(ob, bound, t_s=t_s, margin=0.0)
    except InputError as exc:
        rep.add("sliding levels", False, detail=str(exc))
        return
    for label, spec in (("E_s", ref.E_s), ("E_e", ref.E_e)):
        lev = float(sets[label]["level"])
        rep.add(f"set {label} level sufficient", lev > spec.level, lev - spec.level)
