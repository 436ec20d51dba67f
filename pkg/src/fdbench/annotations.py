"""Hoare-style annotation blocks for observer update code.

Predicates are polynomial inequalities of degree at most two over scalar
variables, e.g. ``2*e1*e1 + 3*e2*e2 <= 6``. The grammar (see
``docs/annotations.md``) is small enough to parse here, so emitted blocks
can be re-read and evaluated on simulation data.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationSyntaxError, UnverifiedCertificateError

__all__ = [
    "Predicate",
    "AnnotationBlock",
    "format_number",
    "quadratic_form_text",
    "parse_predicate",
    "render_blocks",
    "parse_blocks",
    "emit_annotations",
    "variable_names",
]

_TOKEN = re.compile(r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
                    r"|(?P<id>[A-Za-z_]\w*)|(?P<op><=|>=|==|<|>|[-+*()]))")
RELOPS = ("<=", ">=", "==", "<", ">")


def format_number(x):
    """Shortest round-trip decimal; integral values print without a point."""
    x = float(x)
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def variable_names(prefix, n):
    if n == 1:
        return [prefix]
    return [f"{prefix}{i + 1}" for i in range(n)]


def _join_terms(terms):
    """``[(coef, monomial_text)]`` -> ``a*x + b*y - c*z``; constant terms use ``''``."""
    out = []
    for coef, mono in terms:
        mag = abs(coef)
        if mono:
            body = mono if mag == 1 else f"{format_number(mag)}*{mono}"
        else:
            body = format_number(mag)
        if not out:
            out.append(("-" if coef < 0 else "") + body)
        else:
            out.append((" - " if coef < 0 else " + ") + body)
    return "".join(out) if out else "0"


def quadratic_form_text(P, level, names, op="<="):
    """Expanded ``x^T P x <op> level`` with terms in lexicographic index order."""
    P = np.asarray(P, float)
    P = (P + P.T) / 2
    n = P.shape[0]
    if len(names) != n:
        raise ValueError("one name per row of P is required")
    terms = []
    for i in range(n):
        for j in range(i, n):
            c = P[i, j] if i == j else 2 * P[i, j]
            if c != 0:
                terms.append((c, f"{names[i]}*{names[j]}"))
    return f"{_join_terms(terms)} {op} {format_number(level)}"


# predicate grammar ----------------------------------------------------------

def _tokens(text):
    pos = 0
    out = []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise AnnotationSyntaxError(f"unexpected character at column {pos + 1} in {text!r}")
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


class _Parser:
    """Recursive descent over ``expr := term (('+'|'-') term)*`` etc.

    Polynomials are dicts from sorted variable tuples to coefficients.
    """

    def __init__(self, toks, text):
        self.toks = toks
        self.k = 0
        self.text = text

    def peek(self):
        return self.toks[self.k] if self.k < len(self.toks) else (None, None)

    def take(self):
        tok = self.peek()
        self.k += 1
        return tok

    def fail(self, msg):
        raise AnnotationSyntaxError(f"{msg} in {self.text!r}")

    def expr(self):
        acc = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            rhs = self.term()
            acc = _padd(acc, rhs if op == "+" else _pscale(rhs, -1.0))
        return acc

    def term(self):
        acc = self.factor()
        while self.peek()[1] == "*":
            self.take()
            acc = _pmul(acc, self.factor())
        return acc

    def factor(self):
        kind, val = self.take()
        if kind == "num":
            return {(): float(val)}
        if kind == "id":
            return {(val,): 1.0}
        if val == "-":
            return _pscale(self.factor(), -1.0)
        if val == "(":
            inner = self.expr()
            if self.take()[1] != ")":
                self.fail("missing ')'")
            return inner
        self.fail("expected a number, variable or '('" if val else "unexpected end of predicate")


def _padd(a, b):
    out = dict(a)
    for k, v in b.items():
        out[k] = out.get(k, 0.0) + v
    return out


def _pscale(a, s):
    return {k: v * s for k, v in a.items()}


def _pmul(a, b):
    out = {}
    for ka, va in a.items():
        for kb, vb in b.items():
            k = tuple(sorted(ka + kb))
            out[k] = out.get(k, 0.0) + va * vb
    return out


@dataclass(frozen=True)
class Predicate:
    """``poly op 0`` after moving everything to the left-hand side."""

    text: str
    op: str
    poly: dict

    @property
    def degree(self):
        return max((len(k) for k, v in self.poly.items() if v != 0), default=0)

    @property
    def variables(self):
        return sorted({v for k in self.poly for v in k})

    def value(self, env):
        total = 0.0
        for mono, c in self.poly.items():
            term = c
            for v in mono:
                term = term * env[v]
            total = total + term
        return total

    def holds(self, env, tol=0.0):
        """Evaluate on scalars or equal-length arrays in `env`."""
        v = np.asarray(self.value(env), float)
        return {
            "<=": v <= tol, "<": v < tol, ">=": v >= -tol, ">": v > -tol,
            "==": np.abs(v) <= tol,
        }[self.op]


def parse_predicate(text, declared=None):
    """Parse one predicate; reject anything beyond degree two or undeclared names."""
    toks = _tokens(text)
    idx = [i for i, (k, v) in enumerate(toks) if k == "op" and v in RELOPS]
    if len(idx) != 1:
        raise AnnotationSyntaxError(f"predicate needs exactly one comparison: {text!r}")
    i = idx[0]
    sides = []
    for part in (toks[:i], toks[i + 1:]):
        if not part:
            raise AnnotationSyntaxError(f"empty side in {text!r}")
        p = _Parser(part, text)
        sides.append(p.expr())
        if p.k != len(part):
            p.fail(f"unexpected token {part[p.k][1]!r}")
    poly = _padd(sides[0], _pscale(sides[1], -1.0))
    pred = Predicate(text.strip(), toks[i][1], poly)
    if pred.degree > 2:
        raise AnnotationSyntaxError(f"predicate has degree {pred.degree} > 2: {text!r}")
    if declared is not None:
        unknown = set(pred.variables) - set(declared)
        if unknown:
            raise AnnotationSyntaxError(f"undeclared variables {sorted(unknown)} in {text!r}")
    return pred


# blocks ---------------------------------------------------------------------

@dataclass
class AnnotationBlock:
    assumes: list = field(default_factory=list)
    requires: list = field(default_factory=list)
    ensures: list = field(default_factory=list)
    body: list = field(default_factory=list)
    name: str = ""

    def predicates(self, declared=None):
        return {
            clause: [parse_predicate(t, declared) for t in getattr(self, clause)]
            for clause in ("assumes", "requires", "ensures")
        }

    def render(self):
        lines = [f"// {self.name}"] if self.name else []
        clauses = [(c, t) for c in ("assumes", "requires", "ensures") for t in getattr(self, c)]
        for k, (c, t) in enumerate(clauses):
            lead = "/*@" if k == 0 else "  @"
            lines.append(f"{lead} {c} {t};")
        if clauses:
            lines.append("  @*/")
        lines.extend(self.body)
        return "\n".join(lines) + "\n"


def render_blocks(blocks):
    return "\n".join(b.render() for b in blocks)


_CLAUSE = re.compile(r"^\s*(?:/\*@|@)\s+(assumes|requires|ensures)\s+(.*);\s*$")


def parse_blocks(text, declared=None):
    """Inverse of :func:`render_blocks`; every predicate is grammar-checked."""
    blocks = []
    for chunk in re.split(r"\n\s*\n", text.strip("\n")):
        if not chunk.strip():
            continue
        b = AnnotationBlock()
        in_contract = False
        for ln in chunk.split("\n"):
            if ln.startswith("// ") and not b.name and not (b.assumes or b.requires or b.ensures):
                b.name = ln[3:]
                continue
            m = _CLAUSE.match(ln)
            if m:
                in_contract = True
                getattr(b, m.group(1)).append(m.group(2))
                continue
            if ln.strip() == "@*/" and in_contract:
                in_contract = False
                continue
            if in_contract:
                raise AnnotationSyntaxError(f"malformed contract line {ln!r}")
            b.body.append(ln)
        b.predicates(declared)
        blocks.append(b)
    return blocks


# emission -------------------------------------------------------------------

def _linear_rows(M, names):
    """Row-wise expansions ``sum_j M[i, j] * names[j]`` as term lists."""
    return [[(float(c), nm) for c, nm in zip(row, names) if c != 0] for row in np.atleast_2d(M)]


def _update_body(ob, state_names, u_names, y_names, nu_names=None):
    Ao, Bu, By = ob.linear_form()
    rows = [a + b + c for a, b, c in zip(_linear_rows(Ao, state_names), _linear_rows(Bu, u_names),
                                         _linear_rows(By, y_names))]
    if nu_names is not None:
        rows = [r + g for r, g in zip(rows, _linear_rows(ob.G_n, nu_names))]
    body = [f"d{i + 1} = {_join_terms(r)};" for i, r in enumerate(rows)]
    body += [f"{s} = {s} + dt*d{i + 1};" for i, s in enumerate(state_names)]
    return body


def _norm_sq(names):
    return " + ".join(f"{v}*{v}" for v in names)


def emit_annotations(cert, model, report=None):
    """One contract block per monitored set around the observer update step.

    The certificate is re-verified against `model` unless a passing `report`
    is supplied; a failing verification refuses emission.
    """
    from .certificate import observer_from_certificate, verify_certificate

    report = verify_certificate(cert, model) if report is None else report
    if not report.passed:
        bad = ", ".join(c.name for c in report.failures())
        raise UnverifiedCertificateError(f"refusing to annotate an unverified certificate ({bad})")
    ob = observer_from_certificate(cert, model)
    n = model.n
    e = variable_names("e", n)
    u = variable_names("u", model.m)
    y = variable_names("y", model.p)
    st = variable_names("z" if cert.kind == "uio" else "xhat", n)
    env = cert.sections.get("envelope", {})
    common = []
    if "u" in env:
        common.append(f"{_norm_sq(u)} <= {format_number(env['u'] ** 2)}")
    if "y" in env:
        common.append(f"{_norm_sq(y)} <= {format_number(env['y'] ** 2)}")
    sets = cert.sets()
    if cert.kind == "sliding":
        nu = variable_names("nu", model.p)
        body = _update_body(ob, st, u, y, nu)
        fb = float(cert.sections["observer"]["fault_bound"])
        f = variable_names("f", ob.D2.shape[1])
        fault = [f"{_norm_sq(f)} <= {format_number(fb ** 2)}"]
        Pe = ob.T_o.T @ sets["E_e"]["P"] @ ob.T_o
        Ps = model.C.T @ sets["E_s"]["P"] @ model.C
        plan = [("E_e", Pe, sets["E_e"]["level"]), ("E_s", Ps, sets["E_s"]["level"])]
    else:
        body = _update_body(ob, st, u, y)
        th = cert.sections["thresholds"]
        f = variable_names("f", ob.fault_input.shape[1])
        plan = [("E_n", sets["E_n"]["P"], sets["E_n"]["level"]),
                ("E_f", sets["E_f"]["P"], sets["E_f"]["level"])]
        bounds = {"E_n": th["f_max"], "E_f": th["sigma_bar"]}
    blocks = []
    for label, P, level in plan:
        inv = quadratic_form_text(P, level, e)
        if cert.kind == "sliding":
            assumes = common + fault
        else:
            assumes = common + [f"{_norm_sq(f)} <= {format_number(float(bounds[label]) ** 2)}"]
        blocks.append(AnnotationBlock(assumes, [inv], [inv], list(body),
                                      name=f"{cert.name}: {label} invariant across one update"))
    return blocks
