"""Helicopter model, closed-loop configuration, fault scenarios and simulation."""

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import (
    DimensionError,
    DivergenceError,
    InputError,
    NoSolutionError,
    ParameterError,
    ScenarioError,
)
from .linalg import as_matrix, eig, solve_care
from .observers import LtiModel, SlidingModeObserver, Uio, nu_injection, sliding_fault_estimates

SCHEMA_VERSION = 1

__all__ = [
    "SCHEMA_VERSION",
    "HelicopterParams",
    "FaultSegment",
    "ActuatorChange",
    "FaultScenario",
    "ClosedLoopConfig",
    "Trace",
    "build_helicopter_model",
    "helicopter_fault_columns",
    "hover_input",
    "lqr_gain",
    "simulate",
    "scenario_from_config",
    "model_from_config",
    "load_yaml",
]


@dataclass(frozen=True)
class HelicopterParams:
    """Physical constants of a three-degree-of-freedom lab helicopter.

    The defaults are representative values for a desk-scale rig, not
    manufacturer data. Masses in kg, lengths in m, ``K_f`` in N/V.
    """

    m_f: float = 0.713
    m_w: float = 1.87
    L_a: float = 0.66
    L_h: float = 0.178
    L_m: float = 0.47
    L_w: float = 0.47
    K_f: float = 0.1188
    g: float = 9.81

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ParameterError(f"helicopter parameter {k} must be positive, got {v!r}")


def helicopter_fault_columns():
    """Fault directions for travel, pitch and elevation (in that order).

    Each column acts on an angle and its rate, ``e_i + e_{i+3}``.
    """
    E = np.zeros((6, 3))
    for col, angle in enumerate((2, 1, 0)):
        E[angle, col] = 1.0
        E[angle + 3, col] = 1.0
    return E


def build_helicopter_model(params=None, E_f=None, E_d=None, name="helicopter"):
    """Linearised helicopter about hover.

    States are ``[elevation, pitch, travel, elevation rate, pitch rate,
    travel rate]``; inputs are the two motor voltages; the three angles are
    measured. ``E_f`` defaults to the input matrix.
    """
    p = HelicopterParams() if params is None else params
    den_a = 2 * p.m_f * p.L_a**2 + 2 * p.m_f * p.L_h**2 + p.m_w * p.L_m**2
    den_b = p.m_w * p.L_w**2 + 2 * p.m_f * p.L_a**2
    den_p = 2 * p.m_f * p.L_h
    for label, d in (("travel", den_a), ("elevation", den_b), ("pitch", den_p)):
        if not d > 0:
            raise ParameterError(f"zero denominator in the {label} row")
    A = np.zeros((6, 6))
    A[0, 3] = A[1, 4] = A[2, 5] = 1.0
    A[5, 1] = (2 * p.m_f * p.L_a - p.m_w * p.L_m) * p.g / den_a
    B = np.zeros((6, 2))
    B[3, :] = p.L_a * p.K_f / den_b
    B[4, 0] = p.K_f / den_p
    B[4, 1] = -p.K_f / den_p
    C = np.hstack([np.eye(3), np.zeros((3, 3))])
    E_f = B.copy() if E_f is None else E_f
    return LtiModel(A, B, C, E_f, E_d, name=name)


def hover_input(params=None):
    """Per-motor voltage that balances gravity about the elevation axis."""
    p = HelicopterParams() if params is None else params
    v = (2 * p.m_f * p.L_a - p.m_w * p.L_w) * p.g / (2 * p.K_f * p.L_a)
    return np.array([v, v])


def lqr_gain(model, Q_lqr, R_lqr):
    A, B = model.A, model.B
    Q = as_matrix(Q_lqr, "Q_lqr")
    R = as_matrix(R_lqr, "R_lqr")
    P = solve_care(A, B, Q, R)
    K = np.linalg.solve(R, B.T @ P)
    if not eig(A - B @ K).is_hurwitz:
        raise NoSolutionError("LQR closed loop is not Hurwitz")
    return K


# scenarios ------------------------------------------------------------------

@dataclass(frozen=True)
class FaultSegment:
    t_start: float
    t_end: float
    f: tuple = ()
    f_d: tuple = ()


@dataclass(frozen=True)
class ActuatorChange:
    t_start: float
    X: np.ndarray


@dataclass(frozen=True)
class FaultScenario:
    """Step fault segments plus a piecewise-constant actuator matrix schedule."""

    duration: float
    segments: tuple = ()
    actuator_schedule: tuple = ()
    name: str = "scenario"

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration > 0):
            raise ScenarioError(f"duration must be positive, got {self.duration}")
        segs = sorted(self.segments, key=lambda s: s.t_start)
        for i, s in enumerate(segs):
            if not (0 <= s.t_start < s.t_end <= self.duration):
                raise ScenarioError(
                    f"segment {i} [{s.t_start}, {s.t_end}] lies outside [0, {self.duration}]")
            if i and s.t_start < segs[i - 1].t_end:
                raise ScenarioError(
                    f"segment [{s.t_start}, {s.t_end}] overlaps "
                    f"[{segs[i - 1].t_start}, {segs[i - 1].t_end}]")
        sched = sorted(self.actuator_schedule, key=lambda c: c.t_start)
        for c in sched:
            if not 0 <= c.t_start <= self.duration:
                raise ScenarioError(f"actuator change at {c.t_start} lies outside the run")
        object.__setattr__(self, "segments", tuple(segs))
        object.__setattr__(self, "actuator_schedule", tuple(sched))

    def onsets(self):
        return [s.t_start for s in self.segments]

    def fault_at(self, t, n_f, n_d):
        f, fd = np.zeros(n_f), np.zeros(n_d)
        for s in self.segments:
            if s.t_start <= t < s.t_end:
                if len(s.f):
                    f = _vector(s.f, n_f, "f")
                if len(s.f_d):
                    fd = _vector(s.f_d, n_d, "f_d")
        return f, fd

    def actuator_at(self, t, m):
        X = np.eye(m)
        for c in self.actuator_schedule:
            if c.t_start <= t:
                X = as_matrix(c.X, "X")
        if X.shape != (m, m):
            raise DimensionError(f"actuator matrix must be {m}x{m}")
        return X

    def max_fault_norm(self):
        vals = [float(np.linalg.norm(np.concatenate([np.ravel(s.f), np.ravel(s.f_d)])))
                for s in self.segments]
        return max(vals, default=0.0)


def _vector(v, size, name):
    v = np.asarray(v, float).ravel()
    if v.shape != (size,):
        raise ScenarioError(f"{name} must have length {size}, got {v.shape[0]}")
    return v


def load_yaml(source):
    """Read a YAML mapping from a path, a text stream or an existing dict."""
    if isinstance(source, dict):
        return source
    try:
        if hasattr(source, "read"):
            data = yaml.safe_load(source)
        else:
            with open(source, encoding="utf-8") as fh:
                data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise InputError(f"malformed YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InputError("configuration must be a mapping")
    return data


def _check_schema(data, kind):
    ver = data.get("schema_version")
    if ver != SCHEMA_VERSION:
        raise InputError(f"unsupported schema_version {ver!r} (expected {SCHEMA_VERSION})")
    if data.get("kind", kind) != kind:
        raise InputError(f"expected a {kind} file, got kind={data.get('kind')!r}")


def scenario_from_config(source):
    """Validated :class:`FaultScenario` from a YAML file or mapping."""
    data = load_yaml(source)
    _check_schema(data, "scenario")
    unknown = set(data) - {"schema_version", "kind", "name", "duration", "segments",
                           "actuator_schedule", "description"}
    if unknown:
        raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
    try:
        segs = tuple(
            FaultSegment(float(s["t_start"]), float(s["t_end"]),
                         tuple(float(v) for v in s.get("f", ()) or ()),
                         tuple(float(v) for v in s.get("f_d", ()) or ()))
            for s in data.get("segments") or ())
        sched = tuple(ActuatorChange(float(c["t_start"]), as_matrix(c["X"], "X"))
                      for c in data.get("actuator_schedule") or ())
        duration = float(data["duration"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"malformed scenario: {exc}") from exc
    return FaultScenario(duration, segs, sched, name=str(data.get("name", "scenario")))


def model_from_config(source):
    """``(LtiModel, ClosedLoopConfig, raw mapping)`` from a model file."""
    data = load_yaml(source)
    _check_schema(data, "model")
    name = str(data.get("name", "model"))
    try:
        if "helicopter" in data:
            hp = data["helicopter"] or {}
            params = HelicopterParams(**{k: float(v) for k, v in hp.items()})
            E_f = data.get("E_f")
            E_f = helicopter_fault_columns() if E_f == "helicopter" else E_f
            model = build_helicopter_model(params, E_f, data.get("E_d"), name=name)
        else:
            params = None
            model = LtiModel(data["A"], data["B"], data["C"], data.get("E_f"),
                             data.get("E_d"), name=name)
        ctrl = data.get("controller") or {}
        u_op = ctrl.get("u_op", 0.0)
        if u_op == "hover":
            if params is None:
                raise InputError("u_op: hover needs helicopter parameters")
            u_op = hover_input(params)
        u_op = np.broadcast_to(np.asarray(u_op, float), (model.m,)).copy()
        if "K" in ctrl:
            K = as_matrix(ctrl["K"], "K")
        else:
            Q = _weight(ctrl.get("Q_lqr", 1.0), model.n)
            R = _weight(ctrl.get("R_lqr", 1.0), model.m)
            K = lqr_gain(model, Q, R)
        config = ClosedLoopConfig(K, u_op=u_op)
    except (KeyError, TypeError) as exc:
        raise InputError(f"malformed model file: missing or invalid {exc}") from exc
    return model, config, data


def _weight(spec, n):
    a = np.asarray(spec, float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1:
        return np.diag(a)
    return a


# simulation -----------------------------------------------------------------

@dataclass(frozen=True)
class ClosedLoopConfig:
    """State feedback ``u = -K x`` about the operating input ``u_op``."""

    K_ctrl: np.ndarray
    x0: np.ndarray = None
    dt: float = 1e-3
    integrator: str = "RK4"
    u_op: np.ndarray = None

    def __post_init__(self):
        if self.integrator != "RK4":
            raise InputError(f"unsupported integrator {self.integrator!r}")
        if not self.dt > 0:
            raise InputError("dt must be positive")
        object.__setattr__(self, "K_ctrl", as_matrix(self.K_ctrl, "K_ctrl"))

    def replace(self, **kw):
        d = dict(K_ctrl=self.K_ctrl, x0=self.x0, dt=self.dt, integrator=self.integrator,
                 u_op=self.u_op)
        d.update(kw)
        return ClosedLoopConfig(**d)


@dataclass
class Trace:
    """Uniformly sampled record of a closed-loop run.

    ``columns`` maps names to 2-D arrays with one row per sample. Plant
    signals are ``x``, ``dx``, ``u``, ``y``, ``f``, ``f_d``; observer signals
    are prefixed with the observer name, e.g. ``uio1.residual``.
    """

    t: np.ndarray
    dt: float
    columns: dict = field(default_factory=dict)
    observers: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, name):
        try:
            return self.columns[name]
        except KeyError:
            raise InputError(f"trace has no column {name!r}") from None

    def __contains__(self, name):
        return name in self.columns

    def to_csv(self, path=None, columns=None, stride=1):
        """CSV with a ``t`` column then ``name[i]`` columns, 17 significant digits.

        `columns` selects a subset (in the given order); `stride` keeps every
        k-th sample.
        """
        names = list(self.columns) if columns is None else list(columns)
        if int(stride) < 1:
            raise InputError("stride must be a positive integer")
        sl = slice(None, None, int(stride))
        header = ["t"]
        blocks = [self.t[sl, None]]
        for name in names:
            arr = self[name]
            header += [f"{name}[{i}]" for i in range(arr.shape[1])]
            blocks.append(arr[sl])
        data = np.hstack(blocks)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in data:
            w.writerow(["%.17g" % v for v in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_csv(cls, source, observers=None):
        text = Path(source).read_text(encoding="utf-8") if not hasattr(source, "read") else source.read()
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0][0] != "t":
            raise InputError("trace CSV must start with a 't' column")
        header = rows[0]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
        if data.size == 0:
            data = data.reshape(0, len(header))
        cols = {}
        for j, h in enumerate(header[1:], start=1):
            name = h[: h.rindex("[")]
            cols.setdefault(name, []).append(j)
        columns = {k: data[:, idx] for k, idx in cols.items()}
        t = data[:, 0]
        dt = float(t[1] - t[0]) if len(t) > 1 else 0.0
        return cls(t, dt, columns, dict(observers or {}))


def _name_observers(observers):
    if isinstance(observers, dict):
        return dict(observers)
    named, count = {}, {}
    for ob in observers:
        count[ob.kind] = count.get(ob.kind, 0) + 1
        named[f"{ob.kind}{count[ob.kind]}"] = ob
    return named


def simulate(model, config, scenario, observers=(), xhat0=None):
    """Fixed-step RK4 co-simulation of plant, controller and observers.

    The plant sees the degraded input ``X (u_op + u) - u_op`` while every
    observer receives the commanded ``u = -K x``. Faults and ``X`` are held
    constant over each step.
    """
    obs = _name_observers(observers)
    n, m, p = model.n, model.m, model.p
    dt = float(config.dt)
    steps = int(round(scenario.duration / dt))
    if abs(steps * dt - scenario.duration) > 1e-9 * max(1.0, scenario.duration):
        raise InputError("duration must be an integer multiple of dt")
    K = config.K_ctrl
    if K.shape != (m, n):
        raise DimensionError(f"K_ctrl must be {m}x{n}")
    u_op = np.zeros(m) if config.u_op is None else np.asarray(config.u_op, float)
    x0 = np.zeros(n) if config.x0 is None else np.asarray(config.x0, float)
    A, B, C = model.A, model.B, model.C

    # stacked linear part: rows for x, then each observer state
    offs, size = {}, n
    for name, ob in obs.items():
        if ob.model.n != n or ob.model.p != p or ob.model.m != m:
            raise DimensionError(f"observer {name} does not match the plant dimensions")
        offs[name] = (size, size + ob.state_dim)
        size += ob.state_dim
    obs_lin = np.zeros((size, size))
    for name, ob in obs.items():
        a, b = offs[name]
        Ao, Bu, By = ob.linear_form()
        obs_lin[a:b, a:b] = Ao
        obs_lin[a:b, :n] = -Bu @ K + By @ C
    sliders = [(offs[k], ob) for k, ob in obs.items() if isinstance(ob, SlidingModeObserver)]

    y0 = C @ x0
    w = np.zeros(size)
    w[:n] = x0
    for name, ob in obs.items():
        a, b = offs[name]
        start = None if xhat0 is None else xhat0
        w[a:b] = ob.initial_state(start, y0) if isinstance(ob, Uio) else ob.initial_state(start)

    def make_rhs(X, f, fd):
        M = obs_lin.copy()
        M[:n, :n] = A - B @ X @ K
        c = np.zeros(size)
        c[:n] = B @ (X @ u_op - u_op) + model.E_f @ f + model.E_d @ fd

        def rhs(v):
            d = M @ v + c
            if sliders:
                y = C @ v[:n]
                for (a, b), ob in sliders:
                    d[a:b] += ob.G_n @ nu_injection(ob, C @ v[a:b] - y)
            return d
        return rhs

    N = steps + 1
    W = np.empty((N, size))
    D = np.empty((N, size))
    F = np.empty((N, model.n_f))
    FD = np.empty((N, model.n_d))
    t = np.arange(N) * dt
    cache = {}
    for k in range(N):
        f, fd = scenario.fault_at(t[k], model.n_f, model.n_d)
        X = scenario.actuator_at(t[k], m)
        key = (f.tobytes(), fd.tobytes(), X.tobytes())
        rhs = cache.get(key)
        if rhs is None:
            rhs = cache[key] = make_rhs(X, f, fd)
        F[k], FD[k] = f, fd
        W[k] = w
        k1 = rhs(w)
        D[k] = k1
        if k == steps:
            break
        k2 = rhs(w + 0.5 * dt * k1)
        k3 = rhs(w + 0.5 * dt * k2)
        k4 = rhs(w + dt * k3)
        w = w + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(w)) or np.max(np.abs(w)) > 1e12:
            raise DivergenceError("simulation diverged", t[k + 1])

    xs = W[:, :n]
    ys = xs @ C.T
    cols = {
        "x": xs,
        "dx": D[:, :n],
        "u": -xs @ K.T,
        "y": ys,
        "f": F,
        "f_d": FD,
    }
    kinds = {}
    for name, ob in obs.items():
        a, b = offs[name]
        S = W[:, a:b]
        cols[f"{name}.state"] = S
        cols[f"{name}.dstate"] = D[:, a:b]
        # the linear maps accept column stacks, so evaluate all samples at once
        cols[f"{name}.xhat"] = ob.estimate(S.T, ys.T).T
        cols[f"{name}.e"] = ob.error(S.T, xs.T).T
        if isinstance(ob, SlidingModeObserver):
            cols[f"{name}.residual"] = sliding_fault_estimates(ob, S @ C.T - ys)
        else:
            cols[f"{name}.residual"] = ob.residual(S.T, ys.T).T
        kinds[name] = ob.kind
    return Trace(t, dt, cols, kinds)
