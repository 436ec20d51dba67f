"""Detector design: observer synthesis, gain bounds, thresholds and monitor sets.

A design is described by the ``design`` section of a model file::

    design:
      norm: PeakToPeak
      sigma_bar: 12.0
      detectors:
        - {name: output1, kind: output, r_th: 0.07}
        - {name: uio1, kind: uio, keep: [0], r_th: 0.04}
        - {name: sliding1, kind: sliding, fault_bound: 1.0, sigma: 1.0e-4}
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .gains import (
    DetectionThresholds,
    EllipsoidSet,
    NormKind,
    compute_detection_thresholds,
    settling_time_bound,
)
from .linalg import solve_lyapunov
from .monitor import (
    BackwardDifference,
    HighPassFilter,
    MonitorConfig,
    SlidingSpec,
    default_eps_v,
    sliding_sets,
)
from .observers import synth_output_observer, synth_sliding, synth_uio

__all__ = [
    "DetectorSpec",
    "DesignConfig",
    "Detector",
    "design_from_config",
    "build_detector",
    "synthesize",
    "monitor_for",
    "linear_detector",
    "sliding_detector",
]

KINDS = ("output", "uio", "sliding")


@dataclass(frozen=True)
class DetectorSpec:
    """Per-detector design knobs; unset values fall back to the design defaults."""

    name: str
    kind: str
    r_th: float = None
    sigma_bar: float = None
    poles: tuple = None
    keep: tuple = None
    decay_rate: float = 10.0
    sigma: float = 1e-3
    rho: float = None
    fault_bound: float = None
    t_s: float = None
    eps_V: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown observer kind {self.kind!r}; expected one of {KINDS}")
        if self.kind != "sliding" and self.r_th is None:
            raise InputError(f"detector {self.name}: r_th is required")
        if self.kind == "sliding" and self.rho is None and self.fault_bound is None:
            raise InputError(f"detector {self.name}: give rho or fault_bound")


@dataclass(frozen=True)
class DesignConfig:
    detectors: tuple
    norm_kind: NormKind = NormKind.PeakToPeak
    sigma_bar: float = 0.0
    deriv: object = field(default_factory=BackwardDifference)
    envelope: dict = field(default_factory=dict)

    def select(self, kind=None):
        if kind in (None, "all"):
            return self.detectors
        if kind not in KINDS:
            raise InputError(f"unknown observer kind {kind!r}")
        return tuple(d for d in self.detectors if d.kind == kind)


_SPEC_KEYS = {"name", "kind", "r_th", "sigma_bar", "poles", "keep", "decay_rate", "sigma",
              "rho", "fault_bound", "t_s", "eps_V"}


def _deriv_from(spec):
    if spec in (None, "BackwardDifference"):
        return BackwardDifference()
    if isinstance(spec, dict) and "HighPassFilter" in spec:
        return HighPassFilter(float(spec["HighPassFilter"]))
    if spec == "HighPassFilter":
        return HighPassFilter()
    raise InputError(f"unknown derivative estimator {spec!r}")


def design_from_config(data):
    """Parse a ``design`` mapping into a :class:`DesignConfig`."""
    if not isinstance(data, dict):
        raise InputError("design section must be a mapping")
    raw = data.get("detectors")
    if not raw:
        raise InputError("design section lists no detectors")
    specs = []
    seen = set()
    for i, d in enumerate(raw):
        if not isinstance(d, dict):
            raise InputError(f"detector #{i} must be a mapping")
        bad = set(d) - _SPEC_KEYS
        if bad:
            raise InputError(f"detector #{i}: unknown keys {sorted(bad)}")
        kw = dict(d)
        kw.setdefault("name", f"{kw.get('kind', 'detector')}{i + 1}")
        if kw["name"] in seen:
            raise InputError(f"duplicate detector name {kw['name']!r}")
        seen.add(kw["name"])
        for key in ("poles", "keep"):
            if kw.get(key) is not None:
                kw[key] = tuple(complex(v) if key == "poles" else int(v) for v in kw[key])
        for key in ("r_th", "sigma_bar", "decay_rate", "sigma", "rho", "fault_bound", "t_s", "eps_V"):
            if kw.get(key) is not None:
                kw[key] = float(kw[key])
        if "kind" not in kw:
            raise InputError(f"detector #{i}: kind is required")
        specs.append(DetectorSpec(**kw))
    try:
        norm = NormKind(data.get("norm", "PeakToPeak"))
    except ValueError as exc:
        raise InputError(f"unknown norm pairing {data.get('norm')!r}") from exc
    env = {k: float(v) for k, v in (data.get("envelope") or {}).items()}
    return DesignConfig(tuple(specs), norm, float(data.get("sigma_bar", 0.0)),
                        _deriv_from(data.get("derivative")), env)


@dataclass
class Detector:
    """A synthesised observer with everything needed to monitor and certify it."""

    name: str
    kind: str
    observer: object
    P: np.ndarray = None
    thresholds: DetectionThresholds = None
    r_th: float = None
    sigma_bar: float = None
    t_s: float = None
    eps_V: float = None
    monitor: MonitorConfig = None
    sliding: SlidingSpec = None

    @property
    def E_n(self):
        return None if self.monitor is None else self.monitor.E_n

    @property
    def E_f(self):
        return None if self.monitor is None else self.monitor.E_f


def monitor_for(P, thresholds, t_s, eps_V=None, deriv=None):
    eps_V = default_eps_v(thresholds.zeta, t_s) if eps_V is None else eps_V
    return MonitorConfig(
        EllipsoidSet(P, thresholds.zeta),
        EllipsoidSet(P, thresholds.zeta_bar),
        thresholds.theta_th,
        eps_V,
        BackwardDifference() if deriv is None else deriv,
    )


def linear_detector(name, observer, r_th, sigma_bar, norm_kind=NormKind.PeakToPeak,
                    t_s=None, eps_V=None, deriv=None):
    """Thresholds and monitor sets for an output observer or UIO.

    The ellipsoid matrix solves ``A_err^T P + P A_err = -I``.
    """
    A_err = observer.A_err
    P = solve_lyapunov(A_err, np.eye(A_err.shape[0]))
    th = compute_detection_thresholds(A_err, observer.fault_input, observer.model.C, P,
                                      r_th, sigma_bar, norm_kind)
    t_s = settling_time_bound(A_err) if t_s is None else float(t_s)
    mon = monitor_for(P, th, t_s, eps_V, deriv)
    return Detector(name, observer.kind, observer, P, th, float(r_th), float(sigma_bar),
                    t_s, mon.eps_V, mon)


def sliding_detector(name, observer, fault_bound, t_s=None):
    spec = sliding_sets(observer, fault_bound, t_s=t_s)
    return Detector(name, "sliding", observer, t_s=spec.t_s, sliding=spec,
                    sigma_bar=float(fault_bound))


def build_detector(model, spec, design=None):
    """Synthesise one detector described by `spec` against `model`."""
    design = DesignConfig((spec,)) if design is None else design
    if spec.kind == "sliding":
        bound = spec.fault_bound if spec.fault_bound is not None else spec.rho / 1.5
        ob = synth_sliding(model, decay_rate=spec.decay_rate, rho=spec.rho, sigma=spec.sigma,
                           max_fault_norm=bound)
        return sliding_detector(spec.name, ob, bound, spec.t_s)
    if spec.kind == "uio":
        m = model.with_fault_split(spec.keep) if spec.keep is not None else model
        ob = synth_uio(m, spec.poles)
    else:
        ob = synth_output_observer(model, spec.poles)
    sigma_bar = design.sigma_bar if spec.sigma_bar is None else spec.sigma_bar
    if not math.isfinite(sigma_bar) or sigma_bar < 0:
        raise InputError("sigma_bar must be finite and nonnegative")
    return linear_detector(spec.name, ob, spec.r_th, sigma_bar, design.norm_kind,
                           spec.t_s, spec.eps_V, design.deriv)


def synthesize(model, design, kind=None):
    """All detectors of `kind` (default: every kind) in design order."""
    specs = design.select(kind)
    if not specs:
        raise InputError(f"design has no detectors of kind {kind!r}")
    return [build_detector(model, s, design) for s in specs]
