"""Shared builders for randomized test systems."""

import functools

import numpy as np

from fdbench.design import build_detector, design_from_config
from fdbench.cli import resolve_config
from fdbench.plant import model_from_config


def rng_for(seed):
    return np.random.default_rng(seed)


def random_stable(rng, n, margin=0.2):
    """Random dense matrix shifted so every eigenvalue has real part <= -margin."""
    A = rng.standard_normal((n, n))
    shift = max(0.0, np.max(np.linalg.eigvals(A).real)) + margin + rng.uniform(0, 1)
    return A - shift * np.eye(n)


def random_system(rng, n=None, q=None, p=None):
    """Stable ``(A, E, C, P)`` of order <= 6 with a random positive definite metric."""
    n = n or int(rng.integers(1, 7))
    q = q or int(rng.integers(1, 4))
    p = p or int(rng.integers(1, 4))
    A = random_stable(rng, n)
    E = rng.standard_normal((n, q))
    C = rng.standard_normal((p, n))
    M = rng.standard_normal((n, n))
    P = M @ M.T + 0.5 * np.eye(n)
    return A, E, C, P


def placeable_pair(rng, n, p):
    """Observable pair built as ``A = A_cl + L0 C`` with a well-conditioned ``A_cl``.

    A gain with the spectrum of ``A_cl`` is known to exist and its closed-loop
    eigenvectors are well conditioned, so a 1e-6 match is attainable in binary64.
    """
    T = np.linalg.qr(rng.standard_normal((n, n)))[0] @ np.diag(rng.uniform(0.5, 2.0, n))
    poles = -rng.uniform(0.5, 8.0, n)
    A_cl = T @ np.diag(poles) @ np.linalg.inv(T)
    C = rng.standard_normal((p, n))
    A = A_cl + rng.standard_normal((n, p)) @ C
    return A, C, poles


@functools.lru_cache(maxsize=None)
def helicopter():
    """(model, closed-loop config, raw yaml) of the bundled helicopter."""
    return model_from_config(resolve_config("helicopter"))


@functools.lru_cache(maxsize=None)
def helicopter_detectors():
    model, _, raw = helicopter()
    design = design_from_config(raw["design"])
    return tuple(build_detector(model, s, design) for s in design.detectors)


def detector(name):
    return next(d for d in helicopter_detectors() if d.name == name)


def random_uio_model(rng, attempts=50):
    """Stable random model with a decoupling-feasible E_d and a working UIO design."""
    from fdbench.errors import SynthesisError
    from fdbench.observers import LtiModel, synth_uio

    for _ in range(attempts):
        n = int(rng.integers(3, 6))
        p = int(rng.integers(2, min(n, 3) + 1))
        n_d = int(rng.integers(1, p))
        A = random_stable(rng, n, margin=0.5)
        B = rng.standard_normal((n, 1))
        C = rng.standard_normal((p, n))
        E_f = rng.standard_normal((n, 1))
        E_d = rng.standard_normal((n, n_d))
        try:
            model = LtiModel(A, B, C, E_f, E_d, name="random")
            return model, synth_uio(model)
        except (SynthesisError, ValueError):
            continue
    raise RuntimeError("no UIO-feasible model found")


def piecewise_scenario(rng, duration, pieces, n_f, n_d, f_scale=0.0, fd_scale=1.0):
    """Back-to-back constant segments with random fault values."""
    from fdbench.plant import FaultScenario, FaultSegment

    edges = np.linspace(0.0, duration, pieces + 1)
    segs = []
    for a, b in zip(edges[:-1], edges[1:]):
        segs.append(FaultSegment(float(a), float(b),
                                 tuple(f_scale * rng.standard_normal(n_f)),
                                 tuple(fd_scale * rng.standard_normal(n_d))))
    return FaultScenario(duration, tuple(segs), name="random")


@functools.lru_cache(maxsize=None)
def scenario(name):
    from fdbench.plant import scenario_from_config

    return scenario_from_config(resolve_config(name))


@functools.lru_cache(maxsize=None)
def experiment_trace(name):
    """Closed-loop run of a bundled scenario with every shipped detector attached."""
    from fdbench.plant import simulate

    model, cl, _ = helicopter()
    dets = helicopter_detectors()
    return simulate(model, cl, scenario(name), {d.name: d.observer for d in dets})


@functools.lru_cache(maxsize=None)
def shipped_certificate_texts():
    """Serialized certificates of every bundled detector, keyed by name."""
    from fdbench.certificate import certificate_from_detector, serialize_certificate

    model, _, raw = helicopter()
    envelope = design_from_config(raw["design"]).envelope
    return {d.name: serialize_certificate(certificate_from_detector(d, model, envelope=envelope))
            for d in helicopter_detectors()}
