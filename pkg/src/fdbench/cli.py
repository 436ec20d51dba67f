"""Command-line entry point: ``fdbench synth|simulate|verify|annotate|report``.

Exit codes: 0 success, 1 a check or synthesis failed, 2 unusable input
(bad arguments, unreadable or malformed files).
"""

import argparse
import json
import os
import sys
import tempfile
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import emit_annotations, render_blocks
from .certificate import (
    certificate_from_detector,
    load_certificate,
    serialize_certificate,
    verify_certificate,
)
from .design import design_from_config, synthesize
from .errors import (
    CertificateParseError,
    DimensionError,
    FdError,
    InputError,
    ParameterError,
    ScenarioError,
    UnverifiedCertificateError,
)
from .monitor import classify, sliding_check
from .plant import model_from_config, scenario_from_config, simulate

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
_INPUT_ERRORS = (InputError, DimensionError, ParameterError, ScenarioError,
                 CertificateParseError, OSError)


def resolve_config(path):
    """A file path, or the name of a bundled config such as ``helicopter``."""
    p = Path(path)
    if p.exists():
        return p
    bundled = files("fdbench") / "data" / f"{path}.yaml"
    if bundled.is_file():
        return Path(str(bundled))
    raise InputError(f"no such file: {path}")


def write_atomic(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out, command, args, configs):
    manifest = {
        "command": command,
        "configs": {k: str(v) for k, v in configs.items()},
        "out": str(out),
        "seed": args.seed,
        "dt": args.dt,
        "observer": getattr(args, "observer", None),
        "tool_version": __version__,
    }
    write_atomic(Path(out) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_design(model_path):
    model, cl, raw = model_from_config(model_path)
    if "design" not in raw:
        raise InputError(f"{model_path}: model file has no design section")
    return model, cl, design_from_config(raw["design"])


# commands -------------------------------------------------------------------

def cmd_synth(args):
    model_path = resolve_config(args.model)
    out = Path(args.out)
    write_manifest(out, "synth", args, {"model": model_path})
    model, _, design = _load_design(model_path)
    dets = synthesize(model, design, args.observer)
    for d in dets:
        cert = certificate_from_detector(d, model, envelope=design.envelope)
        write_atomic(out / f"{d.name}.fdcert", serialize_certificate(cert))
        spec = np.linalg.eigvals(d.observer.A_err)
        spec = sorted(spec, key=lambda z: (z.real, z.imag))
        print(f"OBSERVER {d.name} kind={d.kind} spectrum=[{', '.join(f'{z:.6g}' for z in spec)}]")
        if d.thresholds is not None:
            th = d.thresholds
            print(f"THRESHOLDS {d.name} r_th={d.r_th:.6g} f_max={th.f_max:.6g} zeta={th.zeta:.6g} "
                  f"zeta_bar={th.zeta_bar:.6g} theta_th={th.theta_th:.6g} t_s={d.t_s:.6g}")
        else:
            sp = d.sliding
            print(f"THRESHOLDS {d.name} alpha={sp.E_s.level:.6g} beta={sp.E_e.level:.6g} t_s={sp.t_s:.6g}")
        print(f"WROTE {out / (d.name + '.fdcert')}")
    return EXIT_OK


def _segments(scenario):
    segs = [(s.t_start, s.t_end) for s in scenario.segments]
    segs += [(c.t_start, scenario.duration) for c in scenario.actuator_schedule]
    return sorted(segs)


def simulation_report(model_name, scenario, trace, dets, verdicts, sliding):
    lines = [f"RUN model={model_name} scenario={scenario.name} dt={trace.dt:g} samples={len(trace)}"]
    segs = _segments(scenario)
    for d in dets:
        if d.thresholds is None:
            continue
        r = np.linalg.norm(trace[f"{d.name}.residual"], axis=1)
        for k, (a, b) in enumerate(segs, 1):
            mask = (trace.t >= a) & (trace.t < b)
            hit = np.flatnonzero(mask & (r > d.r_th))
            lat = f"{trace.t[hit[0]] - a:.6g}" if hit.size else "none"
            lines.append(f"LATENCY {d.name} segment={k} onset={a:g} latency={lat}")
    for name, v in verdicts.items():
        tally = v.tally()
        lines.append(f"TALLY {name} " + " ".join(f"{k}={n}" for k, n in tally.items()))
        lines.append(f"FINAL {name} mode={v[len(v) - 1].mode.value}")
    for name, rep in sliding.items():
        lines.append(f"SLIDING {name} E_e_invariant={str(rep.E_e_invariant).lower()} "
                     f"E_s_invariant_after_ts={str(rep.E_s_invariant_after_ts).lower()} "
                     f"first_entry={rep.first_entry_time:.6g} nu_max_ratio={rep.nu_max_ratio:.6g}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args):
    model_path = resolve_config(args.model)
    scen_path = resolve_config(args.scenario)
    out = Path(args.out)
    write_manifest(out, "simulate", args, {"model": model_path, "scenario": scen_path})
    model, cl, design = _load_design(model_path)
    scenario = scenario_from_config(scen_path)
    if args.dt is not None:
        cl = cl.replace(dt=args.dt)
    if args.seed is not None:
        rng = np.random.default_rng(args.seed)
        cl = cl.replace(x0=rng.normal(scale=0.01, size=model.n))
    dets = synthesize(model, design, args.observer)
    trace = simulate(model, cl, scenario, {d.name: d.observer for d in dets})
    verdicts, sliding = {}, {}
    for d in dets:
        if d.monitor is not None:
            verdicts[d.name] = classify(trace, d.name, d.observer, d.monitor)
        else:
            sliding[d.name] = sliding_check(trace, d.name, d.observer, d.sliding)
    cols = ["x", "u", "y", "f", "f_d"]
    for d in dets:
        cols += [f"{d.name}.residual", f"{d.name}.e"]
    write_atomic(out / "trace.csv", trace.to_csv(columns=cols, stride=args.stride))
    for name, v in verdicts.items():
        write_atomic(out / f"verdicts_{name}.csv", v.to_csv(stride=args.stride))
    report = simulation_report(model.name, scenario, trace, dets, verdicts, sliding)
    write_atomic(out / "report.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_verify(args):
    model_path = resolve_config(args.model)
    if args.out:
        write_manifest(args.out, "verify", args, {"model": model_path, "certificate": args.certificate})
    model, _, _ = model_from_config(model_path)
    cert = load_certificate(args.certificate)
    rep = verify_certificate(cert, model)
    text = rep.text()
    sys.stdout.write(text)
    if args.out:
        write_atomic(Path(args.out) / "verify.txt", text)
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_annotate(args):
    model_path = resolve_config(args.model)
    out = Path(args.out)
    write_manifest(out, "annotate", args, {"model": model_path, "certificate": args.certificate})
    model, _, _ = model_from_config(model_path)
    cert = load_certificate(args.certificate)
    try:
        blocks = emit_annotations(cert, model)
    except UnverifiedCertificateError as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_FAIL
    target = out / f"{cert.name}.annot.c"
    write_atomic(target, render_blocks(blocks))
    print(f"WROTE {target} blocks={len(blocks)}")
    return EXIT_OK


def cmd_report(args):
    """Summarise an existing simulate output directory."""
    run = Path(args.run)
    rep = run / "report.txt"
    if not rep.is_file():
        raise InputError(f"{run} has no report.txt")
    sys.stdout.write(rep.read_text(encoding="utf-8"))
    for vf in sorted(run.glob("verdicts_*.csv")):
        modes = {}
        with open(vf, encoding="utf-8") as fh:
            next(fh)
            for ln in fh:
                m = ln.split(",", 2)[1]
                modes[m] = modes.get(m, 0) + 1
        total = sum(modes.values()) or 1
        share = " ".join(f"{k}={v / total:.4f}" for k, v in sorted(modes.items()))
        print(f"SHARE {vf.stem[len('verdicts_'):]} {share}")
    return EXIT_OK


# argument parsing -----------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="fdbench", allow_abbrev=False,
                                 description="Observer-based fault detection toolkit.")
    ap.add_argument("--version", action="version", version=f"fdbench {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--model", required=True, help="model file or bundled name")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed for random initial state")
        p.add_argument("--dt", type=float, default=None, help="integration step in seconds")

    p = sub.add_parser("synth", allow_abbrev=False, help="design observers and write certificates")
    common(p)
    p.add_argument("--observer", choices=["output", "uio", "sliding", "all"], default="all")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("simulate", allow_abbrev=False, help="run a scenario and classify every step")
    common(p)
    p.add_argument("--scenario", required=True, help="scenario file or bundled name")
    p.add_argument("--observer", choices=["output", "uio", "sliding", "all"], default="all")
    p.add_argument("--stride", type=int, default=10, help="keep every k-th sample in CSV output")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", allow_abbrev=False, help="re-check a certificate against a model")
    p.add_argument("certificate")
    common(p, out_required=False)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("annotate", allow_abbrev=False, help="emit contract annotations")
    p.add_argument("certificate")
    common(p)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("report", allow_abbrev=False, help="summarise a simulate output directory")
    p.add_argument("run")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else EXIT_OK
    if getattr(args, "stride", 1) < 1:
        print("ERROR: --stride must be positive", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "dt", None) is not None and not args.dt > 0:
        print("ERROR: --dt must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except _INPUT_ERRORS as exc:
        print(f"ERROR: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FdError as exc:
        print(f"ERROR: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


def run():  # pragma: no cover
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    run()
