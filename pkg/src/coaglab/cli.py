"""Command-line interface: ``coaglab run | ssa | diagnose | compare-profile | validate-kernel``.

Every command reads a strict JSON configuration (``version`` 1, unknown fields
rejected) and writes a self-describing output directory whose ``manifest.json``
holds the configuration, its hash, the kernel hash, the tool version and git
blob hashes of every file written.  Exit codes: 0 success, 2 configuration
error, 3 solver abort, 4 missing or corrupt snapshot, 5 insufficient window
mass, 6 kernel bound violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from ._fs import atomic_write_text, file_blob_hash
from .diagnostics import (
    SimplexBinning,
    angular_measure,
    delta_schedule,
    dispersion,
    dispersion_decay_report,
    localized_mass_fraction,
    moment_scaling_fit,
    rescale,
    theta0 as theta0_of,
)
from .errors import (
    CoagError,
    ConfigError,
    DomainError,
    KernelBoundViolation,
    SnapshotError,
    SolverAbort,
)
from .kernel import Constant, KernelSpec, RayConstant, check_all, default_samples
from .lattice import LatticeState, dump_snapshot, init_monomer_mix, load_snapshot, mass_vector, moment
from .selfsimilar import (
    compare_profile,
    explicit_profile,
    extract_profile,
    require_window_mass,
    save_profile,
    state_from_profile,
)
from .solver import SolverConfig, Trajectory, run
from .stochastic import counts_from_state, ensemble_stats, ssa_run

log = logging.getLogger("coaglab")

CONFIG_VERSION = 1
THREADS_ENV = "COAGLAB_THREADS"

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_times = {"type": "array", "items": {"type": "number", "minimum": 0}}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "d", "kernel"],
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "d": {"type": "integer", "minimum": 1},
        "kernel": {"type": "object", "required": ["family"]},
        "initial": {
            "oneOf": [
                {"type": "object", "additionalProperties": False, "required": ["type", "weights"],
                 "properties": {"type": {"const": "monomer_mix"},
                                "weights": {"type": "array", "items": _num}}},
                {"type": "object", "additionalProperties": False, "required": ["type", "entries"],
                 "properties": {"type": {"const": "compositions"},
                                "entries": {"type": "array", "items": {
                                    "type": "object", "additionalProperties": False,
                                    "required": ["alpha", "n"],
                                    "properties": {"alpha": {"type": "array", "items": {"type": "integer"}},
                                                   "n": _num}}}}},
                {"type": "object", "additionalProperties": False, "required": ["type", "theta0", "m0"],
                 "properties": {"type": {"const": "explicit_profile"},
                                "theta0": {"type": "array", "items": _num},
                                "m0": _pos, "q": _pos}},
            ]
        },
        "n_max": {"type": "integer", "minimum": 1},
        "moment_r": _num,
        "solver": {
            "type": "object", "additionalProperties": False, "required": ["t_end"],
            "properties": {"t_end": _pos, "rel_tol": _pos, "abs_tol": _pos, "dt_init": _pos,
                           "dt_max": {"type": ["number", "null"]},
                           "snapshot_times": {"type": ["array", "null"], "items": {"type": "number"}},
                           "method": {"type": "string"}, "escape_abort_fraction": _pos,
                           "conservation_tol": _pos, "backend": {"enum": ["auto", "dense", "sparse"]},
                           "max_steps": {"type": "integer", "minimum": 1}},
        },
        "diagnostics": {
            "type": "object", "additionalProperties": False,
            "properties": {"enabled": {"type": "boolean"},
                           "M": {"type": ["number", "null"], "exclusiveMinimum": 1},
                           "resolution": {"type": ["integer", "null"], "minimum": 1},
                           "deltas": {"type": "array", "items": _pos},
                           "delta_targets": {"type": "array", "items": {"type": "number", "minimum": 0,
                                                                        "exclusiveMaximum": 1}},
                           "moment_k": {"type": "array", "items": _num},
                           "moment_window": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2},
                           "t_min": _num,
                           "profile": {"type": "object", "additionalProperties": False,
                                       "properties": {"delta": _pos, "t": _pos, "q": _pos,
                                                      "sizes_per_bin": {"type": "integer", "minimum": 1}}}},
        },
        "ssa": {
            "type": "object", "additionalProperties": False, "required": ["N", "V", "seeds", "t_end"],
            "properties": {"N": {"type": "integer", "minimum": 1}, "V": _pos,
                           "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                           "t_end": _pos, "record_times": _times},
        },
        "output": {
            "type": "object", "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "csv_mirror": {"type": "boolean"}},
        },
    },
}

DIAGNOSTIC_DEFAULTS = {"enabled": True, "M": None, "resolution": None, "deltas": [0.2],
                       "delta_targets": [0.9], "moment_k": [0, 1, 2], "moment_window": None,
                       "t_min": 1.0, "profile": None}


# ------------------------------------------------------------------- config


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats by None so the output stays strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=1, default=_json_default, allow_nan=False) + "\n"


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration is not valid JSON: {exc}") from exc
    return validate_config(cfg)


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"configuration error at {where}: {exc.message}") from exc
    return cfg


def build_kernel(cfg):
    return KernelSpec.from_dict(cfg["kernel"], cfg["d"]).validate(cfg["d"])


def _q_at(kernel, theta0, override=None):
    if override is not None:
        return float(override)
    fam = kernel.family
    if isinstance(fam, RayConstant):
        return float(fam.q(np.asarray(theta0, float)))
    if isinstance(fam, Constant):
        return float(fam.value)
    raise ConfigError("the explicit profile needs a kernel constant on rays (or an explicit q)")


def build_initial(cfg, kernel):
    d = cfg["d"]
    n_max = cfg.get("n_max", 1024)
    init = cfg.get("initial")
    if init is None:
        raise ConfigError("configuration has no initial block")
    kind = init["type"]
    if kind == "monomer_mix":
        return init_monomer_mix(d, init["weights"], n_max)
    if kind == "compositions":
        mapping = {}
        for e in init["entries"]:
            alpha = tuple(e["alpha"])
            if len(alpha) != d:
                raise ConfigError(f"composition {list(alpha)} does not have d={d} entries")
            if alpha in mapping:
                raise ConfigError(f"composition {list(alpha)} listed twice")
            mapping[alpha] = float(e["n"])
        try:
            return LatticeState.from_mapping(d, n_max, mapping)
        except DomainError as exc:
            raise ConfigError(f"invalid initial compositions: {exc}") from exc
    theta0 = np.asarray(init["theta0"], float)
    if theta0.shape != (d,) or np.any(theta0 < 0) or not math.isclose(theta0.sum(), 1.0, rel_tol=1e-12):
        raise ConfigError("explicit_profile theta0 must be a point of the simplex")
    q = _q_at(kernel, theta0, init.get("q"))
    profile = explicit_profile(theta0, q, init["m0"], d)
    return state_from_profile(profile, 0.0, kernel.gamma, n_max)


def build_solver(cfg, threads=1):
    block = dict(cfg.get("solver") or {})
    if "t_end" not in block:
        raise ConfigError("configuration has no solver.t_end")
    if block.get("snapshot_times") is not None:
        block["snapshot_times"] = tuple(block["snapshot_times"])
    return SolverConfig(threads=threads, **block)


def diagnostics_options(cfg):
    opts = dict(DIAGNOSTIC_DEFAULTS)
    opts.update(cfg.get("diagnostics") or {})
    return opts


def resolve_threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
        if value < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        return value
    return 1


# -------------------------------------------------------------- directories


class OutputDir:
    """Collects written files and their blob hashes for the manifest."""

    def __init__(self, root):
        self.root = os.fspath(root)
        self.files = {}

    def path(self, rel):
        return os.path.join(self.root, rel)

    def text(self, rel, text):
        atomic_write_text(self.path(rel), text)
        self.files[rel] = file_blob_hash(self.path(rel))

    def snapshot(self, rel, state):
        csv_path, side = dump_snapshot(state, self.path(rel))
        for p in (csv_path, side):
            r = os.path.relpath(p, self.root)
            self.files[r] = file_blob_hash(p)

    def manifest(self, payload):
        payload = dict(payload)
        payload["files"] = dict(sorted(self.files.items()))
        payload["tool"] = {"name": "coaglab", "version": __version__}
        atomic_write_text(self.path("manifest.json"), dumps(payload))


def write_trajectory(out, traj, cfg, kernel):
    names = []
    for i, s in enumerate(traj):
        rel = os.path.join("snapshots", f"snapshot_{i:04d}.csv")
        out.snapshot(rel, s)
        names.append(rel)
    prov = dict(traj.provenance)
    prov["config_hash"] = config_hash(cfg)
    mass_report = {"initial_mass": prov.get("initial_mass"), "escaped_mass": prov.get("escaped_mass"),
                   "flushed_negative_mass": prov.get("flushed_negative_mass"),
                   "mass_defect": prov.get("mass_defect"), "conservation_tol": prov.get("conservation_tol"),
                   "conservation_ok": prov.get("conservation_ok")}
    return {"kind": "trajectory", "config": cfg, "config_hash": config_hash(cfg),
            "kernel_hash": kernel.content_hash(), "snapshots": names, "times": traj.times,
            "provenance": prov, "mass_report": mass_report}


def read_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise SnapshotError(f"missing manifest {path}") from exc
    except json.JSONDecodeError as exc:
        raise SnapshotError(f"corrupt manifest {path}: {exc}") from exc


def load_trajectory(directory):
    """Trajectory and configuration stored in a ``run`` output directory."""
    manifest = read_manifest(directory)
    try:
        cfg = manifest["config"]
        names = manifest["snapshots"]
        hashes = manifest.get("files", {})
    except KeyError as exc:
        raise SnapshotError(f"manifest in {directory} lacks {exc}") from exc
    states = []
    for rel in names:
        path = os.path.join(directory, rel)
        if not os.path.exists(path):
            raise SnapshotError(f"missing snapshot file {path}")
        if rel in hashes and file_blob_hash(path) != hashes[rel]:
            raise SnapshotError(f"snapshot file {path} does not match its manifest hash")
        states.append(load_snapshot(path))
    if not states:
        raise SnapshotError(f"no snapshots listed in {directory}/manifest.json")
    return Trajectory(states, manifest.get("provenance", {})), validate_config(cfg), manifest


# -------------------------------------------------------------- diagnostics


def _record(t, name, params, value):
    return {"t": t, "tau": math.log(t + 1.0), "name": name, "params": params, "value": value}


def compute_diagnostics(traj, kernel, opts):
    """Per-snapshot records and the summary dictionary."""
    gamma = kernel.gamma
    states = list(traj)
    d = states[0].d
    th0 = theta0_of(states[0])
    binning = SimplexBinning(d, opts["resolution"])
    records = []
    for s in states:
        records.append(_record(s.time, "mass_vector", {}, mass_vector(s).tolist()))
        records.append(_record(s.time, "escaped_mass", {}, s.escaped_mass.tolist()))
        for k in opts["moment_k"]:
            records.append(_record(s.time, "moment", {"k": k}, moment(s, k).value))
        if s.time > 0:
            for delta in opts["deltas"]:
                if 0 < delta <= 1:
                    records.append(_record(s.time, "localized_mass_fraction", {"delta": delta},
                                           localized_mass_fraction(s, gamma, delta, th0)))
        if s.time >= opts["t_min"]:
            lam = angular_measure(rescale(s, gamma, binning), opts["M"])
            value = dispersion(lam) if lam.defined else None
            records.append(_record(s.time, "dispersion", {"M": lam.M, "resolution": binning.resolution},
                                   value))
    summary = {"theta0": th0.tolist(), "gamma": gamma, "M_policy": "fixed" if opts["M"] else "adaptive",
               "resolution": binning.resolution, "moment_fits": [], "delta_schedules": [],
               "notes": []}
    t_end = states[-1].time
    window = opts["moment_window"] or [max(1.0, t_end / 10.0), t_end]
    for k in opts["moment_k"]:
        try:
            summary["moment_fits"].append(moment_scaling_fit(traj, k, gamma, window).to_dict())
        except DomainError as exc:
            summary["notes"].append(f"moment fit k={k}: {exc}")
    for target in opts["delta_targets"]:
        try:
            summary["delta_schedules"].append(delta_schedule(traj, gamma, th0, target, opts["t_min"]).to_dict())
        except DomainError as exc:
            summary["notes"].append(f"delta schedule target={target}: {exc}")
    if d > 1:
        rep = dispersion_decay_report(traj, gamma, opts["M"], binning, opts["t_min"])
        summary["dispersion"] = rep.to_dict()
    prof = opts.get("profile")
    if prof:
        summary["profile"] = profile_report(traj, kernel, prof)[0]
    return records, summary


def profile_report(traj, kernel, prof):
    states = list(traj)
    th0 = theta0_of(states[0])
    target = prof.get("t", states[-1].time)
    try:
        state = traj.at(target)
    except KeyError as exc:
        raise SnapshotError(f"no snapshot at t={target}") from exc
    m0 = float(np.sum(traj.initial_mass))
    extracted = extract_profile(state, kernel.gamma, prof.get("delta", 0.2), th0, m0=m0,
                                sizes_per_bin=prof.get("sizes_per_bin"), kernel_hash=kernel.content_hash())
    q = _q_at(kernel, th0, prof.get("q"))
    report = compare_profile(extracted, q, m0).to_dict()
    report.update({"theta0": th0.tolist(), "q_theta0": q, "m0": m0})
    return report, extracted


def write_diagnostics(out, records, summary, csv_mirror=False):
    out.text("diagnostics.jsonl", "".join(json.dumps(_clean(r), sort_keys=True) + "\n" for r in records))
    out.text("summary.json", dumps(summary))
    if csv_mirror:
        lines = ["t,tau,name,params,value"]
        for r in records:
            value = r["value"]
            if isinstance(value, list):
                value = " ".join(repr(v) for v in value)
            params = json.dumps(r["params"], sort_keys=True).replace(",", ";")
            lines.append(f"{r['t']!r},{r['tau']!r},{r['name']},{params},{value}")
        out.text("diagnostics.csv", "\n".join(lines) + "\n")


# ---------------------------------------------------------------- commands


def _out_dir(args, cfg, fallback):
    if args.out:
        return args.out
    return (cfg.get("output") or {}).get("dir") or fallback


def cmd_run(args):
    cfg = load_config(_require(args.config, "--config"))
    kernel = build_kernel(cfg)
    kernel.params.require_no_gelation()
    initial = build_initial(cfg, kernel)
    solver = build_solver(cfg, resolve_threads(args.threads))
    out = OutputDir(_out_dir(args, cfg, "coaglab_run"))
    out.text("config.json", dumps(cfg))
    try:
        traj = run(initial, kernel, solver, config_hash(cfg))
    except SolverAbort as exc:
        if exc.trajectory is not None:
            payload = write_trajectory(out, exc.trajectory, cfg, kernel)
            payload["error"] = str(exc)
            out.manifest(payload)
        raise
    payload = write_trajectory(out, traj, cfg, kernel)
    opts = diagnostics_options(cfg)
    if opts["enabled"]:
        records, summary = compute_diagnostics(traj, kernel, opts)
        write_diagnostics(out, records, summary, (cfg.get("output") or {}).get("csv_mirror", False))
    out.manifest(payload)
    log.info("run finished: %d snapshots in %s", len(traj), out.root)
    return 0


def cmd_ssa(args):
    cfg = load_config(_require(args.config, "--config"))
    if "ssa" not in cfg:
        raise ConfigError("configuration has no ssa block")
    kernel = build_kernel(cfg)
    kernel.params.require_no_gelation()
    block = cfg["ssa"]
    initial = build_initial(cfg, kernel)
    counts = counts_from_state(initial, block["N"])
    record = block.get("record_times") or [0.0, block["t_end"]]
    out = OutputDir(_out_dir(args, cfg, "coaglab_ssa"))
    out.text("config.json", dumps(cfg))
    runs = []
    per_run = {}
    for seed in block["seeds"]:
        res = ssa_run(counts, block["V"], kernel, seed, block["t_end"], record)
        runs.append(res)
        sub = f"seed_{seed:06d}"
        for i, s in enumerate(res.states):
            out.snapshot(os.path.join(sub, f"snapshot_{i:04d}.csv"), s)
        info = {"seed": seed, "events": res.events, "initial_count": res.initial_count,
                "final_count": res.final_count, "extinct": res.extinct,
                "extinction_time": res.extinction_time, "mass_counts": res.mass_counts}
        out.text(os.path.join(sub, "run.json"), dumps(info))
        per_run[str(seed)] = {rel: h for rel, h in out.files.items() if rel.startswith(sub + os.sep)}
    stats = []
    if len(runs) >= 2:
        for i, t in enumerate(sorted(float(x) for x in record)):
            es = ensemble_stats([r.states[i] for r in runs])
            rel = os.path.join("stats", f"ensemble_{i:04d}.csv")
            lines = [",".join([f"alpha_{j + 1}" for j in range(cfg["d"])] + ["mean", "stderr"])]
            for a, m, e in zip(es.alphas.tolist(), es.mean.tolist(), es.stderr.tolist()):
                lines.append(",".join([str(v) for v in a] + [repr(m), repr(e)]))
            out.text(rel, "\n".join(lines) + "\n")
            stats.append({"time": t, "file": rel, "runs": es.runs})
    out.manifest({"kind": "ssa_ensemble", "config": cfg, "config_hash": config_hash(cfg),
                  "kernel_hash": kernel.content_hash(), "seeds": block["seeds"],
                  "rng": "numpy PCG64 seeded with SeedSequence(seed)", "runs": per_run, "stats": stats})
    return 0


def _diag_overrides(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"diagnostics configuration not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"diagnostics configuration is not valid JSON: {exc}") from exc
    data = data.get("diagnostics", data)
    validate_config({"version": CONFIG_VERSION, "d": 1, "kernel": {"family": "constant"}, "diagnostics": data})
    return data


def cmd_diagnose(args):
    traj, cfg, _ = load_trajectory(args.trajectory_dir)
    kernel = build_kernel(cfg)
    opts = diagnostics_options(cfg)
    opts.update(_diag_overrides(args.config))
    records, summary = compute_diagnostics(traj, kernel, opts)
    out = OutputDir(args.out or os.path.join(args.trajectory_dir, "diagnose"))
    write_diagnostics(out, records, summary, (cfg.get("output") or {}).get("csv_mirror", False))
    out.manifest({"kind": "diagnostics", "source": os.path.abspath(args.trajectory_dir),
                  "config_hash": config_hash(cfg), "options": opts})
    return 0


def cmd_compare_profile(args):
    traj, cfg, _ = load_trajectory(args.trajectory_dir)
    kernel = build_kernel(cfg)
    prof = {"delta": args.delta}
    if args.t is not None:
        prof["t"] = args.t
    if args.q is not None:
        prof["q"] = args.q
    if args.sizes_per_bin is not None:
        prof["sizes_per_bin"] = args.sizes_per_bin
    report, extracted = profile_report(traj, kernel, prof)
    out = OutputDir(args.out or os.path.join(args.trajectory_dir, "profile"))
    out.text("comparison.json", dumps(report))
    csv_path, side = save_profile(extracted, out.path("extracted_profile.csv"))
    for p in (csv_path, side):
        out.files[os.path.relpath(p, out.root)] = file_blob_hash(p)
    out.manifest({"kind": "profile_comparison", "source": os.path.abspath(args.trajectory_dir),
                  "config_hash": config_hash(cfg)})
    print(dumps(report), end="")
    require_window_mass(extracted)
    return 0


def cmd_validate_kernel(args):
    cfg = load_config(_require(args.config, "--config"))
    d = cfg["d"]
    try:
        kernel = build_kernel(cfg)
    except ConfigError as exc:
        raise KernelBoundViolation(f"kernel fails validation: {exc}") from exc
    sizes = 2.0 ** np.arange(args.max_exponent + 1)
    reports = check_all(kernel, d, default_samples(d, sizes, args.directions))
    report = {"kernel": kernel.to_dict(), "kernel_hash": kernel.content_hash(), "d": d,
              "samples": {"max_exponent": args.max_exponent, "directions": args.directions},
              "checks": [r.to_dict() for r in reports], "pass": all(r.passed for r in reports)}
    text = dumps(report)
    if args.out:
        out = OutputDir(args.out)
        out.text("kernel_report.json", text)
        out.manifest({"kind": "kernel_validation", "config_hash": config_hash(cfg)})
    print(text, end="")
    failed = [r for r in reports if not r.passed]
    if failed:
        first = failed[0]
        raise KernelBoundViolation(f"kernel check '{first.name}' failed at sample {first.failing_sample}")
    return 0


def _require(value, flag):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


# ------------------------------------------------------------------ parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker threads for the pair sum (overrides ${THREADS_ENV})")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(prog="coaglab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"coaglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="integrate the deterministic system")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("ssa", parents=[common], help="stochastic particle ensemble")
    p.set_defaults(func=cmd_ssa)
    p = sub.add_parser("diagnose", parents=[common], help="recompute diagnostics from a trajectory directory")
    p.add_argument("trajectory_dir")
    p.set_defaults(func=cmd_diagnose)
    p = sub.add_parser("compare-profile", parents=[common], help="compare a late snapshot with the explicit profile")
    p.add_argument("trajectory_dir")
    p.add_argument("--t", type=float, default=None, help="snapshot time (default: last)")
    p.add_argument("--delta", type=float, default=0.2, help="direction window (1-norm)")
    p.add_argument("--q", type=float, default=None, help="override Q(theta0)")
    p.add_argument("--sizes-per-bin", type=int, default=None)
    p.set_defaults(func=cmd_compare_profile)
    p = sub.add_parser("validate-kernel", parents=[common], help="run the kernel bound checks")
    p.add_argument("--max-exponent", type=int, default=16, help="sample sizes 2^0 .. 2^k")
    p.add_argument("--directions", type=int, default=9, help="barycentric grid denominator")
    p.set_defaults(func=cmd_validate_kernel)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CoagError as exc:
        print(f"coaglab {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
