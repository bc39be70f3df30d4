"""Acceptance criteria 1-10, run at their stated tolerances.

Each test records one PASS/FAIL line (printed in the terminal summary).
Criteria 3 and 4 cannot be met by the exact solution of the constant-kernel
system at the stated tolerances; they run in full, report FAIL and are marked
as strict expected failures so an unexpected pass is flagged.
"""

from __future__ import annotations

import csv
import json
import os
import shutil
import time

import numpy as np
import pytest

from coaglab.cli import load_trajectory, main
from coaglab.diagnostics import (
    delta_schedule,
    dispersion_decay_report,
    localized_mass_fraction,
    moment_scaling_fit,
    theta0,
)
from coaglab.kernel import KernelParams, KernelSpec, Product, QForm, check_all
from coaglab.lattice import LatticeState, init_monomer_mix, mass_vector, moment
from coaglab.selfsimilar import (
    compare_profile,
    default_battery,
    explicit_profile,
    extract_profile,
    residual_weak_selfsimilar,
    scaling_family_check,
    state_from_profile,
)
from coaglab.solver import SolverConfig, run

C1_TIMES = [0.0] + [10 ** (k / 10) for k in range(-20, 21)]
C1_CONFIG = {
    "version": 1, "d": 2, "kernel": {"family": "constant", "value": 1.0},
    "initial": {"type": "monomer_mix", "weights": [0.7, 0.3]}, "n_max": 1024,
    "solver": {"t_end": 100, "rel_tol": 1e-9, "snapshot_times": C1_TIMES},
    "diagnostics": {"moment_window": [10, 100], "deltas": [0.2], "delta_targets": [0.9]},
}
C6_CONFIG = {
    "version": 1, "d": 2, "kernel": {"family": "constant", "value": 1.0},
    "initial": {"type": "monomer_mix", "weights": [0.7, 0.3]},
    "ssa": {"N": 10_000, "V": 10_000, "seeds": [1, 2, 3, 4, 5, 6, 7, 8], "t_end": 1, "record_times": [1]},
}
Q_LIN = QForm(1.0, (1.0, 0.0), ((0.0, 0.0), (0.0, 0.0)))


def cli(command, cfg, out, tmp):
    path = os.path.join(tmp, f"{os.path.basename(out)}.json")
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return main([command, "--config", path, "--out", out])


def read_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    path = tmp_path_factory.mktemp("acceptance")
    yield str(path)
    # the constant-kernel runs write ~0.6 GB each
    shutil.rmtree(path, ignore_errors=True)


@pytest.fixture(scope="session")
def c1_run(workdir):
    out = os.path.join(workdir, "c1")
    start = time.perf_counter()
    code = cli("run", C1_CONFIG, out, workdir)
    elapsed = time.perf_counter() - start
    assert code == 0
    traj, _, manifest = load_trajectory(out)
    return out, elapsed, traj, manifest


@pytest.fixture(scope="session")
def c6_run(workdir):
    out = os.path.join(workdir, "c6")
    assert cli("ssa", C6_CONFIG, out, workdir) == 0
    return out


def test_criterion_1_conservation(c1_run, acceptance_report):
    _, elapsed, traj, _ = c1_run
    m0 = np.array([0.7, 0.3])
    defect = max(float(np.max(np.abs(mass_vector(s) + s.escaped_mass - m0) / m0.sum())) for s in traj)
    escaped = float(np.sum(traj[-1].escaped_mass)) / m0.sum()
    ok = defect <= 1e-8 and escaped <= 1e-3 and elapsed <= 120 and len(traj) == len(C1_TIMES)
    acceptance_report(1, ok, f"max mass defect {defect:.2e} (<= 1e-8), escaped {escaped:.2e} m0 (<= 1e-3), "
                             f"run+write {elapsed:.0f} s (<= 120)")
    assert ok


def test_criterion_2_riccati(acceptance_report):
    cfg = SolverConfig(t_end=10.0, rel_tol=1e-10)
    tr = run(LatticeState(1, 1024, [[1]], [1.0]), KernelSpec.constant(2.0), cfg)
    err = max(abs(moment(s, 0).value * (1 + s.time) - 1) for s in tr)
    ok = err <= 1e-6 and len(tr) > 10
    acceptance_report(2, ok, f"max relative M0 error {err:.2e} over {len(tr)} snapshots (<= 1e-6)")
    assert ok


@pytest.mark.xfail(strict=True, reason="exact M0 = 1/(1+t/2) has log-log slope -0.93 on [10,100]")
def test_criterion_3_moment_scaling(c1_run, acceptance_report):
    traj = c1_run[2]
    fit2 = moment_scaling_fit(traj, 2, 0.0, (10, 100))
    fit0 = moment_scaling_fit(traj, 0, 0.0, (10, 100))
    t = np.array(fit0.times)
    exact0 = np.polyfit(np.log(t), np.log(1 / (1 + t / 2)), 1)[0]
    ok2 = abs(fit2.slope - 1) <= 0.1
    ok0 = abs(fit0.slope + 1) <= 0.05
    finite = np.isfinite(fit2.max_ratio) and np.isfinite(fit0.max_ratio)
    acceptance_report(3, ok2 and ok0 and finite,
                      f"M2 slope {fit2.slope:.4f} (1 +/- 0.1: {'ok' if ok2 else 'no'}), "
                      f"M0 slope {fit0.slope:.4f} (-1 +/- 0.05: {'ok' if ok0 else 'no'}; "
                      f"closed form gives {exact0:.4f}), max_ratio M2 {fit2.max_ratio:.3f}")
    assert ok2 and finite
    assert ok0


@pytest.mark.xfail(strict=True, reason="exact localized fraction at t=100, delta=0.2 is 0.874 < 0.9")
def test_criterion_4_localization(c1_run, acceptance_report):
    traj = c1_run[2]
    th0 = theta0(traj[0])
    frac = localized_mass_fraction(traj.at(100.0), 0.0, 0.2, th0)
    sched = delta_schedule(traj, 0.0, th0, 0.9, t_min=1.0)
    window = [(t, d, r) for t, d, r in zip(sched.times, sched.deltas, sched.reached) if 10 <= t <= 100 * (1 + 1e-12)]
    reached = all(r for _, _, r in window)
    mono = reached and sched.nonincreasing_between(10, 100 * (1 + 1e-12))
    rep = dispersion_decay_report(traj, 0.0)
    ratio = rep.value_at(100.0) / rep.value_at(1.0)
    ok_frac, ok_d = frac >= 0.9, ratio <= 0.2
    acceptance_report(4, ok_frac and mono and ok_d and rep.plateau,
                      f"fraction(t=100, delta=0.2) {frac:.4f} (>= 0.9: {'ok' if ok_frac else 'no'}), "
                      f"schedule reached at {sum(r for *_, r in window)}/{len(window)} times in [10,100] "
                      f"(non-increasing: {'ok' if mono else 'no'}), D(100)/D(1) {ratio:.4f} "
                      f"(<= 0.2: {'ok' if ok_d else 'no'}), plateau {rep.plateau}")
    assert ok_d and rep.plateau
    assert ok_frac and mono


def test_criterion_5_attractor(acceptance_report):
    kernel = KernelSpec.ray_constant(Q_LIN)
    cfg = SolverConfig(t_end=1000.0, rel_tol=1e-6, abs_tol=1e-12, escape_abort_fraction=0.5,
                       snapshot_times=(0.0, 1.0, 10.0, 100.0, 300.0, 1000.0))
    start = time.perf_counter()
    tr = run(init_monomer_mix(2, [0.7, 0.3], 2048), kernel, cfg)
    elapsed = time.perf_counter() - start
    th0 = theta0(tr[0])
    q = float(Q_LIN(th0))
    extracted = extract_profile(tr.at(1000.0), 0.0, 0.2, th0, m0=1.0)
    cmp = compare_profile(extracted, q, 1.0)
    ok = cmp.l1_error <= 0.10 and cmp.decay_rate_error <= 0.10 and elapsed <= 900
    acceptance_report(5, ok, f"Q(theta0) {q:.3f}, L1 error {cmp.l1_error:.4f} (<= 0.10), decay rate "
                             f"{cmp.fitted_decay_rate:.4f} vs {cmp.expected_decay_rate:.4f} "
                             f"(error {cmp.decay_rate_error:.4f} <= 0.10), runtime {elapsed:.0f} s (<= 900)")
    assert ok


def test_criterion_6_stochastic(c6_run, acceptance_report):
    V = C6_CONFIG["ssa"]["V"]
    ref = run(init_monomer_mix(2, [0.7, 0.3], 64), KernelSpec.constant(1.0),
              SolverConfig(t_end=1.0, rel_tol=1e-10, snapshot_times=(1.0,)))[-1]
    with open(os.path.join(c6_run, "stats", "ensemble_0000.csv")) as fh:
        rows = list(csv.DictReader(fh))
    stats = {(int(r["alpha_1"]), int(r["alpha_2"])): (float(r["mean"]), float(r["stderr"])) for r in rows}
    checked, worst = 0, 0.0
    for alpha, n in ref.as_dict().items():
        if n * V < 100:
            continue
        mean, se = stats.get(alpha, (0.0, 0.0))
        z = abs(mean - n) / se if se > 0 else (0.0 if mean == n else np.inf)
        worst = max(worst, z)
        checked += 1
    exact = True
    for seed in C6_CONFIG["ssa"]["seeds"]:
        with open(os.path.join(c6_run, f"seed_{seed:06d}", "run.json")) as fh:
            info = json.load(fh)
        exact &= all(m == [7000, 3000] for m in info["mass_counts"])
    ok = checked > 0 and worst <= 3 and exact
    acceptance_report(6, ok, f"{checked} compositions with expected count >= 100, worst |z| {worst:.2f} (<= 3), "
                             f"integer mass identity {'exact' if exact else 'broken'} in all 8 runs")
    assert ok


def test_criterion_7_weak_residual(acceptance_report):
    theta = (0.7, 0.3)
    kernel = KernelSpec.ray_constant(Q_LIN)
    battery = default_battery(explicit_profile(theta, Q_LIN, 1.0, 2))
    sizes = (400, 800, 1600, 3200)

    def residual(n, drift):
        p = explicit_profile(theta, Q_LIN, 1.0, 2, grid=np.linspace(0.0, 14.0, n + 1))
        return residual_weak_selfsimilar(p, kernel, 0.0, battery, drift)

    exact = [residual(n, 1.0) for n in sizes]
    ratios = [a / b for a, b in zip(exact, exact[1:])]
    defect = [residual(n, 1.1) for n in sizes]
    bounded = min(defect) > 0.01 and defect[-1] >= 0.9 * defect[0]
    ok = all(r >= 2 for r in ratios) and bounded
    acceptance_report(7, ok, "residuals " + ", ".join(f"{r:.2e}" for r in exact)
                      + " (ratios " + ", ".join(f"{r:.2f}" for r in ratios) + ", >= 2); perturbed "
                      + ", ".join(f"{r:.3f}" for r in defect))
    assert ok


def test_criterion_8_scaling_family(acceptance_report):
    profile = explicit_profile((0.5, 0.5), 1.5, 20.0, 2)
    initial = state_from_profile(profile, 0.0, 0.0, 4000)
    cfg = SolverConfig(t_end=21.0, rel_tol=1e-8, backend="sparse", snapshot_times=(0.0, 1.0, 10.0, 21.0))
    tr = run(initial, KernelSpec.constant(1.5), cfg)
    chk = scaling_family_check(tr, 0.0, 2.0, 10.0)
    ok = chk.discrepancy <= 0.05
    acceptance_report(8, ok, f"t={chk.t:g} vs t'={chk.t_scaled:g}: max relative discrepancy "
                             f"{chk.discrepancy:.4f} over {chk.bins_compared} bins (<= 0.05)")
    assert ok


def test_criterion_9_kernel_suite(workdir, acceptance_report, capsys):
    families = {
        "constant": KernelSpec.constant(1.0),
        "additive": KernelSpec.additive(),
        "product": KernelSpec.product(),
        "power_law_pair": KernelSpec.power_law_pair(0.5, 0.25),
        "ray_constant": KernelSpec.ray_constant(Q_LIN),
    }
    failed = [name for name, spec in families.items() if not all(r.passed for r in check_all(spec, 2))]
    bad = KernelSpec(KernelParams(1.0, 0.0, 1.0, 1.0), Product())
    bad_fails = not all(r.passed for r in check_all(bad, 2))
    cfg = {"version": 1, "d": 2, "kernel": {"family": "product", "gamma": 1.0, "p": 0.0}}
    code = cli("validate-kernel", cfg, os.path.join(workdir, "c9"), workdir)
    capsys.readouterr()
    ok = not failed and bad_fails and code == 6
    acceptance_report(9, ok, f"{len(families) - len(failed)}/{len(families)} shipped families pass all checks; "
                             f"mislabeled product exit code {code} (6)")
    assert ok


def test_criterion_10_determinism(c1_run, c6_run, workdir, acceptance_report):
    again1 = os.path.join(workdir, "c1_again")
    again6 = os.path.join(workdir, "c6_again")
    assert cli("run", C1_CONFIG, again1, workdir) == 0
    assert cli("ssa", C6_CONFIG, again6, workdir) == 0
    a1, b1 = read_tree(c1_run[0]), read_tree(again1)
    a6, b6 = read_tree(c6_run), read_tree(again6)
    same1, same6 = a1 == b1, a6 == b6
    ok = same1 and same6
    acceptance_report(10, ok, f"criterion 1 rerun: {len(a1)} files {'identical' if same1 else 'DIFFER'}; "
                              f"criterion 6 rerun: {len(a6)} files {'identical' if same6 else 'DIFFER'}")
    shutil.rmtree(again1, ignore_errors=True)
    assert ok
