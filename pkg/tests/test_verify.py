import io

import numpy as np

from fhtensor import exact_solver as ex
from fhtensor.cli import cmd_verify
from fhtensor.verify import CHECKS, run_checks


def test_all_checks_pass():
    results = run_checks(seed=0)
    assert [r.name for r in results] == list(CHECKS)
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed


def test_report_lines_include_wall_time():
    buf = io.StringIO()
    code = cmd_verify(seed=1, names={"loss_system_identity", "kernel_parity"}, stream=buf)
    lines = buf.getvalue().splitlines()
    assert code == 0
    assert all(line.startswith("PASS") and line.endswith("ms)") for line in lines[:-1])
    assert lines[-1] == "2/2 checks passed"


REAL_BUILD = ex.build_bellman_system
REAL_SOLVE = ex.bcd_update


def sign_flipped_builder(m, p, f, d):
    """Mutant: the successor and current blocks enter with the wrong sign."""
    sys = REAL_BUILD(m, p, f, d)
    sys.cbar = -sys.cbar
    return sys


def test_sign_error_is_detected():
    buf = io.StringIO()
    code = cmd_verify(seed=0, names={"loss_system_identity"}, stream=buf, build_system=sign_flipped_builder)
    assert code == 1
    assert buf.getvalue().startswith("FAIL  loss_system_identity")
    # the real builder is restored afterwards
    assert ex.build_bellman_system is REAL_BUILD


def test_broken_block_solver_is_detected():
    def wrong_sign_solve(sys, full_rows=None):
        return -REAL_SOLVE(sys, full_rows)

    results = run_checks(seed=0, bcd_update=wrong_sign_solve,
                         names={"bcd_block_stationarity", "bcd_sweep_descent"})
    assert not any(r.passed for r in results)


def test_checks_are_seeded():
    a = run_checks(seed=3, names={"bcgd_gradient_fd"})[0].measured
    b = run_checks(seed=3, names={"bcgd_gradient_fd"})[0].measured
    assert a == b and np.isfinite(a)
