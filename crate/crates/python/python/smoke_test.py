"""Smoke test for the gpmpc extension module."""

import math
import os

import gpmpc

ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "..", ".."))
CONFIG = os.path.join(ROOT, "configs", "default.json")


def main():
    checks = gpmpc.selftest()
    for name, passed, detail in checks:
        print(f"{name}: {'PASS' if passed else 'FAIL'} {detail}")
    assert all(p for _, p, _ in checks)

    # one training point at the query: mean is interpolated, variance ~ 0
    z = [float(i) for i in range(17)]
    mean, var = gpmpc.gp_posterior([z], [0.5], z)
    assert abs(mean - 0.5) < 1e-6 and 0.0 <= var < 1e-6

    x = gpmpc.rk4_step([0.0, 0.0, 20.0, 0.0, 0.0], [0.0, 0.0], 2.7, 0.25)
    assert abs(x[0] - 5.0) < 1e-12

    assert abs(gpmpc.tightened_ellipse(10.0, 0.0, 1.0, semi_major=8.0, sigma=2.0)) < 1e-8
    assert -5.0 <= gpmpc.idm_accel(25.0, 10.0, 5.0) <= 5.0

    trial = gpmpc.run_trial("cv", -85.0, config=CONFIG, steps=6)
    assert len(trial["time"]) == 6 and trial["outcome"] in ("between", "behind", "failed")
    assert all(e is None or math.isfinite(e) for e in trial["prediction_error"])

    summary = gpmpc.run_batch(["gp", "cv"], config=CONFIG, trials=2, steps=4)
    assert set(summary) == {"gp", "cv"}
    assert summary["gp"]["mean_solve_ms"] > 0.0

    try:
        gpmpc.run_trial("mpc")
    except ValueError as e:
        assert "unknown controller" in str(e)
    else:
        raise AssertionError("bad controller accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
