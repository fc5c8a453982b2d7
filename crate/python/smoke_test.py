"""Smoke test for the trbf_uot extension module.

Build and install first:
    pip install --no-build-isolation ./crates/python
"""

import json
import math

import trbf_uot


def main() -> None:
    cfg = trbf_uot.RunConfig("")
    assert cfg.scenario == "sphere" and cfg.beta == 1.0 and cfg.n_t == 16
    assert json.loads(cfg.to_json())["alpha"] == 1.0
    try:
        trbf_uot.RunConfig("beta = -1")
    except ValueError as e:
        assert "beta" in str(e)
    else:
        raise AssertionError("negative beta accepted")

    cloud = trbf_uot.PointCloud.scenario("circle-poisson", 16)
    assert len(cloud) == 16
    assert abs(sum(cloud.weights) - 1.0) < 1e-12

    rho, residual = trbf_uot.solve_quintic(0.3, 0.2, 0.1, 1.0, 1.0)
    assert rho > 0.0 and residual < 1e-12

    rows = trbf_uot.poisson_table("refinements = 8, 16")
    order = math.log2(rows[0]["l2"] / rows[1]["l2"])
    assert order > 1.9, rows

    audit = json.loads(trbf_uot.stencil_audit("scenario = sphere\ntarget_count = 100"))
    assert audit["laplacian_poly"] < 1e-8, audit

    problem = trbf_uot.Problem(trbf_uot.RunConfig("scenario = sphere\ntarget_count = 100\nn_t = 8\nbeta = 1.5"))
    out = problem.run()
    assert out.converged, out.iterations
    assert len(out.rho) == problem.n_times == 9
    # the step-1 density is nonnegative; the projected one only up to tolerance
    assert min(r["min_rho"] for r in out.reports()) >= 0.0
    assert min(min(row) for row in out.rho) >= -1e-3 * max(max(row) for row in out.rho)
    mass = out.mass_profile
    assert abs(mass[0] - 1.0) < 1e-9 and abs(mass[-1] - 1.5) < 1e-9
    assert abs(out.total_source - 0.5) < 0.05, out.total_source
    assert out.reports()[-1]["iter"] == out.iterations

    print(
        f"ok: poisson order {order:.3f}, sphere run {out.iterations} iterations, "
        f"cost {out.cost:.6e}, source {out.total_source:.4f}"
    )


if __name__ == "__main__":
    main()
