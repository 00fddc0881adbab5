"""Smoke test for the Python bindings.

Build and install first:
    cd crates/py && maturin build --release -o /tmp/wheels
    pip install --force-reinstall /tmp/wheels/cmis-*.whl
"""

import math

import cmis


def main():
    target = cmis.Target.gaussian([0.0, 0.0], 0.25)
    assert target.dim == 2
    lp = target.log_density([[0.0, 0.0], [0.5, 0.5]])
    assert lp[0] > lp[1]

    xs = target.sample(1000, seed=1)
    assert len(xs) == 1000 and len(xs[0]) == 2

    grid = cmis.TimeGrid.untuned(3)
    assert grid.steps == 3
    assert grid.t[-1] == cmis.T_MAX
    assert grid.prop[0] == cmis.EPS

    flow = cmis.Model.gaussian([0.0, 0.0], 0.25)
    ens = cmis.bctm_is(flow, target, grid, 2000, seed=3)
    # N proposal hops plus N target hops.
    assert len(ens.samples) == 2000 and ens.nfe == 6
    est, se = ens.estimate("log_l2_norm")
    assert math.isfinite(est) and se > 0
    assert 0 < ens.ess() <= 2000

    ddpm = cmis.ddpm_is(flow, target, steps=10, k=500, seed=4)
    assert len(ddpm.log_weights) == 500

    try:
        cmis.TimeGrid.untuned(0)
    except ValueError:
        pass
    else:
        raise AssertionError("N = 0 must be rejected")

    assert cmis.run_cli(["--version"]) == 0
    print(f"ok: ESS {ens.ess():.1f} / 2000, E[log|x|] = {est:.4f} +- {se:.4f}")


if __name__ == "__main__":
    main()
