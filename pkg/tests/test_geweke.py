from __future__ import annotations

import numpy as np

from rainfall_gp.geweke import (
    GewekeInstance,
    batch_means_variance,
    parametric_names,
    run_geweke,
    semiparametric_names,
)


def test_batch_means_matches_iid_and_ar1_variance():
    rng = np.random.default_rng(0)
    n = 200_000
    iid = rng.normal(size=(n, 1))
    assert abs(batch_means_variance(iid)[0] * n - 1.0) < 0.45
    rho = 0.9
    e = rng.normal(size=n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = rho * x[i - 1] + e[i]
    # long-run variance of an AR(1) mean: sigma2 / (1 - rho)^2
    target = 1.0 / (1 - rho) ** 2
    assert abs(batch_means_variance(x[:, None])[0] * n / target - 1.0) < 0.45


def test_enough_test_functions():
    assert len(semiparametric_names()) >= 12
    assert len(parametric_names()) >= 12


def test_printed_conditionals_are_caught_quickly():
    rep = run_geweke("semiparametric", 5000, seed=1, conditionals="printed")
    assert not rep.passed
    assert "FAIL" in "\n".join(rep.lines())


def test_parametric_intercept_only_passes():
    rep = run_geweke("parametric", 20_000, instance=GewekeInstance(p=0), seed=0)
    assert rep.passed, "\n".join(rep.lines())
    # slopes are absent, so their test functions are constant and get z = 0
    assert np.all(np.isfinite(rep.z))
