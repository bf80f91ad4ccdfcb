import dataclasses
import math

import numpy as np
import pytest

from structpop.kernel import (TailBoundError, choose_age_truncation, collapse,
                              survival_factor, survival_matrix, tail_bound)
from structpop.model import AgeGrid, build_model, constant_scenario, midpoint_grid


@pytest.fixture(scope="module")
def const_model():
    return build_model(constant_scenario())


def test_survival_at_zero_age(const_model):
    assert survival_factor(const_model, 0.5, 0.0, 0.7) == 1.0


def test_survival_closed_form(const_model):
    # constant D=1: R = e^{-(D+lam) a}
    assert survival_factor(const_model, 0.5, 1.0, 1.0) == pytest.approx(
        math.exp(-2.0), rel=1e-12)
    assert survival_factor(const_model, 0.1, 12.0, 0.0) == pytest.approx(
        math.exp(-12.0), rel=1e-12)


def test_survival_decreasing_in_age(const_model):
    ages = 0.01 * np.arange(300)
    R = survival_matrix(const_model, np.array([0.5]), ages, 0.3)[0]
    assert R[0] == 1.0
    assert np.all(np.diff(R) < 0)


def test_survival_rejects_divergent_lambda(const_model):
    with pytest.raises(ValueError):
        survival_factor(const_model, 0.5, 1.0, -1.0)


def test_age_truncation_oracles(const_model):
    # ln(||B|| / (tol (D+lam))) / (D+lam), rounded up to the lattice
    a0 = choose_age_truncation(const_model, 0.0, 1e-10, 0.01)
    assert a0 == pytest.approx(23.72, abs=0.011)
    a1 = choose_age_truncation(const_model, 1.0, 1e-10, 0.01)
    assert a1 == pytest.approx(11.52, abs=0.011)
    assert tail_bound(const_model, 0.0, a0) < 1e-10


def test_age_truncation_degenerate_tolerance(const_model):
    # tol above the whole integral: still at least one lattice step
    assert choose_age_truncation(const_model, 0.0, 10.0, 0.01) == 0.01


def test_collapse_closed_forms(const_model):
    tg = midpoint_grid((0.0, 1.0), 16)
    ag = AgeGrid(da=0.01, n_cells=2372)
    ck0 = collapse(const_model, tg, ag, 0.0)
    # (1-p) B/(lam+D) = 1.4 and p B k/(lam+D) = 0.6
    assert np.abs(ck0.r_values - 1.4).max() < 1e-8
    assert np.abs(ck0.K_values - 0.6).max() < 1e-8
    assert ck0.rbar == pytest.approx(1.4, abs=1e-8)
    ck1 = collapse(const_model, tg, ag, 1.0)
    assert np.abs(ck1.r_values - 0.7).max() < 1e-8
    assert np.abs(ck1.K_values - 0.3).max() < 1e-8


def test_collapse_zero_birth():
    cfg = dataclasses.replace(
        constant_scenario(),
        birth={"family": "constant", "params": {"value": 0.0}})
    model = build_model(cfg)
    tg = midpoint_grid((0.0, 1.0), 8)
    ck = collapse(model, tg, AgeGrid(da=0.01, n_cells=100), 0.5)
    assert np.all(ck.r_values == 0.0)
    assert np.all(ck.K_values == 0.0)


def test_collapse_monotone_in_lambda(const_model):
    tg = midpoint_grid((0.0, 1.0), 8)
    ag = AgeGrid(da=0.01, n_cells=2372)
    prev = None
    for lam in (0.0, 0.5, 1.0, 2.0):
        ck = collapse(const_model, tg, ag, lam)
        if prev is not None:
            assert np.all(prev.r_values > ck.r_values + 1e-6)
            assert np.all(prev.K_values >= ck.K_values)
        prev = ck


def test_collapse_lipschitz_in_lambda(const_model):
    tg = midpoint_grid((0.0, 1.0), 8)
    ag = AgeGrid(da=0.01, n_cells=2372)
    lam0, h = 0.5, 1e-3
    r0 = collapse(const_model, tg, ag, lam0).r_values
    r1 = collapse(const_model, tg, ag, lam0 + h).r_values
    # |dr/dlam| <= (1-p) ||B|| / (D+lam)^2 here; allow slack
    L = const_model.birth.sup / (const_model.death_floor + lam0) ** 2
    assert np.abs(r1 - r0).max() <= 1.1 * L * h


def test_collapse_enforces_tail_bound(const_model):
    tg = midpoint_grid((0.0, 1.0), 4)
    short = AgeGrid(da=0.01, n_cells=100)    # horizon 1.0, tail far above 1e-10
    with pytest.raises(TailBoundError):
        collapse(const_model, tg, short, 0.0, tol=1e-10)


def test_collapse_sqrt_gap_positive():
    from structpop.model import singular_scenario
    model = build_model(singular_scenario())
    tg = midpoint_grid((0.0, 1.0), 32)
    ck = collapse(model, tg, AgeGrid(da=0.01, n_cells=2472), 0.0)
    assert np.all(ck.r_values > 0)
    assert np.all(ck.K_values >= 0)
    # r follows (1-p) B(x)/D: decreasing in x
    assert np.all(np.diff(ck.r_values) < 0)
    assert ck.r_values[0] == pytest.approx(0.95 * (4 - math.sqrt(tg.nodes[0])),
                                           rel=1e-6)
